#include "mergelab/params.hpp"

#include <stdexcept>

namespace mergelab {

void ParamSet::add(std::string name, Tensor t) {
  if (!t.defined()) throw std::invalid_argument("ParamSet::add: undefined tensor for " + name);
  if (index_.count(name)) throw std::invalid_argument("ParamSet::add: duplicate name " + name);
  index_[name] = entries_.size();
  entries_.push_back(Entry{std::move(name), std::move(t)});
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("ParamSet: no tensor named " + name);
  return entries_[it->second].tensor;
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("ParamSet: no tensor named " + name);
  return entries_[it->second].tensor;
}

void ParamSet::replace(const std::string& name, Tensor t) {
  Tensor& cur = at(name);
  if (cur.shape() != t.shape()) {
    throw std::invalid_argument("ParamSet::replace: shape mismatch for " + name + ": " +
                                shape_str(cur.shape()) + " vs " + shape_str(t.shape()));
  }
  cur = std::move(t);
}

std::size_t ParamSet::total_params() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (const auto& e : entries_) out.add(e.name, e.tensor.clone());
  return out;
}

void ParamSet::set_requires_grad(bool v) {
  for (auto& e : entries_) e.tensor.set_requires_grad(v);
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.tensor);
  return out;
}

bool ParamSet::same_schema(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.entries()[i].name != b.entries()[i].name) return false;
    if (a.entries()[i].tensor.shape() != b.entries()[i].tensor.shape()) return false;
  }
  return true;
}

void ParamSet::require_same_schema(const ParamSet& a, const ParamSet& b, const char* op) {
  if (!same_schema(a, b)) {
    throw std::invalid_argument(std::string(op) + ": parameter sets do not share a schema");
  }
}

double grad_check(const std::function<Tensor()>& f, ParamSet& params, double h) {
  return grad_check(f, params.tensors(), h);
}

}  // namespace mergelab
