#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mergelab/tensor.hpp"

namespace mergelab {

// Named tree of tensors for one model. Construction order defines the schema
// and is the canonical iteration order for merging, optimizers and
// checkpoints.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  void add(std::string name, Tensor t);
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  void replace(const std::string& name, Tensor t);  // shape must match

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t total_params() const;

  ParamSet clone() const;  // detached deep copy
  void set_requires_grad(bool v);
  std::vector<Tensor> tensors() const;

  static bool same_schema(const ParamSet& a, const ParamSet& b);
  static void require_same_schema(const ParamSet& a, const ParamSet& b, const char* op);

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

double grad_check(const std::function<Tensor()>& f, ParamSet& params, double h);

}  // namespace mergelab
