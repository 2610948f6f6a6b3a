#include "mergelab/merging.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mergelab {

namespace {

std::string group_key(const std::string& name) {
  const auto dot = name.find('.');
  const std::string head = dot == std::string::npos ? name : name.substr(0, dot);
  if (head == "embed" || head == "final_ln" || head == "pretext") return "embed";
  return head;  // blockN / headT
}

// Neumaier-compensated running sum.
struct CompSum {
  double s = 0.0;
  double c = 0.0;
  void add(double v) {
    const double t = s + v;
    if (std::abs(s) >= std::abs(v)) {
      c += (s - t) + v;
    } else {
      c += (v - t) + s;
    }
    s = t;
  }
  double result() const { return s + c; }
};

}  // namespace

TaskVector task_vector(const ParamSet& theta_t, const ParamSet& theta_pre) {
  ParamSet::require_same_schema(theta_t, theta_pre, "task_vector");
  TaskVector tau;
  for (std::size_t i = 0; i < theta_t.size(); ++i) {
    const auto& et = theta_t.entries()[i];
    const auto& ep = theta_pre.entries()[i];
    std::vector<double> hi(et.tensor.numel()), lo(et.tensor.numel());
    for (std::size_t j = 0; j < hi.size(); ++j) {
      const double b = et.tensor.data()[j], a = ep.tensor.data()[j];
      // TwoSum(b, -a): exact error term of the rounded subtraction
      const double s = b - a;
      const double t = s - b;
      hi[j] = s;
      lo[j] = (b - (s - t)) + ((-a) - t);
    }
    tau.values.add(et.name, Tensor::from_data(et.tensor.shape(), std::move(hi)));
    tau.residual.add(et.name, Tensor::from_data(et.tensor.shape(), std::move(lo)));
  }
  return tau;
}

TaskVector make_task_vector(ParamSet values) {
  TaskVector tau;
  for (const auto& e : values.entries()) {
    tau.residual.add(e.name, Tensor::zeros(e.tensor.shape()));
  }
  tau.values = std::move(values);
  return tau;
}

MergeMethod merge_method_from_string(const std::string& s) {
  if (s == "average") return MergeMethod::Average;
  if (s == "task_arithmetic") return MergeMethod::TaskArithmetic;
  if (s == "ties") return MergeMethod::Ties;
  if (s == "adamerging_taskwise") return MergeMethod::AdamergingTaskwise;
  if (s == "adamerging_layerwise") return MergeMethod::AdamergingLayerwise;
  throw std::invalid_argument("unknown merge method: " + s);
}

std::string merge_method_to_string(MergeMethod m) {
  switch (m) {
    case MergeMethod::Average: return "average";
    case MergeMethod::TaskArithmetic: return "task_arithmetic";
    case MergeMethod::Ties: return "ties";
    case MergeMethod::AdamergingTaskwise: return "adamerging_taskwise";
    case MergeMethod::AdamergingLayerwise: return "adamerging_layerwise";
  }
  return "?";
}

ParamSet weight_average(const std::vector<ParamSet>& models) {
  if (models.empty()) throw std::invalid_argument("weight_average: no models");
  for (const auto& m : models) ParamSet::require_same_schema(models[0], m, "weight_average");
  const double inv = 1.0 / static_cast<double>(models.size());
  ParamSet out;
  for (std::size_t i = 0; i < models[0].size(); ++i) {
    const auto& first = models[0].entries()[i];
    // accumulate differences to the first model so identical models average
    // to themselves exactly
    std::vector<double> vals(first.tensor.data());
    std::vector<double> acc(vals.size(), 0.0);
    for (std::size_t m = 1; m < models.size(); ++m) {
      const auto& t = models[m].entries()[i].tensor;
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += t.data()[j] - vals[j];
    }
    for (std::size_t j = 0; j < vals.size(); ++j) vals[j] += acc[j] * inv;
    out.add(first.name, Tensor::from_data(first.tensor.shape(), std::move(vals)));
  }
  return out;
}

ParamSet coefficient_merge(const ParamSet& base, const std::vector<const TaskVector*>& parts,
                           const Tensor& lambdas,
                           const std::function<int(int, const std::string&)>& index_of) {
  for (const auto* p : parts) {
    ParamSet::require_same_schema(base, p->values, "coefficient_merge");
  }
  ParamSet out;
  for (std::size_t ei = 0; ei < base.size(); ++ei) {
    const auto& eb = base.entries()[ei];
    const std::size_t n = eb.tensor.numel();

    std::vector<int> idx(parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) {
      idx[p] = index_of(static_cast<int>(p), eb.name);
      if (idx[p] < 0 || static_cast<std::size_t>(idx[p]) >= lambdas.numel()) {
        throw std::invalid_argument("coefficient_merge: lambda index out of range for " + eb.name);
      }
    }

    std::vector<double> data(n);
    for (std::size_t j = 0; j < n; ++j) {
      CompSum sum;
      sum.s = eb.tensor.data()[j];
      for (std::size_t p = 0; p < parts.size(); ++p) {
        const double lam = lambdas.data()[static_cast<std::size_t>(idx[p])];
        sum.add(lam * parts[p]->values.entries()[ei].tensor.data()[j]);
        sum.add(lam * parts[p]->residual.entries()[ei].tensor.data()[j]);
      }
      data[j] = sum.result();
    }

    std::vector<Tensor> inputs = {eb.tensor, lambdas};
    std::vector<std::pair<Tensor, Tensor>> captured;
    for (const auto* p : parts) {
      captured.emplace_back(p->values.entries()[ei].tensor, p->residual.entries()[ei].tensor);
    }
    auto lam_impl = lambdas.impl_ptr();
    Tensor merged = custom_op(inputs, eb.tensor.shape(), std::move(data),
                              [lam_impl, captured, idx, n](detail::TensorImpl* o) {
                                if (!lam_impl->requires_grad) return;
                                auto& gl = detail::grad_buffer(lam_impl.get());
                                for (std::size_t p = 0; p < captured.size(); ++p) {
                                  const auto& hi = captured[p].first.data();
                                  const auto& lo = captured[p].second.data();
                                  double acc = 0.0;
                                  for (std::size_t j = 0; j < n; ++j) {
                                    acc += o->grad[j] * (hi[j] + lo[j]);
                                  }
                                  gl[static_cast<std::size_t>(idx[p])] += acc;
                                }
                              });
    out.add(eb.name, std::move(merged));
  }
  return out;
}

ParamSet task_arithmetic(const ParamSet& theta_pre, const std::vector<TaskVector>& task_vectors,
                         double lambda) {
  if (!std::isfinite(lambda)) throw std::invalid_argument("task_arithmetic: lambda not finite");
  std::vector<const TaskVector*> parts;
  for (const auto& tv : task_vectors) parts.push_back(&tv);
  Tensor lam = Tensor::scalar(lambda);
  return coefficient_merge(theta_pre, parts, lam, [](int, const std::string&) { return 0; });
}

namespace {

std::vector<double> flatten(const ParamSet& p) {
  std::vector<double> out;
  out.reserve(p.total_params());
  for (const auto& e : p.entries()) out.insert(out.end(), e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

std::vector<char> trim_mask(const std::vector<double>& v, double trim_fraction) {
  const std::size_t n = v.size();
  auto keep = static_cast<std::size_t>(std::llround(trim_fraction * static_cast<double>(n)));
  keep = std::max<std::size_t>(1, std::min(n, keep));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const double ma = std::abs(v[a]), mb = std::abs(v[b]);
    if (ma != mb) return ma > mb;
    return a < b;
  });
  std::vector<char> mask(n, 0);
  for (std::size_t i = 0; i < keep; ++i) mask[idx[i]] = 1;
  return mask;
}

}  // namespace

TaskVector ties_direction(const std::vector<TaskVector>& task_vectors, double trim_fraction) {
  if (task_vectors.empty()) throw std::invalid_argument("ties_direction: no task vectors");
  if (!(trim_fraction > 0.0 && trim_fraction <= 1.0)) {
    throw std::invalid_argument("ties_merge: trim_fraction must be in (0,1]");
  }
  for (const auto& tv : task_vectors) {
    ParamSet::require_same_schema(task_vectors[0].values, tv.values, "ties_direction");
  }
  const std::size_t n = task_vectors[0].values.total_params();
  std::vector<std::vector<double>> flat_hi, flat_lo;
  std::vector<std::vector<char>> kept;
  for (const auto& tv : task_vectors) {
    flat_hi.push_back(flatten(tv.values));
    flat_lo.push_back(flatten(tv.residual));
    kept.push_back(trim_mask(flat_hi.back(), trim_fraction));
  }

  std::vector<double> merged_hi(n, 0.0), merged_lo(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t t = 0; t < flat_hi.size(); ++t) {
      if (kept[t][i]) total += flat_hi[t][i];
    }
    const double sign = total < 0.0 ? -1.0 : 1.0;  // exact zero elects positive
    double acc_hi = 0.0, acc_lo = 0.0;
    int count = 0;
    for (std::size_t t = 0; t < flat_hi.size(); ++t) {
      const double v = kept[t][i] ? flat_hi[t][i] : 0.0;
      if (v * sign > 0.0) {
        acc_hi += v;
        acc_lo += flat_lo[t][i];
        ++count;
      }
    }
    if (count > 0) {
      merged_hi[i] = acc_hi / count;
      merged_lo[i] = acc_lo / count;
    }
  }

  TaskVector out;
  std::size_t off = 0;
  for (const auto& e : task_vectors[0].values.entries()) {
    const std::size_t m = e.tensor.numel();
    out.values.add(e.name, Tensor::from_data(e.tensor.shape(),
                                             {merged_hi.begin() + static_cast<std::ptrdiff_t>(off),
                                              merged_hi.begin() + static_cast<std::ptrdiff_t>(off + m)}));
    out.residual.add(e.name, Tensor::from_data(e.tensor.shape(),
                                               {merged_lo.begin() + static_cast<std::ptrdiff_t>(off),
                                                merged_lo.begin() + static_cast<std::ptrdiff_t>(off + m)}));
    off += m;
  }
  return out;
}

ParamSet ties_merge(const ParamSet& theta_pre, const std::vector<TaskVector>& task_vectors,
                    double lambda, double trim_fraction) {
  if (!std::isfinite(lambda)) throw std::invalid_argument("ties_merge: lambda not finite");
  for (const auto& tv : task_vectors) {
    ParamSet::require_same_schema(theta_pre, tv.values, "ties_merge");
  }
  TaskVector dir = ties_direction(task_vectors, trim_fraction);
  Tensor lam = Tensor::scalar(lambda);
  return coefficient_merge(theta_pre, {&dir}, lam, [](int, const std::string&) { return 0; });
}

std::vector<std::string> layer_groups(const ParamSet& schema) {
  std::vector<std::string> groups;
  for (const auto& e : schema.entries()) {
    const std::string g = group_key(e.name);
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
  }
  return groups;
}

int layer_group_index(const std::string& param_name, const std::vector<std::string>& groups) {
  const std::string g = group_key(param_name);
  auto it = std::find(groups.begin(), groups.end(), g);
  if (it == groups.end()) throw std::invalid_argument("no layer group for parameter " + param_name);
  return static_cast<int>(it - groups.begin());
}

ParamSet adamerging_apply(const ParamSet& theta_pre, const std::vector<TaskVector>& task_vectors,
                          const Tensor& lambdas) {
  for (const auto& tv : task_vectors) {
    ParamSet::require_same_schema(theta_pre, tv.values, "adamerging_apply");
  }
  const int tasks = static_cast<int>(task_vectors.size());
  const auto groups = layer_groups(theta_pre);
  const int num_groups = static_cast<int>(groups.size());

  bool layerwise;
  if (lambdas.ndim() == 1 && lambdas.dim(0) == tasks) {
    layerwise = false;
  } else if (lambdas.ndim() == 2 && lambdas.dim(0) == tasks && lambdas.dim(1) == num_groups) {
    layerwise = true;
  } else {
    throw std::invalid_argument("adamerging_apply: lambda shape " + shape_str(lambdas.shape()) +
                                " does not match " + std::to_string(tasks) + " tasks / " +
                                std::to_string(num_groups) + " groups");
  }

  std::vector<const TaskVector*> parts;
  for (const auto& tv : task_vectors) parts.push_back(&tv);
  auto index_of = [layerwise, num_groups, groups](int part, const std::string& name) {
    return layerwise ? part * num_groups + layer_group_index(name, groups) : part;
  };
  return coefficient_merge(theta_pre, parts, lambdas, index_of);
}

Tensor entropy_objective(const ParamSet& theta_mtl, const EncoderConfig& cfg,
                         const std::vector<const ParamSet*>& head_owners,
                         const std::vector<std::vector<std::vector<int>>>& batches) {
  if (batches.empty()) throw std::invalid_argument("entropy_objective: no batches");
  if (head_owners.size() != batches.size()) {
    throw std::invalid_argument("entropy_objective: head owners and batches disagree on tasks");
  }
  Tensor total;
  for (std::size_t t = 0; t < batches.size(); ++t) {
    if (batches[t].empty()) throw std::invalid_argument("entropy_objective: empty batch for task " + std::to_string(t));
    Tensor task_sum;
    for (const auto& tokens : batches[t]) {
      Tensor rep = encode(tokens, theta_mtl, cfg);
      Tensor probs = softmax(head_logits(rep, *head_owners[t], static_cast<int>(t)));
      Tensor h = scale(sum(mul(probs, log_elem(probs))), -1.0);
      task_sum = task_sum.defined() ? add(task_sum, h) : h;
    }
    Tensor task_mean = scale(task_sum, 1.0 / static_cast<double>(batches[t].size()));
    total = total.defined() ? add(total, task_mean) : task_mean;
  }
  return scale(total, 1.0 / static_cast<double>(batches.size()));
}

}  // namespace mergelab
