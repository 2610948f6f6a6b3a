#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mergelab/params.hpp"
#include "mergelab/transformer.hpp"

namespace mergelab {

// ParamSet-shaped difference tau = theta_t - theta_pre. `values` holds the
// rounded difference; `residual` holds the exact subtraction error, so
// values + residual reproduces theta_t - theta_pre without loss and merging
// with unit coefficients recovers theta_t bit for bit.
struct TaskVector {
  ParamSet values;
  ParamSet residual;
};

TaskVector task_vector(const ParamSet& theta_t, const ParamSet& theta_pre);

// Task vector from plain values (zero residual); for tests and oracles.
TaskVector make_task_vector(ParamSet values);

enum class MergeMethod {
  Average,
  TaskArithmetic,
  Ties,
  AdamergingTaskwise,
  AdamergingLayerwise,
};

MergeMethod merge_method_from_string(const std::string& s);
std::string merge_method_to_string(MergeMethod m);

struct MergePlan {
  MergeMethod method = MergeMethod::TaskArithmetic;
  double lambda = 0.4;             // task arithmetic scalar
  double ties_lambda = 1.0;        // TIES scalar
  double ties_trim_fraction = 0.2; // keep top fraction by magnitude
  double adamerging_init = 0.3;    // initial coefficient value
};

ParamSet weight_average(const std::vector<ParamSet>& models);

ParamSet task_arithmetic(const ParamSet& theta_pre, const std::vector<TaskVector>& task_vectors,
                         double lambda);

// Trim per task vector (globally across all coordinates, by magnitude), elect
// a per-coordinate sign (ties resolve positive), then average the kept values
// whose sign matches; the result is theta_pre + lambda * merged.
ParamSet ties_merge(const ParamSet& theta_pre, const std::vector<TaskVector>& task_vectors,
                    double lambda, double trim_fraction);

// The trim/elect/merge combination alone, before scaling and adding to the
// pretrained weights.
TaskVector ties_direction(const std::vector<TaskVector>& task_vectors, double trim_fraction);

// Parameter groups used as the "layer" granularity of layer-wise coefficient
// merging: one group per block, one for embeddings (plus final norm and
// pretext head), one per task head.
std::vector<std::string> layer_groups(const ParamSet& schema);
int layer_group_index(const std::string& param_name, const std::vector<std::string>& groups);

// base + sum over parts of lambda[index_of(part, entry)] * part, with
// compensated per-coordinate accumulation (coefficients of exactly 0 or 1
// reconstruct exactly). Differentiable in `lambdas` when taped; the backward
// reaches only the coefficients, never the frozen weights.
ParamSet coefficient_merge(const ParamSet& base, const std::vector<const TaskVector*>& parts,
                           const Tensor& lambdas,
                           const std::function<int(int, const std::string&)>& index_of);

// Coefficient-weighted merge. `lambdas` is [T] (task-wise) or [T x L]
// (layer-wise, L = layer_groups().size()).
ParamSet adamerging_apply(const ParamSet& theta_pre, const std::vector<TaskVector>& task_vectors,
                          const Tensor& lambdas);

// Mean over tasks and samples of the Shannon entropy (natural log) of the
// predicted class distribution; heads come from the per-task owners.
Tensor entropy_objective(const ParamSet& theta_mtl, const EncoderConfig& cfg,
                         const std::vector<const ParamSet*>& head_owners,
                         const std::vector<std::vector<std::vector<int>>>& batches);

}  // namespace mergelab
