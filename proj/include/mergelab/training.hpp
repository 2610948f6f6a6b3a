#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "mergelab/interventions.hpp"
#include "mergelab/merging.hpp"
#include "mergelab/params.hpp"
#include "mergelab/taskgen.hpp"
#include "mergelab/transformer.hpp"

namespace mergelab {

struct TrainConfig {
  int iterations = 500;
  int batch_size = 16;  // per task
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool learn_lambdas = false;
  uint64_t seed = 0;
};

// Unlabeled distillation pool: per-task sample indices into the test splits,
// fixed for the whole run.
struct DistillPool {
  double fraction = 1.0;
  std::vector<std::vector<int>> indices;  // per task
};

DistillPool subset_data(const std::vector<SyntheticTask>& tasks, double fraction, uint64_t seed);

// A merge whose coefficients may be re-fit jointly with the interventions.
// materialize() rebuilds the merged parameters from the current lambda
// values; when the lambdas require grad and a tape is active the rebuild is
// differentiable.
struct LearnableMerge {
  Tensor lambdas;  // undefined when the method has no coefficients
  std::function<ParamSet()> materialize;
};

LearnableMerge make_learnable_merge(const MergePlan& plan, const ParamSet& theta_pre,
                                    const std::vector<TaskVector>& task_vectors,
                                    const ParamSet& schema, bool learnable);

// Mean over tasks and samples of the L1 distance (mean over coordinates)
// between the task model's final CLS representation and the intervened
// merged model's.
Tensor distill_loss(const ParamSet& merged, const EncoderConfig& cfg,
                    const std::vector<const InterventionSet*>& interventions,
                    const std::vector<const ParamSet*>& task_models,
                    const std::vector<std::vector<std::vector<int>>>& batches);

struct TrainLogRow {
  int iteration = 0;
  int task = -1;  // -1 marks the across-task mean
  double loss = 0.0;
  double accuracy = -1.0;  // -1 when not measured at this row
};

struct InterventionTrainResult {
  std::vector<TrainLogRow> log;
  double initial_loss = 0.0;  // raw representation bias of the merged model
  double final_loss = 0.0;
  Tensor lambdas;  // defined when learn_lambdas
};

// Distillation training of all tasks' intervention modules against frozen
// task models; gradients accumulate across tasks in a fixed order each step.
InterventionTrainResult train_interventions(const LearnableMerge& merge,
                                            const EncoderConfig& cfg,
                                            std::vector<InterventionSet>& interventions,
                                            const std::vector<const ParamSet*>& task_models,
                                            const std::vector<SyntheticTask>& tasks,
                                            const DistillPool& pool, const TrainConfig& tc);

struct AdamergingResult {
  Tensor lambdas;
  std::vector<TrainLogRow> log;
  double initial_entropy = 0.0;
  double final_entropy = 0.0;
};

// Entropy minimization of the merge coefficients on unlabeled data.
AdamergingResult train_adamerging(const ParamSet& theta_pre,
                                  const std::vector<TaskVector>& task_vectors, bool layerwise,
                                  const EncoderConfig& cfg,
                                  const std::vector<const ParamSet*>& head_owners,
                                  const std::vector<SyntheticTask>& tasks,
                                  const DistillPool& pool, const TrainConfig& tc,
                                  double init_coeff);

}  // namespace mergelab
