#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mergelab/checkpoint.hpp"
#include "mergelab/config.hpp"
#include "mergelab/interventions.hpp"
#include "mergelab/merging.hpp"
#include "mergelab/taskgen.hpp"
#include "mergelab/training.hpp"

namespace mergelab {

// Parallelism cap from MERGELAB_THREADS (defaults to the hardware count).
// Parallel sections only ever fan out independent forward passes, so results
// do not depend on scheduling.
int thread_cap();
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

struct EvalResult {
  std::vector<double> per_task;
  double average = 0.0;
};

// Accuracy per task over the full test splits; heads come from the per-task
// owners (the fine-tuned task models, matching how merged encoders are
// evaluated throughout).
EvalResult evaluate(const ParamSet& encoder_params, const EncoderConfig& cfg,
                    const std::vector<SyntheticTask>& tasks,
                    const std::vector<const ParamSet*>& head_owners,
                    const std::vector<const InterventionSet*>& interventions = {});

// Per-task mean L1 distance between the task model's final representation
// and the (optionally intervened) merged model's, over the given batches.
std::vector<double> bias_metric(const ParamSet& merged, const EncoderConfig& cfg,
                                const std::vector<const ParamSet*>& task_models,
                                const std::vector<const InterventionSet*>& interventions,
                                const std::vector<std::vector<std::vector<int>>>& batches);

struct StitchProfile {
  std::vector<std::vector<double>> per_task;  // [T][N+1], split b = 0..N
  std::vector<double> average;                // [N+1]
};

// Accuracy of hybrids built from the first b merged blocks and the remaining
// task-model blocks, for b = 0..N.
StitchProfile stitch_probe(const ParamSet& merged, const EncoderConfig& cfg,
                           const std::vector<const ParamSet*>& task_models,
                           const std::vector<SyntheticTask>& tasks,
                           const std::vector<const InterventionSet*>& interventions = {});

// Fixed metrics CSV schema: experiment_id, stage, task, metric, value, seed.
// task -1 denotes a suite-level (all-task) row.
struct MetricRow {
  std::string experiment_id;
  std::string stage;
  int task = -1;
  std::string metric;
  double value = 0.0;
  uint64_t seed = 0;
};

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);
void write_train_log_csv(const std::string& path, const std::vector<TrainLogRow>& rows);
std::string format_double(double v);

// Stage driver; stages read and write checkpoints under cfg.out_dir so they
// compose across invocations.
void run_experiment(const ExperimentConfig& cfg);
void run_experiment(const ExperimentConfig& cfg, const std::vector<std::string>& stages);

// Checkpoint helpers shared by stages, tools and tests.
void save_tasks(const std::string& path, const std::vector<SyntheticTask>& tasks);
std::vector<SyntheticTask> load_tasks(const std::string& path);
void save_interventions(const std::string& path, const std::vector<InterventionSet>& sets,
                        const Tensor& lambdas, const ParamSet* merged_final);
std::vector<InterventionSet> load_interventions(const std::string& path, InterventionSpec* spec_out,
                                                Tensor* lambdas_out, ParamSet* merged_out);

}  // namespace mergelab
