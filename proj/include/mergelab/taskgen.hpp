#pragma once

#include <cstdint>
#include <vector>

#include "mergelab/params.hpp"
#include "mergelab/rng.hpp"
#include "mergelab/transformer.hpp"

namespace mergelab {

// 4x4 token grids. Each task hides a pair of task-specific motif tokens in
// the grid; the class is encoded by the pair's adjacent arrangement
// (horizontal/vertical x forward/reversed). Remaining cells carry shared
// texture tokens, other tasks' motif tokens (the cross-task conflict knob) or
// stay empty.
constexpr int kGridSide = 4;
constexpr int kGridCells = kGridSide * kGridSide;
constexpr int kNumTextures = 6;

using TokenGrid = std::vector<int>;

int motif_token_a(int task);
int motif_token_b(int task);
int vocab_size(int tasks);

// Labelled split with access counting, so tests can assert that fine-tuning
// never reads the test split.
struct Split {
  std::vector<TokenGrid> grids;
  std::vector<int> labels;
  mutable uint64_t accesses = 0;

  std::size_t size() const { return grids.size(); }
  const TokenGrid& grid(std::size_t i) const {
    ++accesses;
    return grids[i];
  }
  int label(std::size_t i) const {
    ++accesses;
    return labels[i];
  }
};

struct SyntheticTask {
  int id = 0;
  int classes = 4;
  Split train;
  Split test;
};

struct TaskgenOptions {
  int tasks = 4;
  int train_per_task = 512;
  int test_per_task = 256;
  double texture_prob = 0.55;
  double confuser_prob = 0.30;
};

std::vector<SyntheticTask> gen_tasks(const TaskgenOptions& opt, uint64_t seed);
std::vector<SyntheticTask> gen_tasks(int tasks, uint64_t seed);

// Independent label recovery from the grid alone; -1 when no valid motif
// arrangement is present.
int detect_label(const TokenGrid& grid, int task);

// Multi-label pretext target: which motif families appear anywhere.
std::vector<double> motif_presence(const TokenGrid& grid, int tasks);

struct TrainPoint {
  int iteration = 0;
  double loss = 0.0;
  double probe_accuracy = -1.0;
};

struct BackboneTrainConfig {
  int iterations = 300;
  int batch_size = 16;
  double learning_rate = 1e-3;
  int probe_every = 10;
  double probe_target = 0.9;
  int probe_size = 64;
};

struct PretrainResult {
  ParamSet theta;  // includes the pretext head
  std::vector<TrainPoint> log;
  double final_pretext_accuracy = 0.0;
};

struct FinetuneResult {
  ParamSet theta;
  std::vector<TrainPoint> log;
  int iterations_to_probe_target = -1;  // -1 when the probe never hit target
};

// Multi-label motif-presence pretext over the union of all train splits.
PretrainResult pretrain(const EncoderConfig& cfg, const std::vector<SyntheticTask>& tasks,
                        const BackboneTrainConfig& tc, uint64_t seed);

// Full-backbone fine-tuning of one task from the given initialization; reads
// only the task's train split.
FinetuneResult finetune(const ParamSet& init, const SyntheticTask& task, int task_index,
                        const EncoderConfig& cfg, const BackboneTrainConfig& tc, uint64_t seed);

// Desk-default encoder config for a task suite.
EncoderConfig desk_config(int tasks, int classes = 4);

}  // namespace mergelab
