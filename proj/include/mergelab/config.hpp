#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mergelab/interventions.hpp"
#include "mergelab/merging.hpp"
#include "mergelab/taskgen.hpp"
#include "mergelab/training.hpp"
#include "mergelab/transformer.hpp"

namespace mergelab {

// Raised by config parsing/validation; the message always starts with the
// dotted path of the offending field.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ExperimentConfig {
  int version = 1;
  std::string id = "exp";
  uint64_t seed = 0;
  std::string out_dir = "runs/exp";
  std::vector<std::string> stages = {"gen", "pretrain", "finetune", "merge", "intervene", "eval"};

  TaskgenOptions tasks;
  EncoderConfig encoder;
  BackboneTrainConfig pretrain_cfg;
  BackboneTrainConfig finetune_cfg;

  MergePlan merge;
  int adamerging_iterations = 200;
  double adamerging_lr = 5e-3;
  int adamerging_batch = 8;

  bool intervention_enabled = true;
  InterventionSpec intervention;

  TrainConfig train;
  double data_fraction = 1.0;

  // report stage
  std::vector<MergeMethod> report_methods = {
      MergeMethod::Average, MergeMethod::TaskArithmetic, MergeMethod::Ties,
      MergeMethod::AdamergingTaskwise, MergeMethod::AdamergingLayerwise};
  bool report_with_interventions = true;
};

// Line-oriented "dotted.path = value" format; '#' starts a comment.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// The desk-scale defaults as a config file body.
std::string default_config_text();

}  // namespace mergelab
