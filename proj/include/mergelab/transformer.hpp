#pragma once

#include <vector>

#include "mergelab/interventions.hpp"
#include "mergelab/params.hpp"
#include "mergelab/rng.hpp"
#include "mergelab/tensor.hpp"

namespace mergelab {

constexpr double kLayerNormEps = 1e-5;

// Token-grid ViT-style encoder: N pre-norm blocks over S tokens (CLS at
// position 0), final layer norm, per-task linear heads.
struct EncoderConfig {
  int num_blocks = 4;
  int dim = 32;
  int heads = 4;
  double mlp_ratio = 4.0;
  int seq_len = 17;  // CLS + patch tokens
  int vocab = 16;
  std::vector<int> num_classes;  // per task
  int pretext_dim = 0;           // width of the pretraining head, 0 = none

  int mlp_hidden() const { return static_cast<int>(dim * mlp_ratio); }
  int tasks() const { return static_cast<int>(num_classes.size()); }
  void validate() const;
};

// ViT-B/32-shaped config used only for parameter accounting.
EncoderConfig paper_vitb32(int tasks);

ParamSet init_params(const EncoderConfig& cfg, Rng& rng);

Tensor block_forward(const Tensor& h, const ParamSet& params, int block, const EncoderConfig& cfg,
                     const BoundIntervention* intervention = nullptr);

// Final CLS representation [1 x k] after the last block and final layer norm;
// when the set carries a surgery adapter it replaces the representation.
Tensor encode(const std::vector<int>& tokens, const ParamSet& params, const EncoderConfig& cfg,
              const InterventionSet* interventions = nullptr);

Tensor head_logits(const Tensor& rep, const ParamSet& head_owner, int task);

struct Prediction {
  int label = 0;
  std::vector<double> probs;
};

// Argmax prediction for one task; ties resolve to the lowest class index.
// `head_owner` supplies the classification head (defaults to `params`).
Prediction predict(const std::vector<int>& tokens, const ParamSet& params,
                   const EncoderConfig& cfg, int task,
                   const InterventionSet* interventions = nullptr,
                   const ParamSet* head_owner = nullptr);

// Hybrid forward: blocks 1..split from `front`, the rest from `back`.
// Embeddings follow the owner of block 1 (front when split >= 1), the final
// layer norm follows the owner of block N, the head always comes from `back`.
Prediction stitch_forward(const std::vector<int>& tokens, const ParamSet& front,
                          const ParamSet& back, int split, int task, const EncoderConfig& cfg,
                          const InterventionSet* front_interventions = nullptr);

}  // namespace mergelab
