#include "mergelab/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace mergelab {

namespace {

std::string block_prefix(int block) { return "block" + std::to_string(block) + "."; }

Tensor linear(const Tensor& x, const ParamSet& p, const std::string& w, const std::string& b) {
  return add_row_bias(matmul(x, p.at(w)), p.at(b));
}

Tensor mhsa(const Tensor& x, const ParamSet& p, const std::string& pre, const EncoderConfig& cfg) {
  const int head_dim = cfg.dim / cfg.heads;
  Tensor q = linear(x, p, pre + "attn.wq", pre + "attn.bq");
  Tensor k = linear(x, p, pre + "attn.wk", pre + "attn.bk");
  Tensor v = linear(x, p, pre + "attn.wv", pre + "attn.bv");
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(cfg.heads));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (int h = 0; h < cfg.heads; ++h) {
    const int c0 = h * head_dim, c1 = (h + 1) * head_dim;
    Tensor qh = slice_cols(q, c0, c1);
    Tensor kh = slice_cols(k, c0, c1);
    Tensor vh = slice_cols(v, c0, c1);
    Tensor attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
    heads.push_back(matmul(attn, vh));
  }
  Tensor merged = cfg.heads == 1 ? heads[0] : concat_cols(heads);
  return linear(merged, p, pre + "attn.wo", pre + "attn.bo");
}

Tensor embed(const std::vector<int>& tokens, const ParamSet& p, const EncoderConfig& cfg) {
  if (static_cast<int>(tokens.size()) != cfg.seq_len - 1) {
    throw std::invalid_argument("encode: got " + std::to_string(tokens.size()) +
                                " patch tokens, config wants " + std::to_string(cfg.seq_len - 1));
  }
  Tensor patches = gather_rows(p.at("embed.token"), tokens);
  Tensor seq = concat_rows({p.at("embed.cls"), patches});
  const Tensor& pos = p.at("embed.pos");
  if (pos.rows() != cfg.seq_len) {
    throw std::invalid_argument("encode: positional embedding rows " + std::to_string(pos.rows()) +
                                " do not match sequence length " + std::to_string(cfg.seq_len));
  }
  return add(seq, pos);
}

}  // namespace

void EncoderConfig::validate() const {
  if (num_blocks < 1) throw std::invalid_argument("encoder.num_blocks: must be >= 1");
  if (dim < 2) throw std::invalid_argument("encoder.dim: must be >= 2");
  if (heads < 1 || dim % heads != 0) {
    throw std::invalid_argument("encoder.heads: dim " + std::to_string(dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (seq_len < 2) throw std::invalid_argument("encoder.seq_len: must be >= 2 (CLS + patches)");
  if (mlp_ratio <= 0 || mlp_hidden() < 1) throw std::invalid_argument("encoder.mlp_ratio: must be positive");
  if (vocab < 1) throw std::invalid_argument("encoder.vocab: must be >= 1");
  for (int c : num_classes) {
    if (c < 2) throw std::invalid_argument("encoder.num_classes: each task needs >= 2 classes");
  }
  if (pretext_dim < 0) throw std::invalid_argument("encoder.pretext_dim: must be >= 0");
}

EncoderConfig paper_vitb32(int tasks) {
  EncoderConfig cfg;
  cfg.num_blocks = 12;
  cfg.dim = 768;
  cfg.heads = 12;
  cfg.mlp_ratio = 4.0;
  cfg.seq_len = 50;
  cfg.vocab = 16;
  cfg.num_classes.assign(static_cast<std::size_t>(tasks), 10);
  return cfg;
}

ParamSet init_params(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamSet p;
  const int k = cfg.dim;
  const double w_std = 0.5 / std::sqrt(static_cast<double>(k));
  p.add("embed.token", Tensor::randn({cfg.vocab, k}, rng, 0.5));
  p.add("embed.pos", Tensor::randn({cfg.seq_len, k}, rng, 0.5));
  p.add("embed.cls", Tensor::randn({1, k}, rng, 0.5));
  for (int b = 1; b <= cfg.num_blocks; ++b) {
    const std::string pre = block_prefix(b);
    p.add(pre + "ln1.gamma", Tensor::full({k}, 1.0));
    p.add(pre + "ln1.beta", Tensor::zeros({k}));
    for (const char* n : {"wq", "wk", "wv", "wo"})
      p.add(pre + "attn." + std::string(n), Tensor::randn({k, k}, rng, w_std));
    for (const char* n : {"bq", "bk", "bv", "bo"})
      p.add(pre + "attn." + std::string(n), Tensor::zeros({k}));
    p.add(pre + "ln2.gamma", Tensor::full({k}, 1.0));
    p.add(pre + "ln2.beta", Tensor::zeros({k}));
    p.add(pre + "mlp.w1", Tensor::randn({k, cfg.mlp_hidden()}, rng, w_std));
    p.add(pre + "mlp.b1", Tensor::zeros({cfg.mlp_hidden()}));
    p.add(pre + "mlp.w2", Tensor::randn({cfg.mlp_hidden(), k}, rng, w_std));
    p.add(pre + "mlp.b2", Tensor::zeros({k}));
  }
  p.add("final_ln.gamma", Tensor::full({k}, 1.0));
  p.add("final_ln.beta", Tensor::zeros({k}));
  for (int t = 1; t <= cfg.tasks(); ++t) {
    const int c = cfg.num_classes[static_cast<std::size_t>(t - 1)];
    p.add("head" + std::to_string(t) + ".w", Tensor::randn({k, c}, rng, w_std));
    p.add("head" + std::to_string(t) + ".b", Tensor::zeros({c}));
  }
  if (cfg.pretext_dim > 0) {
    p.add("pretext.w", Tensor::randn({k, cfg.pretext_dim}, rng, w_std));
    p.add("pretext.b", Tensor::zeros({cfg.pretext_dim}));
  }
  return p;
}

Tensor block_forward(const Tensor& h, const ParamSet& params, int block, const EncoderConfig& cfg,
                     const BoundIntervention* intervention) {
  const std::string pre = block_prefix(block);
  Tensor z = mhsa(layer_norm(h, params.at(pre + "ln1.gamma"), params.at(pre + "ln1.beta"),
                             kLayerNormEps),
                  params, pre, cfg);
  if (intervention != nullptr) z = apply_bound(z, *intervention, block);
  Tensor h1 = add(h, z);
  Tensor m = layer_norm(h1, params.at(pre + "ln2.gamma"), params.at(pre + "ln2.beta"),
                        kLayerNormEps);
  m = gelu(linear(m, params, pre + "mlp.w1", pre + "mlp.b1"));
  m = linear(m, params, pre + "mlp.w2", pre + "mlp.b2");
  return add(h1, m);
}

Tensor encode(const std::vector<int>& tokens, const ParamSet& params, const EncoderConfig& cfg,
              const InterventionSet* interventions) {
  Tensor h = embed(tokens, params, cfg);
  for (int b = 1; b <= cfg.num_blocks; ++b) {
    const ModuleParams* mod =
        interventions != nullptr ? interventions->module_for_block(b) : nullptr;
    if (mod != nullptr) {
      BoundIntervention bound{&interventions->spec, mod, interventions->task, b};
      h = block_forward(h, params, b, cfg, &bound);
    } else {
      h = block_forward(h, params, b, cfg, nullptr);
    }
  }
  Tensor rep = layer_norm(slice_rows(h, 0, 1), params.at("final_ln.gamma"),
                          params.at("final_ln.beta"), kLayerNormEps);
  if (interventions != nullptr && interventions->surgery.has_value()) {
    rep = surgery_adapter(rep, *interventions->surgery);
  }
  return rep;
}

Tensor head_logits(const Tensor& rep, const ParamSet& head_owner, int task) {
  const std::string pre = "head" + std::to_string(task + 1) + ".";
  if (!head_owner.has(pre + "w")) {
    throw std::invalid_argument("no head for task index " + std::to_string(task));
  }
  return add_row_bias(matmul(rep, head_owner.at(pre + "w")), head_owner.at(pre + "b"));
}

namespace {

Prediction predict_from_logits(const Tensor& logits) {
  Tensor probs = softmax(logits);
  Prediction out;
  out.probs = probs.data();
  out.label = 0;
  for (std::size_t i = 1; i < out.probs.size(); ++i) {
    if (out.probs[i] > out.probs[static_cast<std::size_t>(out.label)]) {
      out.label = static_cast<int>(i);
    }
  }
  return out;
}

}  // namespace

Prediction predict(const std::vector<int>& tokens, const ParamSet& params,
                   const EncoderConfig& cfg, int task, const InterventionSet* interventions,
                   const ParamSet* head_owner) {
  if (task < 0 || task >= cfg.tasks()) {
    throw std::invalid_argument("predict: task " + std::to_string(task) + " out of range");
  }
  Tensor rep = encode(tokens, params, cfg, interventions);
  return predict_from_logits(head_logits(rep, head_owner != nullptr ? *head_owner : params, task));
}

Prediction stitch_forward(const std::vector<int>& tokens, const ParamSet& front,
                          const ParamSet& back, int split, int task, const EncoderConfig& cfg,
                          const InterventionSet* front_interventions) {
  if (split < 0 || split > cfg.num_blocks) {
    throw std::invalid_argument("stitch_forward: split " + std::to_string(split) +
                                " outside 0.." + std::to_string(cfg.num_blocks));
  }
  ParamSet::require_same_schema(front, back, "stitch_forward");
  const ParamSet& embed_owner = split >= 1 ? front : back;
  const ParamSet& final_owner = split == cfg.num_blocks ? front : back;

  Tensor h = embed(tokens, embed_owner, cfg);
  for (int b = 1; b <= cfg.num_blocks; ++b) {
    const ParamSet& owner = b <= split ? front : back;
    const ModuleParams* mod = (b <= split && front_interventions != nullptr)
                                  ? front_interventions->module_for_block(b)
                                  : nullptr;
    if (mod != nullptr) {
      BoundIntervention bound{&front_interventions->spec, mod, front_interventions->task, b};
      h = block_forward(h, owner, b, cfg, &bound);
    } else {
      h = block_forward(h, owner, b, cfg, nullptr);
    }
  }
  Tensor rep = layer_norm(slice_rows(h, 0, 1), final_owner.at("final_ln.gamma"),
                          final_owner.at("final_ln.beta"), kLayerNormEps);
  if (split == cfg.num_blocks && front_interventions != nullptr &&
      front_interventions->surgery.has_value()) {
    rep = surgery_adapter(rep, *front_interventions->surgery);
  }
  return predict_from_logits(head_logits(rep, back, task));
}

}  // namespace mergelab
