#include "mergelab/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mergelab {

namespace {

// Loose enough to survive finite-difference perturbation of basis entries;
// training re-orthonormalizes to ~1e-15 after every step.
constexpr double kBasisIntegrityTol = 1e-4;

double orthonormality_defect(const Tensor& basis) {
  const int d = basis.rows(), r = basis.cols();
  double worst = 0.0;
  for (int a = 0; a < r; ++a) {
    for (int b = 0; b <= a; ++b) {
      double dot = 0.0;
      for (int i = 0; i < d; ++i) dot += basis.at(i, a) * basis.at(i, b);
      const double target = (a == b) ? 1.0 : 0.0;
      worst = std::max(worst, std::abs(dot - target));
    }
  }
  return worst;
}

void check_basis(const Tensor& basis) {
  const double defect = orthonormality_defect(basis);
  if (defect > kBasisIntegrityTol) {
    throw std::runtime_error("intervention basis lost orthonormality (defect " +
                             std::to_string(defect) + ")");
  }
}

Tensor lift(const Tensor& low, const Tensor& basis) {
  // [n x r] -> [n x d]
  return matmul(low, transpose(basis));
}

}  // namespace

Pattern pattern_from_string(const std::string& s) {
  if (s == "P1") return Pattern::P1;
  if (s == "P2") return Pattern::P2;
  if (s == "P3") return Pattern::P3;
  if (s == "P4") return Pattern::P4;
  if (s == "P5") return Pattern::P5;
  if (s == "surgery" || s == "SURGERY") return Pattern::Surgery;
  throw std::invalid_argument("unknown intervention pattern: " + s);
}

std::string pattern_to_string(Pattern p) {
  switch (p) {
    case Pattern::P1: return "P1";
    case Pattern::P2: return "P2";
    case Pattern::P3: return "P3";
    case Pattern::P4: return "P4";
    case Pattern::P5: return "P5";
    case Pattern::Surgery: return "surgery";
  }
  return "?";
}

TokenSelector token_selector_from_string(const std::string& s) {
  if (s == "cls") return TokenSelector::Cls;
  if (s == "first_patch") return TokenSelector::FirstPatch;
  if (s == "middle_patch") return TokenSelector::MiddlePatch;
  if (s == "last_patch") return TokenSelector::LastPatch;
  if (s == "all_patches") return TokenSelector::AllPatches;
  if (s == "all_tokens") return TokenSelector::AllTokens;
  throw std::invalid_argument("unknown token selector: " + s);
}

std::string token_selector_to_string(TokenSelector t) {
  switch (t) {
    case TokenSelector::Cls: return "cls";
    case TokenSelector::FirstPatch: return "first_patch";
    case TokenSelector::MiddlePatch: return "middle_patch";
    case TokenSelector::LastPatch: return "last_patch";
    case TokenSelector::AllPatches: return "all_patches";
    case TokenSelector::AllTokens: return "all_tokens";
  }
  return "?";
}

InterventionSpec full_width_spec(Pattern pattern, int rank, int dim, int num_blocks) {
  InterventionSpec spec;
  spec.pattern = pattern;
  spec.rank = rank;
  spec.slice_lo = 0;
  spec.slice_hi = dim;
  spec.tokens = TokenSelector::Cls;
  if (pattern != Pattern::Surgery) {
    for (int b = 1; b <= num_blocks; ++b) spec.blocks.push_back(b);
  }
  return spec;
}

void validate_spec(const InterventionSpec& spec, int num_blocks, int dim) {
  if (spec.rank < 1) throw std::invalid_argument("intervention rank must be >= 1");
  if (spec.pattern == Pattern::Surgery) {
    if (!spec.blocks.empty()) {
      throw std::invalid_argument("surgery applies after the encoder, not inside blocks");
    }
    if (spec.rank > dim) throw std::invalid_argument("surgery rank exceeds representation dim");
    return;
  }
  if (spec.slice_lo < 0 || spec.slice_lo >= spec.slice_hi || spec.slice_hi > dim) {
    throw std::invalid_argument("intervention slice [" + std::to_string(spec.slice_lo) + ":" +
                                std::to_string(spec.slice_hi) + ") invalid for dim " +
                                std::to_string(dim));
  }
  if (spec.rank > spec.slice_width()) {
    throw std::invalid_argument("intervention rank " + std::to_string(spec.rank) +
                                " exceeds slice width " + std::to_string(spec.slice_width()));
  }
  if (spec.shift_per_block < 0) throw std::invalid_argument("shift_per_block must be >= 0");
  int prev = 0;
  for (int b : spec.blocks) {
    if (b < 1 || b > num_blocks) {
      throw std::invalid_argument("intervention block " + std::to_string(b) +
                                  " outside 1.." + std::to_string(num_blocks));
    }
    if (b <= prev) throw std::invalid_argument("intervention blocks must be ascending and unique");
    prev = b;
  }
}

std::pair<int, int> slice_for_block(const InterventionSpec& spec, int block, int dim) {
  const int width = spec.slice_width();
  if (spec.shift_per_block == 0 || width == dim) return {spec.slice_lo, spec.slice_hi};
  const int range = dim - width;
  const int start = (spec.slice_lo + (block - 1) * spec.shift_per_block) % range;
  return {start, start + width};
}

const ModuleParams* InterventionSet::module_for_block(int block) const {
  for (const auto& [b, m] : modules) {
    if (b == block) return &m;
  }
  return nullptr;
}

std::vector<Tensor> InterventionSet::trainable() const {
  std::vector<Tensor> out;
  for (const auto& [b, m] : modules) {
    switch (spec.pattern) {
      case Pattern::P1:
      case Pattern::P2:
        out.push_back(m.basis);
        out.push_back(m.bias);
        break;
      case Pattern::P3:
      case Pattern::P5:
        out.push_back(m.basis);
        out.push_back(m.w);
        out.push_back(m.bias);
        break;
      case Pattern::P4:
        out.push_back(m.w1);
        out.push_back(m.w2);
        out.push_back(m.bias);
        break;
      case Pattern::Surgery:
        break;
    }
  }
  if (surgery) {
    out.push_back(surgery->w_down);
    out.push_back(surgery->w_up);
  }
  return out;
}

long long InterventionSet::trainable_count() const {
  long long n = 0;
  for (const auto& t : trainable()) n += static_cast<long long>(t.numel());
  return n;
}

double InterventionSet::max_orthonormality_defect() const {
  double worst = 0.0;
  for (const auto& [b, m] : modules) {
    if (m.basis.defined()) worst = std::max(worst, orthonormality_defect(m.basis));
  }
  return worst;
}

InterventionSet init_interventions(const InterventionSpec& spec, int task, int num_blocks,
                                   int dim, Rng& rng) {
  validate_spec(spec, num_blocks, dim);
  InterventionSet set;
  set.spec = spec;
  set.task = task;

  if (spec.pattern == Pattern::Surgery) {
    SurgeryParams sp;
    std::vector<double> down(static_cast<std::size_t>(dim) * spec.rank);
    for (auto& v : down) v = (rng.uniform() * 2.0 - 1.0) * 0.01;
    sp.w_down = Tensor::from_data({dim, spec.rank}, std::move(down), true);
    sp.w_up = Tensor::zeros({spec.rank, dim}, true);
    set.surgery = std::move(sp);
    return set;
  }

  const int d = spec.slice_width();
  const int r = spec.rank;
  for (int b : spec.blocks) {
    ModuleParams m;
    m.bias = Tensor::zeros({r}, true);
    switch (spec.pattern) {
      case Pattern::P1:
      case Pattern::P2:
      case Pattern::P3: {
        m.basis = Tensor::randn({d, r}, rng, 1.0, true);
        reorthonormalize(m.basis);
        if (spec.pattern == Pattern::P3) m.w = Tensor::zeros({d, r}, true);
        break;
      }
      case Pattern::P5: {
        m.basis = Tensor::randn({d, r}, rng, 1.0, true);
        reorthonormalize(m.basis);
        // w starts as a copy of the basis so the subtracted projection
        // cancels and the module is the identity at init
        m.w = m.basis.clone();
        m.w.set_requires_grad(true);
        break;
      }
      case Pattern::P4: {
        // W1 == W2 at init: the inner term cancels bit-exactly (identity at
        // init) while keeping W2 non-degenerate so gradients can flow; an
        // all-zero W2 is a stationary point of the edit.
        m.w1 = Tensor::randn({d, r}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
        m.w2 = m.w1.clone();
        m.w2.set_requires_grad(true);
        break;
      }
      case Pattern::Surgery:
        break;
    }
    set.modules.emplace_back(b, std::move(m));
  }
  return set;
}

Tensor pattern_apply(const Tensor& h, Pattern pattern, const ModuleParams& params) {
  const int d = h.cols();
  switch (pattern) {
    case Pattern::P1: {
      if (params.basis.rows() != d) {
        throw std::invalid_argument("pattern P1: basis " + shape_str(params.basis.shape()) +
                                    " does not match input " + shape_str(h.shape()));
      }
      check_basis(params.basis);
      const int r = params.basis.cols();
      Tensor row = matmul(reshape(params.bias, {1, r}), transpose(params.basis));
      return add_row_bias(h, reshape(row, {d}));
    }
    case Pattern::P2: {
      check_basis(params.basis);
      Tensor proj = matmul(h, params.basis);
      Tensor inner = add_row_bias(scale(proj, -1.0), params.bias);
      return add(h, lift(inner, params.basis));
    }
    case Pattern::P3: {
      check_basis(params.basis);
      Tensor inner = add_row_bias(matmul(h, params.w), params.bias);
      return add(h, lift(inner, params.basis));
    }
    case Pattern::P4: {
      if (params.w1.rows() != d || params.w2.rows() != d) {
        throw std::invalid_argument("pattern P4: projections " + shape_str(params.w1.shape()) +
                                    " do not match input " + shape_str(h.shape()));
      }
      Tensor inner = add_row_bias(sub(matmul(h, params.w1), matmul(h, params.w2)), params.bias);
      return add(h, matmul(inner, transpose(params.w2)));
    }
    case Pattern::P5: {
      check_basis(params.basis);
      Tensor inner =
          add_row_bias(sub(matmul(h, params.w), matmul(h, params.basis)), params.bias);
      return add(h, lift(inner, params.basis));
    }
    case Pattern::Surgery:
      throw std::invalid_argument("surgery is not a block pattern; use surgery_adapter");
  }
  throw std::invalid_argument("unknown pattern");
}

Tensor full_intervention(const Tensor& z, const ModuleParams& params) {
  if (params.w1.cols() > z.cols()) {
    throw std::invalid_argument("full_intervention: rank " + std::to_string(params.w1.cols()) +
                                " exceeds dim " + std::to_string(z.cols()));
  }
  return pattern_apply(z, Pattern::P4, params);
}

Tensor mini_intervention(const Tensor& z, int slice_lo, int slice_hi, Pattern pattern,
                         const ModuleParams& params) {
  const int k = z.cols();
  if (slice_lo < 0 || slice_lo >= slice_hi || slice_hi > k) {
    throw std::invalid_argument("mini_intervention: slice [" + std::to_string(slice_lo) + ":" +
                                std::to_string(slice_hi) + ") invalid for dim " +
                                std::to_string(k));
  }
  if (slice_lo == 0 && slice_hi == k) return pattern_apply(z, pattern, params);
  Tensor edited = pattern_apply(slice_cols(z, slice_lo, slice_hi), pattern, params);
  std::vector<Tensor> parts;
  if (slice_lo > 0) parts.push_back(slice_cols(z, 0, slice_lo));
  parts.push_back(edited);
  if (slice_hi < k) parts.push_back(slice_cols(z, slice_hi, k));
  return concat_cols(parts);
}

Tensor surgery_adapter(const Tensor& h, const SurgeryParams& params) {
  if (h.cols() != params.w_down.rows()) {
    throw std::invalid_argument("surgery_adapter: input " + shape_str(h.shape()) +
                                " does not match w_down " + shape_str(params.w_down.shape()));
  }
  return matmul(relu(matmul(h, params.w_down)), params.w_up);
}

Tensor apply_bound(const Tensor& z, const BoundIntervention& bound, int expected_block) {
  if (bound.spec == nullptr || bound.params == nullptr) {
    throw std::invalid_argument("apply_bound: unbound intervention");
  }
  if (bound.block != expected_block) {
    throw std::invalid_argument("intervention bound to block " + std::to_string(bound.block) +
                                " applied at block " + std::to_string(expected_block));
  }
  const int seq_len = z.rows();
  const int k = z.cols();
  const auto rows = select_tokens(bound.spec->tokens, seq_len);
  const int row_lo = rows.front();
  const int row_hi = rows.back() + 1;
  const auto [j, p] = slice_for_block(*bound.spec, bound.block, k);

  Tensor target = (row_lo == 0 && row_hi == seq_len) ? z : slice_rows(z, row_lo, row_hi);
  Tensor edited = mini_intervention(target, j, p, bound.spec->pattern, *bound.params);
  if (row_lo == 0 && row_hi == seq_len) return edited;
  std::vector<Tensor> parts;
  if (row_lo > 0) parts.push_back(slice_rows(z, 0, row_lo));
  parts.push_back(edited);
  if (row_hi < seq_len) parts.push_back(slice_rows(z, row_hi, seq_len));
  return concat_rows(parts);
}

std::vector<int> select_tokens(TokenSelector selector, int seq_len) {
  if (seq_len < 2) throw std::invalid_argument("select_tokens: need CLS plus at least one patch");
  switch (selector) {
    case TokenSelector::Cls: return {0};
    case TokenSelector::FirstPatch: return {1};
    case TokenSelector::MiddlePatch: return {1 + (seq_len - 1) / 2};
    case TokenSelector::LastPatch: return {seq_len - 1};
    case TokenSelector::AllPatches: {
      std::vector<int> out;
      for (int i = 1; i < seq_len; ++i) out.push_back(i);
      return out;
    }
    case TokenSelector::AllTokens: {
      std::vector<int> out;
      for (int i = 0; i < seq_len; ++i) out.push_back(i);
      return out;
    }
  }
  throw std::invalid_argument("unknown token selector");
}

long long module_param_count(Pattern pattern, int slice_width, int rank) {
  const long long d = slice_width, r = rank;
  switch (pattern) {
    case Pattern::P1:
    case Pattern::P2:
      return d * r + r;  // basis + bias
    case Pattern::P3:
    case Pattern::P5:
      return 2 * d * r + r;  // basis + w + bias
    case Pattern::P4:
      return 2 * d * r + r;  // w1 + w2 + bias
    case Pattern::Surgery:
      return 2 * d * r;  // down + up
  }
  return 0;
}

long long count_extra_params(const InterventionSpec& spec, int tasks, int num_blocks, int dim) {
  validate_spec(spec, num_blocks, dim);
  if (spec.pattern == Pattern::Surgery) {
    return static_cast<long long>(tasks) * module_param_count(Pattern::Surgery, dim, spec.rank);
  }
  return static_cast<long long>(tasks) * static_cast<long long>(spec.blocks.size()) *
         module_param_count(spec.pattern, spec.slice_width(), spec.rank);
}

void reorthonormalize(Tensor& basis) {
  const int d = basis.rows(), r = basis.cols();
  auto& data = basis.raw_data();
  for (int c = 0; c < r; ++c) {
    // two projection passes for numerical robustness
    for (int pass = 0; pass < 2; ++pass) {
      for (int q = 0; q < c; ++q) {
        double dot = 0.0;
        for (int i = 0; i < d; ++i) dot += data[static_cast<std::size_t>(i) * r + c] *
                                           data[static_cast<std::size_t>(i) * r + q];
        for (int i = 0; i < d; ++i) data[static_cast<std::size_t>(i) * r + c] -=
            dot * data[static_cast<std::size_t>(i) * r + q];
      }
    }
    double norm = 0.0;
    for (int i = 0; i < d; ++i) {
      const double v = data[static_cast<std::size_t>(i) * r + c];
      norm += v * v;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
      throw std::runtime_error("reorthonormalize: rank-deficient basis at column " +
                               std::to_string(c));
    }
    for (int i = 0; i < d; ++i) data[static_cast<std::size_t>(i) * r + c] /= norm;
  }
}

}  // namespace mergelab
