#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mergelab/rng.hpp"
#include "mergelab/tensor.hpp"

namespace mergelab {

// Residual edit formulas applied to a representation slice. P1..P5 follow the
// printed forms; Surgery replaces the final encoder representation instead of
// editing it residually.
enum class Pattern { P1, P2, P3, P4, P5, Surgery };

enum class TokenSelector { Cls, FirstPatch, MiddlePatch, LastPatch, AllPatches, AllTokens };

Pattern pattern_from_string(const std::string& s);
std::string pattern_to_string(Pattern p);
TokenSelector token_selector_from_string(const std::string& s);
std::string token_selector_to_string(TokenSelector t);

// Per-task description of where and how interventions attach.
struct InterventionSpec {
  Pattern pattern = Pattern::P4;
  int rank = 1;
  int slice_lo = 0;          // j
  int slice_hi = 0;          // p; slice is [j, p)
  int shift_per_block = 0;   // slice start advances by this per block, no wrap
  TokenSelector tokens = TokenSelector::Cls;
  std::vector<int> blocks;   // 1-based block ids; empty means no blocks

  int slice_width() const { return slice_hi - slice_lo; }
};

InterventionSpec full_width_spec(Pattern pattern, int rank, int dim, int num_blocks);
void validate_spec(const InterventionSpec& spec, int num_blocks, int dim);

// Slice for a given block after the shift schedule; start is
// (j + (b-1)*shift) mod (dim - width) so the slice never wraps.
std::pair<int, int> slice_for_block(const InterventionSpec& spec, int block, int dim);

// Trainable tensors of one module. Which fields are populated depends on the
// pattern: basis (R) for P1/P2/P3/P5, w for P3/P5, w1/w2 for P4, bias always.
struct ModuleParams {
  Tensor basis;  // [d x r], orthonormal columns
  Tensor w;      // [d x r]
  Tensor w1;     // [d x r]
  Tensor w2;     // [d x r]
  Tensor bias;   // [r]
};

struct SurgeryParams {
  Tensor w_down;  // [k x r]
  Tensor w_up;    // [r x k]
};

// All intervention modules for one task.
struct InterventionSet {
  InterventionSpec spec;
  int task = 0;
  std::vector<std::pair<int, ModuleParams>> modules;  // ascending 1-based block id
  std::optional<SurgeryParams> surgery;

  const ModuleParams* module_for_block(int block) const;
  std::vector<Tensor> trainable() const;
  long long trainable_count() const;
  // Largest column-orthonormality defect across all basis matrices.
  double max_orthonormality_defect() const;
};

InterventionSet init_interventions(const InterventionSpec& spec, int task, int num_blocks,
                                   int dim, Rng& rng);

// Formula evaluation on row vectors [n x d]. `pattern_apply` evaluates the
// printed pattern; `full_intervention` is the default full-width edit.
Tensor pattern_apply(const Tensor& h, Pattern pattern, const ModuleParams& params);
Tensor full_intervention(const Tensor& z, const ModuleParams& params);

// Edits only columns [j:p) of z (shift already applied by the caller via
// slice bounds); other coordinates pass through unchanged.
Tensor mini_intervention(const Tensor& z, int slice_lo, int slice_hi, Pattern pattern,
                         const ModuleParams& params);

// Replaces (not residually edits) the final representation.
Tensor surgery_adapter(const Tensor& h, const SurgeryParams& params);

// Bound module: one task's module attached to one block; applied to the
// post-MHSA representation z [S x k] on the selected token rows.
struct BoundIntervention {
  const InterventionSpec* spec = nullptr;
  const ModuleParams* params = nullptr;
  int task = 0;
  int block = 0;  // 1-based
};

Tensor apply_bound(const Tensor& z, const BoundIntervention& bound, int expected_block);

std::vector<int> select_tokens(TokenSelector selector, int seq_len);

long long module_param_count(Pattern pattern, int slice_width, int rank);
long long count_extra_params(const InterventionSpec& spec, int tasks, int num_blocks, int dim);

// Restores orthonormal columns in place; column space is preserved.
void reorthonormalize(Tensor& basis);

}  // namespace mergelab
