#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "mergelab/rng.hpp"

namespace mergelab {

class Tape;
class Tensor;

namespace detail {

struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means "not populated"
  bool requires_grad = false;
};

Tensor wrap(std::shared_ptr<TensorImpl> impl);

// Grad accumulation buffer, zero-initialized on first touch. For use inside
// custom_op backward closures.
std::vector<double>& grad_buffer(TensorImpl* t);

}  // namespace detail

// Dense double-precision tensor, row-major. Value-semantic handle; the
// payload is shared, so copies alias. Written once by the primitive that
// creates it; leaves may be mutated in place between tapes (init, optimizer).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  std::size_t numel() const { return impl_->data.size(); }
  int rows() const;
  int cols() const;

  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& raw_data() { return impl_->data; }
  double value() const;  // scalar tensors only
  double at(int r, int c) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<double>& grad() const;

  Tensor clone() const;  // detached deep copy of values

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  friend Tensor detail::wrap(std::shared_ptr<detail::TensorImpl> impl);
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered record of primitive applications. Single-writer; independent
// forward passes may run concurrently on their own tapes.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf so backward() populates its grad even when unreachable.
  void watch(const Tensor& t);

  void record(std::vector<std::shared_ptr<detail::TensorImpl>> inputs,
              std::shared_ptr<detail::TensorImpl> output,
              std::function<void()> backward_fn);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  friend void backward(const Tensor& loss, Tape& tape);

  struct Node {
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> fn;
  };

  std::vector<Node> nodes_;
  std::vector<std::shared_ptr<detail::TensorImpl>> watched_;
  std::unordered_set<const detail::TensorImpl*> watched_set_;
};

// RAII activation of a tape for the current thread. Primitives record onto
// the active tape whenever an input requires grad; with no active tape they
// run in plain evaluation mode.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

Tape* active_tape();

// Reverse-mode sweep from a scalar loss. Every watched requires-grad leaf
// ends up with a populated grad (zero when unreachable).
void backward(const Tensor& loss, Tape& tape);

// Max over coordinates of |analytic - central difference| /
// (|analytic| + |central| + 1e-12). `f` rebuilds the loss from the current
// values of `params` on every call.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  double h);

// ---- primitives ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor scale_by(const Tensor& x, const Tensor& s);  // s scalar
Tensor pick(const Tensor& x, int index);            // -> scalar
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor softmax(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor abs_elem(const Tensor& x);
Tensor log_elem(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor cross_entropy(const Tensor& logits, int label);
Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets);

// Wraps externally computed forward data as a primitive with a custom
// backward; records on the active tape exactly like the built-in ops. The
// closure reads out->grad and accumulates into the inputs' grad buffers.
Tensor custom_op(const std::vector<Tensor>& inputs, std::vector<int> shape,
                 std::vector<double> data,
                 std::function<void(detail::TensorImpl* out)> backward_fn);

std::string shape_str(const std::vector<int>& shape);

}  // namespace mergelab
