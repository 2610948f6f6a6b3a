#include "mergelab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mergelab {

namespace {

using detail::TensorImpl;
using Impl = std::shared_ptr<TensorImpl>;

thread_local Tape* g_active_tape = nullptr;

std::size_t checked_numel(const std::vector<int>& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must be non-empty");
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dims must be positive, got " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Impl make_impl(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

std::vector<double>& grad_ref(TensorImpl* t) {
  if (t->grad.size() != t->data.size()) t->grad.assign(t->data.size(), 0.0);
  return t->grad;
}

bool taped(const Tensor& t) { return g_active_tape != nullptr && t.requires_grad(); }

// Wraps a freshly computed output: records the node when any input is taped.
Tensor finish(const std::vector<Tensor>& inputs, std::vector<int> shape, std::vector<double> data,
              std::function<void(TensorImpl* out)> backward_fn) {
  bool rec = false;
  for (const auto& in : inputs) rec = rec || taped(in);
  Tensor result = detail::wrap(make_impl(std::move(shape), std::move(data), rec));
  if (rec) {
    std::vector<Impl> impl_inputs;
    impl_inputs.reserve(inputs.size());
    for (const auto& in : inputs) {
      impl_inputs.push_back(in.impl_ptr());
      if (in.requires_grad()) g_active_tape->watch(in);
    }
    TensorImpl* out_raw = result.impl();
    g_active_tape->record(std::move(impl_inputs), result.impl_ptr(),
                          [fn = std::move(backward_fn), out_raw]() { fn(out_raw); });
  }
  return result;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

int last_dim(const Tensor& x) { return x.shape().back(); }

constexpr double kGeluC = 0.7978845608028653728;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

namespace detail {
Tensor wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }
std::vector<double>& grad_buffer(TensorImpl* t) { return grad_ref(t); }
}  // namespace detail

Tensor custom_op(const std::vector<Tensor>& inputs, std::vector<int> shape,
                 std::vector<double> data,
                 std::function<void(detail::TensorImpl* out)> backward_fn) {
  return finish(inputs, std::move(shape), std::move(data), std::move(backward_fn));
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---- Tensor ----

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  std::size_t n = checked_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  std::size_t n = checked_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  std::size_t n = checked_numel(shape);
  if (n != data.size()) {
    throw std::invalid_argument("from_data: shape " + shape_str(shape) + " wants " +
                                std::to_string(n) + " values, got " + std::to_string(data.size()));
  }
  return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad) {
  std::size_t n = checked_numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = rng.normal() * stddev;
  return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

int Tensor::rows() const {
  if (ndim() != 2) throw std::invalid_argument("rows(): tensor is not 2-D: " + shape_str(shape()));
  return dim(0);
}

int Tensor::cols() const {
  if (ndim() != 2) throw std::invalid_argument("cols(): tensor is not 2-D: " + shape_str(shape()));
  return dim(1);
}

double Tensor::value() const {
  if (numel() != 1) throw std::invalid_argument("value(): tensor is not scalar: " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(int r, int c) const {
  return impl_->data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) +
                     static_cast<std::size_t>(c)];
}

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) throw std::runtime_error("grad not populated; run backward first");
  return impl_->grad;
}

Tensor Tensor::clone() const {
  return Tensor(make_impl(impl_->shape, impl_->data, false));
}

// ---- Tape ----

void Tape::watch(const Tensor& t) {
  if (!t.requires_grad()) return;
  if (watched_set_.insert(t.impl()).second) watched_.push_back(t.impl_ptr());
}

void Tape::record(std::vector<Impl> inputs, Impl output, std::function<void()> backward_fn) {
  nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward_fn)});
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss, Tape& tape) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  // Reset grads of everything this tape touches so one pass populates each
  // leaf exactly once regardless of earlier sweeps.
  for (auto& node : tape.nodes_) {
    node.output->grad.clear();
    for (auto& in : node.inputs) in->grad.clear();
  }
  for (auto& w : tape.watched_) w->grad.clear();

  grad_ref(loss.impl())[0] = 1.0;

  std::unordered_set<const TensorImpl*> needed;
  needed.insert(loss.impl());
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) {
    if (!needed.count(it->output.get())) continue;
    grad_ref(it->output.get());
    it->fn();
    for (auto& in : it->inputs) {
      if (in->requires_grad) needed.insert(in.get());
    }
  }
  for (auto& w : tape.watched_) grad_ref(w.get());
}

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double h) {
  if (h <= 0) throw std::invalid_argument("grad_check: h must be positive");
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    for (const auto& p : params) tape.watch(p);
    Tensor loss = f();
    if (!std::isfinite(loss.value())) throw std::runtime_error("grad_check: non-finite loss");
    backward(loss, tape);
    for (const auto& p : params) analytic.push_back(p.grad());
  }
  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = const_cast<Tensor&>(params[pi]).raw_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = f().value();
      data[i] = orig - h;
      const double fm = f().value();
      data[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw std::runtime_error("grad_check: non-finite evaluation during perturbation");
      }
      const double fd = (fp - fm) / (2.0 * h);
      const double g = analytic[pi][i];
      const double rel = std::abs(g - fd) / (std::abs(g) + std::abs(fd) + 1e-12);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

// ---- primitives ----

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto ia = a.impl_ptr();
  auto ib = b.impl_ptr();
  return finish({a, b}, a.shape(), std::move(out), [ia, ib](TensorImpl* o) {
    const auto& g = o->grad;
    if (ia->requires_grad) {
      auto& ga = grad_ref(ia.get());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (ib->requires_grad) {
      auto& gb = grad_ref(ib.get());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto ia = a.impl_ptr();
  auto ib = b.impl_ptr();
  return finish({a, b}, a.shape(), std::move(out), [ia, ib](TensorImpl* o) {
    const auto& g = o->grad;
    if (ia->requires_grad) {
      auto& ga = grad_ref(ia.get());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (ib->requires_grad) {
      auto& gb = grad_ref(ib.get());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto ia = a.impl_ptr();
  auto ib = b.impl_ptr();
  return finish({a, b}, a.shape(), std::move(out), [ia, ib](TensorImpl* o) {
    const auto& g = o->grad;
    if (ia->requires_grad) {
      auto& ga = grad_ref(ia.get());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ib->data[i];
    }
    if (ib->requires_grad) {
      auto& gb = grad_ref(ib.get());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ia->data[i];
    }
  });
}

Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
  auto ix = x.impl_ptr();
  return finish({x}, x.shape(), std::move(out), [ix, c](TensorImpl* o) {
    if (!ix->requires_grad) return;
    auto& gx = grad_ref(ix.get());
    for (std::size_t i = 0; i < o->grad.size(); ++i) gx[i] += o->grad[i] * c;
  });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw std::invalid_argument("scale_by: s must be scalar, got " + shape_str(s.shape()));
  const double sv = s.data()[0];
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * sv;
  auto ix = x.impl_ptr();
  auto is = s.impl_ptr();
  return finish({x, s}, x.shape(), std::move(out), [ix, is, sv](TensorImpl* o) {
    const auto& g = o->grad;
    if (ix->requires_grad) {
      auto& gx = grad_ref(ix.get());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
    }
    if (is->requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * ix->data[i];
      grad_ref(is.get())[0] += acc;
    }
  });
}

Tensor pick(const Tensor& x, int index) {
  if (index < 0 || static_cast<std::size_t>(index) >= x.numel()) {
    throw std::invalid_argument("pick: index " + std::to_string(index) + " out of range for " +
                                shape_str(x.shape()));
  }
  auto ix = x.impl_ptr();
  return finish({x}, {1}, {x.data()[static_cast<std::size_t>(index)]}, [ix, index](TensorImpl* o) {
    if (!ix->requires_grad) return;
    grad_ref(ix.get())[static_cast<std::size_t>(index)] += o->grad[0];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  {
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* C = out.data();
    for (int i = 0; i < m; ++i) {
      for (int kk = 0; kk < k; ++kk) {
        const double aik = A[i * k + kk];
        const double* Brow = B + kk * n;
        double* Crow = C + i * n;
        for (int j = 0; j < n; ++j) Crow[j] += aik * Brow[j];
      }
    }
  }
  auto ia = a.impl_ptr();
  auto ib = b.impl_ptr();
  return finish({a, b}, {m, n}, std::move(out), [ia, ib, m, k, n](TensorImpl* o) {
    const double* G = o->grad.data();
    if (ia->requires_grad) {
      double* GA = grad_ref(ia.get()).data();
      const double* B = ib->data.data();
      // dA = dC * B^T
      for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < k; ++kk) {
          const double* Grow = G + i * n;
          const double* Brow = B + kk * n;
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += Grow[j] * Brow[j];
          GA[i * k + kk] += acc;
        }
      }
    }
    if (ib->requires_grad) {
      double* GB = grad_ref(ib.get()).data();
      const double* A = ia->data.data();
      // dB = A^T * dC
      for (int i = 0; i < m; ++i) {
        const double* Grow = G + i * n;
        for (int kk = 0; kk < k; ++kk) {
          const double aik = A[i * k + kk];
          double* GBrow = GB + kk * n;
          for (int j = 0; j < n; ++j) GBrow[j] += aik * Grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& x) {
  const int m = x.rows(), n = x.cols();
  std::vector<double> out(x.numel());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = x.data()[static_cast<std::size_t>(i) * n + j];
  auto ix = x.impl_ptr();
  return finish({x}, {n, m}, std::move(out), [ix, m, n](TensorImpl* o) {
    if (!ix->requires_grad) return;
    auto& gx = grad_ref(ix.get());
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i) gx[static_cast<std::size_t>(i) * n + j] += o->grad[static_cast<std::size_t>(j) * m + i];
  });
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  if (checked_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                                " changes element count");
  }
  auto ix = x.impl_ptr();
  return finish({x}, std::move(shape), x.data(), [ix](TensorImpl* o) {
    if (!ix->requires_grad) return;
    auto& gx = grad_ref(ix.get());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o->grad[i];
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  if (bias.ndim() != 1 || bias.dim(0) != last_dim(x)) {
    throw std::invalid_argument("add_row_bias: bias " + shape_str(bias.shape()) +
                                " does not match rows of " + shape_str(x.shape()));
  }
  const int k = bias.dim(0);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(k);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (int j = 0; j < k; ++j) out[r * k + j] = x.data()[r * k + j] + bias.data()[static_cast<std::size_t>(j)];
  auto ix = x.impl_ptr();
  auto ibias = bias.impl_ptr();
  return finish({x, bias}, x.shape(), std::move(out), [ix, ibias, rows, k](TensorImpl* o) {
    const auto& g = o->grad;
    if (ix->requires_grad) {
      auto& gx = grad_ref(ix.get());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (ibias->requires_grad) {
      auto& gb = grad_ref(ibias.get());
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < k; ++j) gb[static_cast<std::size_t>(j)] += g[r * k + j];
    }
  });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  const int v = table.rows(), k = table.cols();
  if (ids.empty()) throw std::invalid_argument("gather_rows: empty id list");
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw std::invalid_argument("gather_rows: id " + std::to_string(id) + " out of range for " +
                                  shape_str(table.shape()));
    }
  }
  const int n = static_cast<int>(ids.size());
  std::vector<double> out(static_cast<std::size_t>(n) * k);
  for (int r = 0; r < n; ++r)
    std::copy_n(table.data().begin() + static_cast<std::size_t>(ids[static_cast<std::size_t>(r)]) * k, k,
                out.begin() + static_cast<std::size_t>(r) * k);
  auto it = table.impl_ptr();
  return finish({table}, {n, k}, std::move(out), [it, ids, k](TensorImpl* o) {
    if (!it->requires_grad) return;
    auto& gt = grad_ref(it.get());
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (int j = 0; j < k; ++j)
        gt[static_cast<std::size_t>(ids[r]) * k + j] += o->grad[r * k + j];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const int k = parts[0].cols();
  int total = 0;
  for (const auto& p : parts) {
    if (p.cols() != k) {
      throw std::invalid_argument("concat_rows: column mismatch " + shape_str(p.shape()) + " vs " +
                                  shape_str(parts[0].shape()));
    }
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(total) * k);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<Impl> impls;
  for (const auto& p : parts) impls.push_back(p.impl_ptr());
  return finish(parts, {total, k}, std::move(out), [impls, k](TensorImpl* o) {
    std::size_t off = 0;
    for (const auto& in : impls) {
      if (in->requires_grad) {
        auto& gi = grad_ref(in.get());
        for (std::size_t i = 0; i < in->data.size(); ++i) gi[i] += o->grad[off + i];
      }
      off += in->data.size();
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const int m = parts[0].rows();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) {
      throw std::invalid_argument("concat_cols: row mismatch " + shape_str(p.shape()) + " vs " +
                                  shape_str(parts[0].shape()));
    }
    total += p.cols();
  }
  std::vector<double> out(static_cast<std::size_t>(m) * total);
  int coff = 0;
  for (const auto& p : parts) {
    const int pc = p.cols();
    for (int i = 0; i < m; ++i)
      std::copy_n(p.data().begin() + static_cast<std::size_t>(i) * pc, pc,
                  out.begin() + static_cast<std::size_t>(i) * total + coff);
    coff += pc;
  }
  std::vector<Impl> impls;
  for (const auto& p : parts) impls.push_back(p.impl_ptr());
  return finish(parts, {m, total}, std::move(out), [impls, m, total](TensorImpl* o) {
    int coff2 = 0;
    for (const auto& in : impls) {
      const int pc = in->shape[1];
      if (in->requires_grad) {
        auto& gi = grad_ref(in.get());
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < pc; ++j)
            gi[static_cast<std::size_t>(i) * pc + j] +=
                o->grad[static_cast<std::size_t>(i) * total + coff2 + j];
      }
      coff2 += pc;
    }
  });
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
  const int m = x.rows(), k = x.cols();
  if (r0 < 0 || r1 > m || r0 >= r1) {
    throw std::invalid_argument("slice_rows: bad range [" + std::to_string(r0) + ":" +
                                std::to_string(r1) + ") for " + shape_str(x.shape()));
  }
  const int n = r1 - r0;
  std::vector<double> out(x.data().begin() + static_cast<std::size_t>(r0) * k,
                          x.data().begin() + static_cast<std::size_t>(r1) * k);
  auto ix = x.impl_ptr();
  return finish({x}, {n, k}, std::move(out), [ix, r0, n, k](TensorImpl* o) {
    if (!ix->requires_grad) return;
    auto& gx = grad_ref(ix.get());
    for (std::size_t i = 0; i < static_cast<std::size_t>(n) * k; ++i)
      gx[static_cast<std::size_t>(r0) * k + i] += o->grad[i];
  });
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
  const int m = x.rows(), k = x.cols();
  if (c0 < 0 || c1 > k || c0 >= c1) {
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + ":" +
                                std::to_string(c1) + ") for " + shape_str(x.shape()));
  }
  const int n = c1 - c0;
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i)
    std::copy_n(x.data().begin() + static_cast<std::size_t>(i) * k + c0, n,
                out.begin() + static_cast<std::size_t>(i) * n);
  auto ix = x.impl_ptr();
  return finish({x}, {m, n}, std::move(out), [ix, c0, m, n, k](TensorImpl* o) {
    if (!ix->requires_grad) return;
    auto& gx = grad_ref(ix.get());
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        gx[static_cast<std::size_t>(i) * k + c0 + j] += o->grad[static_cast<std::size_t>(i) * n + j];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int k = last_dim(x);
  if (k < 2) throw std::invalid_argument("layer_norm: last dim must be >= 2, got " + shape_str(x.shape()));
  if (eps <= 0) throw std::invalid_argument("layer_norm: eps must be positive");
  if (gamma.ndim() != 1 || gamma.dim(0) != k || beta.ndim() != 1 || beta.dim(0) != k) {
    throw std::invalid_argument("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                                shape_str(beta.shape()) + " do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / static_cast<std::size_t>(k);
  std::vector<double> out(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * k;
    double mu = 0.0;
    for (int j = 0; j < k; ++j) mu += row[j];
    mu /= k;
    double var = 0.0;
    for (int j = 0; j < k; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= k;
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (int j = 0; j < k; ++j) {
      const double xh = (row[j] - mu) * inv;
      (*xhat)[r * k + j] = xh;
      out[r * k + j] = gamma.data()[static_cast<std::size_t>(j)] * xh + beta.data()[static_cast<std::size_t>(j)];
    }
  }
  auto ix = x.impl_ptr();
  auto ig = gamma.impl_ptr();
  auto ib = beta.impl_ptr();
  return finish({x, gamma, beta}, x.shape(), std::move(out), [ix, ig, ib, xhat, inv_std, rows, k](TensorImpl* o) {
    const auto& g = o->grad;
    if (ig->requires_grad) {
      auto& gg = grad_ref(ig.get());
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < k; ++j) gg[static_cast<std::size_t>(j)] += g[r * k + j] * (*xhat)[r * k + j];
    }
    if (ib->requires_grad) {
      auto& gb = grad_ref(ib.get());
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < k; ++j) gb[static_cast<std::size_t>(j)] += g[r * k + j];
    }
    if (ix->requires_grad) {
      auto& gx = grad_ref(ix.get());
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < k; ++j) {
          const double dxh = g[r * k + j] * ig->data[static_cast<std::size_t>(j)];
          m1 += dxh;
          m2 += dxh * (*xhat)[r * k + j];
        }
        m1 /= k;
        m2 /= k;
        const double inv = (*inv_std)[r];
        for (int j = 0; j < k; ++j) {
          const double dxh = g[r * k + j] * ig->data[static_cast<std::size_t>(j)];
          gx[r * k + j] += inv * (dxh - m1 - (*xhat)[r * k + j] * m2);
        }
      }
    }
  });
}

Tensor softmax(const Tensor& x) {
  const int n = last_dim(x);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(n);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
      out[r * n + j] = std::exp(row[j] - mx);
      z += out[r * n + j];
    }
    for (int j = 0; j < n; ++j) out[r * n + j] /= z;
  }
  auto probs = std::make_shared<std::vector<double>>(out);
  auto ix = x.impl_ptr();
  return finish({x}, x.shape(), std::move(out), [ix, probs, rows, n](TensorImpl* o) {
    if (!ix->requires_grad) return;
    auto& gx = grad_ref(ix.get());
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += (*probs)[r * n + j] * o->grad[r * n + j];
      for (int j = 0; j < n; ++j)
        gx[r * n + j] += (*probs)[r * n + j] * (o->grad[r * n + j] - dot);
    }
  });
}

Tensor gelu(const Tensor& x) {
  // tanh approximation
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  auto ix = x.impl_ptr();
  return finish({x}, x.shape(), std::move(out), [ix](TensorImpl* o) {
    if (!ix->requires_grad) return;
    auto& gx = grad_ref(ix.get());
    for (std::size_t i = 0; i < o->grad.size(); ++i) {
      const double v = ix->data[i];
      const double u = kGeluC * (v + kGeluA * v * v * v);
      const double t = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      gx[i] += o->grad[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  auto ix = x.impl_ptr();
  return finish({x}, x.shape(), std::move(out), [ix](TensorImpl* o) {
    if (!ix->requires_grad) return;
    auto& gx = grad_ref(ix.get());
    for (std::size_t i = 0; i < o->grad.size(); ++i)
      if (ix->data[i] > 0.0) gx[i] += o->grad[i];
  });
}

Tensor abs_elem(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(x.data()[i]);
  auto ix = x.impl_ptr();
  return finish({x}, x.shape(), std::move(out), [ix](TensorImpl* o) {
    if (!ix->requires_grad) return;
    auto& gx = grad_ref(ix.get());
    // subgradient at 0 is 0
    for (std::size_t i = 0; i < o->grad.size(); ++i) {
      const double v = ix->data[i];
      if (v > 0.0) gx[i] += o->grad[i];
      else if (v < 0.0) gx[i] -= o->grad[i];
    }
  });
}

Tensor log_elem(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (x.data()[i] <= 0.0) throw std::runtime_error("log_elem: non-positive input");
    out[i] = std::log(x.data()[i]);
  }
  auto ix = x.impl_ptr();
  return finish({x}, x.shape(), std::move(out), [ix](TensorImpl* o) {
    if (!ix->requires_grad) return;
    auto& gx = grad_ref(ix.get());
    for (std::size_t i = 0; i < o->grad.size(); ++i) gx[i] += o->grad[i] / ix->data[i];
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto ix = x.impl_ptr();
  return finish({x}, {1}, {acc}, [ix](TensorImpl* o) {
    if (!ix->requires_grad) return;
    auto& gx = grad_ref(ix.get());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o->grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor cross_entropy(const Tensor& logits, int label) {
  const int c = static_cast<int>(logits.numel());
  if (label < 0 || label >= c) {
    throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                " out of range for " + std::to_string(c) + " classes");
  }
  double mx = logits.data()[0];
  for (double v : logits.data()) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits.data()) z += std::exp(v - mx);
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
  for (int j = 0; j < c; ++j) (*probs)[static_cast<std::size_t>(j)] = std::exp(logits.data()[static_cast<std::size_t>(j)] - mx) / z;
  const double loss = std::log(z) - (logits.data()[static_cast<std::size_t>(label)] - mx);
  auto il = logits.impl_ptr();
  return finish({logits}, {1}, {loss}, [il, probs, label](TensorImpl* o) {
    if (!il->requires_grad) return;
    auto& gl = grad_ref(il.get());
    for (std::size_t j = 0; j < gl.size(); ++j) {
      double d = (*probs)[j];
      if (j == static_cast<std::size_t>(label)) d -= 1.0;
      gl[j] += o->grad[0] * d;
    }
  });
}

Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets) {
  if (logits.numel() != targets.size()) {
    throw std::invalid_argument("bce_with_logits: " + std::to_string(targets.size()) +
                                " targets for " + shape_str(logits.shape()));
  }
  const std::size_t n = targets.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits.data()[i];
    acc += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  acc /= static_cast<double>(n);
  auto il = logits.impl_ptr();
  return finish({logits}, {1}, {acc}, [il, targets, n](TensorImpl* o) {
    if (!il->requires_grad) return;
    auto& gl = grad_ref(il.get());
    for (std::size_t i = 0; i < n; ++i) {
      const double z = il->data[i];
      const double sig = 1.0 / (1.0 + std::exp(-z));
      gl[i] += o->grad[0] * (sig - targets[i]) / static_cast<double>(n);
    }
  });
}

}  // namespace mergelab
