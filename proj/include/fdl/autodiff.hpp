#ifndef FDL_AUTODIFF_HPP
#define FDL_AUTODIFF_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fdl/error.hpp"
#include "fdl/tensor.hpp"

namespace fdl {

enum class OpKind {
  matmul,
  add,
  mul,
  concat,
  embedding_lookup,
  softmax,
  log_softmax,
  layer_norm,
  gelu,
  relu,
  cross_entropy,
  mean,
  sum,
  scale,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::concat: return "concat";
    case OpKind::embedding_lookup: return "embedding_lookup";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::gelu: return "gelu";
    case OpKind::relu: return "relu";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::scale: return "scale";
  }
  return "?";
}

/// Records operations in execution order and replays their local backward
/// rules in exact reverse order.
///
/// A tape constructed with recording=false evaluates ops without keeping any
/// graph; use it for inference and finite-difference probes.
template <typename T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<T>>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }
  OpKind kind_at(std::size_t i) const { return entries_.at(i).kind; }

  void record(OpKind kind, std::vector<NodePtr> inputs, NodePtr output,
              std::function<void()> backward) {
    entries_.push_back({kind, std::move(inputs), std::move(output), std::move(backward)});
  }

  void clear() { entries_.clear(); }

  /// Populates grad on every requires_grad tensor reachable from `loss`.
  /// Gradients add onto whatever the tensors already hold.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.size() != 1)
      throw ShapeError("backward() needs a scalar loss");
    std::size_t last = entries_.size();
    for (std::size_t i = entries_.size(); i-- > 0;) {
      if (entries_[i].output.get() == loss.node()) {
        last = i;
        break;
      }
    }
    if (last == entries_.size())
      throw Error("backward(): loss was not produced on this tape (detached graph)");

    auto* out = loss.node();
    out->grad.assign(1, T(1));
    for (std::size_t i = last + 1; i-- > 0;) {
      auto& e = entries_[i];
      if (e.output->grad.empty()) continue;  // not reachable from loss
      e.backward();
    }

    // Leaves: inputs never produced by an op on this tape.
    std::unordered_set<const TensorNode<T>*> produced;
    for (const auto& e : entries_) produced.insert(e.output.get());
    for (const auto& e : entries_) {
      for (const auto& in : e.inputs) {
        if (in->requires_grad && !produced.count(in.get()) &&
            !all_finite<T>(std::span<const T>(in->grad)))
          throw NumericError("backward(): non-finite gradient on a leaf tensor");
      }
    }
  }

 private:
  struct Entry {
    OpKind kind;
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void()> backward;
  };

  bool recording_;
  std::vector<Entry> entries_;
};

namespace detail {

template <typename T>
std::vector<T>& grad_buffer(TensorNode<T>& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

// C[i,:] += sum_k A[i,k] * B[k,:]   A: MxK, B: KxN, C: MxN
template <typename T>
void gemm_nn_acc(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// OUT[p,:] += sum_i A[i,p] * G[i,:]   A: MxK, G: MxN, OUT: KxN
template <typename T>
void gemm_tn_acc(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* g, T* out) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      T* op = out + p * n;
      for (std::size_t j = 0; j < n; ++j) op[j] += av * gi[j];
    }
  }
}

template <typename T>
std::vector<T> transpose(std::size_t r, std::size_t c, const T* src) {
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = src[i * c + j];
  return out;
}

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> ts) {
  for (auto* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

template <typename T>
Tensor<T> make_output(Tape<T>& tape, OpKind kind, Shape shape, std::vector<T> values,
                      bool wants_grad) {
  if (!all_finite<T>(values))
    throw NumericError(std::string("non-finite output in ") + op_name(kind));
  return Tensor<T>(std::move(shape), std::move(values), wants_grad && tape.recording());
}

enum class Broadcast { same, scalar, row, column };

template <typename T>
Broadcast broadcast_mode(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.size() == 1) return Broadcast::scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
  if (b.cols() == 1 && b.rows() == a.rows() && a.shape().size() == 2) return Broadcast::column;
  throw ShapeError(std::string(what) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                   shape_str(a.shape()));
}

inline std::size_t broadcast_index(Broadcast m, std::size_t r, std::size_t c, std::size_t cols) {
  switch (m) {
    case Broadcast::same: return r * cols + c;
    case Broadcast::scalar: return 0;
    case Broadcast::row: return c;
    case Broadcast::column: return r;
  }
  return 0;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace detail

namespace ops {

/// a: [M x K]. b: [K x N], or [N x K] when transpose_b is set.
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  const std::size_t m = a.rows(), k = a.cols();
  const std::size_t bk = transpose_b ? b.cols() : b.rows();
  const std::size_t n = transpose_b ? b.rows() : b.cols();
  if (bk != k)
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  std::vector<T> c(m * n, T(0));
  if (transpose_b) {
    auto bt = detail::transpose(n, k, b.data().data());
    detail::gemm_nn_acc(m, k, n, a.data().data(), bt.data(), c.data());
  } else {
    detail::gemm_nn_acc(m, k, n, a.data().data(), b.data().data(), c.data());
  }
  auto out = detail::make_output(tape, OpKind::matmul, Shape{m, n}, std::move(c),
                                 detail::any_requires_grad<T>({&a, &b}));
  if (out.requires_grad()) {
    auto an = a.shared_node(), bn = b.shared_node(), on = out.shared_node();
    tape.record(OpKind::matmul, {an, bn}, on, [an, bn, on, m, k, n, transpose_b] {
      const T* g = on->grad.data();
      if (an->requires_grad) {
        auto& ga = detail::grad_buffer(*an);
        if (transpose_b) {
          // dA = G * B, B: [N x K]
          detail::gemm_nn_acc(m, n, k, g, bn->value.data(), ga.data());
        } else {
          auto bt = detail::transpose(k, n, bn->value.data());
          detail::gemm_nn_acc(m, n, k, g, bt.data(), ga.data());
        }
      }
      if (bn->requires_grad) {
        auto& gb = detail::grad_buffer(*bn);
        if (transpose_b)
          detail::gemm_tn_acc(m, n, k, g, an->value.data(), gb.data());
        else
          detail::gemm_tn_acc(m, k, n, an->value.data(), g, gb.data());
      }
    });
  }
  return out;
}

namespace detail_elementwise {

template <typename T, typename Fwd, typename BwdA, typename BwdB>
Tensor<T> binary(Tape<T>& tape, OpKind kind, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd,
                 BwdA da, BwdB db) {
  const auto mode = detail::broadcast_mode(a, b, op_name(kind));
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(a.size());
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = fwd(av[i * c + j], bv[detail::broadcast_index(mode, i, j, c)]);
  auto res = detail::make_output(tape, kind, a.shape(), std::move(out),
                                 detail::any_requires_grad<T>({&a, &b}));
  if (res.requires_grad()) {
    auto an = a.shared_node(), bn = b.shared_node(), on = res.shared_node();
    tape.record(kind, {an, bn}, on, [an, bn, on, mode, r, c, da, db] {
      const T* g = on->grad.data();
      const T* av = an->value.data();
      const T* bv = bn->value.data();
      if (an->requires_grad) {
        auto& ga = detail::grad_buffer(*an);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t ai = i * c + j;
            ga[ai] += da(g[ai], av[ai], bv[detail::broadcast_index(mode, i, j, c)]);
          }
      }
      if (bn->requires_grad) {
        auto& gb = detail::grad_buffer(*bn);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t ai = i * c + j;
            const std::size_t bi = detail::broadcast_index(mode, i, j, c);
            gb[bi] += db(g[ai], av[ai], bv[bi]);
          }
      }
    });
  }
  return res;
}

}  // namespace detail_elementwise

/// Elementwise a + b. b may match a, be a scalar, a row [1 x C] or a column [R x 1].
template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail_elementwise::binary(
      tape, OpKind::add, a, b, [](T x, T y) { return x + y; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

/// Elementwise a * b with the same broadcasting rules as add().
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail_elementwise::binary(
      tape, OpKind::mul, a, b, [](T x, T y) { return x * y; },
      [](T g, T, T y) { return g * y; }, [](T g, T x, T) { return g * x; });
}

/// Concatenates along axis 0 (stack rows) or axis 1 (side by side).
template <typename T>
Tensor<T> concat(Tape<T>& tape, std::span<const Tensor<T>> parts, std::size_t axis = 1) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  const std::size_t r0 = parts[0].rows(), c0 = parts[0].cols();
  std::size_t rows = 0, cols = 0;
  bool grad = false;
  for (const auto& p : parts) {
    if (axis == 1 && p.rows() != r0) throw ShapeError("concat: row counts differ");
    if (axis == 0 && p.cols() != c0) throw ShapeError("concat: column counts differ");
    rows += p.rows();
    cols += p.cols();
    grad = grad || p.requires_grad();
  }
  if (axis == 1) rows = r0;
  else cols = c0;
  std::vector<T> out(rows * cols);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const T* v = p.data().data();
    if (axis == 1) {
      for (std::size_t i = 0; i < rows; ++i)
        std::copy(v + i * p.cols(), v + (i + 1) * p.cols(), out.begin() + i * cols + off);
      off += p.cols();
    } else {
      std::copy(v, v + p.size(), out.begin() + off * cols);
      off += p.rows();
    }
  }
  auto res = detail::make_output(tape, OpKind::concat, Shape{rows, cols}, std::move(out), grad);
  if (res.requires_grad()) {
    std::vector<typename Tape<T>::NodePtr> ins;
    for (const auto& p : parts) ins.push_back(p.shared_node());
    auto on = res.shared_node();
    tape.record(OpKind::concat, ins, on, [ins, on, offsets, rows, cols, axis] {
      const T* g = on->grad.data();
      for (std::size_t q = 0; q < ins.size(); ++q) {
        auto& in = *ins[q];
        if (!in.requires_grad) continue;
        auto& gi = detail::grad_buffer(in);
        const std::size_t pc = in.shape.back();
        if (axis == 1) {
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < pc; ++j) gi[i * pc + j] += g[i * cols + offsets[q] + j];
        } else {
          const T* src = g + offsets[q] * cols;
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += src[i];
        }
      }
    });
  }
  return res;
}

/// Gathers rows of `table` [V x D] for each id; result [n x D].
template <typename T>
Tensor<T> embedding_lookup(Tape<T>& tape, const Tensor<T>& table, std::span<const int> ids) {
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw ShapeError("embedding_lookup: id " + std::to_string(ids[i]) + " out of range [0," +
                       std::to_string(v) + ")");
    const T* row = table.data().data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(row, row + d, out.begin() + i * d);
  }
  auto res = detail::make_output(tape, OpKind::embedding_lookup, Shape{ids.size(), d},
                                 std::move(out), table.requires_grad());
  if (res.requires_grad()) {
    auto tn = table.shared_node(), on = res.shared_node();
    std::vector<int> idv(ids.begin(), ids.end());
    tape.record(OpKind::embedding_lookup, {tn}, on, [tn, on, idv, d] {
      auto& gt = detail::grad_buffer(*tn);
      const T* g = on->grad.data();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        T* dst = gt.data() + static_cast<std::size_t>(idv[i]) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
      }
    });
  }
  return res;
}

/// Row-wise softmax. With `causal`, row i only attends to columns
/// j <= i + (cols - rows); masked entries are exactly zero.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, bool causal = false) {
  const std::size_t r = x.rows(), c = x.cols();
  if (causal && c < r) throw ShapeError("softmax: causal mask needs cols >= rows");
  std::vector<T> y(x.size(), T(0));
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t lim = causal ? i + (c - r) + 1 : c;
    const T* xi = xv + i * c;
    T* yi = y.data() + i * c;
    T mx = xi[0];
    for (std::size_t j = 1; j < lim; ++j) mx = std::max(mx, xi[j]);
    T s = 0;
    for (std::size_t j = 0; j < lim; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      s += yi[j];
    }
    for (std::size_t j = 0; j < lim; ++j) yi[j] /= s;
  }
  auto res = detail::make_output(tape, OpKind::softmax, x.shape(), std::move(y), x.requires_grad());
  if (res.requires_grad()) {
    auto xn = x.shared_node(), on = res.shared_node();
    tape.record(OpKind::softmax, {xn}, on, [xn, on, r, c] {
      auto& gx = detail::grad_buffer(*xn);
      const T* g = on->grad.data();
      const T* yv = on->value.data();
      for (std::size_t i = 0; i < r; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += yv[i * c + j] * g[i * c + j];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += yv[i * c + j] * (g[i * c + j] - dot);
      }
    });
  }
  return res;
}

template <typename T>
Tensor<T> log_softmax(Tape<T>& tape, const Tensor<T>& x) {
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<T> y(x.size());
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* xi = xv + i * c;
    T mx = *std::max_element(xi, xi + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(xi[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = xi[j] - lse;
  }
  auto res =
      detail::make_output(tape, OpKind::log_softmax, x.shape(), std::move(y), x.requires_grad());
  if (res.requires_grad()) {
    auto xn = x.shared_node(), on = res.shared_node();
    tape.record(OpKind::log_softmax, {xn}, on, [xn, on, r, c] {
      auto& gx = detail::grad_buffer(*xn);
      const T* g = on->grad.data();
      const T* yv = on->value.data();
      for (std::size_t i = 0; i < r; ++i) {
        T gs = 0;
        for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          gx[i * c + j] += g[i * c + j] - std::exp(yv[i * c + j]) * gs;
      }
    });
  }
  return res;
}

/// Row-wise normalization to zero mean / unit variance, then gain and offset.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& offset, T eps = T(1e-5)) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.size() != c || offset.size() != c)
    throw ShapeError("layer_norm: gain/offset width must be " + std::to_string(c));
  std::vector<T> y(x.size()), xhat(x.size()), rstd(r);
  const T* xv = x.data().data();
  const T* gv = gain.data().data();
  const T* bv = offset.data().data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* xi = xv + i * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
    mu /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= T(c);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xi[j] - mu) * rstd[i];
      y[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
    }
  }
  auto res = detail::make_output(tape, OpKind::layer_norm, x.shape(), std::move(y),
                                 detail::any_requires_grad<T>({&x, &gain, &offset}));
  if (res.requires_grad()) {
    auto xn = x.shared_node(), gn = gain.shared_node(), bn = offset.shared_node(),
         on = res.shared_node();
    tape.record(OpKind::layer_norm, {xn, gn, bn}, on,
                [xn, gn, bn, on, r, c, xhat = std::move(xhat), rstd = std::move(rstd)] {
                  const T* g = on->grad.data();
                  const T* gv = gn->value.data();
                  if (gn->requires_grad) {
                    auto& gg = detail::grad_buffer(*gn);
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
                  }
                  if (bn->requires_grad) {
                    auto& gb = detail::grad_buffer(*bn);
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                  }
                  if (xn->requires_grad) {
                    auto& gx = detail::grad_buffer(*xn);
                    for (std::size_t i = 0; i < r; ++i) {
                      T m1 = 0, m2 = 0;
                      for (std::size_t j = 0; j < c; ++j) {
                        const T dxh = g[i * c + j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xhat[i * c + j];
                      }
                      m1 /= T(c);
                      m2 /= T(c);
                      for (std::size_t j = 0; j < c; ++j) {
                        const T dxh = g[i * c + j] * gv[j];
                        gx[i * c + j] += rstd[i] * (dxh - m1 - xhat[i * c + j] * m2);
                      }
                    }
                  }
                });
  }
  return res;
}

namespace detail_unary {

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(Tape<T>& tape, OpKind kind, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  std::vector<T> y(x.size());
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xv[i]);
  auto res = detail::make_output(tape, kind, x.shape(), std::move(y), x.requires_grad());
  if (res.requires_grad()) {
    auto xn = x.shared_node(), on = res.shared_node();
    tape.record(kind, {xn}, on, [xn, on, deriv] {
      auto& gx = detail::grad_buffer(*xn);
      const T* g = on->grad.data();
      const T* xv = xn->value.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv(xv[i]);
    });
  }
  return res;
}

}  // namespace detail_unary

template <typename T>
T gelu_value(T x) {
  const T c = T(detail::kGeluC);
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_derivative(T x) {
  const T c = T(detail::kGeluC);
  const T t = std::tanh(c * (x + T(0.044715) * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3 * 0.044715) * x * x);
}

/// tanh approximation used by GPT-2.
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  return detail_unary::unary(tape, OpKind::gelu, x, [](T v) { return gelu_value(v); },
                             [](T v) { return gelu_derivative(v); });
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  return detail_unary::unary(
      tape, OpKind::relu, x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v) { return v > T(0) ? T(1) : T(0); });
}

/// sum_r weights[r] * -log softmax(logits[r])[targets[r]].
///
/// Rows with zero weight are skipped entirely. Weights may be negative,
/// which turns the row into a likelihood-ascent term.
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> targets,
                        std::span<const T> weights) {
  const std::size_t r = logits.rows(), c = logits.cols();
  if (targets.size() != r || weights.size() != r)
    throw ShapeError("cross_entropy: targets/weights must have one entry per row");
  const T* z = logits.data().data();
  std::vector<T> probs(r * c, T(0));
  T loss = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (weights[i] == T(0)) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c)
      throw ShapeError("cross_entropy: target " + std::to_string(targets[i]) + " out of range");
    const T* zi = z + i * c;
    T mx = *std::max_element(zi, zi + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(zi[j] - mx);
      s += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= s;
    const T nll = (mx + std::log(s)) - zi[targets[i]];
    loss += weights[i] * nll;
  }
  auto res = detail::make_output(tape, OpKind::cross_entropy, Shape{1}, std::vector<T>{loss},
                                 logits.requires_grad());
  if (res.requires_grad()) {
    auto ln = logits.shared_node(), on = res.shared_node();
    std::vector<int> tv(targets.begin(), targets.end());
    std::vector<T> wv(weights.begin(), weights.end());
    tape.record(OpKind::cross_entropy, {ln}, on,
                [ln, on, r, c, tv, wv, probs = std::move(probs)] {
                  auto& gl = detail::grad_buffer(*ln);
                  const T g = on->grad[0];
                  for (std::size_t i = 0; i < r; ++i) {
                    if (wv[i] == T(0)) continue;
                    const T s = g * wv[i];
                    for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += s * probs[i * c + j];
                    gl[i * c + static_cast<std::size_t>(tv[i])] -= s;
                  }
                });
  }
  return res;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  auto res = detail::make_output(tape, OpKind::sum, Shape{1}, std::vector<T>{s}, x.requires_grad());
  if (res.requires_grad()) {
    auto xn = x.shared_node(), on = res.shared_node();
    tape.record(OpKind::sum, {xn}, on, [xn, on] {
      auto& gx = detail::grad_buffer(*xn);
      for (auto& g : gx) g += on->grad[0];
    });
  }
  return res;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  const T n = T(x.size());
  auto res =
      detail::make_output(tape, OpKind::mean, Shape{1}, std::vector<T>{s / n}, x.requires_grad());
  if (res.requires_grad()) {
    auto xn = x.shared_node(), on = res.shared_node();
    tape.record(OpKind::mean, {xn}, on, [xn, on, n] {
      auto& gx = detail::grad_buffer(*xn);
      for (auto& g : gx) g += on->grad[0] / n;
    });
  }
  return res;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T s) {
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * s;
  auto res = detail::make_output(tape, OpKind::scale, x.shape(), std::move(y), x.requires_grad());
  if (res.requires_grad()) {
    auto xn = x.shared_node(), on = res.shared_node();
    tape.record(OpKind::scale, {xn}, on, [xn, on, s] {
      auto& gx = detail::grad_buffer(*xn);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i] * s;
    });
  }
  return res;
}

}  // namespace ops

/// Attributes for the kind-dispatched entry point; each kind reads only
/// the fields it needs.
template <typename T>
struct OpAttrs {
  bool transpose_b = false;       // matmul
  bool causal = false;            // softmax
  std::size_t axis = 1;           // concat
  std::vector<int> ids;           // embedding_lookup, cross_entropy targets
  std::vector<T> weights;         // cross_entropy
  T factor = T(1);                // scale
  T eps = T(1e-5);                // layer_norm
};

template <typename T>
Tensor<T> forward_op(Tape<T>& tape, OpKind kind, std::span<const Tensor<T>> in,
                     const OpAttrs<T>& attrs = {}) {
  auto need = [&](std::size_t n) {
    if (in.size() != n)
      throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                       " inputs, got " + std::to_string(in.size()));
  };
  switch (kind) {
    case OpKind::matmul: need(2); return ops::matmul(tape, in[0], in[1], attrs.transpose_b);
    case OpKind::add: need(2); return ops::add(tape, in[0], in[1]);
    case OpKind::mul: need(2); return ops::mul(tape, in[0], in[1]);
    case OpKind::concat: return ops::concat(tape, in, attrs.axis);
    case OpKind::embedding_lookup:
      need(1);
      return ops::embedding_lookup(tape, in[0], std::span<const int>(attrs.ids));
    case OpKind::softmax: need(1); return ops::softmax(tape, in[0], attrs.causal);
    case OpKind::log_softmax: need(1); return ops::log_softmax(tape, in[0]);
    case OpKind::layer_norm: need(3); return ops::layer_norm(tape, in[0], in[1], in[2], attrs.eps);
    case OpKind::gelu: need(1); return ops::gelu(tape, in[0]);
    case OpKind::relu: need(1); return ops::relu(tape, in[0]);
    case OpKind::cross_entropy:
      need(1);
      return ops::cross_entropy(tape, in[0], std::span<const int>(attrs.ids),
                                std::span<const T>(attrs.weights));
    case OpKind::mean: need(1); return ops::mean(tape, in[0]);
    case OpKind::sum: need(1); return ops::sum(tape, in[0]);
    case OpKind::scale: need(1); return ops::scale(tape, in[0], attrs.factor);
  }
  throw Error("forward_op: unknown kind");
}

}  // namespace fdl

#endif  // FDL_AUTODIFF_HPP
