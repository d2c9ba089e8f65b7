#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "avglm/error.hpp"
#include "avglm/rng.hpp"

namespace avglm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated iff requires_grad
  bool requires_grad = false;
};

}  // namespace detail

// Shared handle to a dense n-dimensional array of reals. Copying a Tensor
// copies the handle, not the storage; ops record backward closures that
// capture handles cheaply.
template <typename S>
class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::TensorNode<S>>()) {
    node_->shape = {};
    node_->value.assign(1, S(0));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value.assign(shape_numel(t.node_->shape), S(0));
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor full(Shape shape, S v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.node_->value) x = v;
    return t;
  }

  static Tensor from(Shape shape, std::vector<S> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }

  static Tensor uniform(Shape shape, Rng& rng, S lo, S hi, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.node_->value) x = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::size_t rows() const {
    require_rank(2, "rows()");
    return node_->shape[0];
  }
  std::size_t cols() const {
    require_rank(2, "cols()");
    return node_->shape[1];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    if (rg)
      node_->grad.assign(node_->value.size(), S(0));
    else
      node_->grad.clear();
  }

  const std::vector<S>& data() const { return node_->value; }
  std::vector<S>& data() { return node_->value; }
  const std::vector<S>& grad() const {
    require_grad_storage();
    return node_->grad;
  }
  std::vector<S>& grad() {
    require_grad_storage();
    return node_->grad;
  }

  void zero_grad() {
    for (auto& g : node_->grad) g = S(0);
  }

  S at(std::size_t i) const { return node_->value[i]; }
  S at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  S& at(std::size_t i) { return node_->value[i]; }
  S& at(std::size_t r, std::size_t c) { return node_->value[r * cols() + c]; }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  bool all_finite() const {
    for (S v : node_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Detached value copy (no grad, no graph history).
  Tensor detached_copy() const {
    Tensor t;
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    return t;
  }

 private:
  void require_rank(std::size_t r, const char* what) const {
    if (node_->shape.size() != r)
      throw DimensionError(std::string(what) + " called on tensor of shape " + shape_str(node_->shape));
  }
  void require_grad_storage() const {
    if (!node_->requires_grad)
      throw ContractError("tensor has no gradient storage (requires_grad is false)");
  }

  std::shared_ptr<detail::TensorNode<S>> node_;
};

// Tape of executed ops. Backward replays the tape in exactly reverse
// execution order; gradients accumulate additively, so a tensor used k
// times receives the sum of all k path gradients.
template <typename S>
class Graph {
 public:
  bool recording() const { return recording_; }
  void set_recording(bool r) { recording_ = r; }

  void record(std::function<void()> backward_step) {
    tape_.push_back(std::move(backward_step));
  }

  std::size_t op_count() const { return tape_.size(); }

  void clear() { tape_.clear(); }

  void backward(Tensor<S>& loss) {
    if (loss.size() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad())
      throw ContractError("backward: loss does not require grad (not connected to any parameter)");
    loss.grad()[0] = S(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> tape_;
  bool recording_ = true;
};

namespace detail {

// c(m×n) += a(m×k) · b(k×n)
template <typename S>
void gemm_acc_nn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = arow[p];
      const S* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c(m×n) += a(m×k) · b(n×k)ᵀ
template <typename S>
void gemm_acc_nt(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const S* brow = b + j * k;
      S acc = S(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// c(k×n) += a(m×k)ᵀ · b(m×n)
template <typename S>
void gemm_acc_tn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    const S* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = arow[p];
      S* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename S>
Tensor<S> make_output(Graph<S>& g, Shape shape, bool any_input_grad) {
  return Tensor<S>::zeros(std::move(shape), g.recording() && any_input_grad);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops. Each computes the forward value eagerly and, when the graph is
// recording and an input requires grad, pushes a closure that accumulates
// (+=) gradients into its inputs.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(Graph<S>& g, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<S> out = detail::make_output(g, {m, n}, a.requires_grad() || b.requires_grad());
  detail::gemm_acc_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (out.requires_grad()) {
    Tensor<S> ca = a, cb = b;
    g.record([ca, cb, out, m, k, n]() mutable {
      if (ca.requires_grad())  // dA += dOut · Bᵀ
        detail::gemm_acc_nt(out.grad().data(), cb.data().data(), ca.grad().data(), m, n, k);
      if (cb.requires_grad())  // dB += Aᵀ · dOut
        detail::gemm_acc_tn(ca.data().data(), out.grad().data(), cb.grad().data(), m, k, n);
    });
  }
  return out;
}

// a(m×k) · b(n×k)ᵀ; the natural layout for the tied-softmax projection.
template <typename S>
Tensor<S> matmul_nt(Graph<S>& g, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
    throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor<S> out = detail::make_output(g, {m, n}, a.requires_grad() || b.requires_grad());
  detail::gemm_acc_nt(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (out.requires_grad()) {
    Tensor<S> ca = a, cb = b;
    g.record([ca, cb, out, m, k, n]() mutable {
      if (ca.requires_grad())  // dA += dOut · B
        detail::gemm_acc_nn(out.grad().data(), cb.data().data(), ca.grad().data(), m, n, k);
      if (cb.requires_grad())  // dB += dOutᵀ · A
        detail::gemm_acc_tn(out.grad().data(), ca.data().data(), cb.grad().data(), m, n, k);
    });
  }
  return out;
}

template <typename S>
Tensor<S> add(Graph<S>& g, const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<S> out = detail::make_output(g, a.shape(), a.requires_grad() || b.requires_grad());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (out.requires_grad()) {
    Tensor<S> ca = a, cb = b;
    g.record([ca, cb, out, n]() mutable {
      if (ca.requires_grad())
        for (std::size_t i = 0; i < n; ++i) ca.grad()[i] += out.grad()[i];
      if (cb.requires_grad())
        for (std::size_t i = 0; i < n; ++i) cb.grad()[i] += out.grad()[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> sub(Graph<S>& g, const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<S> out = detail::make_output(g, a.shape(), a.requires_grad() || b.requires_grad());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (out.requires_grad()) {
    Tensor<S> ca = a, cb = b;
    g.record([ca, cb, out, n]() mutable {
      if (ca.requires_grad())
        for (std::size_t i = 0; i < n; ++i) ca.grad()[i] += out.grad()[i];
      if (cb.requires_grad())
        for (std::size_t i = 0; i < n; ++i) cb.grad()[i] -= out.grad()[i];
    });
  }
  return out;
}

// Hadamard product.
template <typename S>
Tensor<S> mul(Graph<S>& g, const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<S> out = detail::make_output(g, a.shape(), a.requires_grad() || b.requires_grad());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (out.requires_grad()) {
    Tensor<S> ca = a, cb = b;
    g.record([ca, cb, out, n]() mutable {
      if (ca.requires_grad())
        for (std::size_t i = 0; i < n; ++i) ca.grad()[i] += out.grad()[i] * cb.data()[i];
      if (cb.requires_grad())
        for (std::size_t i = 0; i < n; ++i) cb.grad()[i] += out.grad()[i] * ca.data()[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(Graph<S>& g, const Tensor<S>& a, S factor) {
  Tensor<S> out = detail::make_output(g, a.shape(), a.requires_grad());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * factor;
  if (out.requires_grad()) {
    Tensor<S> ca = a;
    g.record([ca, out, factor, n]() mutable {
      for (std::size_t i = 0; i < n; ++i) ca.grad()[i] += out.grad()[i] * factor;
    });
  }
  return out;
}

template <typename S>
Tensor<S> sigmoid(Graph<S>& g, const Tensor<S>& a) {
  Tensor<S> out = detail::make_output(g, a.shape(), a.requires_grad());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = S(1) / (S(1) + std::exp(-a.data()[i]));
  if (out.requires_grad()) {
    Tensor<S> ca = a;
    g.record([ca, out, n]() mutable {
      for (std::size_t i = 0; i < n; ++i) {
        const S s = out.data()[i];
        ca.grad()[i] += out.grad()[i] * s * (S(1) - s);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> tanh(Graph<S>& g, const Tensor<S>& a) {
  Tensor<S> out = detail::make_output(g, a.shape(), a.requires_grad());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::tanh(a.data()[i]);
  if (out.requires_grad()) {
    Tensor<S> ca = a;
    g.record([ca, out, n]() mutable {
      for (std::size_t i = 0; i < n; ++i) {
        const S t = out.data()[i];
        ca.grad()[i] += out.grad()[i] * (S(1) - t * t);
      }
    });
  }
  return out;
}

// x(m×n) + row-broadcast bias(n). The one sanctioned broadcast.
template <typename S>
Tensor<S> add_row_bias(Graph<S>& g, const Tensor<S>& x, const Tensor<S>& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.shape()[0] != x.cols())
    throw DimensionError("add_row_bias: incompatible shapes " + shape_str(x.shape()) + " vs " +
                         shape_str(bias.shape()));
  const std::size_t m = x.rows(), n = x.cols();
  Tensor<S> out = detail::make_output(g, {m, n}, x.requires_grad() || bias.requires_grad());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] = x.data()[i * n + j] + bias.data()[j];
  if (out.requires_grad()) {
    Tensor<S> cx = x, cbias = bias;
    g.record([cx, cbias, out, m, n]() mutable {
      if (cx.requires_grad())
        for (std::size_t i = 0; i < m * n; ++i) cx.grad()[i] += out.grad()[i];
      if (cbias.requires_grad())
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) cbias.grad()[j] += out.grad()[i * n + j];
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_cols(Graph<S>& g, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
    throw DimensionError("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const std::size_t m = a.rows(), p = a.cols(), q = b.cols();
  Tensor<S> out = detail::make_output(g, {m, p + q}, a.requires_grad() || b.requires_grad());
  for (std::size_t i = 0; i < m; ++i) {
    S* orow = out.data().data() + i * (p + q);
    const S* arow = a.data().data() + i * p;
    const S* brow = b.data().data() + i * q;
    for (std::size_t j = 0; j < p; ++j) orow[j] = arow[j];
    for (std::size_t j = 0; j < q; ++j) orow[p + j] = brow[j];
  }
  if (out.requires_grad()) {
    Tensor<S> ca = a, cb = b;
    g.record([ca, cb, out, m, p, q]() mutable {
      for (std::size_t i = 0; i < m; ++i) {
        const S* orow = out.grad().data() + i * (p + q);
        if (ca.requires_grad()) {
          S* arow = ca.grad().data() + i * p;
          for (std::size_t j = 0; j < p; ++j) arow[j] += orow[j];
        }
        if (cb.requires_grad()) {
          S* brow = cb.grad().data() + i * q;
          for (std::size_t j = 0; j < q; ++j) brow[j] += orow[p + j];
        }
      }
    });
  }
  return out;
}

// Vertical stack of equally wide matrices.
template <typename S>
Tensor<S> concat_rows(Graph<S>& g, const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t total = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.cols() != n)
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
    total += p.rows();
    any_grad = any_grad || p.requires_grad();
  }
  Tensor<S> out = detail::make_output(g, {total, n}, any_grad);
  std::size_t row = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + row * n);
    row += p.rows();
  }
  if (out.requires_grad()) {
    auto captured = parts;
    g.record([captured, out, n]() mutable {
      std::size_t row = 0;
      for (auto& p : captured) {
        if (p.requires_grad()) {
          const S* src = out.grad().data() + row * n;
          S* dst = p.grad().data();
          for (std::size_t i = 0; i < p.size(); ++i) dst[i] += src[i];
        }
        row += p.rows();
      }
    });
  }
  return out;
}

// Embedding-style row lookup; backward scatter-adds into the table rows,
// so repeated ids accumulate.
template <typename S>
Tensor<S> gather_rows(Graph<S>& g, const Tensor<S>& table, const std::vector<int>& ids) {
  if (table.rank() != 2)
    throw DimensionError("gather_rows: table must be 2-d, got " + shape_str(table.shape()));
  const std::size_t v = table.rows(), d = table.cols();
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw IndexError("gather_rows: id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(v) + ")");
  Tensor<S> out = detail::make_output(g, {ids.size(), d}, table.requires_grad());
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy(table.data().begin() + ids[r] * d, table.data().begin() + (ids[r] + 1) * d,
              out.data().begin() + r * d);
  if (out.requires_grad()) {
    Tensor<S> ct = table;
    g.record([ct, out, ids, d]() mutable {
      for (std::size_t r = 0; r < ids.size(); ++r) {
        const S* src = out.grad().data() + r * d;
        S* dst = ct.grad().data() + static_cast<std::size_t>(ids[r]) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum(Graph<S>& g, const Tensor<S>& a) {
  Tensor<S> out = detail::make_output(g, {}, a.requires_grad());
  S acc = S(0);
  for (S v : a.data()) acc += v;
  out.data()[0] = acc;
  if (out.requires_grad()) {
    Tensor<S> ca = a;
    g.record([ca, out]() mutable {
      const S go = out.grad()[0];
      for (auto& gv : ca.grad()) gv += go;
    });
  }
  return out;
}

template <typename S>
struct CrossEntropyResult {
  Tensor<S> loss;       // scalar: mean NLL over masked rows, in nats
  Tensor<S> log_probs;  // m×V, detached (diagnostic output)
};

// Masked mean negative log-likelihood with a numerically stabilized
// log-softmax. Gradient on masked rows is (softmax − one_hot) / |masked|.
template <typename S>
CrossEntropyResult<S> softmax_cross_entropy(Graph<S>& g, const Tensor<S>& logits,
                                            const std::vector<int>& targets,
                                            const std::vector<std::uint8_t>& mask) {
  if (logits.rank() != 2)
    throw DimensionError("softmax_cross_entropy: logits must be 2-d, got " +
                         shape_str(logits.shape()));
  const std::size_t m = logits.rows(), v = logits.cols();
  if (targets.size() != m || mask.size() != m)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(m) + " rows but " +
                         std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries");
  std::size_t masked = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!mask[i]) continue;
    ++masked;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
      throw IndexError("softmax_cross_entropy: target " + std::to_string(targets[i]) +
                       " out of range [0, " + std::to_string(v) + ")");
  }
  if (masked == 0)
    throw DegenerateBatchError("softmax_cross_entropy: no masked rows contribute to the loss");

  Tensor<S> log_probs = Tensor<S>::zeros({m, v});
  S nll = S(0);
  for (std::size_t i = 0; i < m; ++i) {
    const S* row = logits.data().data() + i * v;
    S* lp = log_probs.data().data() + i * v;
    S mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    S denom = S(0);
    for (std::size_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
    const S lse = mx + std::log(denom);
    for (std::size_t j = 0; j < v; ++j) lp[j] = row[j] - lse;
    if (mask[i]) nll -= lp[targets[i]];
  }
  Tensor<S> loss = detail::make_output(g, {}, logits.requires_grad());
  loss.data()[0] = nll / static_cast<S>(masked);
  if (loss.requires_grad()) {
    Tensor<S> cl = logits;
    g.record([cl, log_probs, loss, targets, mask, m, v, masked]() mutable {
      const S go = loss.grad()[0] / static_cast<S>(masked);
      for (std::size_t i = 0; i < m; ++i) {
        if (!mask[i]) continue;
        const S* lp = log_probs.data().data() + i * v;
        S* gl = cl.grad().data() + i * v;
        for (std::size_t j = 0; j < v; ++j) gl[j] += go * std::exp(lp[j]);
        gl[targets[i]] -= go;
      }
    });
  }
  return {loss, log_probs};
}

}  // namespace avglm
