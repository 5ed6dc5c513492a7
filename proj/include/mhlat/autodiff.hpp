#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "mhlat/tensor.hpp"

namespace mhlat {

// Shared handle to a value with an optional gradient accumulator. Copies alias
// the same storage, so a parameter held by several modules is one tensor.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(RealMatrix value, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    set_requires_grad(requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  std::string shape_str() const { return node_->value.shape_str(); }

  const RealMatrix& value() const { return node_->value; }
  RealMatrix& mutable_value() { return node_->value; }
  double item() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("item() on non-scalar " + shape_str());
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    if (flag && node_->grad.size() != node_->value.size())
      node_->grad = RealMatrix(rows(), cols());
    if (!flag) node_->grad = RealMatrix();
  }

  // Zero-filled when the tensor never received a gradient.
  RealMatrix grad() const {
    if (node_->grad.size() == node_->value.size() && !node_->grad.empty()) return node_->grad;
    return RealMatrix(rows(), cols());
  }
  // Gradient slots are mutable through any handle, like the pointee of a shared_ptr.
  RealMatrix& mutable_grad() const { return node_->grad; }
  void zero_grad() const {
    if (node_->requires_grad) node_->grad.fill(0.0);
  }
  void accumulate_grad(const RealMatrix& g) const {
    if (!node_->requires_grad) return;
    linalg::add_inplace(node_->grad, g);
  }

  const void* id() const noexcept { return node_.get(); }
  friend bool same_storage(const Tensor& a, const Tensor& b) { return a.node_ == b.node_; }

 private:
  struct Node {
    RealMatrix value;
    RealMatrix grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Node> node_;
};

// Ordered record of executed operations. backward() replays them strictly in
// reverse. A non-recording tape runs ops forward only and never touches grads.
class Tape {
 public:
  Tape() = default;
  explicit Tape(bool recording) : recording_(recording) {}
  static Tape inference() { return Tape(false); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return entries_.size(); }

  void record(std::function<void()> backward_fn) {
    if (recording_) entries_.push_back(std::move(backward_fn));
  }

  void backward(Tensor loss) {
    if (loss.rows() != 1 || loss.cols() != 1)
      throw ShapeError("backward() requires a 1x1 loss, got " + loss.shape_str());
    if (!loss.requires_grad())
      throw std::logic_error("backward() on a loss that is not connected to the tape");
    loss.mutable_grad()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
  }

 private:
  bool recording_ = true;
  std::vector<std::function<void()>> entries_;
};

namespace detail {

inline bool any_grad(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.recording()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(concat(op, ": shape mismatch ", a.shape_str(), " vs ", b.shape_str()));
}

}  // namespace detail

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError(
        detail::concat("matmul: inner dimensions differ ", a.shape_str(), " x ", b.shape_str()));
  Tensor out(linalg::matmul(a.value(), b.value()), detail::any_grad(tape, {&a, &b}));
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      const RealMatrix& g = out.mutable_grad();
      if (a.requires_grad()) a.accumulate_grad(linalg::matmul_nt(g, b.value()));
      if (b.requires_grad()) b.accumulate_grad(linalg::matmul_tn(a.value(), g));
    });
  }
  return out;
}

// a · bᵀ without materialising the transpose.
inline Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw ShapeError(
        detail::concat("matmul_nt: inner dimensions differ ", a.shape_str(), " x ", b.shape_str(),
                       "^T"));
  Tensor out(linalg::matmul_nt(a.value(), b.value()), detail::any_grad(tape, {&a, &b}));
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      const RealMatrix& g = out.mutable_grad();
      if (a.requires_grad()) a.accumulate_grad(linalg::matmul(g, b.value()));
      if (b.requires_grad()) b.accumulate_grad(linalg::matmul_tn(g, a.value()));
    });
  }
  return out;
}

inline Tensor transpose(Tape& tape, const Tensor& a) {
  Tensor out(linalg::transpose(a.value()), detail::any_grad(tape, {&a}));
  if (out.requires_grad()) {
    tape.record([a, out]() mutable { a.accumulate_grad(linalg::transpose(out.mutable_grad())); });
  }
  return out;
}

inline Tensor relu(Tape& tape, const Tensor& a) {
  RealMatrix v = a.value();
  for (double& x : v.data()) x = x > 0.0 ? x : 0.0;
  Tensor out(std::move(v), detail::any_grad(tape, {&a}));
  if (out.requires_grad()) {
    tape.record([a, out]() mutable {
      RealMatrix g = out.mutable_grad();
      const auto& x = a.value().data();
      for (std::size_t i = 0; i < x.size(); ++i)
        if (!(x[i] > 0.0)) g[i] = 0.0;
      a.accumulate_grad(g);
    });
  }
  return out;
}

// Softmax along each row. Masked columns (flag 0) get probability exactly 0.
// An empty mask means every column is a valid target.
inline Tensor row_softmax(Tape& tape, const Tensor& a, std::span<const std::uint8_t> mask = {}) {
  const std::size_t rows = a.rows();
  const std::size_t cols = a.cols();
  if (!mask.empty() && mask.size() != cols)
    throw ShapeError(detail::concat("row_softmax: mask length ", mask.size(), " != cols ", cols));
  const bool any_valid =
      mask.empty() ? cols > 0 : std::any_of(mask.begin(), mask.end(), [](auto f) { return f != 0; });
  if (!any_valid && rows > 0)
    throw std::domain_error("row_softmax: every column is masked, no valid attention target");

  RealMatrix y(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto in = a.value().row(r);
    auto outr = y.row(r);
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (mask.empty() || mask[c]) hi = std::max(hi, in[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask.empty() || mask[c]) {
        outr[c] = std::exp(in[c] - hi);
        total += outr[c];
      }
    }
    for (double& p : outr) p /= total;
  }
  Tensor out(std::move(y), detail::any_grad(tape, {&a}));
  if (out.requires_grad()) {
    tape.record([a, out]() mutable {
      const RealMatrix& g = out.mutable_grad();
      const RealMatrix& p = out.value();
      RealMatrix dx(p.rows(), p.cols());
      for (std::size_t r = 0; r < p.rows(); ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < p.cols(); ++c) dot += g(r, c) * p(r, c);
        for (std::size_t c = 0; c < p.cols(); ++c) dx(r, c) = p(r, c) * (g(r, c) - dot);
      }
      a.accumulate_grad(dx);
    });
  }
  return out;
}

// x · wᵀ + b, with b (1×q) broadcast over the rows of x.
inline Tensor affine(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.cols() != w.cols() || b.rows() != 1 || b.cols() != w.rows())
    throw ShapeError(detail::concat("affine: incompatible shapes x", x.shape_str(), " w",
                                    w.shape_str(), " b", b.shape_str()));
  RealMatrix y = linalg::matmul_nt(x.value(), w.value());
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += b.value()[c];
  Tensor out(std::move(y), detail::any_grad(tape, {&x, &w, &b}));
  if (out.requires_grad()) {
    tape.record([x, w, b, out]() mutable {
      const RealMatrix& g = out.mutable_grad();
      if (x.requires_grad()) x.accumulate_grad(linalg::matmul(g, w.value()));
      if (w.requires_grad()) w.accumulate_grad(linalg::matmul_tn(g, x.value()));
      if (b.requires_grad()) {
        RealMatrix db(1, g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) db[c] += g(r, c);
        b.accumulate_grad(db);
      }
    });
  }
  return out;
}

inline Tensor concat_cols(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows())
    throw ShapeError(
        detail::concat("concat_cols: row counts differ ", a.shape_str(), " vs ", b.shape_str()));
  const std::size_t p = a.cols();
  const std::size_t q = b.cols();
  RealMatrix y(a.rows(), p + q);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    std::copy(a.value().row(r).begin(), a.value().row(r).end(), y.row(r).begin());
    std::copy(b.value().row(r).begin(), b.value().row(r).end(), y.row(r).begin() + p);
  }
  Tensor out(std::move(y), detail::any_grad(tape, {&a, &b}));
  if (out.requires_grad()) {
    tape.record([a, b, out, p, q]() mutable {
      const RealMatrix& g = out.mutable_grad();
      RealMatrix ga(g.rows(), p);
      RealMatrix gb(g.rows(), q);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto src = g.row(r);
        std::copy(src.begin(), src.begin() + p, ga.row(r).begin());
        std::copy(src.begin() + p, src.end(), gb.row(r).begin());
      }
      a.accumulate_grad(ga);
      b.accumulate_grad(gb);
    });
  }
  return out;
}

// Stacks tensors vertically; every part must share the column count.
inline Tensor concat_rows(Tape& tape, std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  bool needs_grad = false;
  for (const auto& t : parts) {
    if (t.cols() != cols)
      throw ShapeError(detail::concat("concat_rows: column counts differ ",
                                      parts.front().shape_str(), " vs ", t.shape_str()));
    rows += t.rows();
    needs_grad = needs_grad || t.requires_grad();
  }
  RealMatrix y(rows, cols);
  std::size_t offset = 0;
  for (const auto& t : parts) {
    std::copy(t.value().data().begin(), t.value().data().end(),
              y.data().begin() + static_cast<std::ptrdiff_t>(offset * cols));
    offset += t.rows();
  }
  Tensor out(std::move(y), tape.recording() && needs_grad);
  if (out.requires_grad()) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    tape.record([inputs, out]() mutable {
      const RealMatrix& g = out.mutable_grad();
      std::size_t row0 = 0;
      for (auto& t : inputs) {
        if (t.requires_grad()) {
          const auto first = g.data().begin() + static_cast<std::ptrdiff_t>(row0 * g.cols());
          RealMatrix part(t.rows(), t.cols(),
                          std::vector<double>(first, first + static_cast<std::ptrdiff_t>(t.value().size())));
          t.accumulate_grad(part);
        }
        row0 += t.rows();
      }
    });
  }
  return out;
}

inline Tensor concat_rows(Tape& tape, const Tensor& a, const Tensor& b) {
  const Tensor parts[] = {a, b};
  return concat_rows(tape, std::span<const Tensor>(parts));
}

// Gathers rows by index (embedding lookup, pad-row removal). Repeated indices
// accumulate gradient.
inline Tensor take_rows(Tape& tape, const Tensor& a, std::span<const std::size_t> indices) {
  RealMatrix y(indices.size(), a.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= a.rows())
      throw ShapeError(
          detail::concat("take_rows: index ", indices[i], " out of range for ", a.shape_str()));
    const auto src = a.value().row(indices[i]);
    std::copy(src.begin(), src.end(), y.row(i).begin());
  }
  Tensor out(std::move(y), detail::any_grad(tape, {&a}));
  if (out.requires_grad()) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    tape.record([a, out, idx = std::move(idx)]() mutable {
      const RealMatrix& g = out.mutable_grad();
      RealMatrix& ga = a.mutable_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        auto dst = ga.row(idx[i]);
        auto src = g.row(i);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
      }
    });
  }
  return out;
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  RealMatrix y = a.value();
  linalg::add_inplace(y, b.value());
  Tensor out(std::move(y), detail::any_grad(tape, {&a, &b}));
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      a.accumulate_grad(out.mutable_grad());
      b.accumulate_grad(out.mutable_grad());
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double factor) {
  RealMatrix y = a.value();
  for (double& v : y.data()) v *= factor;
  Tensor out(std::move(y), detail::any_grad(tape, {&a}));
  if (out.requires_grad()) {
    tape.record([a, out, factor]() mutable {
      RealMatrix g = out.mutable_grad();
      for (double& v : g.data()) v *= factor;
      a.accumulate_grad(g);
    });
  }
  return out;
}

// Elementwise product.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  RealMatrix y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  Tensor out(std::move(y), detail::any_grad(tape, {&a, &b}));
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      const RealMatrix& g = out.mutable_grad();
      if (a.requires_grad()) {
        RealMatrix ga = g;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= b.value()[i];
        a.accumulate_grad(ga);
      }
      if (b.requires_grad()) {
        RealMatrix gb = g;
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= a.value()[i];
        b.accumulate_grad(gb);
      }
    });
  }
  return out;
}

inline Tensor sum(Tape& tape, const Tensor& a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  Tensor out(RealMatrix(1, 1, total), detail::any_grad(tape, {&a}));
  if (out.requires_grad()) {
    tape.record([a, out]() mutable {
      a.accumulate_grad(RealMatrix(a.rows(), a.cols(), out.mutable_grad()[0]));
    });
  }
  return out;
}

// Per-row normalisation to zero mean and unit variance, then gain·x̂ + bias.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  const std::size_t d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
    throw ShapeError(detail::concat("layer_norm: gain", gain.shape_str(), " bias",
                                    bias.shape_str(), " do not match width ", d));
  RealMatrix xhat(x.rows(), d);
  std::vector<double> inv_std(x.rows());
  RealMatrix y(x.rows(), d);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.value().row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat(r, c) = (in[c] - mean) * inv_std[r];
      y(r, c) = xhat(r, c) * gain.value()[c] + bias.value()[c];
    }
  }
  Tensor out(std::move(y), detail::any_grad(tape, {&x, &gain, &bias}));
  if (out.requires_grad()) {
    tape.record([x, gain, bias, out, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)]() mutable {
      const RealMatrix& g = out.mutable_grad();
      const std::size_t width = g.cols();
      if (gain.requires_grad() || bias.requires_grad()) {
        RealMatrix dg(1, width);
        RealMatrix db(1, width);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < width; ++c) {
            dg[c] += g(r, c) * xhat(r, c);
            db[c] += g(r, c);
          }
        gain.accumulate_grad(dg);
        bias.accumulate_grad(db);
      }
      if (x.requires_grad()) {
        RealMatrix dx(g.rows(), width);
        const double inv_d = 1.0 / static_cast<double>(width);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          double sum_dxhat = 0.0;
          double sum_dxhat_xhat = 0.0;
          for (std::size_t c = 0; c < width; ++c) {
            const double dxh = g(r, c) * gain.value()[c];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat(r, c);
          }
          for (std::size_t c = 0; c < width; ++c) {
            const double dxh = g(r, c) * gain.value()[c];
            dx(r, c) = inv_std[r] * (dxh - inv_d * sum_dxhat - xhat(r, c) * inv_d * sum_dxhat_xhat);
          }
        }
        x.accumulate_grad(dx);
      }
    });
  }
  return out;
}

// out_i = ⟨a_i, b_i⟩ for each row i; result is r×1.
inline Tensor row_dot(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "row_dot");
  RealMatrix y(a.rows(), 1);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto ar = a.value().row(r);
    const auto br = b.value().row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < ar.size(); ++c) acc += ar[c] * br[c];
    y[r] = acc;
  }
  Tensor out(std::move(y), detail::any_grad(tape, {&a, &b}));
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      const RealMatrix& g = out.mutable_grad();
      if (a.requires_grad()) {
        RealMatrix ga = b.value();
        for (std::size_t r = 0; r < ga.rows(); ++r)
          for (double& v : ga.row(r)) v *= g[r];
        a.accumulate_grad(ga);
      }
      if (b.requires_grad()) {
        RealMatrix gb = a.value();
        for (std::size_t r = 0; r < gb.rows(); ++r)
          for (double& v : gb.row(r)) v *= g[r];
        b.accumulate_grad(gb);
      }
    });
  }
  return out;
}

inline double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Σ_i −[y_i log σ(z_i) + (1−y_i) log(1−σ(z_i))] in logit form; result is 1×1.
inline Tensor bce_with_logits(Tape& tape, const Tensor& logits, std::span<const std::uint8_t> targets) {
  if (targets.size() != logits.value().size())
    throw ShapeError(detail::concat("bce: ", targets.size(), " targets for logits ",
                                    logits.shape_str()));
  double loss = 0.0;
  const auto& z = logits.value().data();
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double y = targets[i] ? 1.0 : 0.0;
    loss += std::max(z[i], 0.0) - z[i] * y + std::log1p(std::exp(-std::abs(z[i])));
  }
  Tensor out(RealMatrix(1, 1, loss), detail::any_grad(tape, {&logits}));
  if (out.requires_grad()) {
    std::vector<std::uint8_t> y(targets.begin(), targets.end());
    tape.record([logits, out, y = std::move(y)]() mutable {
      const double g = out.mutable_grad()[0];
      RealMatrix dz(logits.rows(), logits.cols());
      for (std::size_t i = 0; i < dz.size(); ++i)
        dz[i] = g * (stable_sigmoid(logits.value()[i]) - (y[i] ? 1.0 : 0.0));
      logits.accumulate_grad(dz);
    });
  }
  return out;
}

}  // namespace mhlat
