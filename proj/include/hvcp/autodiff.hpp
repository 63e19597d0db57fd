#pragma once

// Reverse-mode automatic differentiation over dense rank-N double tensors.
// Graphs are built define-by-run: every op records a node with a backward
// closure only when some input requires a gradient, so inference runs with
// zero tape overhead. Replaying forward+backward on identical inputs yields
// bit-identical results; nothing here depends on pointer values or clocks.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "hvcp/core.hpp"

namespace hvcp::ad {

namespace testing {
// Deliberately skews the relu backward rule when set; exists so gradient
// checking can be demonstrated to catch a wrong vjp. Never set in real runs.
inline bool corrupt_relu_vjp = false;
}  // namespace testing

namespace detail {

inline double logistic_scalar(double x) {
  if (x >= 0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus_scalar(double x) {
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace detail

class Graph;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<double>>(std::move(data))) {
    check(numel(shape_) == data_->size(),
          "tensor: data size " + std::to_string(data_->size()) + " does not match shape " +
              shape_str(shape_));
  }
  Tensor(Shape shape, std::shared_ptr<const std::vector<double>> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check(data_ && numel(shape_) == data_->size(), "tensor: data size does not match shape");
  }

  static Tensor zeros(Shape shape) {
    std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double v) {
    std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  const std::vector<double>& data() const {
    check(static_cast<bool>(data_), "tensor: empty");
    return *data_;
  }
  std::shared_ptr<const std::vector<double>> data_ptr() const { return data_; }

  double value() const {
    check(size() == 1, "tensor: value() requires a scalar, got shape " + shape_str(shape_));
    return (*data_)[0];
  }

  int node() const { return node_; }
  bool requires_grad() const { return requires_grad_; }

 private:
  friend class Graph;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  int node_ = -1;
  bool requires_grad_ = false;
};

inline Tensor constant(Shape shape, std::vector<double> data) {
  return Tensor(std::move(shape), std::move(data));
}

// Gradient map returned by Graph::backward: leaf node id -> gradient tensor.
using GradMap = std::map<int, Tensor>;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  std::size_t node_count() const { return nodes_.size(); }

  // ---- leaves -------------------------------------------------------------

  Tensor leaf(const Tensor& value, bool requires_grad) {
    Tensor t = value;
    if (!requires_grad || !grad_enabled_) {
      t.node_ = -1;
      t.requires_grad_ = false;
      return t;
    }
    t.node_ = record("leaf", t.shape(), {});
    nodes_[static_cast<std::size_t>(t.node_)].is_leaf = true;
    t.requires_grad_ = true;
    return t;
  }

  // ---- elementwise binary -------------------------------------------------

  Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add); }
  Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub); }
  Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul); }

  Tensor scale(const Tensor& x, double s) {
    std::vector<double> out(x.size());
    const auto& xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * s;
    Tensor t(x.shape(), std::move(out));
    if (!track(x)) return t;
    int xi = x.node_;
    t.node_ = record("scale", t.shape(), [this, xi, s](const std::vector<double>& g) {
      auto& gx = grad_buf(xi, g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
    });
    t.requires_grad_ = true;
    return t;
  }

  Tensor add_scalar(const Tensor& x, double s) {
    std::vector<double> out(x.size());
    const auto& xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + s;
    Tensor t(x.shape(), std::move(out));
    if (!track(x)) return t;
    int xi = x.node_;
    t.node_ = record("add_scalar", t.shape(), [this, xi](const std::vector<double>& g) {
      auto& gx = grad_buf(xi, g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    t.requires_grad_ = true;
    return t;
  }

  Tensor neg(const Tensor& x) { return scale(x, -1.0); }

  // ---- elementwise unary --------------------------------------------------

  Tensor relu(const Tensor& x) {
    return unary(x, "relu", [](double v) { return v > 0 ? v : 0.0; },
                 // subgradient at 0 is 0
                 [](double v, double /*y*/) {
                   if (v <= 0) return 0.0;
                   return testing::corrupt_relu_vjp ? 1.02 : 1.0;
                 });
  }

  Tensor softplus(const Tensor& x) {
    return unary(x, "softplus", detail::softplus_scalar,
                 [](double v, double /*y*/) { return detail::logistic_scalar(v); });
  }

  Tensor logistic(const Tensor& x) {
    return unary(x, "logistic", detail::logistic_scalar,
                 [](double /*v*/, double y) { return y * (1.0 - y); });
  }

  Tensor tanh_fn(const Tensor& x) {
    return unary(x, "tanh", [](double v) { return std::tanh(v); },
                 [](double /*v*/, double y) { return 1.0 - y * y; });
  }

  Tensor exp_fn(const Tensor& x) {
    return unary(x, "exp", [](double v) { return std::exp(v); },
                 [](double /*v*/, double y) { return y; });
  }

  Tensor log_fn(const Tensor& x) {
    return unary(x, "log", [](double v) { return std::log(v); },
                 [](double v, double /*y*/) { return 1.0 / v; });
  }

  Tensor clamp(const Tensor& x, double lo, double hi) {
    check(lo <= hi, "clamp: lo > hi");
    return unary_impl(x, "clamp",
                      [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
                      [lo, hi](double v, double /*y*/) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
  }

  // ---- shape ops ----------------------------------------------------------

  Tensor reshape(const Tensor& x, Shape shape) {
    check(numel(shape) == x.size(), "reshape: cannot view " + shape_str(x.shape()) + " as " +
                                        shape_str(shape) + " (" + std::to_string(x.size()) +
                                        " vs " + std::to_string(numel(shape)) + " elements)");
    Tensor t(shape, x.data_ptr());
    if (!track(x)) return t;
    int xi = x.node_;
    t.node_ = record("reshape", shape, [this, xi](const std::vector<double>& g) {
      auto& gx = grad_buf(xi, g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    t.requires_grad_ = true;
    return t;
  }

  Tensor broadcast_to(const Tensor& x, const Shape& target) {
    if (x.shape() == target) return x;
    const Shape& src = x.shape();
    check(src.size() <= target.size(),
          "broadcast: rank of " + shape_str(src) + " exceeds target " + shape_str(target));
    std::size_t off = target.size() - src.size();
    // Source stride per target axis; 0 where the source extent is 1 or absent.
    auto src_strides = strides_of(src);
    std::vector<std::size_t> eff(target.size(), 0);
    for (std::size_t a = 0; a < target.size(); ++a) {
      if (a < off) continue;
      std::size_t se = src[a - off];
      check(se == 1 || se == target[a], "broadcast: axis " + std::to_string(a) + " of " +
                                            shape_str(src) + " incompatible with " +
                                            shape_str(target));
      if (se != 1) eff[a] = src_strides[a - off];
    }
    std::size_t n = numel(target);
    std::vector<double> out(n);
    const auto& xd = x.data();
    {
      std::vector<std::size_t> idx(target.size(), 0);
      for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t sflat = 0;
        for (std::size_t a = 0; a < target.size(); ++a) sflat += idx[a] * eff[a];
        out[flat] = xd[sflat];
        for (std::size_t a = target.size(); a-- > 0;) {
          if (++idx[a] < target[a]) break;
          idx[a] = 0;
        }
      }
    }
    Tensor t(target, std::move(out));
    if (!track(x)) return t;
    int xi = x.node_;
    std::size_t xs = x.size();
    t.node_ = record("broadcast", target,
                     [this, xi, xs, eff, target](const std::vector<double>& g) {
                       auto& gx = grad_buf(xi, xs);
                       std::vector<std::size_t> idx(target.size(), 0);
                       for (std::size_t flat = 0; flat < g.size(); ++flat) {
                         std::size_t sflat = 0;
                         for (std::size_t a = 0; a < target.size(); ++a) sflat += idx[a] * eff[a];
                         gx[sflat] += g[flat];
                         for (std::size_t a = target.size(); a-- > 0;) {
                           if (++idx[a] < target[a]) break;
                           idx[a] = 0;
                         }
                       }
                     });
    t.requires_grad_ = true;
    return t;
  }

  Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    check(!parts.empty(), "concat: no inputs");
    const Shape& s0 = parts[0].shape();
    check(axis < s0.size(), "concat: axis out of range for " + shape_str(s0));
    Shape out_shape = s0;
    std::size_t total_ax = 0;
    for (const auto& p : parts) {
      const Shape& s = p.shape();
      check(s.size() == s0.size(), "concat: rank mismatch");
      for (std::size_t a = 0; a < s.size(); ++a)
        check(a == axis || s[a] == s0[a], "concat: extent mismatch off-axis between " +
                                              shape_str(s0) + " and " + shape_str(s));
      total_ax += s[axis];
    }
    out_shape[axis] = total_ax;
    std::size_t outer = 1, inner = 1;
    for (std::size_t a = 0; a < axis; ++a) outer *= s0[a];
    for (std::size_t a = axis + 1; a < s0.size(); ++a) inner *= s0[a];

    std::vector<double> out(numel(out_shape));
    std::size_t row = total_ax * inner;
    std::size_t offset = 0;
    for (const auto& p : parts) {
      std::size_t pax = p.shape()[axis] * inner;
      const auto& pd = p.data();
      for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * row + offset, pd.data() + o * pax, pax * sizeof(double));
      offset += pax;
    }
    Tensor t(out_shape, std::move(out));
    bool any = false;
    for (const auto& p : parts) any = any || track(p);
    if (!any) return t;
    struct Piece {
      int node;
      std::size_t width;  // elements along axis*inner per outer row
    };
    std::vector<Piece> pieces;
    for (const auto& p : parts) pieces.push_back({p.node_, p.shape()[axis] * inner});
    t.node_ = record("concat", out_shape,
                     [this, pieces, outer, row](const std::vector<double>& g) {
                       std::size_t offset = 0;
                       for (const auto& pc : pieces) {
                         if (pc.node >= 0) {
                           auto& gx = grad_buf(pc.node, outer * pc.width);
                           for (std::size_t o = 0; o < outer; ++o) {
                             const double* src = g.data() + o * row + offset;
                             double* dst = gx.data() + o * pc.width;
                             for (std::size_t i = 0; i < pc.width; ++i) dst[i] += src[i];
                           }
                         }
                         offset += pc.width;
                       }
                     });
    t.requires_grad_ = true;
    return t;
  }

  Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t stop) {
    const Shape& s = x.shape();
    check(axis < s.size(), "slice: axis out of range for " + shape_str(s));
    check(start <= stop && stop <= s[axis], "slice: bad range [" + std::to_string(start) + "," +
                                                std::to_string(stop) + ") on " + shape_str(s));
    Shape out_shape = s;
    out_shape[axis] = stop - start;
    std::size_t outer = 1, inner = 1;
    for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
    for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
    std::size_t in_row = s[axis] * inner, out_row = (stop - start) * inner;
    std::vector<double> out(numel(out_shape));
    const auto& xd = x.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * out_row, xd.data() + o * in_row + start * inner,
                  out_row * sizeof(double));
    Tensor t(out_shape, std::move(out));
    if (!track(x)) return t;
    int xi = x.node_;
    std::size_t xs = x.size();
    t.node_ = record("slice", out_shape,
                     [this, xi, xs, outer, inner, in_row, out_row, start](
                         const std::vector<double>& g) {
                       auto& gx = grad_buf(xi, xs);
                       for (std::size_t o = 0; o < outer; ++o) {
                         const double* src = g.data() + o * out_row;
                         double* dst = gx.data() + o * in_row + start * inner;
                         for (std::size_t i = 0; i < out_row; ++i) dst[i] += src[i];
                       }
                     });
    t.requires_grad_ = true;
    return t;
  }

  // ---- reductions ---------------------------------------------------------

  Tensor reduce_sum(const Tensor& x, std::vector<std::size_t> axes, bool keepdims = false) {
    const Shape& s = x.shape();
    std::sort(axes.begin(), axes.end());
    check(std::unique(axes.begin(), axes.end()) == axes.end(), "reduce_sum: repeated axis");
    for (auto a : axes) check(a < s.size(), "reduce_sum: axis out of range for " + shape_str(s));
    std::vector<bool> reduced(s.size(), false);
    for (auto a : axes) reduced[a] = true;
    Shape out_shape;
    for (std::size_t a = 0; a < s.size(); ++a) {
      if (!reduced[a])
        out_shape.push_back(s[a]);
      else if (keepdims)
        out_shape.push_back(1);
    }
    // Output stride per input axis (0 on reduced axes).
    Shape kept;
    for (std::size_t a = 0; a < s.size(); ++a)
      if (!reduced[a]) kept.push_back(s[a]);
    auto kept_strides = strides_of(kept);
    std::vector<std::size_t> eff(s.size(), 0);
    std::size_t ki = 0;
    for (std::size_t a = 0; a < s.size(); ++a)
      if (!reduced[a]) eff[a] = kept_strides[ki++];

    std::vector<double> out(numel(out_shape), 0.0);
    const auto& xd = x.data();
    {
      std::vector<std::size_t> idx(s.size(), 0);
      for (std::size_t flat = 0; flat < xd.size(); ++flat) {
        std::size_t oflat = 0;
        for (std::size_t a = 0; a < s.size(); ++a) oflat += idx[a] * eff[a];
        out[oflat] += xd[flat];
        for (std::size_t a = s.size(); a-- > 0;) {
          if (++idx[a] < s[a]) break;
          idx[a] = 0;
        }
      }
    }
    Tensor t(out_shape, std::move(out));
    if (!track(x)) return t;
    int xi = x.node_;
    Shape in_shape = s;
    t.node_ = record("reduce_sum", out_shape,
                     [this, xi, in_shape, eff](const std::vector<double>& g) {
                       std::size_t n = numel(in_shape);
                       auto& gx = grad_buf(xi, n);
                       std::vector<std::size_t> idx(in_shape.size(), 0);
                       for (std::size_t flat = 0; flat < n; ++flat) {
                         std::size_t oflat = 0;
                         for (std::size_t a = 0; a < in_shape.size(); ++a)
                           oflat += idx[a] * eff[a];
                         gx[flat] += g[oflat];
                         for (std::size_t a = in_shape.size(); a-- > 0;) {
                           if (++idx[a] < in_shape[a]) break;
                           idx[a] = 0;
                         }
                       }
                     });
    t.requires_grad_ = true;
    return t;
  }

  Tensor reduce_mean(const Tensor& x, std::vector<std::size_t> axes, bool keepdims = false) {
    std::size_t count = 1;
    for (auto a : axes) {
      check(a < x.shape().size(), "reduce_mean: axis out of range");
      count *= x.shape()[a];
    }
    check(count > 0, "reduce_mean: empty reduction");
    return scale(reduce_sum(x, std::move(axes), keepdims), 1.0 / static_cast<double>(count));
  }

  Tensor sum_all(const Tensor& x) {
    std::vector<std::size_t> axes(x.shape().size());
    for (std::size_t a = 0; a < axes.size(); ++a) axes[a] = a;
    return reduce_sum(x, std::move(axes));
  }

  Tensor mean_all(const Tensor& x) {
    check(x.size() > 0, "mean_all: empty tensor");
    return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
  }

  // ---- matmul (rank 2) ----------------------------------------------------

  Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    check(sa.size() == 2 && sb.size() == 2,
          "matmul: expects rank-2 operands, got " + shape_str(sa) + " and " + shape_str(sb));
    check(sa[1] == sb[0],
          "matmul: inner extents differ: " + shape_str(sa) + " x " + shape_str(sb));
    std::size_t m = sa[0], k = sa[1], n = sb[1];
    std::vector<double> out(m * n, 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
      double* orow = out.data() + i * n;
      const double* arow = ad + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        double av = arow[p];
        if (av == 0.0) continue;
        const double* brow = bd + p * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
    Tensor t(Shape{m, n}, std::move(out));
    bool ta = track(a), tb = track(b);
    if (!ta && !tb) return t;
    int ai = a.node_, bi = b.node_;
    auto apd = a.data_ptr();
    auto bpd = b.data_ptr();
    t.node_ = record("matmul", t.shape(),
                     [this, ai, bi, apd, bpd, m, k, n](const std::vector<double>& g) {
                       const double* ad = apd->data();
                       const double* bd = bpd->data();
                       if (ai >= 0) {
                         auto& ga = grad_buf(ai, m * k);
                         for (std::size_t i = 0; i < m; ++i) {
                           const double* grow = g.data() + i * n;
                           double* garow = ga.data() + i * k;
                           for (std::size_t p = 0; p < k; ++p) {
                             const double* brow = bd + p * n;
                             double acc = 0.0;
                             for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                             garow[p] += acc;
                           }
                         }
                       }
                       if (bi >= 0) {
                         auto& gb = grad_buf(bi, k * n);
                         for (std::size_t i = 0; i < m; ++i) {
                           const double* grow = g.data() + i * n;
                           const double* arow = ad + i * k;
                           for (std::size_t p = 0; p < k; ++p) {
                             double av = arow[p];
                             if (av == 0.0) continue;
                             double* gbrow = gb.data() + p * n;
                             for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                           }
                         }
                       }
                     });
    t.requires_grad_ = true;
    return t;
  }

  // ---- gather / segment reductions ----------------------------------------

  // Rows of x indexed by idx; x has shape (N, rest...), result (idx.size(), rest...).
  Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
    const Shape& s = x.shape();
    check(!s.empty(), "gather_rows: rank-0 input");
    std::size_t nrows = s[0];
    std::size_t rowsz = s[0] ? x.size() / s[0] : 0;
    for (auto i : idx) check(i < nrows, "gather_rows: index " + std::to_string(i) +
                                            " out of range for " + shape_str(s));
    Shape out_shape = s;
    out_shape[0] = idx.size();
    std::vector<double> out(idx.size() * rowsz);
    const auto& xd = x.data();
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::memcpy(out.data() + r * rowsz, xd.data() + idx[r] * rowsz, rowsz * sizeof(double));
    Tensor t(out_shape, std::move(out));
    if (!track(x)) return t;
    int xi = x.node_;
    std::size_t xs = x.size();
    t.node_ = record("gather_rows", out_shape,
                     [this, xi, xs, idx, rowsz](const std::vector<double>& g) {
                       auto& gx = grad_buf(xi, xs);
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         const double* src = g.data() + r * rowsz;
                         double* dst = gx.data() + idx[r] * rowsz;
                         for (std::size_t i = 0; i < rowsz; ++i) dst[i] += src[i];
                       }
                     });
    t.requires_grad_ = true;
    return t;
  }

  // Per-segment max over rows of x (N,C); empty segments produce zeros.
  // Ties break to the first contributing row, so gradients are deterministic.
  Tensor segment_max(const Tensor& x, const std::vector<std::size_t>& seg,
                     std::size_t num_segments) {
    const Shape& s = x.shape();
    check(s.size() == 2, "segment_max: expects (N,C), got " + shape_str(s));
    check(seg.size() == s[0], "segment_max: segment ids size mismatch");
    std::size_t N = s[0], C = s[1];
    for (auto sid : seg) check(sid < num_segments, "segment_max: segment id out of range");
    std::vector<double> out(num_segments * C, 0.0);
    std::vector<std::ptrdiff_t> argmax(num_segments * C, -1);
    const auto& xd = x.data();
    for (std::size_t r = 0; r < N; ++r) {
      std::size_t sid = seg[r];
      const double* row = xd.data() + r * C;
      for (std::size_t c = 0; c < C; ++c) {
        auto& am = argmax[sid * C + c];
        double& cur = out[sid * C + c];
        if (am < 0 || row[c] > cur) {
          cur = row[c];
          am = static_cast<std::ptrdiff_t>(r);
        }
      }
    }
    Tensor t(Shape{num_segments, C}, std::move(out));
    if (!track(x)) return t;
    int xi = x.node_;
    t.node_ = record("segment_max", t.shape(),
                     [this, xi, argmax, N, C](const std::vector<double>& g) {
                       auto& gx = grad_buf(xi, N * C);
                       for (std::size_t i = 0; i < argmax.size(); ++i)
                         if (argmax[i] >= 0)
                           gx[static_cast<std::size_t>(argmax[i]) * C + i % C] += g[i];
                     });
    t.requires_grad_ = true;
    return t;
  }

  // Per-segment mean over rows of x (N,C); empty segments produce zeros.
  Tensor segment_mean(const Tensor& x, const std::vector<std::size_t>& seg,
                      std::size_t num_segments) {
    const Shape& s = x.shape();
    check(s.size() == 2, "segment_mean: expects (N,C), got " + shape_str(s));
    check(seg.size() == s[0], "segment_mean: segment ids size mismatch");
    std::size_t N = s[0], C = s[1];
    std::vector<double> counts(num_segments, 0.0);
    for (auto sid : seg) {
      check(sid < num_segments, "segment_mean: segment id out of range");
      counts[sid] += 1.0;
    }
    std::vector<double> out(num_segments * C, 0.0);
    const auto& xd = x.data();
    for (std::size_t r = 0; r < N; ++r) {
      const double* row = xd.data() + r * C;
      double* orow = out.data() + seg[r] * C;
      for (std::size_t c = 0; c < C; ++c) orow[c] += row[c];
    }
    for (std::size_t sid = 0; sid < num_segments; ++sid)
      if (counts[sid] > 0)
        for (std::size_t c = 0; c < C; ++c) out[sid * C + c] /= counts[sid];
    Tensor t(Shape{num_segments, C}, std::move(out));
    if (!track(x)) return t;
    int xi = x.node_;
    t.node_ = record("segment_mean", t.shape(),
                     [this, xi, seg, counts, N, C](const std::vector<double>& g) {
                       auto& gx = grad_buf(xi, N * C);
                       for (std::size_t r = 0; r < N; ++r) {
                         double inv = 1.0 / counts[seg[r]];
                         const double* grow = g.data() + seg[r] * C;
                         double* gxrow = gx.data() + r * C;
                         for (std::size_t c = 0; c < C; ++c) gxrow[c] += grow[c] * inv;
                       }
                     });
    t.requires_grad_ = true;
    return t;
  }

  // ---- rank-one sum contraction -------------------------------------------

  // out[i,j,k,t] = sum_r vx[i,r,t] * vy[j,r,t] * vz[k,r,t]
  Tensor cp_contract(const Tensor& vx, const Tensor& vy, const Tensor& vz) {
    const Shape& sx = vx.shape();
    const Shape& sy = vy.shape();
    const Shape& sz = vz.shape();
    check(sx.size() == 3 && sy.size() == 3 && sz.size() == 3,
          "cp_contract: factors must be rank 3");
    check(sx[1] == sy[1] && sx[1] == sz[1] && sx[2] == sy[2] && sx[2] == sz[2],
          "cp_contract: rank/channel extents differ: " + shape_str(sx) + " " + shape_str(sy) +
              " " + shape_str(sz));
    std::size_t H = sx[0], W = sy[0], D = sz[0], R = sx[1], C = sx[2];
    std::size_t RC = R * C;
    std::vector<double> out(H * W * D * C, 0.0);
    const double* xd = vx.data().data();
    const double* yd = vy.data().data();
    const double* zd = vz.data().data();
    std::vector<double> pxy(RC);
    for (std::size_t i = 0; i < H; ++i) {
      const double* xrow = xd + i * RC;
      for (std::size_t j = 0; j < W; ++j) {
        const double* yrow = yd + j * RC;
        for (std::size_t q = 0; q < RC; ++q) pxy[q] = xrow[q] * yrow[q];
        for (std::size_t k = 0; k < D; ++k) {
          const double* zrow = zd + k * RC;
          double* orow = out.data() + ((i * W + j) * D + k) * C;
          for (std::size_t r = 0; r < R; ++r) {
            const double* p = pxy.data() + r * C;
            const double* zz = zrow + r * C;
            for (std::size_t t = 0; t < C; ++t) orow[t] += p[t] * zz[t];
          }
        }
      }
    }
    Tensor t(Shape{H, W, D, C}, std::move(out));
    bool tx = track(vx), ty = track(vy), tz = track(vz);
    if (!tx && !ty && !tz) return t;
    int xi = vx.node_, yi = vy.node_, zi = vz.node_;
    auto xp = vx.data_ptr();
    auto yp = vy.data_ptr();
    auto zp = vz.data_ptr();
    t.node_ = record(
        "cp_contract", t.shape(),
        [this, xi, yi, zi, xp, yp, zp, H, W, D, R, C](const std::vector<double>& g) {
          std::size_t RC = R * C;
          const double* xd = xp->data();
          const double* yd = yp->data();
          const double* zd = zp->data();
          double* gx = xi >= 0 ? grad_buf(xi, H * RC).data() : nullptr;
          double* gy = yi >= 0 ? grad_buf(yi, W * RC).data() : nullptr;
          double* gz = zi >= 0 ? grad_buf(zi, D * RC).data() : nullptr;
          for (std::size_t i = 0; i < H; ++i) {
            const double* xrow = xd + i * RC;
            for (std::size_t j = 0; j < W; ++j) {
              const double* yrow = yd + j * RC;
              for (std::size_t k = 0; k < D; ++k) {
                const double* zrow = zd + k * RC;
                const double* grow = g.data() + ((i * W + j) * D + k) * C;
                for (std::size_t r = 0; r < R; ++r) {
                  std::size_t b = r * C;
                  for (std::size_t t2 = 0; t2 < C; ++t2) {
                    double gg = grow[t2];
                    if (gg == 0.0) continue;
                    double xv = xrow[b + t2], yv = yrow[b + t2], zv = zrow[b + t2];
                    if (gx) gx[i * RC + b + t2] += gg * yv * zv;
                    if (gy) gy[j * RC + b + t2] += gg * xv * zv;
                    if (gz) gz[k * RC + b + t2] += gg * xv * yv;
                  }
                }
              }
            }
          }
        });
    t.requires_grad_ = true;
    return t;
  }

  // ---- trilinear sampling ---------------------------------------------------

  // vol is (H,W,D,C) with voxel centers at ((i+0.5)/H - 0.5); queries (M,3) are
  // plain coordinates in [-0.5,0.5]^3 and are not differentiated through.
  // Outside the center lattice the field clamps to the border value.
  Tensor trilinear_sample(const Tensor& vol, const Tensor& queries) {
    const Shape& sv = vol.shape();
    const Shape& sq = queries.shape();
    check(sv.size() == 4, "trilinear_sample: volume must be (H,W,D,C), got " + shape_str(sv));
    check(sq.size() == 2 && sq[1] == 3,
          "trilinear_sample: queries must be (M,3), got " + shape_str(sq));
    std::size_t H = sv[0], W = sv[1], D = sv[2], C = sv[3], M = sq[0];
    check(H >= 2 && W >= 2 && D >= 2, "trilinear_sample: resolution must be >= 2 per axis");
    auto qp = queries.data_ptr();

    struct Corner {
      std::size_t i0[3];
      double tfrac[3];
    };
    auto locate = [](const std::vector<double>& qd, std::size_t res0, std::size_t res1,
                     std::size_t res2, std::size_t m) {
      Corner c;
      std::size_t res[3] = {res0, res1, res2};
      for (int a = 0; a < 3; ++a) {
        double p = qd[m * 3 + a];
        check(p >= -0.5 - 1e-9 && p <= 0.5 + 1e-9,
              "trilinear_sample: query outside unit cube");
        double u = (p + 0.5) * static_cast<double>(res[a]) - 0.5;
        double f = std::floor(u);
        double lo = 0.0, hi = static_cast<double>(res[a] - 2);
        double fi = std::min(std::max(f, lo), hi);
        c.i0[a] = static_cast<std::size_t>(fi);
        c.tfrac[a] = std::min(std::max(u - fi, 0.0), 1.0);
      }
      return c;
    };

    std::vector<double> out(M * C, 0.0);
    const double* vd = vol.data().data();
    for (std::size_t m = 0; m < M; ++m) {
      Corner c = locate(*qp, H, W, D, m);
      for (int dx = 0; dx < 2; ++dx)
        for (int dy = 0; dy < 2; ++dy)
          for (int dz = 0; dz < 2; ++dz) {
            double w = (dx ? c.tfrac[0] : 1 - c.tfrac[0]) * (dy ? c.tfrac[1] : 1 - c.tfrac[1]) *
                       (dz ? c.tfrac[2] : 1 - c.tfrac[2]);
            if (w == 0.0) continue;
            const double* cell =
                vd + (((c.i0[0] + dx) * W + (c.i0[1] + dy)) * D + (c.i0[2] + dz)) * C;
            double* orow = out.data() + m * C;
            for (std::size_t t = 0; t < C; ++t) orow[t] += w * cell[t];
          }
    }
    Tensor t(Shape{M, C}, std::move(out));
    if (!track(vol)) return t;
    int vi = vol.node_;
    std::size_t vs = vol.size();
    t.node_ = record("trilinear_sample", t.shape(),
                     [this, vi, vs, locate, qp, M, H, W, D, C](const std::vector<double>& g) {
                       auto& gv = grad_buf(vi, vs);
                       for (std::size_t m = 0; m < M; ++m) {
                         Corner c = locate(*qp, H, W, D, m);
                         for (int dx = 0; dx < 2; ++dx)
                           for (int dy = 0; dy < 2; ++dy)
                             for (int dz = 0; dz < 2; ++dz) {
                               double w = (dx ? c.tfrac[0] : 1 - c.tfrac[0]) *
                                          (dy ? c.tfrac[1] : 1 - c.tfrac[1]) *
                                          (dz ? c.tfrac[2] : 1 - c.tfrac[2]);
                               if (w == 0.0) continue;
                               double* cell = gv.data() + (((c.i0[0] + dx) * W + (c.i0[1] + dy)) *
                                                               D +
                                                           (c.i0[2] + dz)) *
                                                              C;
                               const double* grow = g.data() + m * C;
                               for (std::size_t t = 0; t < C; ++t) cell[t] += w * grow[t];
                             }
                       }
                     });
    t.requires_grad_ = true;
    return t;
  }

  // ---- backward -------------------------------------------------------------

  // Gradient of a scalar loss with respect to every grad-requiring leaf.
  // Leaves not reachable from the loss get zero gradients. Calling backward
  // repeatedly on the same graph is allowed and deterministic.
  GradMap backward(const Tensor& loss) {
    check(loss.size() == 1, "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    GradMap result;
    grads_.assign(nodes_.size(), {});
    if (loss.node_ >= 0) {
      grads_[static_cast<std::size_t>(loss.node_)].assign(1, 1.0);
      for (int id = loss.node_; id >= 0; --id) {
        auto& g = grads_[static_cast<std::size_t>(id)];
        if (g.empty()) continue;
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.backward) {
          n.backward(g);
          g.clear();
          g.shrink_to_fit();
        }
      }
    }
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      const Node& n = nodes_[id];
      if (!n.is_leaf) continue;
      auto& g = grads_[id];
      if (g.empty()) g.assign(numel(n.shape), 0.0);
      result.emplace(static_cast<int>(id), Tensor(n.shape, std::move(g)));
    }
    grads_.clear();
    return result;
  }

 private:
  struct Node {
    const char* kind;
    bool is_leaf = false;
    Shape shape;
    std::function<void(const std::vector<double>&)> backward;
  };

  enum class BinOp { add, sub, mul };

  bool track(const Tensor& t) const { return grad_enabled_ && t.node_ >= 0; }

  int record(const char* kind, Shape shape,
             std::function<void(const std::vector<double>&)> bwd) {
    nodes_.push_back(Node{kind, false, std::move(shape), std::move(bwd)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<double>& grad_buf(int id, std::size_t size) {
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(size, 0.0);
    return g;
  }

  Tensor unary(const Tensor& x, const char* kind, double (*fwd)(double),
               double (*dfn)(double, double)) {
    return unary_impl(x, kind, fwd, dfn);
  }

  template <typename F, typename DF>
  Tensor unary_impl(const Tensor& x, const char* kind, F fwd, DF dfn) {
    std::vector<double> out(x.size());
    const auto& xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
    Tensor t(x.shape(), std::move(out));
    if (!track(x)) return t;
    int xi = x.node_;
    auto xp = x.data_ptr();
    auto yp = t.data_ptr();
    t.node_ = record(kind, t.shape(), [this, xi, xp, yp, dfn](const std::vector<double>& g) {
      auto& gx = grad_buf(xi, g.size());
      const auto& xv = *xp;
      const auto& yv = *yp;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfn(xv[i], yv[i]);
    });
    t.requires_grad_ = true;
    return t;
  }

  static Shape broadcast_shape(const Shape& a, const Shape& b) {
    std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
      std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
      std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
      check(ea == eb || ea == 1 || eb == 1,
            "elementwise: shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
      out[i] = std::max(ea, eb);
    }
    return out;
  }

  Tensor binary(const Tensor& a0, const Tensor& b0, BinOp op) {
    Tensor a = a0, b = b0;
    if (a.shape() != b.shape()) {
      Shape target = broadcast_shape(a.shape(), b.shape());
      a = broadcast_to(a, target);
      b = broadcast_to(b, target);
    }
    const auto& ad = a.data();
    const auto& bd = b.data();
    std::vector<double> out(a.size());
    switch (op) {
      case BinOp::add:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
        break;
      case BinOp::sub:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
        break;
      case BinOp::mul:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
        break;
    }
    Tensor t(a.shape(), std::move(out));
    bool ta = track(a), tb = track(b);
    if (!ta && !tb) return t;
    int ai = a.node_, bi = b.node_;
    auto ap = a.data_ptr();
    auto bp = b.data_ptr();
    const char* kind = op == BinOp::add ? "add" : (op == BinOp::sub ? "sub" : "mul");
    t.node_ = record(kind, t.shape(), [this, ai, bi, ap, bp, op](const std::vector<double>& g) {
      if (ai >= 0) {
        auto& ga = grad_buf(ai, g.size());
        switch (op) {
          case BinOp::add:
          case BinOp::sub:
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            break;
          case BinOp::mul: {
            const auto& bv = *bp;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
            break;
          }
        }
      }
      if (bi >= 0) {
        auto& gb = grad_buf(bi, g.size());
        switch (op) {
          case BinOp::add:
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            break;
          case BinOp::sub:
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            break;
          case BinOp::mul: {
            const auto& av = *ap;
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
            break;
          }
        }
      }
    });
    t.requires_grad_ = true;
    return t;
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool grad_enabled_ = true;
};

// ---- numeric gradient checking ---------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_entry = 0;
};

// fn builds a scalar loss from graph leaves created for each input tensor.
// Central differences with step eps; relative error per entry is
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline GradCheckReport grad_check(
    const std::function<Tensor(Graph&, const std::vector<Tensor>&)>& fn,
    const std::vector<Tensor>& inputs, double eps = 1e-5) {
  check(eps > 0, "grad_check: eps must be positive");

  // Analytic pass.
  Graph g;
  std::vector<Tensor> leaves;
  for (const auto& t : inputs) leaves.push_back(g.leaf(t, true));
  Tensor loss = fn(g, leaves);
  check(loss.size() == 1, "grad_check: fn must return a scalar");
  check(std::isfinite(loss.value()), "grad_check: non-finite loss");
  GradMap grads = g.backward(loss);

  GradCheckReport rep;
  for (std::size_t pi = 0; pi < inputs.size(); ++pi) {
    const Tensor& base = inputs[pi];
    std::vector<double> analytic(base.size(), 0.0);
    if (leaves[pi].node() >= 0) {
      auto it = grads.find(leaves[pi].node());
      if (it != grads.end()) analytic = it->second.data();
    }
    for (std::size_t e = 0; e < base.size(); ++e) {
      auto probe = [&](double delta) {
        std::vector<Tensor> shifted = inputs;
        std::vector<double> d = base.data();
        d[e] += delta;
        shifted[pi] = Tensor(base.shape(), std::move(d));
        Graph gg;
        gg.set_grad_enabled(false);
        std::vector<Tensor> ls;
        for (const auto& t : shifted) ls.push_back(gg.leaf(t, false));
        Tensor l = fn(gg, ls);
        double v = l.value();
        check(std::isfinite(v), "grad_check: non-finite loss at probe of input " +
                                    std::to_string(pi) + " entry " + std::to_string(e));
        return v;
      };
      double numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
      double a = analytic[e];
      double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst_param = pi;
        rep.worst_entry = e;
      }
    }
  }
  return rep;
}

}  // namespace hvcp::ad
