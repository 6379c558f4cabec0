#pragma once

// Differentiable tensor ops. Every op validates shapes eagerly, computes its
// value with Eigen and registers a gradient rule through record_op. There is
// no implicit broadcasting; row-wise variants (add_rowwise, mul_rowwise) are
// spelled out.

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "denseclip/tensor.hpp"

namespace denseclip {

namespace detail {

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline void require_rank2(const char* op, const Shape& s) {
  if (s.size() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + to_string(s));
}

// Splits a shape around `axis` into (outer, length, inner) extents.
struct AxisExtent {
  Index outer = 1, length = 1, inner = 1;
};

inline AxisExtent axis_extent(const Shape& shape, Index axis) {
  const auto rank = static_cast<Index>(shape.size());
  if (rank == 0) return {};
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(shape));
  AxisExtent e;
  for (Index i = 0; i < axis; ++i) e.outer *= shape[static_cast<std::size_t>(i)];
  e.length = shape[static_cast<std::size_t>(axis)];
  for (Index i = axis + 1; i < rank; ++i) e.inner *= shape[static_cast<std::size_t>(i)];
  return e;
}

template <typename Scalar>
void require_row(const char* op, const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw DimensionError(std::string(op) + ": row operand " + to_string(row.shape()) +
                         " does not match columns of " + to_string(x.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_rank2("matmul", a.shape());
  detail::require_rank2("matmul", b.shape());
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dims differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  auto an = a.node();
  auto bn = b.node();
  return record_op<Scalar>("matmul", {a.rows(), b.cols()}, a.value() * b.value(), {a, b},
                           [an, bn](const RowMatrix<Scalar>& g) {
                             if (an->requires_grad) an->accumulate(g * bn->value.transpose());
                             if (bn->requires_grad) bn->accumulate(an->value.transpose() * g);
                           });
}

// a * b^T without materializing the transpose.
template <typename Scalar>
BasicTensor<Scalar> matmul_nt(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_rank2("matmul_nt", a.shape());
  detail::require_rank2("matmul_nt", b.shape());
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner dims differ, " + to_string(a.shape()) + " x " + to_string(b.shape()) + "^T");
  }
  auto an = a.node();
  auto bn = b.node();
  return record_op<Scalar>("matmul_nt", {a.rows(), b.rows()}, a.value() * b.value().transpose(), {a, b},
                           [an, bn](const RowMatrix<Scalar>& g) {
                             if (an->requires_grad) an->accumulate(g * bn->value);
                             if (bn->requires_grad) bn->accumulate(g.transpose() * an->value);
                           });
}

template <typename Scalar>
BasicTensor<Scalar> transpose(const BasicTensor<Scalar>& a) {
  detail::require_rank2("transpose", a.shape());
  auto an = a.node();
  return record_op<Scalar>("transpose", {a.cols(), a.rows()}, a.value().transpose(), {a},
                           [an](const RowMatrix<Scalar>& g) { an->accumulate(g.transpose()); });
}

// x W^T + b for x [n x in], W [out x in], b [out].
template <typename Scalar>
BasicTensor<Scalar> linear(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& weight,
                           const BasicTensor<Scalar>& bias) {
  detail::require_rank2("linear", x.shape());
  detail::require_rank2("linear", weight.shape());
  if (x.cols() != weight.cols() || bias.size() != weight.rows()) {
    throw DimensionError("linear: input " + to_string(x.shape()) + ", weight " + to_string(weight.shape()) +
                         ", bias " + to_string(bias.shape()));
  }
  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias.node();
  RowMatrix<Scalar> y = x.value() * weight.value().transpose();
  y.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.data(), bias.size());
  return record_op<Scalar>("linear", {x.rows(), weight.rows()}, std::move(y), {x, weight, bias},
                           [xn, wn, bn](const RowMatrix<Scalar>& g) {
                             if (xn->requires_grad) xn->accumulate(g * wn->value);
                             if (wn->requires_grad) wn->accumulate(g.transpose() * xn->value);
                             if (bn->requires_grad) {
                               RowMatrix<Scalar> db = g.colwise().sum();
                               db.resize(bn->value.rows(), bn->value.cols());
                               bn->accumulate(db);
                             }
                           });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
BasicTensor<Scalar> add(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  auto an = a.node();
  auto bn = b.node();
  return record_op<Scalar>("add", a.shape(), a.value() + b.value(), {a, b}, [an, bn](const RowMatrix<Scalar>& g) {
    an->accumulate(g);
    bn->accumulate(g);
  });
}

template <typename Scalar>
BasicTensor<Scalar> sub(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_shape("sub", a.shape(), b.shape());
  auto an = a.node();
  auto bn = b.node();
  return record_op<Scalar>("sub", a.shape(), a.value() - b.value(), {a, b}, [an, bn](const RowMatrix<Scalar>& g) {
    an->accumulate(g);
    bn->accumulate(-g);
  });
}

template <typename Scalar>
BasicTensor<Scalar> mul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  auto an = a.node();
  auto bn = b.node();
  return record_op<Scalar>("mul", a.shape(), a.value().cwiseProduct(b.value()), {a, b},
                           [an, bn](const RowMatrix<Scalar>& g) {
                             if (an->requires_grad) an->accumulate(g.cwiseProduct(bn->value));
                             if (bn->requires_grad) bn->accumulate(g.cwiseProduct(an->value));
                           });
}

template <typename Scalar>
BasicTensor<Scalar> scale(const BasicTensor<Scalar>& a, Scalar factor) {
  auto an = a.node();
  return record_op<Scalar>("scale", a.shape(), a.value() * factor, {a},
                           [an, factor](const RowMatrix<Scalar>& g) { an->accumulate(g * factor); });
}

// Scalar-tensor multiply where the scalar is itself differentiable.
template <typename Scalar>
BasicTensor<Scalar> scale_by(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& s) {
  if (s.size() != 1) throw DimensionError("scale_by: expected a scalar factor, got " + to_string(s.shape()));
  auto an = a.node();
  auto sn = s.node();
  return record_op<Scalar>("scale_by", a.shape(), a.value() * s.item(), {a, s}, [an, sn](const RowMatrix<Scalar>& g) {
    if (an->requires_grad) an->accumulate(g * sn->value(0, 0));
    if (sn->requires_grad) sn->accumulate(RowMatrix<Scalar>::Constant(1, 1, g.cwiseProduct(an->value).sum()));
  });
}

// x + row, the row repeated over every row of x.
template <typename Scalar>
BasicTensor<Scalar> add_rowwise(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& row) {
  detail::require_row("add_rowwise", x, row);
  auto xn = x.node();
  auto rn = row.node();
  RowMatrix<Scalar> y = x.value();
  y.rowwise() += row.value().row(0);
  return record_op<Scalar>("add_rowwise", x.shape(), std::move(y), {x, row}, [xn, rn](const RowMatrix<Scalar>& g) {
    xn->accumulate(g);
    if (rn->requires_grad) rn->accumulate(g.colwise().sum());
  });
}

// x * row elementwise, the row repeated over every row of x.
template <typename Scalar>
BasicTensor<Scalar> mul_rowwise(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& row) {
  detail::require_row("mul_rowwise", x, row);
  auto xn = x.node();
  auto rn = row.node();
  RowMatrix<Scalar> y = x.value().array().rowwise() * row.value().row(0).array();
  return record_op<Scalar>("mul_rowwise", x.shape(), std::move(y), {x, row}, [xn, rn](const RowMatrix<Scalar>& g) {
    if (xn->requires_grad) xn->accumulate((g.array().rowwise() * rn->value.row(0).array()).matrix());
    if (rn->requires_grad) rn->accumulate(g.cwiseProduct(xn->value).colwise().sum());
  });
}

template <typename Scalar>
BasicTensor<Scalar> gelu(const BasicTensor<Scalar>& x) {
  constexpr Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  constexpr Scalar inv_sqrt2pi = Scalar(0.39894228040143267794);
  auto xn = x.node();
  RowMatrix<Scalar> y = x.value().unaryExpr([](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2)); });
  return record_op<Scalar>("gelu", x.shape(), std::move(y), {x}, [xn](const RowMatrix<Scalar>& g) {
    RowMatrix<Scalar> d = xn->value.unaryExpr([](Scalar v) {
      return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(Scalar(-0.5) * v * v);
    });
    xn->accumulate(g.cwiseProduct(d));
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
BasicTensor<Scalar> sum(const BasicTensor<Scalar>& x) {
  auto xn = x.node();
  return record_op<Scalar>("sum", {}, RowMatrix<Scalar>::Constant(1, 1, x.value().sum()), {x},
                           [xn](const RowMatrix<Scalar>& g) {
                             xn->accumulate(RowMatrix<Scalar>::Constant(xn->value.rows(), xn->value.cols(), g(0, 0)));
                           });
}

template <typename Scalar>
BasicTensor<Scalar> mean(const BasicTensor<Scalar>& x) {
  if (x.size() == 0) throw DimensionError("mean of an empty tensor");
  const Scalar n = static_cast<Scalar>(x.size());
  return scale(sum(x), Scalar(1) / n);
}

// Mean over rows of a matrix, keeping a 1 x C result.
template <typename Scalar>
BasicTensor<Scalar> mean_rows(const BasicTensor<Scalar>& x) {
  detail::require_rank2("mean_rows", x.shape());
  if (x.rows() == 0) throw DimensionError("mean_rows of an empty matrix");
  auto xn = x.node();
  const Scalar inv = Scalar(1) / static_cast<Scalar>(x.rows());
  return record_op<Scalar>("mean_rows", {1, x.cols()}, x.value().colwise().sum() * inv, {x},
                           [xn, inv](const RowMatrix<Scalar>& g) {
                             RowMatrix<Scalar> d = g.replicate(xn->value.rows(), 1) * inv;
                             xn->accumulate(d);
                           });
}

// ---------------------------------------------------------------------------
// Normalizations

// Numerically stable softmax along `axis`.
template <typename Scalar>
BasicTensor<Scalar> softmax(const BasicTensor<Scalar>& x, Index axis = -1) {
  const auto e = detail::axis_extent(x.shape(), axis);
  RowMatrix<Scalar> y(x.rows(), x.cols());
  const Scalar* in = x.data();
  Scalar* out = y.data();
  if (e.inner == 1) {
    // contiguous slices: vectorized path
    using Map = Eigen::Map<RowMatrix<Scalar>>;
    const Eigen::Map<const RowMatrix<Scalar>> xs(in, e.outer, e.length);
    Map ys(out, e.outer, e.length);
    ys = (xs.colwise() - xs.rowwise().maxCoeff()).array().exp().matrix();
    ys.array().colwise() /= ys.rowwise().sum().array();
    auto xn = x.node();
    RowMatrix<Scalar> y_copy = y;
    return record_op<Scalar>("softmax", x.shape(), std::move(y), {x},
                             [xn, e, yv = std::move(y_copy)](const RowMatrix<Scalar>& g) {
                               const Eigen::Map<const RowMatrix<Scalar>> ym(yv.data(), e.outer, e.length);
                               const Eigen::Map<const RowMatrix<Scalar>> gm(g.data(), e.outer, e.length);
                               RowMatrix<Scalar> d =
                                   ym.cwiseProduct(gm - gm.cwiseProduct(ym).rowwise().sum().replicate(1, e.length));
                               xn->accumulate(Eigen::Map<const RowMatrix<Scalar>>(d.data(), g.rows(), g.cols()));
                             });
  }
  for (Index o = 0; o < e.outer; ++o) {
    for (Index i = 0; i < e.inner; ++i) {
      const Index base = o * e.length * e.inner + i;
      Scalar m = -std::numeric_limits<Scalar>::infinity();
      for (Index k = 0; k < e.length; ++k) m = std::max(m, in[base + k * e.inner]);
      Scalar z = 0;
      for (Index k = 0; k < e.length; ++k) z += (out[base + k * e.inner] = std::exp(in[base + k * e.inner] - m));
      for (Index k = 0; k < e.length; ++k) out[base + k * e.inner] /= z;
    }
  }
  auto xn = x.node();
  RowMatrix<Scalar> y_copy = y;
  return record_op<Scalar>("softmax", x.shape(), std::move(y), {x},
                           [xn, e, yv = std::move(y_copy)](const RowMatrix<Scalar>& g) {
                             const Scalar* ys = yv.data();
                             const Scalar* gv = g.data();
                             RowMatrix<Scalar> d(g.rows(), g.cols());
                             Scalar* dv = d.data();
                             for (Index o = 0; o < e.outer; ++o) {
                               for (Index i = 0; i < e.inner; ++i) {
                                 const Index base = o * e.length * e.inner + i;
                                 Scalar dot = 0;
                                 for (Index k = 0; k < e.length; ++k) dot += gv[base + k * e.inner] * ys[base + k * e.inner];
                                 for (Index k = 0; k < e.length; ++k) {
                                   const Index at = base + k * e.inner;
                                   dv[at] = ys[at] * (gv[at] - dot);
                                 }
                               }
                             }
                             xn->accumulate(d);
                           });
}

// x / max(||x||, eps) along `axis`.
template <typename Scalar>
BasicTensor<Scalar> l2_normalize(const BasicTensor<Scalar>& x, Index axis = -1, Scalar eps = Scalar(1e-12)) {
  const auto e = detail::axis_extent(x.shape(), axis);
  RowMatrix<Scalar> y(x.rows(), x.cols());
  std::vector<Scalar> norms(static_cast<std::size_t>(e.outer * e.inner));
  const Scalar* in = x.data();
  Scalar* out = y.data();
  for (Index o = 0; o < e.outer; ++o) {
    for (Index i = 0; i < e.inner; ++i) {
      const Index base = o * e.length * e.inner + i;
      Scalar ss = 0;
      for (Index k = 0; k < e.length; ++k) ss += in[base + k * e.inner] * in[base + k * e.inner];
      const Scalar n = std::sqrt(ss);
      norms[static_cast<std::size_t>(o * e.inner + i)] = n;
      const Scalar denom = std::max(n, eps);
      for (Index k = 0; k < e.length; ++k) out[base + k * e.inner] = in[base + k * e.inner] / denom;
    }
  }
  auto xn = x.node();
  RowMatrix<Scalar> y_copy = y;
  return record_op<Scalar>(
      "l2_normalize", x.shape(), std::move(y), {x},
      [xn, e, eps, norms = std::move(norms), yv = std::move(y_copy)](const RowMatrix<Scalar>& g) {
        RowMatrix<Scalar> d(g.rows(), g.cols());
        const Scalar* gv = g.data();
        const Scalar* ys = yv.data();
        Scalar* dv = d.data();
        for (Index o = 0; o < e.outer; ++o) {
          for (Index i = 0; i < e.inner; ++i) {
            const Index base = o * e.length * e.inner + i;
            const Scalar n = norms[static_cast<std::size_t>(o * e.inner + i)];
            if (n < eps) {
              for (Index k = 0; k < e.length; ++k) dv[base + k * e.inner] = gv[base + k * e.inner] / eps;
              continue;
            }
            Scalar dot = 0;
            for (Index k = 0; k < e.length; ++k) dot += gv[base + k * e.inner] * ys[base + k * e.inner];
            for (Index k = 0; k < e.length; ++k) {
              const Index at = base + k * e.inner;
              dv[at] = (gv[at] - ys[at] * dot) / n;
            }
          }
        }
        xn->accumulate(d);
      });
}

// Per-row standardization followed by the affine (scale, shift).
template <typename Scalar>
BasicTensor<Scalar> layer_norm(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& scale_row,
                               const BasicTensor<Scalar>& shift_row, Scalar eps = Scalar(1e-5)) {
  detail::require_row("layer_norm", x, scale_row);
  detail::require_row("layer_norm", x, shift_row);
  const Index n = x.rows();
  const Index c = x.cols();
  RowMatrix<Scalar> xhat(n, c);
  std::vector<Scalar> inv_std(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) {
    const Scalar mu = x.value().row(r).mean();
    const Scalar var = (x.value().row(r).array() - mu).square().mean();
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    xhat.row(r) = (x.value().row(r).array() - mu) * is;
  }
  RowMatrix<Scalar> y = xhat.array().rowwise() * scale_row.value().row(0).array();
  y.rowwise() += shift_row.value().row(0);
  auto xn = x.node();
  auto gn = scale_row.node();
  auto bn = shift_row.node();
  return record_op<Scalar>(
      "layer_norm", x.shape(), std::move(y), {x, scale_row, shift_row},
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std)](const RowMatrix<Scalar>& g) {
        if (gn->requires_grad) gn->accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (bn->requires_grad) bn->accumulate(g.colwise().sum());
        if (!xn->requires_grad) return;
        RowMatrix<Scalar> dxhat = g.array().rowwise() * gn->value.row(0).array();
        RowMatrix<Scalar> dx(g.rows(), g.cols());
        for (Index r = 0; r < g.rows(); ++r) {
          const Scalar m1 = dxhat.row(r).mean();
          const Scalar m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
          dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std[static_cast<std::size_t>(r)];
        }
        xn->accumulate(dx);
      });
}

// ---------------------------------------------------------------------------
// Losses

// Mean negative log-likelihood of softmax(logits) at the given labels.
template <typename Scalar>
BasicTensor<Scalar> cross_entropy(const BasicTensor<Scalar>& logits, std::span<const int> labels) {
  detail::require_rank2("cross_entropy", logits.shape());
  const Index n = logits.rows();
  const Index k = logits.cols();
  if (static_cast<Index>(labels.size()) != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  }
  if (n == 0) throw DimensionError("cross_entropy: no rows");
  for (Index r = 0; r < n; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= k) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " at row " + std::to_string(r) +
                       " outside [0, " + std::to_string(k) + ")");
    }
  }
  RowMatrix<Scalar> probs(n, k);
  Scalar total = 0;
  for (Index r = 0; r < n; ++r) {
    const Scalar m = logits.value().row(r).maxCoeff();
    probs.row(r) = (logits.value().row(r).array() - m).exp();
    const Scalar z = probs.row(r).sum();
    probs.row(r) /= z;
    total += m + std::log(z) - logits.value()(r, labels[static_cast<std::size_t>(r)]);
  }
  auto ln = logits.node();
  std::vector<int> ys(labels.begin(), labels.end());
  return record_op<Scalar>("cross_entropy", {}, RowMatrix<Scalar>::Constant(1, 1, total / static_cast<Scalar>(n)),
                           {logits}, [ln, probs = std::move(probs), ys = std::move(ys)](const RowMatrix<Scalar>& g) {
                             RowMatrix<Scalar> d = probs;
                             for (std::size_t r = 0; r < ys.size(); ++r) d(static_cast<Index>(r), ys[r]) -= Scalar(1);
                             ln->accumulate(d * (g(0, 0) / static_cast<Scalar>(ys.size())));
                           });
}

// Mean binary cross-entropy of sigmoid(logits) against binary targets, in the
// max(x,0) - x t + log(1 + exp(-|x|)) form.
template <typename Scalar>
BasicTensor<Scalar> bce_with_logits(const BasicTensor<Scalar>& logits, const BasicTensor<Scalar>& targets) {
  detail::require_same_shape("bce_with_logits", logits.shape(), targets.shape());
  if (logits.size() == 0) throw DimensionError("bce_with_logits: empty input");
  const auto& t = targets.value();
  for (Index i = 0; i < t.size(); ++i) {
    const Scalar v = t.data()[i];
    if (v != Scalar(0) && v != Scalar(1)) {
      throw ValidationError("bce_with_logits: target entry " + std::to_string(i) + " is not binary");
    }
  }
  const auto& x = logits.value();
  const Scalar total = (x.array().max(Scalar(0)) - x.array() * t.array() + (-x.array().abs()).exp().log1p()).sum();
  const Scalar count = static_cast<Scalar>(x.size());
  auto ln = logits.node();
  auto tn = targets.node();
  return record_op<Scalar>("bce_with_logits", {}, RowMatrix<Scalar>::Constant(1, 1, total / count), {logits},
                           [ln, tn, count](const RowMatrix<Scalar>& g) {
                             RowMatrix<Scalar> sig = ln->value.unaryExpr([](Scalar v) {
                               return v >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-v))
                                             : std::exp(v) / (Scalar(1) + std::exp(v));
                             });
                             ln->accumulate((sig - tn->value) * (g(0, 0) / count));
                           });
}

// ---------------------------------------------------------------------------
// Structural

template <typename Scalar>
BasicTensor<Scalar> reshape(const BasicTensor<Scalar>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  const auto [rows, cols] = matrix_extent(shape);
  RowMatrix<Scalar> y = Eigen::Map<const RowMatrix<Scalar>>(x.data(), rows, cols);
  auto xn = x.node();
  return record_op<Scalar>("reshape", std::move(shape), std::move(y), {x}, [xn](const RowMatrix<Scalar>& g) {
    xn->accumulate(Eigen::Map<const RowMatrix<Scalar>>(g.data(), xn->value.rows(), xn->value.cols()));
  });
}

template <typename Scalar>
BasicTensor<Scalar> concat_rows(std::span<const BasicTensor<Scalar>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    detail::require_rank2("concat_rows", p.shape());
    if (p.cols() != cols) throw DimensionError("concat_rows: column mismatch " + to_string(p.shape()));
    rows += p.rows();
  }
  RowMatrix<Scalar> y(rows, cols);
  Index at = 0;
  std::vector<std::shared_ptr<TensorNode<Scalar>>> nodes;
  bool grad = false;
  for (const auto& p : parts) {
    y.middleRows(at, p.rows()) = p.value();
    at += p.rows();
    nodes.push_back(p.node());
    grad = grad || p.requires_grad();
  }
  // record_op takes a fixed list; route through a single synthetic input when any part needs grad.
  BasicTensor<Scalar> out(Shape{rows, cols}, std::move(y), false);
  auto* tape = BasicTape<Scalar>::active();
  if (tape == nullptr || !grad) return out;
  out.node()->requires_grad = true;
  out.node()->leaf = false;
  tape->push({"concat_rows", nodes, out.node(), [nodes](const RowMatrix<Scalar>& g) {
                Index off = 0;
                for (const auto& n : nodes) {
                  if (n->requires_grad) n->accumulate(g.middleRows(off, n->value.rows()));
                  off += n->value.rows();
                }
              }});
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> concat_rows(std::initializer_list<BasicTensor<Scalar>> parts) {
  std::vector<BasicTensor<Scalar>> v(parts);
  return concat_rows<Scalar>(std::span<const BasicTensor<Scalar>>(v));
}

template <typename Scalar>
BasicTensor<Scalar> concat_cols(std::span<const BasicTensor<Scalar>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    detail::require_rank2("concat_cols", p.shape());
    if (p.rows() != rows) throw DimensionError("concat_cols: row mismatch " + to_string(p.shape()));
    cols += p.cols();
  }
  RowMatrix<Scalar> y(rows, cols);
  Index at = 0;
  std::vector<std::shared_ptr<TensorNode<Scalar>>> nodes;
  bool grad = false;
  for (const auto& p : parts) {
    y.middleCols(at, p.cols()) = p.value();
    at += p.cols();
    nodes.push_back(p.node());
    grad = grad || p.requires_grad();
  }
  BasicTensor<Scalar> out(Shape{rows, cols}, std::move(y), false);
  auto* tape = BasicTape<Scalar>::active();
  if (tape == nullptr || !grad) return out;
  out.node()->requires_grad = true;
  out.node()->leaf = false;
  tape->push({"concat_cols", nodes, out.node(), [nodes](const RowMatrix<Scalar>& g) {
                Index off = 0;
                for (const auto& n : nodes) {
                  if (n->requires_grad) n->accumulate(g.middleCols(off, n->value.cols()));
                  off += n->value.cols();
                }
              }});
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> concat_cols(std::initializer_list<BasicTensor<Scalar>> parts) {
  std::vector<BasicTensor<Scalar>> v(parts);
  return concat_cols<Scalar>(std::span<const BasicTensor<Scalar>>(v));
}

template <typename Scalar>
BasicTensor<Scalar> slice_rows(const BasicTensor<Scalar>& x, Index begin, Index count) {
  detail::require_rank2("slice_rows", x.shape());
  if (begin < 0 || count < 0 || begin + count > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " +
                         to_string(x.shape()));
  }
  auto xn = x.node();
  return record_op<Scalar>("slice_rows", {count, x.cols()}, x.value().middleRows(begin, count), {x},
                           [xn, begin, count](const RowMatrix<Scalar>& g) {
                             RowMatrix<Scalar> d = RowMatrix<Scalar>::Zero(xn->value.rows(), xn->value.cols());
                             d.middleRows(begin, count) = g;
                             xn->accumulate(d);
                           });
}

template <typename Scalar>
BasicTensor<Scalar> slice_cols(const BasicTensor<Scalar>& x, Index begin, Index count) {
  detail::require_rank2("slice_cols", x.shape());
  if (begin < 0 || count < 0 || begin + count > x.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " +
                         to_string(x.shape()));
  }
  auto xn = x.node();
  return record_op<Scalar>("slice_cols", {x.rows(), count}, x.value().middleCols(begin, count), {x},
                           [xn, begin, count](const RowMatrix<Scalar>& g) {
                             RowMatrix<Scalar> d = RowMatrix<Scalar>::Zero(xn->value.rows(), xn->value.cols());
                             d.middleCols(begin, count) = g;
                             xn->accumulate(d);
                           });
}

// out[i, :] = table[index[i], :]; gradients scatter-add back into the table.
template <typename Scalar>
BasicTensor<Scalar> gather_rows(const BasicTensor<Scalar>& table, std::span<const Index> index) {
  detail::require_rank2("gather_rows", table.shape());
  const auto n = static_cast<Index>(index.size());
  RowMatrix<Scalar> y(n, table.cols());
  for (Index i = 0; i < n; ++i) {
    const Index r = index[static_cast<std::size_t>(i)];
    if (r < 0 || r >= table.rows()) {
      throw IndexError("gather_rows: row " + std::to_string(r) + " outside table of " + std::to_string(table.rows()));
    }
    y.row(i) = table.value().row(r);
  }
  auto tn = table.node();
  std::vector<Index> idx(index.begin(), index.end());
  return record_op<Scalar>("gather_rows", {n, table.cols()}, std::move(y), {table},
                           [tn, idx = std::move(idx)](const RowMatrix<Scalar>& g) {
                             RowMatrix<Scalar> d = RowMatrix<Scalar>::Zero(tn->value.rows(), tn->value.cols());
                             for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += g.row(static_cast<Index>(i));
                             tn->accumulate(d);
                           });
}

// Flat gather: out.flat[i] = x.flat[index[i]], reshaped to `shape`.
template <typename Scalar>
BasicTensor<Scalar> take(const BasicTensor<Scalar>& x, std::span<const Index> index, Shape shape) {
  if (numel(shape) != static_cast<Index>(index.size())) {
    throw DimensionError("take: " + std::to_string(index.size()) + " indices for shape " + to_string(shape));
  }
  const auto [rows, cols] = matrix_extent(shape);
  RowMatrix<Scalar> y(rows, cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const Index at = index[i];
    if (at < 0 || at >= x.size()) throw IndexError("take: flat index " + std::to_string(at) + " out of range");
    y.data()[i] = x.data()[at];
  }
  auto xn = x.node();
  std::vector<Index> idx(index.begin(), index.end());
  return record_op<Scalar>("take", std::move(shape), std::move(y), {x}, [xn, idx = std::move(idx)](const RowMatrix<Scalar>& g) {
    RowMatrix<Scalar> d = RowMatrix<Scalar>::Zero(xn->value.rows(), xn->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) d.data()[idx[i]] += g.data()[i];
    xn->accumulate(d);
  });
}

// ---------------------------------------------------------------------------
// Operators

template <typename Scalar>
BasicTensor<Scalar> operator+(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  return add(a, b);
}

template <typename Scalar>
BasicTensor<Scalar> operator-(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  return sub(a, b);
}

template <typename Scalar>
BasicTensor<Scalar> operator*(const BasicTensor<Scalar>& a, Scalar s) {
  return scale(a, s);
}

}  // namespace denseclip
