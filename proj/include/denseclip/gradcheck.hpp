#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "denseclip/ops.hpp"

namespace denseclip {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<double> per_tensor;  // one entry per checked tensor
  double tolerance = 0.0;
  bool passed = true;
};

namespace detail {

// Norm-wise relative error ||a - n|| / max(||a||, ||n||). Reported as 0 when
// both norms sit below zero_tol, i.e. the gradient vanishes on both sides up to
// finite-difference noise.
template <typename Derived1, typename Derived2>
double relative_error(const Eigen::MatrixBase<Derived1>& analytic, const Eigen::MatrixBase<Derived2>& numeric,
                      double zero_tol = 0.0) {
  const double scale = std::max(analytic.norm(), numeric.norm());
  if (scale == 0.0 || scale < zero_tol) return 0.0;
  return (analytic - numeric).norm() / scale;
}

}  // namespace detail

// Compares reverse-mode gradients of f with respect to `wrt` against central
// differences. f closes over the tensors in `wrt`; they are perturbed in place
// and restored. Non-scalar outputs are contracted with fixed pseudo-random
// weights so that every output entry contributes.
template <typename Scalar>
GradCheckReport grad_check(const std::function<BasicTensor<Scalar>()>& f, std::vector<BasicTensor<Scalar>> wrt,
                           double step = 1e-5, double tol = 1e-5, std::uint64_t seed = 0x5eed,
                           double zero_tol = 1e-8) {
  std::vector<bool> had_flag;
  for (auto& t : wrt) {
    had_flag.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.clear_grad();
  }

  RowMatrix<Scalar> weights;
  auto contract = [&](const BasicTensor<Scalar>& out) {
    if (out.size() == 1) return out;
    if (weights.rows() != out.rows() || weights.cols() != out.cols()) {
      std::mt19937_64 rng(seed);
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      weights.resize(out.rows(), out.cols());
      for (Index i = 0; i < weights.size(); ++i) weights.data()[i] = static_cast<Scalar>(u(rng));
    }
    return sum(mul(out, BasicTensor<Scalar>(out.shape(), weights)));
  };

  std::vector<RowMatrix<Scalar>> analytic;
  {
    BasicTape<Scalar> tape;
    BasicTapeScope<Scalar> scope(tape);
    auto loss = contract(f());
    tape.backward(loss);
    for (auto& t : wrt) {
      analytic.push_back(t.has_grad() ? t.grad() : RowMatrix<Scalar>::Zero(t.rows(), t.cols()));
    }
  }

  GradCheckReport report;
  report.tolerance = tol;
  {
    BasicNoGradScope<Scalar> no_grad;
    for (std::size_t k = 0; k < wrt.size(); ++k) {
      auto& t = wrt[k];
      RowMatrix<Scalar> numeric(t.rows(), t.cols());
      for (Index i = 0; i < t.size(); ++i) {
        Scalar& v = t.mutable_data()[i];
        const Scalar saved = v;
        v = saved + static_cast<Scalar>(step);
        const Scalar up = contract(f()).item();
        v = saved - static_cast<Scalar>(step);
        const Scalar down = contract(f()).item();
        v = saved;
        numeric.data()[i] = (up - down) / static_cast<Scalar>(2 * step);
      }
      const double err = detail::relative_error(analytic[k].template cast<double>(), numeric.template cast<double>(), zero_tol);
      report.per_tensor.push_back(err);
      report.max_rel_error = std::max(report.max_rel_error, err);
    }
  }
  report.passed = report.max_rel_error < tol;

  for (std::size_t k = 0; k < wrt.size(); ++k) {
    wrt[k].clear_grad();
    wrt[k].set_requires_grad(had_flag[k]);
  }
  return report;
}

// Single-input form: f maps x to a tensor.
template <typename Scalar>
GradCheckReport grad_check(const std::function<BasicTensor<Scalar>(const BasicTensor<Scalar>&)>& f,
                           BasicTensor<Scalar> x, double step = 1e-5, double tol = 1e-5) {
  return grad_check<Scalar>(std::function<BasicTensor<Scalar>()>([&f, x] { return f(x); }), {x}, step, tol);
}

}  // namespace denseclip
