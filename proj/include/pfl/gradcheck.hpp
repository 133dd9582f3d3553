#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "pfl/tensor.hpp"

namespace pfl {

struct GradCheckResult {
  /// max over coordinates of |analytic - central| / max(1, |analytic|)
  double max_rel_error = 0.0;
  /// false when some coordinate has disagreeing one-sided differences (a kink)
  bool checkable = true;
  std::size_t coordinates = 0;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Central-difference check of d f / d params. `f` rebuilds its trace from the
/// current parameter values on each call and returns a scalar.
inline GradCheckResult grad_check_params(const std::function<Tensor<double>()>& f,
                                         std::vector<Tensor<double>> params, double step = 1e-5,
                                         std::size_t max_coords_per_param = 0) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  auto loss = f();
  if (loss.numel() != 1) throw ShapeError("grad_check needs a scalar function");
  if (!std::isfinite(loss.item())) throw NonFiniteError("grad_check: non-finite function value");
  backward(loss);

  GradCheckResult result;
  auto eval = [&]() {
    NoGradGuard guard;
    double v = f().item();
    if (!std::isfinite(v)) throw NonFiniteError("grad_check: non-finite function value");
    return v;
  };
  const double f0 = eval();
  for (auto& p : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto data = p.data();
    std::size_t n = data.size();
    std::size_t stride = 1;
    if (max_coords_per_param && n > max_coords_per_param) stride = n / max_coords_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      if (!std::isfinite(analytic[i])) throw NonFiniteError("grad_check: non-finite gradient");
      const double orig = data[i];
      data[i] = orig + step;
      const double fp = eval();
      data[i] = orig - step;
      const double fm = eval();
      data[i] = orig;
      const double central = (fp - fm) / (2 * step);
      const double forward = (fp - f0) / step;
      const double backward_diff = (f0 - fm) / step;
      if (std::abs(forward - backward_diff) > 1e-2 * std::max(1.0, std::abs(central))) result.checkable = false;
      result.max_rel_error =
          std::max(result.max_rel_error, std::abs(analytic[i] - central) / std::max(1.0, std::abs(analytic[i])));
      ++result.coordinates;
    }
  }
  return result;
}

/// Single-input form: checks d f(x) / d x at x.
inline GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                  const Tensor<double>& x, double step = 1e-5) {
  Tensor<double> point(x.shape(), x.values(), true);
  return grad_check_params([&]() { return f(point); }, {point}, step);
}

}  // namespace pfl
