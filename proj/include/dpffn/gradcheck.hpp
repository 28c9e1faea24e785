#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "dpffn/rng.hpp"
#include "dpffn/tensor.hpp"

namespace dpffn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

using TensorFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences (f(x + eps e_k) - f(x - eps e_k)) / (2 eps).
///
/// Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8). With
/// `coords_per_input` > 0, inputs larger than that are checked on a random
/// subsample of that many coordinates (drawn from `seed`).
inline GradCheckResult grad_check(const TensorFn& f, const std::vector<Tensor<double>>& inputs, double eps = 1e-5,
                                  std::size_t coords_per_input = 0, std::uint64_t seed = 0) {
  for (const auto& t : inputs) {
    if (!t.is_leaf() || !t.requires_grad()) throw GraphError("grad_check inputs must be leaves requiring grad");
    const_cast<Tensor<double>&>(t).zero_grad();
  }
  const auto y = f(inputs);
  if (y.numel() != 1) throw ShapeError("grad_check: function must be scalar-valued");
  backward(y);

  GradCheckResult res;
  Rng rng(seed);
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto x = inputs[i];
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    std::vector<std::size_t> coords(x.numel());
    for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
    if (coords_per_input > 0 && coords.size() > coords_per_input) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(coords_per_input);
      std::sort(coords.begin(), coords.end());
    }
    for (auto k : coords) {
      const double orig = x.data()[k];
      x.data()[k] = orig + eps;
      const double fp = f(inputs).item();
      x.data()[k] = orig - eps;
      const double fm = f(inputs).item();
      x.data()[k] = orig;
      const double num = (fp - fm) / (2.0 * eps);
      const double a = analytic[k];
      const double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-8});
      ++res.coordinates_checked;
      if (err > res.max_rel_error || res.coordinates_checked == 1) {
        res.max_rel_error = err;
        res.worst_input = i;
        res.worst_index = k;
        res.worst_analytic = a;
        res.worst_numeric = num;
      }
    }
  }
  return res;
}

/// Single-input convenience form.
inline GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                  const Tensor<double>& x, double eps = 1e-5, std::size_t coords = 0) {
  return grad_check([&](const std::vector<Tensor<double>>& in) { return f(in[0]); }, {x}, eps, coords);
}

}  // namespace dpffn
