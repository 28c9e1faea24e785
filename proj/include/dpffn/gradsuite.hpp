#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "dpffn/gradcheck.hpp"
#include "dpffn/loss.hpp"
#include "dpffn/model.hpp"

namespace dpffn {

struct GradCase {
  std::string name;
  double tolerance = 1e-5;
  std::function<GradCheckResult()> run;
};

struct GradCaseReport {
  std::string name;
  double tolerance = 0.0;
  GradCheckResult result;
  double seconds = 0.0;
  bool passed() const { return result.max_rel_error < tolerance; }
};

namespace detail {

// Random leaf with entries uniform in [lo, hi], optionally pushed away from
// zero by `gap` so kinked ops are differentiable at every sample point.
inline Tensor<double> rand_leaf(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, double gap = 0.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    x = rng.uniform(lo, hi);
    if (gap > 0.0 && std::abs(x) < gap) x = x < 0 ? x - gap : x + gap;
  }
  return Tensor<double>::from(std::move(shape), std::move(v), true);
}

// Weighted sum so every output coordinate gets a distinct upstream gradient.
inline Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return sum_all(mul(y, Tensor<double>::from(y.shape(), std::move(w))));
}

inline GradCase op_case(std::string name, std::vector<Tensor<double>> inputs,
                        std::function<Tensor<double>(const std::vector<Tensor<double>>&)> f, double tol = 1e-5) {
  return {std::move(name), tol, [inputs, f] {
            return grad_check([f](const std::vector<Tensor<double>>& in) { return probe(f(in)); }, inputs, 1e-6);
          }};
}

}  // namespace detail

/// Configuration used by the end-to-end check: d = 16, 2 heads, M = N = 1,
/// T = 4, L = 32, 3 classes.
inline DpffnConfig tiny_config() {
  DpffnConfig c;
  c.d_model = 16;
  c.num_heads = 2;
  c.global_depth = 1;
  c.local_depth = 1;
  c.num_classes = 3;
  c.input_bins = 32;
  return c;
}

/// Every registered differentiable op, a few composite layers, the losses,
/// and the end-to-end total loss of the tiny model.
inline std::vector<GradCase> gradient_suite() {
  using T = Tensor<double>;
  using V = std::vector<T>;
  using detail::op_case;
  using detail::rand_leaf;
  Rng rng(2024);
  std::vector<GradCase> cases;

  cases.push_back(op_case("add", {rand_leaf(rng, {3, 4}), rand_leaf(rng, {4})}, [](const V& in) { return add(in[0], in[1]); }));
  cases.push_back(op_case("sub", {rand_leaf(rng, {3, 1}), rand_leaf(rng, {3, 4})}, [](const V& in) { return sub(in[0], in[1]); }));
  cases.push_back(op_case("mul", {rand_leaf(rng, {2, 3, 4}), rand_leaf(rng, {3, 1})}, [](const V& in) { return mul(in[0], in[1]); }));
  cases.push_back(op_case("div", {rand_leaf(rng, {3, 4}), rand_leaf(rng, {3, 4}, 0.5, 2.0)},
                          [](const V& in) { return div(in[0], in[1]); }));
  cases.push_back(op_case("scale", {rand_leaf(rng, {5})}, [](const V& in) { return scale(in[0], -2.5); }));
  cases.push_back(op_case("add_scalar", {rand_leaf(rng, {5})}, [](const V& in) { return mul(add_scalar(in[0], 0.7), in[0]); }));
  cases.push_back(op_case("relu", {rand_leaf(rng, {4, 5}, -1.0, 1.0, 0.05)}, [](const V& in) { return relu(in[0]); }));
  cases.push_back(op_case("tanh", {rand_leaf(rng, {4, 5}, -2.0, 2.0)}, [](const V& in) { return tanh(in[0]); }));
  cases.push_back(op_case("sigmoid", {rand_leaf(rng, {4, 5}, -4.0, 4.0)}, [](const V& in) { return sigmoid(in[0]); }));
  cases.push_back(op_case("exp", {rand_leaf(rng, {6})}, [](const V& in) { return exp(in[0]); }));
  cases.push_back(op_case("log", {rand_leaf(rng, {6}, 0.2, 3.0)}, [](const V& in) { return log(in[0]); }));
  cases.push_back(op_case("sqrt", {rand_leaf(rng, {6}, 0.2, 3.0)}, [](const V& in) { return sqrt(in[0]); }));
  cases.push_back(op_case("abs", {rand_leaf(rng, {6}, -1.0, 1.0, 0.05)}, [](const V& in) { return abs(in[0]); }));
  cases.push_back(op_case("clamp_min", {rand_leaf(rng, {8}, -1.0, 1.0, 0.1)}, [](const V& in) { return clamp_min(in[0], 0.0); }));
  cases.push_back(op_case("reshape", {rand_leaf(rng, {2, 6})}, [](const V& in) { return reshape(in[0], {3, 4}); }));
  cases.push_back(op_case("permute", {rand_leaf(rng, {2, 3, 4})}, [](const V& in) { return permute(in[0], {2, 0, 1}); }));
  cases.push_back(op_case("transpose", {rand_leaf(rng, {2, 3, 4})}, [](const V& in) { return transpose(in[0]); }));
  cases.push_back(op_case("concat", {rand_leaf(rng, {2, 3}), rand_leaf(rng, {2, 2})},
                          [](const V& in) { return concat<double>({in[0], in[1]}, -1); }));
  cases.push_back(op_case("slice", {rand_leaf(rng, {4, 5})}, [](const V& in) { return slice(in[0], 1, 1, 3); }));
  cases.push_back(op_case("sum", {rand_leaf(rng, {3, 4})}, [](const V& in) { return sum(in[0], 0); }));
  cases.push_back(op_case("mean", {rand_leaf(rng, {3, 4})}, [](const V& in) { return mean(in[0], 1, true); }));
  cases.push_back(op_case("sum_all", {rand_leaf(rng, {3, 4})}, [](const V& in) { return mul(sum_all(in[0]), sum_all(in[0])); }));
  cases.push_back(op_case("mean_all", {rand_leaf(rng, {3, 4})}, [](const V& in) { return exp(mean_all(in[0])); }));
  cases.push_back(op_case("softmax", {rand_leaf(rng, {3, 5}, -2.0, 2.0)}, [](const V& in) { return softmax(in[0], -1); }));
  cases.push_back(op_case("layer_norm", {rand_leaf(rng, {3, 6}), rand_leaf(rng, {6}), rand_leaf(rng, {6})},
                          [](const V& in) { return layer_norm(in[0], in[1], in[2], -1); }));
  cases.push_back(op_case("layer_norm_axis1", {rand_leaf(rng, {1, 4, 5}), rand_leaf(rng, {4}), rand_leaf(rng, {4})},
                          [](const V& in) { return layer_norm(in[0], in[1], in[2], 1); }));
  cases.push_back(op_case("matmul", {rand_leaf(rng, {3, 4}), rand_leaf(rng, {4, 2})}, [](const V& in) { return matmul(in[0], in[1]); }));
  cases.push_back(op_case("matmul_batched", {rand_leaf(rng, {2, 3, 4}), rand_leaf(rng, {2, 4, 5})},
                          [](const V& in) { return matmul(in[0], in[1]); }));
  cases.push_back(op_case("linear", {rand_leaf(rng, {2, 3, 4}), rand_leaf(rng, {4, 5}), rand_leaf(rng, {5})},
                          [](const V& in) { return linear(in[0], in[1], in[2]); }));
  cases.push_back(op_case("conv1d", {rand_leaf(rng, {2, 3, 9}), rand_leaf(rng, {4, 3, 3}), rand_leaf(rng, {4})},
                          [](const V& in) { return conv1d(in[0], in[1], in[2], 2, 1); }));
  cases.push_back(op_case("dropout", {rand_leaf(rng, {4, 4})}, [](const V& in) {
    Rng r(5);
    return dropout(in[0], 0.3, true, r);
  }));
  cases.push_back(op_case("gated_mix", {rand_leaf(rng, {3, 4}, 0.05, 0.95), rand_leaf(rng, {3, 4}), rand_leaf(rng, {3, 4})},
                          [](const V& in) { return gated_mix(in[0], in[1], in[2]); }));
  cases.push_back(op_case("pearson", {rand_leaf(rng, {8}), rand_leaf(rng, {8})}, [](const V& in) { return pearson(in[0], in[1]); }));
  cases.push_back(op_case("cross_entropy", {rand_leaf(rng, {5})},
                          [](const V& in) { return cross_entropy(softmax(in[0], 0), 2); }));
  cases.push_back(op_case("fusion_loss", {rand_leaf(rng, {8}), rand_leaf(rng, {8}), rand_leaf(rng, {8}), rand_leaf(rng, {8})},
                          [](const V& in) { return fusion_loss(in[0], in[1], in[2], in[3], 1.01); }));

  // Composite layers over their inputs (parameters fixed).
  {
    Rng prng(7);
    auto ps = std::make_shared<ParameterSet<double>>();
    auto mha = std::make_shared<MultiHeadAttention<double>>(*ps, "mha", 8, 2, prng);
    cases.push_back(op_case("multi_head_attention", {rand_leaf(rng, {3, 8}), rand_leaf(rng, {4, 8})},
                            [ps, mha](const V& in) { return (*mha)(in[0], in[1]); }));
    auto gmu = std::make_shared<GatedFusion<double>>(*ps, "gmu", 8, prng);
    cases.push_back(op_case("gated_fusion", {rand_leaf(rng, {3, 8}), rand_leaf(rng, {3, 8})},
                            [ps, gmu](const V& in) { return (*gmu)(in[0], in[1]).fused; }));
    auto cross = std::make_shared<CrossAttentionFusion<double>>(*ps, "cross", 8, 2, prng);
    cases.push_back(op_case("cross_attention_fusion", {rand_leaf(rng, {3, 8}), rand_leaf(rng, {3, 8})},
                            [ps, cross](const V& in) { return (*cross)(in[0], in[1]).fused; }));
  }

  // End-to-end: total loss (cross entropy + 2 * fusion) with respect to every
  // parameter tensor, on a subsample of coordinates.
  cases.push_back({"end_to_end_total_loss", 1e-4, [] {
                     auto cfg = tiny_config();
                     DpffnModel<double> model(cfg);
                     Rng r(11);
                     const std::size_t steps = 4, bins = static_cast<std::size_t>(cfg.input_bins);
                     const auto hh = rand_leaf(r, {steps, bins}, 0.0, 1.0).detach();
                     const auto vh = rand_leaf(r, {steps, bins}, 0.0, 1.0).detach();
                     std::vector<T> params;
                     for (const auto& [name, t] : model.parameters().entries()) params.push_back(t);
                     const auto f = [&model, hh, vh, cfg](const V&) {
                       return total_loss(model.forward(hh, vh), 1, cfg).total;
                     };
                     return grad_check(f, params, 1e-5, 6, 3);
                   }});
  return cases;
}

inline std::vector<GradCaseReport> run_gradient_suite() {
  std::vector<GradCaseReport> out;
  for (const auto& c : gradient_suite()) {
    const auto t0 = std::chrono::steady_clock::now();
    GradCaseReport r{c.name, c.tolerance, c.run(), 0.0};
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace dpffn
