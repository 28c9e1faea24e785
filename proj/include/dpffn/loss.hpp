#pragma once

#include <cmath>
#include <string>

#include "dpffn/model.hpp"
#include "dpffn/ops.hpp"

namespace dpffn {

struct LossBreakdown {
  double total = 0.0;
  double cross = 0.0;
  double fusion = 0.0;
  double r_global = 0.0;
  double r_local = 0.0;
};

inline void to_json(Json& j, const LossBreakdown& l) {
  j = Json{{"total", l.total}, {"cross", l.cross}, {"fusion", l.fusion}, {"r_global", l.r_global}, {"r_local", l.r_local}};
}

/// -log(max(probs[label], 1e-12)).
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& probs, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= probs.numel())
    throw DataError("label " + std::to_string(label) + " out of range for " + std::to_string(probs.numel()) +
                    " classes");
  const auto flat = reshape(probs, {probs.numel()});
  const auto p = slice(flat, 0, static_cast<std::size_t>(label), 1);
  return scale(log(clamp_min(p, static_cast<S>(1e-12))), S{-1});
}

template <typename S>
struct FusionTerms {
  Tensor<S> loss, r_local, r_global;
};

/// |R(local HH, local VH)| / (R(global HH, global VH) + epsilon).
template <typename S>
FusionTerms<S> fusion_terms(const Tensor<S>& f_l_hh, const Tensor<S>& f_l_vh, const Tensor<S>& f_g_hh,
                            const Tensor<S>& f_g_vh, double epsilon = 1.01) {
  if (f_l_hh.numel() != f_l_vh.numel() || f_g_hh.numel() != f_g_vh.numel() || f_l_hh.numel() != f_g_hh.numel())
    throw ShapeError("fusion loss: feature vectors differ in length");
  FusionTerms<S> t;
  t.r_local = pearson(f_l_hh, f_l_vh);
  t.r_global = pearson(f_g_hh, f_g_vh);
  t.loss = div(abs(t.r_local), add_scalar(t.r_global, static_cast<S>(epsilon)));
  return t;
}

template <typename S>
Tensor<S> fusion_loss(const Tensor<S>& f_l_hh, const Tensor<S>& f_l_vh, const Tensor<S>& f_g_hh,
                      const Tensor<S>& f_g_vh, double epsilon = 1.01) {
  return fusion_terms(f_l_hh, f_l_vh, f_g_hh, f_g_vh, epsilon).loss;
}

template <typename S>
struct LossResult {
  Tensor<S> total;
  LossBreakdown breakdown;
};

/// cross + lambda * fusion for one sample. The fusion term is 0 whenever
/// the output lacks any of the four pre-fusion feature vectors.
template <typename S>
LossResult<S> total_loss(const ModelOutput<S>& out, int label, const DpffnConfig& cfg) {
  if (!(cfg.lambda >= 0.0)) throw ConfigError("model.lambda: must be >= 0");
  LossResult<S> r;
  const auto ce = cross_entropy(out.probs, label);
  r.breakdown.cross = static_cast<double>(ce.item());
  r.total = ce;
  if (out.has_fusion_features()) {
    const auto ft = fusion_terms(*out.f_l_hh, *out.f_l_vh, *out.f_g_hh, *out.f_g_vh, cfg.epsilon);
    r.breakdown.fusion = static_cast<double>(ft.loss.item());
    r.breakdown.r_local = static_cast<double>(ft.r_local.item());
    r.breakdown.r_global = static_cast<double>(ft.r_global.item());
    if (cfg.lambda > 0.0) r.total = add(ce, scale(ft.loss, static_cast<S>(cfg.lambda)));
  }
  r.breakdown.total = r.breakdown.cross + cfg.lambda * r.breakdown.fusion;
  return r;
}

}  // namespace dpffn
