#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dpffn/ops.hpp"
#include "dpffn/rng.hpp"

namespace dpffn {

/// Named, insertion-ordered collection of trainable leaves.
template <typename S>
class ParameterSet {
 public:
  Tensor<S> uniform(const std::string& name, Shape shape, double bound, Rng& rng) {
    std::vector<S> v(numel(shape));
    for (auto& x : v) x = static_cast<S>(rng.uniform(-bound, bound));
    return add(name, Tensor<S>::from(std::move(shape), std::move(v), true));
  }

  Tensor<S> constant(const std::string& name, Shape shape, S value) {
    return add(name, Tensor<S>::full(std::move(shape), value, true));
  }

  Tensor<S> add(const std::string& name, Tensor<S> t) {
    for (const auto& [n, _] : entries_)
      if (n == name) throw ConfigError("duplicate parameter name '" + name + "'");
    entries_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<S>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  Tensor<S> find(const std::string& name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return t;
    return {};
  }

  std::size_t count() const {
    std::size_t c = 0;
    for (const auto& e : entries_) c += e.second.numel();
    return c;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<S>>> entries_;
};

template <typename S>
struct Linear {
  Tensor<S> weight, bias;

  Linear() = default;
  Linear(ParameterSet<S>& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(in));
    weight = ps.uniform(prefix + ".weight", {in, out}, bound, rng);
    bias = ps.uniform(prefix + ".bias", {out}, bound, rng);
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return linear(x, weight, bias); }
};

template <typename S>
struct Conv1d {
  Tensor<S> weight, bias;
  std::size_t stride = 1, padding = 0;

  Conv1d() = default;
  Conv1d(ParameterSet<S>& ps, const std::string& prefix, std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
         std::size_t stride_, std::size_t padding_, Rng& rng)
      : stride(stride_), padding(padding_) {
    const double bound = std::sqrt(1.0 / static_cast<double>(in_ch * kernel));
    weight = ps.uniform(prefix + ".weight", {out_ch, in_ch, kernel}, bound, rng);
    bias = ps.uniform(prefix + ".bias", {out_ch}, bound, rng);
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return conv1d(x, weight, bias, stride, padding); }
};

template <typename S>
struct LayerNorm {
  Tensor<S> gain, shift;
  int axis = -1;

  LayerNorm() = default;
  LayerNorm(ParameterSet<S>& ps, const std::string& prefix, std::size_t dim, int axis_ = -1) : axis(axis_) {
    gain = ps.constant(prefix + ".gain", {dim}, S{1});
    shift = ps.constant(prefix + ".shift", {dim}, S{0});
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return layer_norm(x, gain, shift, axis); }
};

/// Scaled dot-product multi-head attention. Queries come from `q_in`
/// [Tq, d], keys and values from `kv_in` [Tk, d].
template <typename S>
struct MultiHeadAttention {
  Linear<S> q, k, v, o;
  std::size_t heads = 1, d_model = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterSet<S>& ps, const std::string& prefix, std::size_t d, std::size_t num_heads, Rng& rng)
      : q(ps, prefix + ".q", d, d, rng),
        k(ps, prefix + ".k", d, d, rng),
        v(ps, prefix + ".v", d, d, rng),
        o(ps, prefix + ".o", d, d, rng),
        heads(num_heads),
        d_model(d) {
    if (d % num_heads != 0) throw ConfigError("d_model must be divisible by num_heads");
  }

  /// When `weights` is non-null it receives the attention matrix [heads, Tq, Tk].
  Tensor<S> operator()(const Tensor<S>& q_in, const Tensor<S>& kv_in, Tensor<S>* weights = nullptr) const {
    const std::size_t tq = q_in.shape()[0], tk = kv_in.shape()[0], dh = d_model / heads;
    const auto split = [&](const Tensor<S>& x, std::size_t t) { return permute(reshape(x, {t, heads, dh}), {1, 0, 2}); };
    const auto qh = split(q(q_in), tq);                               // [h, Tq, dh]
    const auto kh = permute(reshape(k(kv_in), {tk, heads, dh}), {1, 2, 0});  // [h, dh, Tk]
    const auto vh = split(v(kv_in), tk);                              // [h, Tk, dh]
    const auto scores = scale(matmul(qh, kh), static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
    const auto attn = softmax(scores, -1);
    if (weights) *weights = attn;
    const auto ctx = permute(matmul(attn, vh), {1, 0, 2});  // [Tq, h, dh]
    return o(reshape(ctx, {tq, d_model}));
  }
};

/// Pre-norm transformer encoder: x + MHA(LN(x)), then x + FFN(LN(x)).
template <typename S>
struct EncoderBlock {
  LayerNorm<S> ln1, ln2;
  MultiHeadAttention<S> attn;
  Linear<S> ff1, ff2;

  EncoderBlock() = default;
  EncoderBlock(ParameterSet<S>& ps, const std::string& prefix, std::size_t d, std::size_t heads, std::size_t ffn,
               Rng& rng)
      : ln1(ps, prefix + ".ln1", d),
        ln2(ps, prefix + ".ln2", d),
        attn(ps, prefix + ".attn", d, heads, rng),
        ff1(ps, prefix + ".ff1", d, ffn, rng),
        ff2(ps, prefix + ".ff2", ffn, d, rng) {}

  Tensor<S> operator()(const Tensor<S>& x, Tensor<S>* weights = nullptr) const {
    const auto n1 = ln1(x);
    const auto h = add(x, attn(n1, n1, weights));
    return add(h, ff2(relu(ff1(ln2(h)))));
  }
};

/// Residual block over the token axis: conv(k=3) -> LN -> relu -> conv(k=3) + skip.
/// Operates on [1, d, T] (channels = features).
template <typename S>
struct ResidualConvBlock {
  Conv1d<S> conv1, conv2;
  LayerNorm<S> norm;

  ResidualConvBlock() = default;
  ResidualConvBlock(ParameterSet<S>& ps, const std::string& prefix, std::size_t d, Rng& rng)
      : conv1(ps, prefix + ".conv1", d, d, 3, 1, 1, rng),
        conv2(ps, prefix + ".conv2", d, d, 3, 1, 1, rng),
        norm(ps, prefix + ".norm", d, 1) {}

  Tensor<S> operator()(const Tensor<S>& x) const { return add(x, conv2(relu(norm(conv1(x))))); }
};

/// Gated multimodal unit: alpha = sigmoid(W_z [tanh(W_a a); tanh(W_b b)]),
/// output alpha * a + (1 - alpha) * b on the original features.
template <typename S>
struct GatedFusion {
  Linear<S> wa, wb, wz;

  GatedFusion() = default;
  GatedFusion(ParameterSet<S>& ps, const std::string& prefix, std::size_t d, Rng& rng)
      : wa(ps, prefix + ".wa", d, d, rng), wb(ps, prefix + ".wb", d, d, rng), wz(ps, prefix + ".wz", 2 * d, d, rng) {}

  struct Result {
    Tensor<S> fused, alpha;
  };

  Result operator()(const Tensor<S>& a, const Tensor<S>& b) const {
    if (a.shape() != b.shape())
      throw ShapeError("gmu: feature shapes differ " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    const auto ha = tanh(wa(a));
    const auto hb = tanh(wb(b));
    const auto alpha = sigmoid(wz(concat<S>({ha, hb}, -1)));
    return {gated_mix(alpha, a, b), alpha};
  }
};

/// Bidirectional cross-attention between fused global and local token
/// streams. One attention module serves both directions; the two outputs are
/// concatenated, projected to d, added to (F_G + F_L)/2 and layer-normed.
template <typename S>
struct CrossAttentionFusion {
  MultiHeadAttention<S> attn;
  Linear<S> proj;
  LayerNorm<S> norm;

  CrossAttentionFusion() = default;
  CrossAttentionFusion(ParameterSet<S>& ps, const std::string& prefix, std::size_t d, std::size_t heads, Rng& rng)
      : attn(ps, prefix + ".attn", d, heads, rng), proj(ps, prefix + ".proj", 2 * d, d, rng), norm(ps, prefix + ".norm", d) {}

  struct Result {
    Tensor<S> fused, global_to_local, local_to_global, weights_gl, weights_lg;
  };

  Result operator()(const Tensor<S>& fg, const Tensor<S>& fl) const {
    if (fg.shape() != fl.shape()) throw ShapeError("cross-attention: stream shapes differ");
    Result r;
    r.global_to_local = attn(fg, fl, &r.weights_gl);
    r.local_to_global = attn(fl, fg, &r.weights_lg);
    const auto mixed = proj(concat<S>({r.global_to_local, r.local_to_global}, -1));
    const auto residual = scale(add(fg, fl), S{0.5});
    r.fused = norm(add(mixed, residual));
    return r;
  }
};

}  // namespace dpffn
