#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dpffn/json_util.hpp"
#include "dpffn/nn.hpp"
#include "dpffn/sample.hpp"

namespace dpffn {

enum class FusionMode { gmu_cross, concat };

inline std::string to_string(FusionMode m) { return m == FusionMode::concat ? "concat" : "gmu_cross"; }

inline FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "gmu_cross") return FusionMode::gmu_cross;
  if (s == "concat") return FusionMode::concat;
  throw ConfigError("ablation.fusion_mode: expected 'gmu_cross' or 'concat', got '" + s + "'");
}

struct Ablation {
  bool use_local = true;
  bool use_vh = true;
  FusionMode fusion_mode = FusionMode::gmu_cross;
};

/// Per-HRRP embedding: conv(1->c1) -> relu -> conv(c1->c2) -> relu -> flatten -> linear(d_model).
struct TokenizerSpec {
  int channels1 = 16, kernel1 = 7, stride1 = 2, padding1 = 3;
  int channels2 = 32, kernel2 = 5, stride2 = 2, padding2 = 2;
};

struct DpffnConfig {
  int d_model = 128;
  int num_heads = 10;
  int global_depth = 10;  // M
  int local_depth = 10;   // N
  int ffn_hidden = 0;     // 0 means 4 * d_model
  int num_classes = 10;
  int input_bins = 512;
  TokenizerSpec tokenizer;
  double lambda = 2.0;
  double epsilon = 1.01;
  Ablation ablation;
  std::uint64_t init_seed = 0;

  int ffn() const { return ffn_hidden > 0 ? ffn_hidden : 4 * d_model; }

  std::size_t conv1_length() const {
    return static_cast<std::size_t>((input_bins + 2 * tokenizer.padding1 - tokenizer.kernel1) / tokenizer.stride1 + 1);
  }
  std::size_t conv2_length() const {
    return static_cast<std::size_t>(
        (static_cast<int>(conv1_length()) + 2 * tokenizer.padding2 - tokenizer.kernel2) / tokenizer.stride2 + 1);
  }
  std::size_t token_features() const { return static_cast<std::size_t>(tokenizer.channels2) * conv2_length(); }

  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("model." + key + ": " + why); };
    if (d_model < 2) fail("d_model", "must be >= 2");
    if (d_model % 2 != 0) fail("d_model", "must be even (sinusoidal positional encoding)");
    if (num_heads < 1) fail("num_heads", "must be >= 1");
    if (d_model % num_heads != 0) fail("d_model", "must be divisible by num_heads");
    if (global_depth < 1) fail("global_depth", "M must be >= 1");
    if (local_depth < 1) fail("local_depth", "N must be >= 1");
    if (ffn_hidden < 0) fail("ffn_hidden", "must be >= 0");
    if (num_classes < 1) fail("num_classes", "must be >= 1");
    if (input_bins < 1) fail("input_bins", "must be >= 1");
    if (!(lambda >= 0.0)) fail("lambda", "must be >= 0");
    if (!(epsilon > 1.0)) fail("epsilon", "must be > 1");
    const auto& t = tokenizer;
    if (t.channels1 < 1 || t.channels2 < 1 || t.kernel1 < 1 || t.kernel2 < 1 || t.stride1 < 1 || t.stride2 < 1 ||
        t.padding1 < 0 || t.padding2 < 0)
      fail("tokenizer", "channels, kernels and strides must be positive, paddings non-negative");
    if (t.kernel1 > input_bins + 2 * t.padding1) fail("tokenizer.kernel1", "larger than padded input");
    if (t.kernel2 > static_cast<int>(conv1_length()) + 2 * t.padding2) fail("tokenizer.kernel2", "larger than padded input");
  }
};

inline void to_json(Json& j, const DpffnConfig& c) {
  j = Json{{"d_model", c.d_model},
           {"num_heads", c.num_heads},
           {"global_depth", c.global_depth},
           {"local_depth", c.local_depth},
           {"ffn_hidden", c.ffn()},
           {"num_classes", c.num_classes},
           {"input_bins", c.input_bins},
           {"tokenizer",
            {{"channels1", c.tokenizer.channels1},
             {"kernel1", c.tokenizer.kernel1},
             {"stride1", c.tokenizer.stride1},
             {"padding1", c.tokenizer.padding1},
             {"channels2", c.tokenizer.channels2},
             {"kernel2", c.tokenizer.kernel2},
             {"stride2", c.tokenizer.stride2},
             {"padding2", c.tokenizer.padding2}}},
           {"lambda", c.lambda},
           {"epsilon", c.epsilon},
           {"ablation",
            {{"use_local", c.ablation.use_local},
             {"use_vh", c.ablation.use_vh},
             {"fusion_mode", to_string(c.ablation.fusion_mode)}}},
           {"init_seed", c.init_seed}};
}

inline void from_json(const Json& j, DpffnConfig& c) {
  const std::string p = "model";
  detail::read_field(j, "d_model", p, c.d_model);
  detail::read_field(j, "num_heads", p, c.num_heads);
  detail::read_field(j, "global_depth", p, c.global_depth);
  detail::read_field(j, "local_depth", p, c.local_depth);
  detail::read_field(j, "ffn_hidden", p, c.ffn_hidden);
  detail::read_field(j, "num_classes", p, c.num_classes);
  detail::read_field(j, "input_bins", p, c.input_bins);
  if (j.contains("tokenizer")) {
    const auto& t = j.at("tokenizer");
    const std::string tp = p + ".tokenizer";
    detail::read_field(t, "channels1", tp, c.tokenizer.channels1);
    detail::read_field(t, "kernel1", tp, c.tokenizer.kernel1);
    detail::read_field(t, "stride1", tp, c.tokenizer.stride1);
    detail::read_field(t, "padding1", tp, c.tokenizer.padding1);
    detail::read_field(t, "channels2", tp, c.tokenizer.channels2);
    detail::read_field(t, "kernel2", tp, c.tokenizer.kernel2);
    detail::read_field(t, "stride2", tp, c.tokenizer.stride2);
    detail::read_field(t, "padding2", tp, c.tokenizer.padding2);
  }
  detail::read_field(j, "lambda", p, c.lambda);
  detail::read_field(j, "epsilon", p, c.epsilon);
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    const std::string ap = p + ".ablation";
    detail::read_field(a, "use_local", ap, c.ablation.use_local);
    detail::read_field(a, "use_vh", ap, c.ablation.use_vh);
    std::string mode = to_string(c.ablation.fusion_mode);
    detail::read_field(a, "fusion_mode", ap, mode);
    c.ablation.fusion_mode = fusion_mode_from_string(mode);
  }
  detail::read_field(j, "init_seed", p, c.init_seed);
  c.validate();
}

/// Fixed sinusoidal encoding: PE(t, 2i) = sin(t / 10000^(2i/d)), PE(t, 2i+1) = cos(...).
template <typename S>
Tensor<S> positional_encoding(std::size_t steps, std::size_t d_model) {
  if (d_model % 2 != 0) throw ConfigError("positional encoding requires an even d_model");
  if (steps == 0) throw ShapeError("positional encoding requires at least one step");
  std::vector<S> pe(steps * d_model);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double angle =
          static_cast<double>(t) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
      pe[t * d_model + 2 * i] = static_cast<S>(std::sin(angle));
      pe[t * d_model + 2 * i + 1] = static_cast<S>(std::cos(angle));
    }
  return Tensor<S>::from({steps, d_model}, std::move(pe));
}

template <typename S>
struct ModelOutput {
  Tensor<S> logits;  // [C]
  Tensor<S> probs;   // [C]
  Tensor<S> fused;   // pooled fused feature [d_model]
  std::optional<Tensor<S>> f_g_hh, f_g_vh, f_l_hh, f_l_vh;
  double alpha_g = std::numeric_limits<double>::quiet_NaN();
  double alpha_l = std::numeric_limits<double>::quiet_NaN();

  bool has_fusion_features() const { return f_g_hh && f_g_vh && f_l_hh && f_l_vh; }

  int predicted() const {
    const auto p = probs.data();
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  }
};

/// Analytic trainable-parameter count; matches DpffnModel::parameters().count().
inline std::size_t param_count(const DpffnConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.d_model), f = static_cast<std::size_t>(c.ffn());
  const auto lin = [](std::size_t in, std::size_t out) { return in * out + out; };
  const auto conv = [](std::size_t k, std::size_t cin, std::size_t cout) { return k * cin * cout + cout; };
  const auto& t = c.tokenizer;
  const std::size_t tokenizer = conv(t.kernel1, 1, t.channels1) + conv(t.kernel2, t.channels1, t.channels2) +
                                lin(c.token_features(), d);
  const std::size_t attention = 4 * lin(d, d);
  const std::size_t encoder = 2 * (2 * d) + attention + lin(d, f) + lin(f, d);
  const std::size_t local_block = 2 * conv(3, d, d) + 2 * d;
  const std::size_t pols = c.ablation.use_vh ? 2 : 1;
  std::size_t total = pols * (tokenizer + static_cast<std::size_t>(c.global_depth) * encoder);
  if (c.ablation.use_local) total += pols * static_cast<std::size_t>(c.local_depth) * local_block;
  const std::size_t gmu = 2 * lin(d, d) + lin(2 * d, d);
  if (c.ablation.fusion_mode == FusionMode::concat) {
    const std::size_t streams = pols * (c.ablation.use_local ? 2 : 1);
    if (streams > 1) total += lin(streams * d, d);
  } else {
    if (c.ablation.use_vh) total += gmu * (c.ablation.use_local ? 2 : 1);
    if (c.ablation.use_local) total += attention + lin(2 * d, d) + 2 * d;
  }
  total += lin(d, static_cast<std::size_t>(c.num_classes));
  return total;
}

/// Analytic forward FLOP count (2 per multiply-add) for a T-step input.
inline std::size_t flops_estimate(const DpffnConfig& c, std::size_t steps) {
  const std::size_t d = static_cast<std::size_t>(c.d_model), f = static_cast<std::size_t>(c.ffn()), T = steps;
  const auto& t = c.tokenizer;
  const std::size_t l1 = c.conv1_length(), l2 = c.conv2_length();
  const std::size_t tokenizer = 2 * T *
                                (static_cast<std::size_t>(t.kernel1 * t.channels1) * l1 +
                                 static_cast<std::size_t>(t.kernel2 * t.channels1 * t.channels2) * l2 +
                                 c.token_features() * d);
  const std::size_t attention = 2 * (3 * T * d * d) + 2 * (2 * T * T * d) + 2 * T * d * d;
  const std::size_t encoder = attention + 2 * 2 * T * d * f;
  const std::size_t local_block = 2 * (2 * 3 * d * d * T);
  const std::size_t pols = c.ablation.use_vh ? 2 : 1;
  std::size_t total = pols * (tokenizer + static_cast<std::size_t>(c.global_depth) * encoder);
  if (c.ablation.use_local) total += pols * static_cast<std::size_t>(c.local_depth) * local_block;
  const std::size_t gmu = 2 * (2 * T * d * d) + 2 * T * 2 * d * d;
  if (c.ablation.fusion_mode == FusionMode::concat) {
    const std::size_t streams = pols * (c.ablation.use_local ? 2 : 1);
    if (streams > 1) total += 2 * T * streams * d * d;
  } else {
    if (c.ablation.use_vh) total += gmu * (c.ablation.use_local ? 2 : 1);
    if (c.ablation.use_local) total += 2 * attention + 2 * T * 2 * d * d;
  }
  total += 2 * d * static_cast<std::size_t>(c.num_classes);
  return total;
}

/// Per-polarization tokenizer: HRRP sequence [T, L] -> tokens [T, d_model].
template <typename S>
struct Tokenizer {
  Conv1d<S> conv1, conv2;
  Linear<S> proj;

  Tokenizer() = default;
  Tokenizer(ParameterSet<S>& ps, const std::string& prefix, const DpffnConfig& c, Rng& rng) {
    const auto& t = c.tokenizer;
    conv1 = Conv1d<S>(ps, prefix + ".conv1", 1, t.channels1, t.kernel1, t.stride1, t.padding1, rng);
    conv2 = Conv1d<S>(ps, prefix + ".conv2", t.channels1, t.channels2, t.kernel2, t.stride2, t.padding2, rng);
    proj = Linear<S>(ps, prefix + ".proj", c.token_features(), static_cast<std::size_t>(c.d_model), rng);
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    const std::size_t steps = x.shape()[0], bins = x.shape()[1];
    auto h = reshape(x, {steps, 1, bins});
    h = relu(conv2(relu(conv1(h))));
    return proj(reshape(h, {steps, h.shape()[1] * h.shape()[2]}));
  }
};

/// Dual-polarization feature fusion network.
template <typename S>
class DpffnModel {
 public:
  struct Branch {
    Tokenizer<S> tokenizer;
    std::vector<EncoderBlock<S>> global;
    std::vector<ResidualConvBlock<S>> local;
  };

  struct Tokens {
    Tensor<S> raw, with_position;
  };

  explicit DpffnModel(const DpffnConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto heads = static_cast<std::size_t>(cfg_.num_heads);
    const auto& ab = cfg_.ablation;
    hh_ = make_branch("hh", rng);
    if (ab.use_vh) vh_ = make_branch("vh", rng);
    if (ab.fusion_mode == FusionMode::concat) {
      const std::size_t streams = (ab.use_vh ? 2 : 1) * (ab.use_local ? 2 : 1);
      if (streams > 1) {
        concat_proj_ = Linear<S>(params_, "fusion.concat", streams * d, d, rng);
        modules_.push_back("fusion.concat");
      }
    } else {
      if (ab.use_vh) {
        gmu_global_ = GatedFusion<S>(params_, "fusion.gmu_global", d, rng);
        modules_.push_back("fusion.gmu_global");
        if (ab.use_local) {
          gmu_local_ = GatedFusion<S>(params_, "fusion.gmu_local", d, rng);
          modules_.push_back("fusion.gmu_local");
        }
      }
      if (ab.use_local) {
        cross_ = CrossAttentionFusion<S>(params_, "fusion.cross", d, heads, rng);
        modules_.push_back("fusion.cross");
      }
    }
    head_ = Linear<S>(params_, "head", d, static_cast<std::size_t>(cfg_.num_classes), rng);
    modules_.push_back("head");
  }

  const DpffnConfig& config() const { return cfg_; }
  ParameterSet<S>& parameters() { return params_; }
  const ParameterSet<S>& parameters() const { return params_; }
  /// Top-level modules in construction order (e.g. "hh.tokenizer", "hh.global.0", "head").
  const std::vector<std::string>& modules() const { return modules_; }

  const Branch& branch(bool vh) const { return vh ? vh_ : hh_; }

  /// Divides both channels by the largest value over the channels the model
  /// consumes (HH only when VH is disabled). An all-zero sample is left as is.
  std::pair<Tensor<S>, Tensor<S>> normalize(const DualPolSample& s) const {
    s.validate();
    if (static_cast<int>(s.bins) != cfg_.input_bins)
      throw ShapeError("sample has " + std::to_string(s.bins) + " range bins, model expects " +
                       std::to_string(cfg_.input_bins));
    if (cfg_.ablation.use_vh && !s.has_vh()) throw DataError("model requires a VH channel but the sample has none");
    float peak = 0.0f;
    for (float v : s.hh) peak = std::max(peak, v);
    if (cfg_.ablation.use_vh)
      for (float v : s.vh) peak = std::max(peak, v);
    const auto convert = [&](const std::vector<float>& src) {
      std::vector<S> out(src.size());
      for (std::size_t i = 0; i < src.size(); ++i) out[i] = peak > 0.0f ? static_cast<S>(src[i] / peak) : S{0};
      return Tensor<S>::from({s.steps, s.bins}, std::move(out));
    };
    Tensor<S> hh = convert(s.hh);
    Tensor<S> vh = cfg_.ablation.use_vh ? convert(s.vh) : Tensor<S>{};
    return {hh, vh};
  }

  Tokens tokenize(const Tensor<S>& x, bool vh = false) const {
    if (x.rank() != 2 || static_cast<int>(x.shape()[1]) != cfg_.input_bins)
      throw ShapeError("tokenize: expected [T, " + std::to_string(cfg_.input_bins) + "], got " + to_string(x.shape()));
    Tokens t;
    t.raw = branch(vh).tokenizer(x);
    t.with_position = add(t.raw, positional_encoding<S>(x.shape()[0], static_cast<std::size_t>(cfg_.d_model)));
    return t;
  }

  Tensor<S> global_branch(const Tensor<S>& tokens, bool vh = false) const {
    Tensor<S> h = tokens;
    for (const auto& block : branch(vh).global) h = block(h);
    return h;
  }

  Tensor<S> local_branch(const Tensor<S>& tokens, bool vh = false) const {
    const std::size_t steps = tokens.shape()[0], d = tokens.shape()[1];
    Tensor<S> h = reshape(transpose(tokens), {1, d, steps});
    for (const auto& block : branch(vh).local) h = block(h);
    return transpose(reshape(h, {d, steps}));
  }

  /// Full forward pass on already-normalized channels ([T, L] each; `vh`
  /// undefined when the VH path is disabled).
  ModelOutput<S> forward(const Tensor<S>& hh, const Tensor<S>& vh) const {
    const auto& ab = cfg_.ablation;
    ModelOutput<S> out;
    const auto tok_hh = tokenize(hh, false);
    const auto g_hh = global_branch(tok_hh.with_position, false);
    Tensor<S> l_hh, g_vh, l_vh;
    if (ab.use_local) l_hh = local_branch(tok_hh.raw, false);
    if (ab.use_vh) {
      if (!vh.defined()) throw DataError("model requires a VH channel");
      if (vh.shape() != hh.shape()) throw ShapeError("HH and VH inputs differ in shape");
      const auto tok_vh = tokenize(vh, true);
      g_vh = global_branch(tok_vh.with_position, true);
      if (ab.use_local) l_vh = local_branch(tok_vh.raw, true);
    }

    out.f_g_hh = mean(g_hh, 0);
    if (ab.use_vh) out.f_g_vh = mean(g_vh, 0);
    if (ab.use_local) out.f_l_hh = mean(l_hh, 0);
    if (ab.use_local && ab.use_vh) out.f_l_vh = mean(l_vh, 0);

    Tensor<S> fused;
    if (ab.fusion_mode == FusionMode::concat) {
      std::vector<Tensor<S>> streams{g_hh};
      if (ab.use_vh) streams.push_back(g_vh);
      if (ab.use_local) streams.push_back(l_hh);
      if (ab.use_local && ab.use_vh) streams.push_back(l_vh);
      fused = streams.size() > 1 ? concat_proj_(concat(streams, -1)) : g_hh;
    } else {
      Tensor<S> fg = g_hh, fl = l_hh;
      if (ab.use_vh) {
        auto r = gmu_global_(g_hh, g_vh);
        fg = r.fused;
        out.alpha_g = mean_of(r.alpha);
        if (ab.use_local) {
          auto rl = gmu_local_(l_hh, l_vh);
          fl = rl.fused;
          out.alpha_l = mean_of(rl.alpha);
        }
      }
      fused = ab.use_local ? cross_(fg, fl).fused : fg;
    }
    out.fused = mean(fused, 0);
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    out.logits = reshape(head_(reshape(out.fused, {1, d})), {static_cast<std::size_t>(cfg_.num_classes)});
    out.probs = softmax(out.logits, 0);
    return out;
  }

  ModelOutput<S> forward(const DualPolSample& s) const {
    auto [hh, vh] = normalize(s);
    return forward(hh, vh);
  }

  const GatedFusion<S>& gmu_global() const { return gmu_global_; }
  const CrossAttentionFusion<S>& cross_fusion() const { return cross_; }
  const Linear<S>& head() const { return head_; }

 private:
  static double mean_of(const Tensor<S>& t) {
    double s = 0;
    for (auto v : t.data()) s += static_cast<double>(v);
    return s / static_cast<double>(t.numel());
  }

  Branch make_branch(const std::string& pol, Rng& rng) {
    Branch b;
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    b.tokenizer = Tokenizer<S>(params_, pol + ".tokenizer", cfg_, rng);
    modules_.push_back(pol + ".tokenizer");
    for (int m = 0; m < cfg_.global_depth; ++m) {
      const auto name = pol + ".global." + std::to_string(m);
      b.global.emplace_back(params_, name, d, static_cast<std::size_t>(cfg_.num_heads),
                            static_cast<std::size_t>(cfg_.ffn()), rng);
      modules_.push_back(name);
    }
    if (cfg_.ablation.use_local)
      for (int n = 0; n < cfg_.local_depth; ++n) {
        const auto name = pol + ".local." + std::to_string(n);
        b.local.emplace_back(params_, name, d, rng);
        modules_.push_back(name);
      }
    return b;
  }

  DpffnConfig cfg_;
  ParameterSet<S> params_;
  std::vector<std::string> modules_;
  Branch hh_, vh_;
  GatedFusion<S> gmu_global_, gmu_local_;
  CrossAttentionFusion<S> cross_;
  Linear<S> concat_proj_;
  Linear<S> head_;
};

}  // namespace dpffn
