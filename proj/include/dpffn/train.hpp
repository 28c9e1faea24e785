#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dpffn/dataset.hpp"
#include "dpffn/io.hpp"
#include "dpffn/loss.hpp"
#include "dpffn/metrics.hpp"
#include "dpffn/model.hpp"

namespace dpffn {

// Training and evaluation run in single precision; gradient checks use double.
using TrainScalar = float;

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
  double lr0 = 0.001;
  double lr_decay = 0.8;
  int lr_step_epochs = 50;
  int batch_size = 32;
  int max_epochs = 300;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_opt = 1e-8;
  double momentum = 0.0;  // sgd only
  int validation_period_epochs = 1;
  double clip_norm = 0.0;  // 0 disables clipping
  // Training-time corruption, off unless set.
  std::optional<double> train_snr_db;
  std::optional<double> train_missing_rate;

  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("train." + key + ": " + why); };
    if (!(lr0 > 0.0)) fail("lr0", "must be > 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) fail("lr_decay", "must be in (0, 1]");
    if (lr_step_epochs < 1) fail("lr_step_epochs", "must be >= 1");
    if (batch_size < 1) fail("batch_size", "must be >= 1");
    if (max_epochs < 0) fail("max_epochs", "must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1", "must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2", "must be in [0, 1)");
    if (!(eps_opt > 0.0)) fail("eps_opt", "must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum", "must be in [0, 1)");
    if (validation_period_epochs < 1) fail("validation_period_epochs", "must be >= 1");
    if (!(clip_norm >= 0.0)) fail("clip_norm", "must be >= 0");
    if (train_missing_rate && !(*train_missing_rate >= 0.0 && *train_missing_rate < 1.0))
      fail("train_missing_rate", "must be in [0, 1)");
  }
};

inline void to_json(Json& j, const TrainConfig& c) {
  j = Json{{"lr0", c.lr0},
           {"lr_decay", c.lr_decay},
           {"lr_step_epochs", c.lr_step_epochs},
           {"batch_size", c.batch_size},
           {"max_epochs", c.max_epochs},
           {"seed", c.seed},
           {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"eps_opt", c.eps_opt},
           {"momentum", c.momentum},
           {"validation_period_epochs", c.validation_period_epochs},
           {"clip_norm", c.clip_norm},
           {"train_snr_db", c.train_snr_db ? Json(*c.train_snr_db) : Json(nullptr)},
           {"train_missing_rate", c.train_missing_rate ? Json(*c.train_missing_rate) : Json(nullptr)}};
}

inline void from_json(const Json& j, TrainConfig& c) {
  const std::string p = "train";
  detail::read_field(j, "lr0", p, c.lr0);
  detail::read_field(j, "lr_decay", p, c.lr_decay);
  detail::read_field(j, "lr_step_epochs", p, c.lr_step_epochs);
  detail::read_field(j, "batch_size", p, c.batch_size);
  detail::read_field(j, "max_epochs", p, c.max_epochs);
  detail::read_field(j, "seed", p, c.seed);
  std::string opt = c.optimizer == OptimizerKind::adam ? "adam" : "sgd";
  detail::read_field(j, "optimizer", p, opt);
  if (opt == "adam")
    c.optimizer = OptimizerKind::adam;
  else if (opt == "sgd")
    c.optimizer = OptimizerKind::sgd;
  else
    throw ConfigError("train.optimizer: expected 'adam' or 'sgd', got '" + opt + "'");
  detail::read_field(j, "beta1", p, c.beta1);
  detail::read_field(j, "beta2", p, c.beta2);
  detail::read_field(j, "eps_opt", p, c.eps_opt);
  detail::read_field(j, "momentum", p, c.momentum);
  detail::read_field(j, "validation_period_epochs", p, c.validation_period_epochs);
  detail::read_field(j, "clip_norm", p, c.clip_norm);
  for (auto [key, field] : {std::pair{"train_snr_db", &c.train_snr_db}, std::pair{"train_missing_rate", &c.train_missing_rate}}) {
    if (j.contains(key) && !j.at(key).is_null()) {
      double v = 0.0;
      detail::read_field(j, key, p, v);
      *field = v;
    }
  }
  c.validate();
}

/// lr0 * decay^floor(epoch / step), accumulated by repeated multiplication.
inline double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ConfigError("lr_schedule: epoch must be >= 0");
  double lr = cfg.lr0;
  for (int k = epoch / cfg.lr_step_epochs; k > 0; --k) lr *= cfg.lr_decay;
  return lr;
}

/// Adam or SGD over a ParameterSet; state is kept per parameter in
/// registration order.
template <typename S>
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(const ParameterSet<S>& params, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& [name, t] : params.entries()) {
      first_.emplace_back(t.numel(), 0.0);
      if (cfg.optimizer == OptimizerKind::adam) second_.emplace_back(t.numel(), 0.0);
    }
  }

  std::int64_t steps() const { return step_; }

  /// Throws NumericError naming the first parameter with a non-finite gradient.
  static void check_finite(const ParameterSet<S>& params) {
    for (const auto& [name, t] : params.entries()) {
      if (!t.has_grad()) continue;
      for (auto g : t.grad())
        if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter '" + name + "'");
    }
  }

  /// Scales gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
  static double clip(ParameterSet<S>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, t] : params.entries())
      if (t.has_grad())
        for (auto g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
      const double f = max_norm / norm;
      for (auto& [name, t] : params.entries())
        if (t.has_grad())
          for (auto& g : t.node()->grad) g = static_cast<S>(static_cast<double>(g) * f);
    }
    return norm;
  }

  void step(ParameterSet<S>& params, double lr) {
    check_finite(params);
    ++step_;
    const auto& entries = params.entries();
    if (entries.size() != first_.size()) throw GraphError("optimizer state does not match the parameter set");
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto t = entries[i].second;
      auto data = t.data();
      auto& m = first_[i];
      const bool has = t.has_grad();
      const auto grad = t.grad();
      if (cfg_.optimizer == OptimizerKind::adam) {
        auto& v = second_[i];
        for (std::size_t k = 0; k < data.size(); ++k) {
          const double g = has ? static_cast<double>(grad[k]) : 0.0;
          m[k] = b1 * m[k] + (1.0 - b1) * g;
          v[k] = b2 * v[k] + (1.0 - b2) * g * g;
          const double mh = m[k] / c1, vh = v[k] / c2;
          data[k] = static_cast<S>(static_cast<double>(data[k]) - lr * mh / (std::sqrt(vh) + cfg_.eps_opt));
        }
      } else {
        for (std::size_t k = 0; k < data.size(); ++k) {
          const double g = has ? static_cast<double>(grad[k]) : 0.0;
          m[k] = cfg_.momentum * m[k] + g;
          data[k] = static_cast<S>(static_cast<double>(data[k]) - lr * m[k]);
        }
      }
    }
  }

  std::vector<std::vector<double>>& first() { return first_; }
  std::vector<std::vector<double>>& second() { return second_; }
  const std::vector<std::vector<double>>& first() const { return first_; }
  const std::vector<std::vector<double>>& second() const { return second_; }
  void set_steps(std::int64_t s) { step_ = s; }
  const TrainConfig& config() const { return cfg_; }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<double>> first_, second_;
  std::int64_t step_ = 0;
};

/// One-shot Adam update on a flat vector; convenience for callers without a ParameterSet.
struct AdamState {
  std::vector<double> m, v;
  std::int64_t t = 0;
};

inline void adam_step(std::vector<double>& params, const std::vector<double>& grads, AdamState& st, double lr,
                      const TrainConfig& cfg) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: params and grads differ in length");
  if (st.m.empty()) {
    st.m.assign(params.size(), 0.0);
    st.v.assign(params.size(), 0.0);
  }
  if (st.m.size() != params.size()) throw ShapeError("adam_step: state does not match params");
  for (std::size_t k = 0; k < grads.size(); ++k)
    if (!std::isfinite(grads[k])) throw NumericError("non-finite gradient at index " + std::to_string(k));
  ++st.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    st.m[k] = cfg.beta1 * st.m[k] + (1.0 - cfg.beta1) * grads[k];
    st.v[k] = cfg.beta2 * st.v[k] + (1.0 - cfg.beta2) * grads[k] * grads[k];
    params[k] -= lr * (st.m[k] / c1) / (std::sqrt(st.v[k] / c2) + cfg.eps_opt);
  }
}

// ---------------------------------------------------------------- checkpoint

inline constexpr std::string_view kCheckpointMagic{"DPFN1\0", 6};

struct NamedTensor {
  std::string name;
  std::uint8_t dtype = 2;  // 1 = f32, 2 = f64
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  DpffnConfig model;
  TrainConfig train;
  int epoch = -1;  // last completed epoch
  std::string rng_state;
  std::int64_t optimizer_steps = 0;
  double best_val_accuracy = -1.0;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline io::Bytes encode_checkpoint(const Checkpoint& ck) {
  io::Writer w;
  w.bytes(kCheckpointMagic);
  const Json header{{"model", ck.model},
                    {"train", ck.train},
                    {"epoch", ck.epoch},
                    {"rng_state", ck.rng_state},
                    {"optimizer_steps", ck.optimizer_steps},
                    {"best_val_accuracy", ck.best_val_accuracy}};
  const std::string text = header.dump();
  w.u64(text.size());
  w.bytes(text);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name);
    w.u8(t.dtype);
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    if (numel(t.shape) != t.values.size()) throw ShapeError("checkpoint tensor '" + t.name + "' size mismatch");
    for (double v : t.values) {
      if (t.dtype == 1)
        w.f32(static_cast<float>(v));
      else
        w.f64(v);
    }
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(const io::Bytes& bytes, const std::string& what) {
  io::Reader r(bytes, what);
  if (r.bytes(kCheckpointMagic.size()) != kCheckpointMagic) throw DataError(what + ": bad magic, not a checkpoint");
  const auto len = r.u64();
  if (len > bytes.size()) throw DataError(what + ": header length exceeds file size");
  Checkpoint ck;
  try {
    const Json h = Json::parse(r.bytes(static_cast<std::size_t>(len)));
    ck.model = h.at("model").get<DpffnConfig>();
    ck.train = h.at("train").get<TrainConfig>();
    ck.epoch = h.at("epoch").get<int>();
    ck.rng_state = h.at("rng_state").get<std::string>();
    ck.optimizer_steps = h.at("optimizer_steps").get<std::int64_t>();
    ck.best_val_accuracy = h.at("best_val_accuracy").get<double>();
  } catch (const Json::exception& e) {
    throw DataError(what + ": bad checkpoint header: " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(what + ": bad checkpoint header: " + e.what());
  }
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.bytes(r.u32());
    t.dtype = r.u8();
    if (t.dtype != 1 && t.dtype != 2) throw DataError(what + ": unknown dtype code for '" + t.name + "'");
    const auto rank = r.u8();
    for (std::uint8_t k = 0; k < rank; ++k) t.shape.push_back(static_cast<std::size_t>(r.u64()));
    const std::size_t n = numel(t.shape);
    r.need(n * (t.dtype == 1 ? 4 : 8));
    t.values.resize(n);
    for (auto& v : t.values) v = t.dtype == 1 ? static_cast<double>(r.f32()) : r.f64();
    ck.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw DataError(what + ": trailing bytes in checkpoint");
  return ck;
}

template <typename S>
constexpr std::uint8_t dtype_code() {
  return sizeof(S) == 4 ? 1 : 2;
}

template <typename S>
Checkpoint make_checkpoint(const DpffnModel<S>& model, const TrainConfig& tc, int epoch, const std::string& rng_state,
                           const Optimizer<S>* opt, double best_val) {
  Checkpoint ck;
  ck.model = model.config();
  ck.train = tc;
  ck.epoch = epoch;
  ck.rng_state = rng_state;
  ck.best_val_accuracy = best_val;
  const auto& entries = model.parameters().entries();
  for (const auto& [name, t] : entries)
    ck.tensors.push_back({name, dtype_code<S>(), t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  if (opt) {
    ck.optimizer_steps = opt->steps();
    const bool adam = tc.optimizer == OptimizerKind::adam;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& [name, t] = entries[i];
      ck.tensors.push_back({(adam ? "adam.m/" : "sgd.velocity/") + name, 2, t.shape(), opt->first()[i]});
      if (adam) ck.tensors.push_back({"adam.v/" + name, 2, t.shape(), opt->second()[i]});
    }
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

/// Copies checkpoint parameters into `model`, checking names and shapes.
template <typename S>
void load_parameters(DpffnModel<S>& model, const Checkpoint& ck) {
  for (auto& [name, t] : model.parameters().entries()) {
    const auto* src = ck.find(name);
    if (!src) throw DataError("checkpoint lacks parameter '" + name + "'");
    if (src->shape != t.shape())
      throw DataError("checkpoint parameter '" + name + "' has shape " + to_string(src->shape) + ", model expects " +
                      to_string(t.shape()));
    auto dst = Tensor<S>(t).data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<S>(src->values[k]);
  }
}

template <typename S>
void copy_parameters(DpffnModel<S>& dst, const DpffnModel<S>& src) {
  const auto& a = dst.parameters().entries();
  const auto& b = src.parameters().entries();
  if (a.size() != b.size()) throw GraphError("copy_parameters: models differ in structure");
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto to = Tensor<S>(a[i].second).data();
    const auto from = b[i].second.data();
    if (to.size() != from.size()) throw GraphError("copy_parameters: shape mismatch at '" + a[i].first + "'");
    std::copy(from.begin(), from.end(), to.begin());
  }
}

template <typename S>
void load_optimizer(Optimizer<S>& opt, const DpffnModel<S>& model, const Checkpoint& ck) {
  const bool adam = ck.train.optimizer == OptimizerKind::adam;
  const auto& entries = model.parameters().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& name = entries[i].first;
    const auto* m = ck.find((adam ? "adam.m/" : "sgd.velocity/") + name);
    if (!m || m->values.size() != opt.first()[i].size()) throw DataError("checkpoint lacks optimizer state for '" + name + "'");
    opt.first()[i] = m->values;
    if (adam) {
      const auto* v = ck.find("adam.v/" + name);
      if (!v || v->values.size() != opt.second()[i].size())
        throw DataError("checkpoint lacks optimizer state for '" + name + "'");
      opt.second()[i] = v->values;
    }
  }
  opt.set_steps(ck.optimizer_steps);
}

template <typename S = TrainScalar>
DpffnModel<S> model_from_checkpoint(const Checkpoint& ck) {
  DpffnModel<S> model(ck.model);
  load_parameters(model, ck);
  return model;
}

// ------------------------------------------------------------------- history

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown train_loss;
  double train_accuracy = 0.0;
  std::optional<double> val_accuracy;
  double wall_time_s = 0.0;
};

inline void to_json(Json& j, const EpochRecord& r) {
  j = Json{{"epoch", r.epoch},
           {"lr", r.lr},
           {"train_loss", r.train_loss},
           {"train_accuracy", r.train_accuracy},
           {"val_accuracy", r.val_accuracy ? Json(*r.val_accuracy) : Json(nullptr)},
           {"wall_time_s", r.wall_time_s}};
}

inline void from_json(const Json& j, EpochRecord& r) {
  r.epoch = j.at("epoch").get<int>();
  r.lr = j.at("lr").get<double>();
  const auto& l = j.at("train_loss");
  r.train_loss = {l.at("total").get<double>(), l.at("cross").get<double>(), l.at("fusion").get<double>(),
                  l.at("r_global").get<double>(), l.at("r_local").get<double>()};
  r.train_accuracy = j.at("train_accuracy").get<double>();
  if (!j.at("val_accuracy").is_null()) r.val_accuracy = j.at("val_accuracy").get<double>();
  r.wall_time_s = j.at("wall_time_s").get<double>();
}

using History = std::vector<EpochRecord>;

inline std::string history_jsonl(const History& h) {
  std::string out;
  for (const auto& r : h) out += Json(r).dump() + "\n";
  return out;
}

inline History read_history(const std::filesystem::path& path) {
  History h;
  std::ifstream in(path);
  if (!in) throw DataError("cannot open history '" + path.string() + "'");
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) h.push_back(Json::parse(line).get<EpochRecord>());
  return h;
}

// ---------------------------------------------------------------- evaluation

struct Corruption {
  std::optional<double> snr_db;
  std::optional<double> missing_rate;
  std::uint64_t seed = 0;
};

/// Applies missing-data then noise corruption to one sample with a stream
/// derived from (seed, index).
inline DualPolSample corrupt(const DualPolSample& s, const Corruption& c, std::uint64_t index) {
  if (!c.snr_db && !c.missing_rate) return s;
  DualPolSample out = s;
  if (c.missing_rate) {
    Rng rng(derive_seed(c.seed, {11, index}));
    out = drop_timesteps(out, *c.missing_rate, rng);
  }
  if (c.snr_db) {
    Rng rng(derive_seed(c.seed, {12, index}));
    out = add_noise(out, *c.snr_db, rng);
  }
  return out;
}

template <typename S>
ModelCosts model_costs(const DpffnModel<S>& model, std::size_t steps) {
  return {model.parameters().count(), flops_estimate(model.config(), steps)};
}

template <typename S>
std::vector<int> predict(const DpffnModel<S>& model, const std::vector<const DualPolSample*>& samples,
                         const Corruption& c = {}) {
  NoGradGuard ng;
  std::vector<int> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) out.push_back(model.forward(corrupt(*samples[i], c, i)).predicted());
  return out;
}

template <typename S>
EvalReport evaluate(const DpffnModel<S>& model, const std::vector<const DualPolSample*>& samples,
                    const Corruption& c = {}) {
  if (samples.empty()) throw DataError("evaluation set is empty");
  std::vector<int> labels;
  for (const auto* s : samples) labels.push_back(s->label);
  auto report = evaluate_metrics(predict(model, samples, c), labels, static_cast<std::size_t>(model.config().num_classes),
                                 model_costs(model, samples.front()->steps));
  report.snr_db = c.snr_db;
  report.missing_rate = c.missing_rate;
  return report;
}

/// Held-out postures, or every sample when the split has no test postures.
inline std::vector<const DualPolSample*> evaluation_set(const Dataset& ds) {
  auto test = ds.subset(false);
  return test.empty() ? ds.subset(true) : test;
}

template <typename S = TrainScalar>
EvalReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset, const Corruption& c) {
  const auto model = model_from_checkpoint<S>(load_checkpoint(checkpoint));
  const auto ds = read_dataset(dataset);
  return evaluate(model, evaluation_set(ds), c);
}

// ------------------------------------------------------------------ training

struct TrainOptions {
  std::filesystem::path out_dir;       // empty: nothing written
  std::filesystem::path resume_from;   // empty: fresh start
  std::function<void(const EpochRecord&)> on_epoch;
};

template <typename S>
struct TrainResult {
  DpffnModel<S> model;       // parameters after the last epoch
  DpffnModel<S> best_model;  // parameters at the best validation epoch
  History history;
  int best_epoch = -1;
  double best_val_accuracy = -1.0;
};

inline void check_compatible(const DpffnConfig& m, const Dataset& ds) {
  if (m.num_classes != ds.spec.num_classes)
    throw ConfigError("model.num_classes: " + std::to_string(m.num_classes) + " does not match the dataset's " +
                      std::to_string(ds.spec.num_classes) + " classes");
  if (!ds.samples.empty() && static_cast<int>(ds.samples.front().bins) != m.input_bins)
    throw ConfigError("model.input_bins: " + std::to_string(m.input_bins) + " does not match the dataset's " +
                      std::to_string(ds.samples.front().bins) + " range bins");
}

template <typename S = TrainScalar>
TrainResult<S> train(const DpffnConfig& model_cfg, const TrainConfig& tc, const Dataset& ds, const TrainOptions& opts = {}) {
  model_cfg.validate();
  tc.validate();
  check_compatible(model_cfg, ds);
  const auto train_set = ds.subset(true);
  const auto val_set = ds.subset(false);
  if (train_set.empty()) throw DataError("training split is empty");

  TrainResult<S> res{DpffnModel<S>(model_cfg), DpffnModel<S>(model_cfg), {}, -1, -1.0};
  auto& model = res.model;
  Optimizer<S> opt(model.parameters(), tc);
  Rng rng(derive_seed(tc.seed, {21}));
  int start_epoch = 0;

  const bool write = !opts.out_dir.empty();
  const auto history_path = opts.out_dir / "history.jsonl";
  if (!opts.resume_from.empty()) {
    const auto ck = load_checkpoint(opts.resume_from);
    load_parameters(model, ck);
    load_optimizer(opt, model, ck);
    rng.set_state(ck.rng_state);
    start_epoch = ck.epoch + 1;
    res.best_val_accuracy = ck.best_val_accuracy;
    load_parameters(res.best_model, ck);
    if (write && std::filesystem::exists(history_path))
      for (auto& r : read_history(history_path))
        if (r.epoch < start_epoch) res.history.push_back(r);
    if (write && std::filesystem::exists(opts.out_dir / "best.ckpt")) {
      const auto best = load_checkpoint(opts.out_dir / "best.ckpt");
      load_parameters(res.best_model, best);
      res.best_epoch = best.epoch;
    }
  }

  // Clean inputs are normalized once; corrupted training inputs are rebuilt per epoch.
  const bool corrupt_train = tc.train_snr_db || tc.train_missing_rate;
  std::vector<std::pair<Tensor<S>, Tensor<S>>> cached;
  if (!corrupt_train)
    for (const auto* s : train_set) cached.push_back(model.normalize(*s));

  const auto save = [&](const std::string& file, const DpffnModel<S>& m, int epoch) {
    if (write) save_checkpoint(make_checkpoint(m, tc, epoch, rng.state(), &opt, res.best_val_accuracy), opts.out_dir / file);
  };

  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n = train_set.size();
  const auto batch = static_cast<std::size_t>(tc.batch_size);
  for (int epoch = start_epoch; epoch < tc.max_epochs; ++epoch) {
    const double lr = lr_schedule(epoch, tc);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    std::size_t correct = 0;
    for (std::size_t b0 = 0; b0 < n; b0 += batch) {
      const std::size_t b1 = std::min(n, b0 + batch);
      const S inv = static_cast<S>(1.0 / static_cast<double>(b1 - b0));
      model.parameters().zero_grad();
      for (std::size_t k = b0; k < b1; ++k) {
        const std::size_t idx = order[k];
        std::pair<Tensor<S>, Tensor<S>> in;
        if (corrupt_train) {
          const Corruption c{tc.train_snr_db, tc.train_missing_rate,
                             derive_seed(tc.seed, {22, static_cast<std::uint64_t>(epoch)})};
          in = model.normalize(corrupt(*train_set[idx], c, idx));
        } else {
          in = cached[idx];
        }
        const auto out = model.forward(in.first, in.second);
        const auto loss = total_loss(out, train_set[idx]->label, model_cfg);
        if (!std::isfinite(loss.breakdown.total)) throw NumericError("non-finite loss at epoch " + std::to_string(epoch));
        backward(scale(loss.total, inv));
        rec.train_loss.total += loss.breakdown.total;
        rec.train_loss.cross += loss.breakdown.cross;
        rec.train_loss.fusion += loss.breakdown.fusion;
        rec.train_loss.r_global += loss.breakdown.r_global;
        rec.train_loss.r_local += loss.breakdown.r_local;
        if (out.predicted() == train_set[idx]->label) ++correct;
      }
      if (tc.clip_norm > 0.0) Optimizer<S>::clip(model.parameters(), tc.clip_norm);
      opt.step(model.parameters(), lr);
    }
    const double dn = static_cast<double>(n);
    rec.train_loss.total /= dn;
    rec.train_loss.cross /= dn;
    rec.train_loss.fusion /= dn;
    rec.train_loss.r_global /= dn;
    rec.train_loss.r_local /= dn;
    rec.train_accuracy = static_cast<double>(correct) / dn;

    const bool validate_now = (epoch + 1) % tc.validation_period_epochs == 0 || epoch + 1 == tc.max_epochs;
    if (validate_now) {
      const auto& eval_set = val_set.empty() ? train_set : val_set;
      rec.val_accuracy = evaluate(model, eval_set).accuracy;
      // Ties go to the later epoch: a small validation split saturates early.
      if (*rec.val_accuracy >= res.best_val_accuracy) {
        res.best_val_accuracy = *rec.val_accuracy;
        res.best_epoch = epoch;
        copy_parameters(res.best_model, model);
        save("best.ckpt", model, epoch);
      }
    }
    rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.history.push_back(rec);
    if (write) io::write_atomic(history_path, history_jsonl(res.history));
    if (opts.on_epoch) opts.on_epoch(rec);
  }
  if (write) save("last.ckpt", model, tc.max_epochs - 1);
  return res;
}

template <typename S = TrainScalar>
TrainResult<S> train(const DpffnConfig& model_cfg, const TrainConfig& tc, const std::filesystem::path& dataset_path,
                     const TrainOptions& opts) {
  return train<S>(model_cfg, tc, read_dataset(dataset_path), opts);
}

}  // namespace dpffn
