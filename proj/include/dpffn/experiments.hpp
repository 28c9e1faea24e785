#pragma once

#include <atomic>
#include <exception>
#include <filesystem>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dpffn/train.hpp"

namespace dpffn {

/// Runs fn(0..n-1) on up to `jobs` threads. The first exception is rethrown
/// after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct AblationRow {
  std::string name;
  DpffnConfig config;
  std::size_t params = 0;
  double best_val_accuracy = 0.0;
  EvalReport report;  // best checkpoint on the held-out postures
};

inline void to_json(Json& j, const AblationRow& r) {
  j = Json{{"name", r.name},
           {"config", r.config},
           {"params", r.params},
           {"best_val_accuracy", r.best_val_accuracy},
           {"report", r.report}};
}

/// The five-row ladder: HH-only transformer; + local branch; HH and VH
/// concatenated; + GMU/cross-attention fusion (lambda = 0); full model.
inline std::vector<std::pair<std::string, DpffnConfig>> ablation_ladder(const DpffnConfig& base) {
  std::vector<std::pair<std::string, DpffnConfig>> rows;
  auto cfg = [&](bool vh, bool local, FusionMode mode, double lambda) {
    DpffnConfig c = base;
    c.ablation = {local, vh, mode};
    c.lambda = lambda;
    return c;
  };
  rows.emplace_back("transformer_hh", cfg(false, false, FusionMode::concat, 0.0));
  rows.emplace_back("plus_local_hh", cfg(false, true, FusionMode::concat, 0.0));
  rows.emplace_back("hh_vh_concat", cfg(true, true, FusionMode::concat, 0.0));
  rows.emplace_back("plus_fusion_module", cfg(true, true, FusionMode::gmu_cross, 0.0));
  rows.emplace_back("full_dpffn", cfg(true, true, FusionMode::gmu_cross, base.lambda));
  return rows;
}

inline std::filesystem::path subdir(const std::filesystem::path& out, const std::string& name) {
  return out.empty() ? out : out / name;
}

inline std::vector<AblationRow> run_ablation(const Dataset& ds, const DpffnConfig& base, const TrainConfig& tc,
                                             const std::filesystem::path& out_dir = {}, int jobs = 1) {
  const auto ladder = ablation_ladder(base);
  std::vector<AblationRow> rows(ladder.size());
  parallel_for(ladder.size(), jobs, [&](std::size_t i) {
    const auto& [name, cfg] = ladder[i];
    TrainOptions opts;
    opts.out_dir = subdir(out_dir, name);
    const auto res = train<TrainScalar>(cfg, tc, ds, opts);
    rows[i] = {name, cfg, res.best_model.parameters().count(), res.best_val_accuracy,
               evaluate(res.best_model, evaluation_set(ds))};
  });
  if (!out_dir.empty()) io::write_atomic(out_dir / "ablation.json", Json(rows).dump(2) + "\n");
  return rows;
}

inline const std::vector<double>& default_snr_grid() {
  static const std::vector<double> g{20.0, 15.0, 10.0, 5.0, 0.0};
  return g;
}

inline const std::vector<double>& default_missing_grid() {
  static const std::vector<double> g{0.0, 0.5, 0.75, 0.875};
  return g;
}

/// One report per SNR level, evaluated on the held-out postures.
template <typename S>
std::vector<EvalReport> sweep_snr(const DpffnModel<S>& model, const Dataset& ds, const std::vector<double>& grid,
                                  std::uint64_t seed = 0, int jobs = 1) {
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  const auto set = evaluation_set(ds);
  std::vector<EvalReport> out(grid.size());
  parallel_for(grid.size(), jobs, [&](std::size_t i) { out[i] = evaluate(model, set, Corruption{grid[i], {}, seed}); });
  return out;
}

template <typename S>
std::vector<EvalReport> sweep_missing(const DpffnModel<S>& model, const Dataset& ds, const std::vector<double>& grid,
                                      std::uint64_t seed = 0, int jobs = 1) {
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  const auto set = evaluation_set(ds);
  std::vector<EvalReport> out(grid.size());
  parallel_for(grid.size(), jobs, [&](std::size_t i) { out[i] = evaluate(model, set, Corruption{{}, grid[i], seed}); });
  return out;
}

enum class HyperParam { heads, global_depth, local_depth };

inline HyperParam hyperparam_from_string(const std::string& s) {
  if (s == "heads") return HyperParam::heads;
  if (s == "M" || s == "global_depth") return HyperParam::global_depth;
  if (s == "N" || s == "local_depth") return HyperParam::local_depth;
  throw ConfigError("hyperparam: expected heads, M or N, got '" + s + "'");
}

inline std::string to_string(HyperParam h) {
  switch (h) {
    case HyperParam::heads: return "heads";
    case HyperParam::global_depth: return "M";
    case HyperParam::local_depth: return "N";
  }
  return "?";
}

inline const std::vector<int>& default_hyperparam_grid() {
  static const std::vector<int> g{4, 6, 8, 10, 12};
  return g;
}

inline DpffnConfig with_hyperparam(DpffnConfig c, HyperParam h, int value) {
  switch (h) {
    case HyperParam::heads: c.num_heads = value; break;
    case HyperParam::global_depth: c.global_depth = value; break;
    case HyperParam::local_depth: c.local_depth = value; break;
  }
  c.validate();
  return c;
}

struct HyperparamPoint {
  std::string name;
  int value = 0;
  std::size_t param_count = 0;
  double best_val_accuracy = 0.0;
  EvalReport report;
};

inline void to_json(Json& j, const HyperparamPoint& p) {
  j = Json{{"name", p.name},
           {"value", p.value},
           {"param_count", p.param_count},
           {"best_val_accuracy", p.best_val_accuracy},
           {"report", p.report}};
}

/// Trains one model per grid value of the chosen hyperparameter.
inline std::vector<HyperparamPoint> sweep_hyperparam(const Dataset& ds, HyperParam h, const std::vector<int>& grid,
                                                     const DpffnConfig& base, const TrainConfig& tc,
                                                     const std::filesystem::path& out_dir = {}, int jobs = 1) {
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  std::vector<DpffnConfig> cfgs;
  for (int v : grid) cfgs.push_back(with_hyperparam(base, h, v));  // validate all before training
  std::vector<HyperparamPoint> out(grid.size());
  parallel_for(grid.size(), jobs, [&](std::size_t i) {
    const auto name = to_string(h) + "=" + std::to_string(grid[i]);
    TrainOptions opts;
    opts.out_dir = subdir(out_dir, to_string(h) + "_" + std::to_string(grid[i]));
    const auto res = train<TrainScalar>(cfgs[i], tc, ds, opts);
    out[i] = {name, grid[i], param_count(cfgs[i]), res.best_val_accuracy, evaluate(res.best_model, evaluation_set(ds))};
  });
  if (!out_dir.empty()) io::write_atomic(out_dir / "hyperparam.json", Json(out).dump(2) + "\n");
  return out;
}

/// CSV rows: label, posture, split, then the pooled fused feature vector.
template <typename S>
std::string export_features(const DpffnModel<S>& model, const Dataset& ds) {
  NoGradGuard ng;
  std::ostringstream os;
  os.precision(9);
  const int d = model.config().d_model;
  os << "label,posture,split";
  for (int k = 0; k < d; ++k) os << ",f" << k;
  os << '\n';
  for (const auto& s : ds.samples) {
    const auto out = model.forward(s);
    os << s.label << ',' << s.posture_id << ',' << (ds.split.is_train(s.label, s.posture_id) ? "train" : "test");
    for (auto v : out.fused.data()) os << ',' << static_cast<double>(v);
    os << '\n';
  }
  return os.str();
}

}  // namespace dpffn
