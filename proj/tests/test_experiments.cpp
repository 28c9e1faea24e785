#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <sstream>

#include "dpffn/experiments.hpp"
#include "dpffn/synth.hpp"

using namespace dpffn;
namespace fs = std::filesystem;

namespace {

DpffnConfig tiny_model() {
  DpffnConfig c;
  c.d_model = 16;
  c.num_heads = 2;
  c.global_depth = 1;
  c.local_depth = 1;
  c.num_classes = 3;
  c.input_bins = 128;
  return c;
}

const Dataset& tiny_data() {
  static const Dataset ds = [] {
    auto s = DatasetSpec::desk_default();
    s.sequences_per_posture = 1;
    s.hrrps_per_sequence = 4;
    return synth_dataset(s);
  }();
  return ds;
}

TrainConfig one_epoch() {
  TrainConfig tc;
  tc.max_epochs = 1;
  tc.batch_size = 8;
  return tc;
}

}  // namespace

TEST(AblationLadder, FiveRowsInOrder) {
  const auto rows = ablation_ladder(tiny_model());
  ASSERT_EQ(rows.size(), 5u);
  const std::vector<std::string> names{"transformer_hh", "plus_local_hh", "hh_vh_concat", "plus_fusion_module",
                                       "full_dpffn"};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(rows[i].first, names[i]);

  const auto& first = rows[0].second.ablation;
  EXPECT_FALSE(first.use_local);
  EXPECT_FALSE(first.use_vh);
  EXPECT_TRUE(rows[1].second.ablation.use_local);
  EXPECT_FALSE(rows[1].second.ablation.use_vh);
  EXPECT_TRUE(rows[2].second.ablation.use_vh);
  EXPECT_EQ(rows[2].second.ablation.fusion_mode, FusionMode::concat);
  EXPECT_EQ(rows[3].second.ablation.fusion_mode, FusionMode::gmu_cross);
}

TEST(AblationLadder, LambdaOnlyInLastRow) {
  auto base = tiny_model();
  base.lambda = 2.0;
  const auto rows = ablation_ladder(base);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(rows[i].second.lambda, 0.0) << rows[i].first;
  EXPECT_EQ(rows[4].second.lambda, 2.0);
  // The last two rows differ only in lambda.
  auto a = Json(rows[3].second), b = Json(rows[4].second);
  a.erase("lambda");
  b.erase("lambda");
  EXPECT_EQ(a, b);
}

TEST(AblationLadder, ParamCountsGrowAlongLadder) {
  const auto rows = ablation_ladder(tiny_model());
  EXPECT_LT(param_count(rows[0].second), param_count(rows[1].second));
  EXPECT_LT(param_count(rows[1].second), param_count(rows[2].second));
  EXPECT_LT(param_count(rows[2].second), param_count(rows[3].second));
  EXPECT_EQ(param_count(rows[3].second), param_count(rows[4].second));
}

TEST(RunAblation, WritesRowsAndTable) {
  const auto dir = fs::temp_directory_path() / ("dpffn_abl_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  const auto rows = run_ablation(tiny_data(), tiny_model(), one_epoch(), dir, 2);
  ASSERT_EQ(rows.size(), 5u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.params, param_count(r.config)) << r.name;
    EXPECT_EQ(r.report.params, r.params);
    EXPECT_GE(r.report.accuracy, 0.0);
    EXPECT_LE(r.report.accuracy, 1.0);
    EXPECT_TRUE(fs::exists(dir / r.name / "best.ckpt")) << r.name;
  }
  const auto table = Json::parse(io::read_text(dir / "ablation.json"));
  ASSERT_EQ(table.size(), 5u);
  EXPECT_EQ(table[4]["name"], "full_dpffn");
  fs::remove_all(dir);
}

TEST(Grids, Defaults) {
  EXPECT_EQ(default_snr_grid(), (std::vector<double>{20, 15, 10, 5, 0}));
  EXPECT_EQ(default_missing_grid(), (std::vector<double>{0.0, 0.5, 0.75, 0.875}));
  EXPECT_EQ(default_hyperparam_grid(), (std::vector<int>{4, 6, 8, 10, 12}));
}

TEST(Sweeps, OneReportPerGridPoint) {
  const DpffnModel<float> m(tiny_model());
  const auto snr = sweep_snr(m, tiny_data(), default_snr_grid());
  ASSERT_EQ(snr.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(snr[i].snr_db, default_snr_grid()[i]);
  const auto miss = sweep_missing(m, tiny_data(), default_missing_grid(), 0, 3);
  ASSERT_EQ(miss.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(miss[i].missing_rate, default_missing_grid()[i]);
  EXPECT_THROW(sweep_snr(m, tiny_data(), {}), ConfigError);
}

TEST(Sweeps, ThreadCountDoesNotChangeResults) {
  const DpffnModel<float> m(tiny_model());
  const auto a = sweep_snr(m, tiny_data(), default_snr_grid(), 4, 1);
  const auto b = sweep_snr(m, tiny_data(), default_snr_grid(), 4, 4);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].confusion, b[i].confusion);
}

TEST(HyperParam, Strings) {
  EXPECT_EQ(hyperparam_from_string("heads"), HyperParam::heads);
  EXPECT_EQ(hyperparam_from_string("M"), HyperParam::global_depth);
  EXPECT_EQ(hyperparam_from_string("N"), HyperParam::local_depth);
  EXPECT_EQ(hyperparam_from_string("local_depth"), HyperParam::local_depth);
  EXPECT_THROW(hyperparam_from_string("depth"), ConfigError);
  for (auto h : {HyperParam::heads, HyperParam::global_depth, HyperParam::local_depth})
    EXPECT_EQ(hyperparam_from_string(to_string(h)), h);
}

TEST(HyperParam, WithValueValidates) {
  const auto c = with_hyperparam(tiny_model(), HyperParam::global_depth, 3);
  EXPECT_EQ(c.global_depth, 3);
  EXPECT_THROW(with_hyperparam(tiny_model(), HyperParam::heads, 5), ConfigError);  // 16 % 5 != 0
}

TEST(HyperParam, SweepRecordsParamCount) {
  const auto pts = sweep_hyperparam(tiny_data(), HyperParam::local_depth, {1, 2}, tiny_model(), one_epoch());
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_EQ(pts[0].name, "N=1");
  EXPECT_EQ(pts[1].value, 2);
  EXPECT_EQ(pts[0].param_count, param_count(tiny_model()));
  EXPECT_LT(pts[0].param_count, pts[1].param_count);
  EXPECT_THROW(sweep_hyperparam(tiny_data(), HyperParam::heads, {2, 3}, tiny_model(), one_epoch()), ConfigError);
}

TEST(ExportFeatures, OneRowPerSample) {
  const DpffnModel<float> m(tiny_model());
  const auto csv = export_features(m, tiny_data());
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("label,posture,split,f0", 0), 0u);
  std::size_t rows = 0, train = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 3 + 16 - 1);
    train += line.find(",train,") != std::string::npos;
  }
  EXPECT_EQ(rows, tiny_data().samples.size());
  EXPECT_EQ(train, tiny_data().subset(true).size());
}

TEST(ParallelFor, CoversEveryIndexAndRethrows) {
  std::vector<std::atomic<int>> hits(100);
  parallel_for(100, 4, [&](std::size_t i) { ++hits[i]; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_THROW(parallel_for(10, 3,
                            [](std::size_t i) {
                              if (i == 7) throw DataError("boom");
                            }),
               DataError);
}
