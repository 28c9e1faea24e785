#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "dpffn/synth.hpp"
#include "dpffn/train.hpp"

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
    s.sequences_per_posture = 2;
    s.hrrps_per_sequence = 8;
    return synth_dataset(s);
  }();
  return ds;
}

TrainConfig quick(int epochs) {
  TrainConfig tc;
  tc.max_epochs = epochs;
  tc.batch_size = 8;
  tc.lr_step_epochs = 2;
  tc.seed = 3;
  return tc;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dpffn_train_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::vector<float> logits(const DpffnModel<float>& m, const Dataset& ds) {
  NoGradGuard ng;
  std::vector<float> out;
  for (const auto& s : ds.samples) {
    const auto o = m.forward(s);
    for (float v : o.logits.data()) out.push_back(v);
  }
  return out;
}

}  // namespace

TEST(LrSchedule, StepDecay) {
  const TrainConfig tc;
  EXPECT_EQ(lr_schedule(0, tc), 0.001);
  EXPECT_EQ(lr_schedule(49, tc), 0.001);
  EXPECT_NEAR(lr_schedule(50, tc), 0.0008, 1e-18);
  EXPECT_NEAR(lr_schedule(100, tc), 0.00064, 1e-18);
  EXPECT_NEAR(lr_schedule(299, tc), 0.001 * std::pow(0.8, 5), 1e-15);
  EXPECT_THROW(lr_schedule(-1, tc), ConfigError);
}

TEST(LrSchedule, MonotoneNonIncreasing) {
  const TrainConfig tc;
  for (int e = 1; e < 300; ++e) EXPECT_LE(lr_schedule(e, tc), lr_schedule(e - 1, tc));
}

TEST(AdamStep, ZeroGradientLeavesParamsButDecaysMoments) {
  const TrainConfig tc;
  std::vector<double> p{1.0, -2.0};
  AdamState st;
  adam_step(p, {0.5, -0.5}, st, 0.01, tc);
  const auto m1 = st.m, v1 = st.v;
  const auto p1 = p;
  adam_step(p, {0.0, 0.0}, st, 0.01, tc);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_NEAR(st.m[k], 0.9 * m1[k], 1e-15);
    EXPECT_NEAR(st.v[k], 0.999 * v1[k], 1e-15);
  }
  // Momentum still moves params; zero grads from a fresh state do not.
  AdamState fresh;
  std::vector<double> q{1.0, -2.0};
  adam_step(q, {0.0, 0.0}, fresh, 0.01, tc);
  EXPECT_EQ(q, (std::vector<double>{1.0, -2.0}));
  EXPECT_EQ(fresh.t, 1);
  EXPECT_NE(p, p1);
}

TEST(AdamStep, ConstantGradientStepApproachesLr) {
  const TrainConfig tc;
  for (double g : {1e-3, 1.0, 250.0}) {
    std::vector<double> p{0.0};
    AdamState st;
    for (int i = 0; i < 100; ++i) {
      const double before = p[0];
      adam_step(p, {g}, st, 0.001, tc);
      EXPECT_NEAR(before - p[0], 0.001, 0.01 * 0.001) << "g " << g << " step " << i;
    }
  }
}

TEST(AdamStep, Errors) {
  const TrainConfig tc;
  std::vector<double> p{0.0, 1.0};
  AdamState st;
  EXPECT_THROW(adam_step(p, {1.0}, st, 0.1, tc), ShapeError);
  EXPECT_THROW(adam_step(p, {1.0, std::numeric_limits<double>::quiet_NaN()}, st, 0.1, tc), NumericError);
  EXPECT_THROW(adam_step(p, {std::numeric_limits<double>::infinity(), 0.0}, st, 0.1, tc), NumericError);
  EXPECT_EQ(p, (std::vector<double>{0.0, 1.0}));
}

TEST(AdamStep, Deterministic) {
  const TrainConfig tc;
  std::vector<double> a{0.3, -0.7, 2.0}, b = a;
  AdamState sa, sb;
  Rng ra(9), rb(9);
  for (int i = 0; i < 50; ++i) {
    adam_step(a, {ra.uniform(-1, 1), ra.uniform(-1, 1), ra.uniform(-1, 1)}, sa, 0.01, tc);
    adam_step(b, {rb.uniform(-1, 1), rb.uniform(-1, 1), rb.uniform(-1, 1)}, sb, 0.01, tc);
  }
  EXPECT_EQ(a, b);
}

TEST(Optimizer, NonFiniteGradientNamesParameter) {
  DpffnModel<float> m(tiny_model());
  Optimizer<float> opt(m.parameters(), TrainConfig{});
  m.parameters().zero_grad();
  const auto out = m.forward(tiny_data().samples.front());
  backward(sum_all(out.logits));
  auto& [name, t] = m.parameters().entries().front();
  t.node()->grad[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    opt.step(m.parameters(), 0.001);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find(name), std::string::npos) << e.what();
  }
}

TEST(Optimizer, ClipScalesToMaxNorm) {
  DpffnModel<double> m(tiny_model());
  m.parameters().zero_grad();
  backward(sum_all(m.forward(tiny_data().samples.front()).logits));
  const double before = Optimizer<double>::clip(m.parameters(), 0.0);
  ASSERT_GT(before, 1e-3);
  Optimizer<double>::clip(m.parameters(), before / 4.0);
  EXPECT_NEAR(Optimizer<double>::clip(m.parameters(), 0.0), before / 4.0, 1e-9 * before);
}

TEST(Checkpoint, RoundTripGivesIdenticalPredictions) {
  DpffnModel<float> m(tiny_model());
  const auto ck = make_checkpoint<float>(m, quick(1), 4, "state", nullptr, 0.5);
  const auto back = decode_checkpoint(encode_checkpoint(ck), "mem");
  EXPECT_EQ(back.epoch, 4);
  EXPECT_EQ(back.rng_state, "state");
  EXPECT_EQ(back.best_val_accuracy, 0.5);
  EXPECT_EQ(back.model.d_model, 16);
  EXPECT_EQ(back.train.batch_size, 8);
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (const auto& t : back.tensors) EXPECT_EQ(t.dtype, 1);
  const auto m2 = model_from_checkpoint<float>(back);
  EXPECT_EQ(logits(m, tiny_data()), logits(m2, tiny_data()));
}

TEST(Checkpoint, OptimizerStateRoundTrips) {
  DpffnModel<double> m(tiny_model());
  Optimizer<double> opt(m.parameters(), TrainConfig{});
  m.parameters().zero_grad();
  backward(sum_all(m.forward(tiny_data().samples.front()).logits));
  opt.step(m.parameters(), 0.001);
  const auto ck = decode_checkpoint(encode_checkpoint(make_checkpoint(m, TrainConfig{}, 0, "", &opt, 0.0)), "mem");
  EXPECT_EQ(ck.optimizer_steps, 1);
  Optimizer<double> again(m.parameters(), TrainConfig{});
  load_optimizer(again, m, ck);
  EXPECT_EQ(again.steps(), 1);
  EXPECT_EQ(again.first(), opt.first());
  EXPECT_EQ(again.second(), opt.second());
}

TEST(Checkpoint, DecodeErrors) {
  DpffnModel<float> m(tiny_model());
  auto bytes = encode_checkpoint(make_checkpoint<float>(m, TrainConfig{}, 0, "", nullptr, 0.0));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad, "mem"), DataError);
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(decode_checkpoint(longer, "mem"), DataError);
  auto shorter = bytes;
  shorter.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(shorter, "mem"), DataError);
}

TEST(Checkpoint, ShapeMismatchOnLoad) {
  DpffnModel<float> m(tiny_model());
  const auto ck = make_checkpoint<float>(m, TrainConfig{}, 0, "", nullptr, 0.0);
  auto other = tiny_model();
  other.d_model = 32;
  DpffnModel<float> big(other);
  EXPECT_THROW(load_parameters(big, ck), DataError);
}

TEST(TrainConfigJson, RoundTripAndErrors) {
  auto tc = quick(7);
  tc.train_snr_db = 10.0;
  const auto back = Json(tc).get<TrainConfig>();
  EXPECT_EQ(back.max_epochs, 7);
  EXPECT_EQ(back.train_snr_db, 10.0);
  EXPECT_FALSE(back.train_missing_rate);
  try {
    Json(Json{{"lr0", -1.0}}).get<TrainConfig>();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.lr0"), std::string::npos);
  }
  EXPECT_THROW(Json(Json{{"optimizer", "rmsprop"}}).get<TrainConfig>(), ConfigError);
  EXPECT_THROW(Json(Json{{"batch_size", "big"}}).get<TrainConfig>(), ConfigError);
}

TEST(Train, OneEpochSmoke) {
  const auto dir = scratch("smoke");
  TrainOptions o;
  o.out_dir = dir;
  const auto res = train<float>(tiny_model(), quick(1), tiny_data(), o);
  ASSERT_EQ(res.history.size(), 1u);
  EXPECT_TRUE(res.history[0].val_accuracy);
  EXPECT_TRUE(std::isfinite(res.history[0].train_loss.total));
  EXPECT_EQ(res.best_epoch, 0);
  for (const char* f : {"best.ckpt", "last.ckpt", "history.jsonl"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto ck = load_checkpoint(dir / "last.ckpt");
  EXPECT_EQ(ck.epoch, 0);
  EXPECT_EQ(read_history(dir / "history.jsonl").size(), 1u);
  fs::remove_all(dir);
}

TEST(Train, HistoryLrMatchesSchedule) {
  const auto tc = quick(5);
  const auto res = train<float>(tiny_model(), tc, tiny_data());
  ASSERT_EQ(res.history.size(), 5u);
  for (const auto& r : res.history) EXPECT_EQ(r.lr, lr_schedule(r.epoch, tc));
  for (const auto& r : res.history) {
    EXPECT_NEAR(r.train_loss.total, r.train_loss.cross + 2.0 * r.train_loss.fusion, 1e-4);
    EXPECT_GE(r.train_accuracy, 0.0);
    EXPECT_LE(r.train_accuracy, 1.0);
  }
}

TEST(Train, Deterministic) {
  const auto a = train<float>(tiny_model(), quick(3), tiny_data());
  const auto b = train<float>(tiny_model(), quick(3), tiny_data());
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].train_loss.total, b.history[i].train_loss.total);
    EXPECT_EQ(a.history[i].val_accuracy, b.history[i].val_accuracy);
  }
  EXPECT_EQ(logits(a.model, tiny_data()), logits(b.model, tiny_data()));
}

TEST(Train, ResumeMatchesUninterrupted) {
  const auto full = train<float>(tiny_model(), quick(4), tiny_data());

  const auto dir = scratch("resume");
  TrainOptions o;
  o.out_dir = dir;
  train<float>(tiny_model(), quick(2), tiny_data(), o);
  o.resume_from = dir / "last.ckpt";
  const auto resumed = train<float>(tiny_model(), quick(4), tiny_data(), o);

  ASSERT_EQ(resumed.history.size(), 4u);
  EXPECT_EQ(resumed.history[2].epoch, 2);
  EXPECT_EQ(resumed.history[2].lr, lr_schedule(2, quick(4)));
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_EQ(resumed.history[i].train_loss.total, full.history[i].train_loss.total) << "epoch " << i;
  EXPECT_EQ(logits(resumed.model, tiny_data()), logits(full.model, tiny_data()));
  EXPECT_EQ(read_history(dir / "history.jsonl").size(), 4u);
  fs::remove_all(dir);
}

TEST(Train, ValidationPeriod) {
  auto tc = quick(5);
  tc.validation_period_epochs = 2;
  const auto res = train<float>(tiny_model(), tc, tiny_data());
  std::vector<bool> has;
  for (const auto& r : res.history) has.push_back(r.val_accuracy.has_value());
  EXPECT_EQ(has, (std::vector<bool>{false, true, false, true, true}));
}

TEST(Train, BestModelMatchesBestAccuracy) {
  const auto res = train<float>(tiny_model(), quick(4), tiny_data());
  EXPECT_DOUBLE_EQ(evaluate(res.best_model, tiny_data().subset(false)).accuracy, res.best_val_accuracy);
  EXPECT_EQ(res.history[static_cast<std::size_t>(res.best_epoch)].val_accuracy, res.best_val_accuracy);
  for (const auto& r : res.history) EXPECT_LE(*r.val_accuracy, res.best_val_accuracy);
}

TEST(Train, TrainingCorruptionRuns) {
  auto tc = quick(1);
  tc.train_snr_db = 5.0;
  tc.train_missing_rate = 0.5;
  const auto res = train<float>(tiny_model(), tc, tiny_data());
  EXPECT_TRUE(std::isfinite(res.history[0].train_loss.total));
}

TEST(Train, IncompatibleConfigs) {
  auto m = tiny_model();
  m.num_classes = 4;
  EXPECT_THROW(train<float>(m, quick(1), tiny_data()), ConfigError);
  m = tiny_model();
  m.input_bins = 64;
  EXPECT_THROW(train<float>(m, quick(1), tiny_data()), ConfigError);
  auto tc = quick(1);
  tc.batch_size = 0;
  EXPECT_THROW(train<float>(tiny_model(), tc, tiny_data()), ConfigError);
}

TEST(Evaluate, CorruptionIsDeterministicAndTagged) {
  const DpffnModel<float> m(tiny_model());
  const auto set = evaluation_set(tiny_data());
  const Corruption c{0.0, 0.5, 11};
  const auto a = evaluate(m, set, c), b = evaluate(m, set, c);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.confusion, b.confusion);
  EXPECT_EQ(a.snr_db, 0.0);
  EXPECT_EQ(a.missing_rate, 0.5);
  EXPECT_EQ(a.params, m.parameters().count());
  EXPECT_THROW(evaluate(m, std::vector<const DualPolSample*>{}), DataError);
}

TEST(Evaluate, CleanCorruptionIsIdentity) {
  const auto& s = tiny_data().samples.front();
  const auto c = corrupt(s, Corruption{}, 0);
  EXPECT_EQ(c.hh, s.hh);
  EXPECT_EQ(c.vh, s.vh);
  EXPECT_EQ(c.steps, s.steps);
}
