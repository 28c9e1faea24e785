#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "dpffn/radar.hpp"
#include "dpffn/rng.hpp"
#include "dpffn/sample.hpp"

namespace dpffn {

struct DatasetSpec {
  int num_classes = 3;
  int postures_per_class = 4;
  int sequences_per_posture = 4;
  int hrrps_per_sequence = 32;
  radar::RadarConfig radar{9e9, 2e9, 20e6, 128};
  std::array<int, 2> centers_per_class_range{4, 8};
  double angle_sweep_deg = 2.0;
  double posture_step_deg = 3.0;
  std::uint64_t rng_seed = 0;
  double train_fraction = 0.8;
  // Classes come in pairs sharing geometry and HH response; only VH differs.
  bool pol_complementary = false;

  /// 3 classes x 4 postures x 4 sequences, T = 32, L = 128.
  static DatasetSpec desk_default() { return DatasetSpec{}; }

  /// 10 classes x 10 postures x 25 sequences, T = 512, L = 512.
  static DatasetSpec paper_scale() {
    DatasetSpec s;
    s.num_classes = 10;
    s.postures_per_class = 10;
    s.sequences_per_posture = 25;
    s.hrrps_per_sequence = 512;
    s.radar = radar::RadarConfig{};
    return s;
  }

  std::size_t total_sequences() const {
    return static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(postures_per_class) *
           static_cast<std::size_t>(sequences_per_posture);
  }

  /// Training postures per class: round(train_fraction * P) clamped to [1, P-1]
  /// (all postures when P = 1).
  int train_postures() const {
    if (postures_per_class == 1) return 1;
    const int n = static_cast<int>(std::lround(train_fraction * postures_per_class));
    return std::clamp(n, 1, postures_per_class - 1);
  }

  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("spec." + key + ": " + why); };
    if (num_classes < 1) fail("num_classes", "must be >= 1");
    if (num_classes > 65535) fail("num_classes", "must fit in 16 bits");
    if (postures_per_class < 1) fail("postures_per_class", "must be >= 1");
    if (postures_per_class > 65535) fail("postures_per_class", "must fit in 16 bits");
    if (sequences_per_posture < 1) fail("sequences_per_posture", "must be >= 1");
    if (hrrps_per_sequence < 1) fail("hrrps_per_sequence", "must be >= 1");
    if (centers_per_class_range[0] < 1 || centers_per_class_range[1] < centers_per_class_range[0])
      fail("centers_per_class_range", "expected 1 <= min <= max");
    if (!(angle_sweep_deg >= 0.0) || !std::isfinite(angle_sweep_deg)) fail("angle_sweep_deg", "must be finite and >= 0");
    if (!std::isfinite(posture_step_deg)) fail("posture_step_deg", "must be finite");
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) fail("train_fraction", "must be in (0, 1]");
    try {
      radar.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("spec.") + e.what());
    }
  }
};

inline void to_json(Json& j, const DatasetSpec& s) {
  j = Json{{"num_classes", s.num_classes},
           {"postures_per_class", s.postures_per_class},
           {"sequences_per_posture", s.sequences_per_posture},
           {"hrrps_per_sequence", s.hrrps_per_sequence},
           {"radar", s.radar},
           {"centers_per_class_range", s.centers_per_class_range},
           {"angle_sweep_deg", s.angle_sweep_deg},
           {"posture_step_deg", s.posture_step_deg},
           {"rng_seed", s.rng_seed},
           {"train_fraction", s.train_fraction},
           {"pol_complementary", s.pol_complementary}};
}

inline void from_json(const Json& j, DatasetSpec& s) {
  const std::string p = "spec";
  detail::read_field(j, "num_classes", p, s.num_classes);
  detail::read_field(j, "postures_per_class", p, s.postures_per_class);
  detail::read_field(j, "sequences_per_posture", p, s.sequences_per_posture);
  detail::read_field(j, "hrrps_per_sequence", p, s.hrrps_per_sequence);
  if (j.contains("radar")) {
    try {
      radar::from_json(j.at("radar"), s.radar);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("spec.") + e.what());
    }
  }
  detail::read_field(j, "centers_per_class_range", p, s.centers_per_class_range);
  detail::read_field(j, "angle_sweep_deg", p, s.angle_sweep_deg);
  detail::read_field(j, "posture_step_deg", p, s.posture_step_deg);
  detail::read_field(j, "rng_seed", p, s.rng_seed);
  detail::read_field(j, "train_fraction", p, s.train_fraction);
  detail::read_field(j, "pol_complementary", p, s.pol_complementary);
  s.validate();
}

namespace detail {

inline radar::cplx random_phasor(Rng& rng, double lo, double hi) {
  return std::polar(rng.uniform(lo, hi), rng.uniform(0.0, 2.0 * std::numbers::pi));
}

// Stream tags keep the per-purpose RNG streams disjoint.
enum : std::uint64_t { kTemplateStream = 1, kPolStream = 2, kSequenceStream = 3, kSplitStream = 4 };

}  // namespace detail

/// Class template: positions uniform within +/-40% of the unambiguous window
/// (both along and across the line of sight), per-center scattering matrices
/// whose VH/HH ratio is drawn around a class-level mean. Deterministic in
/// (class_id, spec.rng_seed).
inline radar::ScatteringCenterSet synth_target(int class_id, const DatasetSpec& spec) {
  spec.validate();
  if (class_id < 0 || class_id >= spec.num_classes)
    throw DataError("class id " + std::to_string(class_id) + " outside [0, " + std::to_string(spec.num_classes) + ")");
  const auto cid = static_cast<std::uint64_t>(class_id);
  // In complementary mode the geometry and HH response belong to the pair.
  const std::uint64_t geometry_id = spec.pol_complementary ? cid / 2 : cid;
  Rng geo(derive_seed(spec.rng_seed, {detail::kTemplateStream, geometry_id}));
  Rng pol(derive_seed(spec.rng_seed, {detail::kPolStream, geometry_id}));

  const auto [lo, hi] = spec.centers_per_class_range;
  const int count = lo + static_cast<int>(geo.below(static_cast<std::uint64_t>(hi - lo + 1)));
  const double extent = 0.4 * spec.radar.half_window_m();
  const double class_ratio = pol.uniform(0.2, 1.0);

  radar::ScatteringCenterSet set;
  set.class_id = class_id;
  for (int i = 0; i < count; ++i) {
    radar::ScatteringCenter c;
    c.position_m = geo.uniform(-extent, extent);
    c.cross_range_m = geo.uniform(-extent, extent);
    c.amplitude = detail::random_phasor(geo, 0.5, 1.0);
    c.scattering.hh = detail::random_phasor(pol, 0.6, 1.0);
    c.scattering.vh = detail::random_phasor(pol, 0.5 * class_ratio, 1.5 * class_ratio);
    c.scattering.hv = c.scattering.vh;
    c.scattering.vv = detail::random_phasor(pol, 0.6, 1.0);
    set.centers.push_back(c);
  }

  if (spec.pol_complementary) {
    // Pair members get complementary strong/weak VH patterns so the VH
    // channel alone separates them.
    Rng pattern(derive_seed(spec.rng_seed, {detail::kPolStream, geometry_id, 1}));
    Rng phases(derive_seed(spec.rng_seed, {detail::kPolStream, cid, 2}));
    const bool second = (cid % 2) == 1;
    for (std::size_t i = 0; i < set.centers.size(); ++i) {
      bool strong = pattern.below(2) == 1;
      if (i == 0) strong = true;  // guarantee both members have a strong and a weak center
      if (i == 1) strong = false;
      if (second) strong = !strong;
      const double mag = strong ? phases.uniform(0.7, 1.0) : phases.uniform(0.0, 0.08);
      set.centers[i].scattering.vh = std::polar(mag, phases.uniform(0.0, 2.0 * std::numbers::pi));
      set.centers[i].scattering.hv = set.centers[i].scattering.vh;
    }
  }
  return set;
}

/// Line-of-sight positions after rotating the body frame by `angle_deg`.
inline radar::ScatteringCenterSet rotate_target(const radar::ScatteringCenterSet& target, double angle_deg) {
  const double a = angle_deg * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  radar::ScatteringCenterSet out = target;
  for (auto& c : out.centers) c.position_m = c.position_m * ca + c.cross_range_m * sa;
  return out;
}

/// HRRP magnitude row |range_profile(freq_response)| for one channel.
inline std::vector<double> magnitude_profile(const radar::ScatteringCenterSet& set, radar::Pol tx, radar::Pol rx,
                                             const radar::RadarConfig& r) {
  const auto spectrum = radar::freq_response(set, tx, rx, r);
  const auto profile = radar::range_profile(spectrum, r);
  std::vector<double> mag(profile.size());
  for (std::size_t b = 0; b < profile.size(); ++b) mag[b] = std::abs(profile[b]);
  return mag;
}

/// One HH/VH sequence: the target is rotated to its posture angle
/// (posture_id * posture_step_deg), then swept over angle_sweep_deg across
/// the T rows starting from a seeded offset.
inline DualPolSample synth_sequence(const radar::ScatteringCenterSet& target, int posture_id, int seq_index,
                                    const DatasetSpec& spec) {
  spec.validate();
  if (posture_id < 0) throw DataError("posture id must be non-negative");
  Rng rng(derive_seed(spec.rng_seed, {detail::kSequenceStream, static_cast<std::uint64_t>(target.class_id),
                                      static_cast<std::uint64_t>(posture_id), static_cast<std::uint64_t>(seq_index)}));
  const std::size_t T = static_cast<std::size_t>(spec.hrrps_per_sequence);
  const std::size_t L = static_cast<std::size_t>(spec.radar.range_bins);
  const double start = posture_id * spec.posture_step_deg + rng.uniform(-0.5, 0.5) * spec.angle_sweep_deg;
  const double step = T > 1 ? spec.angle_sweep_deg / static_cast<double>(T - 1) : 0.0;

  DualPolSample s;
  s.steps = T;
  s.bins = L;
  s.hh.resize(T * L);
  s.vh.resize(T * L);
  s.label = target.class_id;
  s.posture_id = posture_id;
  s.meta["sequence"] = std::to_string(seq_index);
  s.meta["start_angle_deg"] = std::to_string(start);
  for (std::size_t t = 0; t < T; ++t) {
    const auto rotated = rotate_target(target, start + step * static_cast<double>(t));
    const auto hh = magnitude_profile(rotated, radar::Pol::H, radar::Pol::H, spec.radar);
    const auto vh = magnitude_profile(rotated, radar::Pol::H, radar::Pol::V, spec.radar);
    for (std::size_t b = 0; b < L; ++b) {
      s.hh[t * L + b] = static_cast<float>(hh[b]);
      s.vh[t * L + b] = static_cast<float>(vh[b]);
    }
  }
  return s;
}

/// Posture split; split[c] lists the training posture ids of class c (sorted).
struct PostureSplit {
  std::vector<std::vector<int>> train;
  std::vector<std::vector<int>> test;

  bool is_train(int label, int posture) const {
    const auto& v = train.at(static_cast<std::size_t>(label));
    return std::find(v.begin(), v.end(), posture) != v.end();
  }
};

inline void to_json(Json& j, const PostureSplit& s) { j = Json{{"train", s.train}, {"test", s.test}}; }

inline void from_json(const Json& j, PostureSplit& s) {
  detail::read_field(j, "train", "split", s.train);
  detail::read_field(j, "test", "split", s.test);
}

inline PostureSplit make_split(const DatasetSpec& spec) {
  PostureSplit split;
  const int keep = spec.train_postures();
  for (int c = 0; c < spec.num_classes; ++c) {
    std::vector<int> ids(static_cast<std::size_t>(spec.postures_per_class));
    for (int p = 0; p < spec.postures_per_class; ++p) ids[static_cast<std::size_t>(p)] = p;
    Rng rng(derive_seed(spec.rng_seed, {detail::kSplitStream, static_cast<std::uint64_t>(c)}));
    rng.shuffle(ids.begin(), ids.end());
    std::vector<int> tr(ids.begin(), ids.begin() + keep), te(ids.begin() + keep, ids.end());
    std::sort(tr.begin(), tr.end());
    std::sort(te.begin(), te.end());
    split.train.push_back(std::move(tr));
    split.test.push_back(std::move(te));
  }
  return split;
}

struct Dataset {
  DatasetSpec spec;
  PostureSplit split;
  std::vector<DualPolSample> samples;

  std::vector<const DualPolSample*> subset(bool train) const {
    std::vector<const DualPolSample*> out;
    for (const auto& s : samples)
      if (split.is_train(s.label, s.posture_id) == train) out.push_back(&s);
    return out;
  }
};

/// Samples ordered by class, posture, sequence.
inline Dataset synth_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.split = make_split(spec);
  ds.samples.reserve(spec.total_sequences());
  for (int c = 0; c < spec.num_classes; ++c) {
    const auto target = synth_target(c, spec);
    for (int p = 0; p < spec.postures_per_class; ++p)
      for (int q = 0; q < spec.sequences_per_posture; ++q) ds.samples.push_back(synth_sequence(target, p, q, spec));
  }
  return ds;
}

/// Additive white Gaussian noise on each channel at the requested SNR,
/// relative to that channel's mean power over the sequence. +inf is a no-op.
inline DualPolSample add_noise(const DualPolSample& sample, double snr_db, Rng& rng, bool clamp = true) {
  if (std::isnan(snr_db) || snr_db == -std::numeric_limits<double>::infinity())
    throw DataError("snr_db must be finite or +inf");
  if (snr_db == std::numeric_limits<double>::infinity()) return sample;
  DualPolSample out = sample;
  const auto corrupt = [&](std::vector<float>& ch) {
    if (ch.empty()) return;
    double power = 0.0;
    for (float v : ch) power += static_cast<double>(v) * v;
    power /= static_cast<double>(ch.size());
    const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
    for (auto& v : ch) {
      const double x = static_cast<double>(v) + sigma * rng.normal();
      v = static_cast<float>(clamp ? std::max(x, 0.0) : x);
    }
  };
  corrupt(out.hh);
  corrupt(out.vh);
  out.meta["snr_db"] = std::to_string(snr_db);
  return out;
}

/// Removes floor(rate * T) randomly chosen rows (same rows in both channels),
/// keeping survivors in order.
inline DualPolSample drop_timesteps(const DualPolSample& sample, double missing_rate, Rng& rng) {
  if (!(missing_rate >= 0.0 && missing_rate < 1.0)) throw DataError("missing_rate must be in [0, 1)");
  const std::size_t T = sample.steps, L = sample.bins;
  const auto drop = static_cast<std::size_t>(std::floor(missing_rate * static_cast<double>(T)));
  if (drop >= T) throw DataError("missing_rate " + std::to_string(missing_rate) + " leaves no time steps");
  if (drop == 0) return sample;
  std::vector<std::size_t> idx(T);
  for (std::size_t t = 0; t < T; ++t) idx[t] = t;
  rng.shuffle(idx.begin(), idx.end());
  std::vector<std::size_t> keep(idx.begin() + static_cast<std::ptrdiff_t>(drop), idx.end());
  std::sort(keep.begin(), keep.end());

  DualPolSample out = sample;
  out.steps = keep.size();
  out.hh.assign(keep.size() * L, 0.0f);
  if (sample.has_vh()) out.vh.assign(keep.size() * L, 0.0f);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    std::copy_n(sample.hh.begin() + static_cast<std::ptrdiff_t>(keep[i] * L), L,
                out.hh.begin() + static_cast<std::ptrdiff_t>(i * L));
    if (sample.has_vh())
      std::copy_n(sample.vh.begin() + static_cast<std::ptrdiff_t>(keep[i] * L), L,
                  out.vh.begin() + static_cast<std::ptrdiff_t>(i * L));
  }
  out.meta["missing_rate"] = std::to_string(missing_rate);
  return out;
}

}  // namespace dpffn
