#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include "dpffn/radar.hpp"
#include "dpffn/rng.hpp"

using namespace dpffn;
using namespace dpffn::radar;

namespace {

RadarConfig desk() { return RadarConfig{9e9, 2e9, 20e6, 128}; }

ScatteringCenterSet single(double x, cplx amp = {1.0, 0.0}) {
  ScatteringCenterSet s;
  ScatteringCenter c;
  c.position_m = x;
  c.amplitude = amp;
  s.centers.push_back(c);
  return s;
}

ScatteringCenterSet random_set(Rng& rng, const RadarConfig& r, int count) {
  ScatteringCenterSet s;
  for (int i = 0; i < count; ++i) {
    ScatteringCenter c;
    c.position_m = rng.uniform(-0.8, 0.8) * r.half_window_m();
    c.amplitude = std::polar(rng.uniform(0.2, 1.0), rng.uniform(0.0, 2.0 * std::numbers::pi));
    c.scattering.hh = std::polar(rng.uniform(0.5, 1.0), rng.uniform(0.0, 6.0));
    c.scattering.vh = std::polar(rng.uniform(0.1, 1.0), rng.uniform(0.0, 6.0));
    s.centers.push_back(c);
  }
  return s;
}

// Direct O(N L) evaluation of the sampled-band inverse transform.
std::vector<cplx> direct_profile(const std::vector<cplx>& e, const RadarConfig& r) {
  const auto x = range_axis(r);
  std::vector<cplx> out(x.size());
  const double f0 = r.start_frequency_hz();
  for (std::size_t b = 0; b < x.size(); ++b) {
    cplx acc{0.0, 0.0};
    for (std::size_t n = 0; n < e.size(); ++n) {
      const double f = f0 + static_cast<double>(n) * r.step_frequency_hz;
      acc += e[n] * std::polar(1.0, 4.0 * std::numbers::pi * f * x[b] / kSpeedOfLight);
    }
    out[b] = acc / static_cast<double>(e.size());
  }
  return out;
}

// Closed form of the sampled-band transform for one center:
// a exp(j 2 k_c d) sin(pi N u) / (N sin(pi u)), u = 2 step d / c.
cplx dirichlet(double d, cplx a, const RadarConfig& r) {
  const double n = static_cast<double>(r.frequency_count());
  const double u = 2.0 * r.step_frequency_hz * d / kSpeedOfLight;
  const double kc = 2.0 * std::numbers::pi * r.center_frequency_hz / kSpeedOfLight;
  const double s = std::sin(std::numbers::pi * u);
  const double ratio = std::abs(s) < 1e-15 ? 1.0 : std::sin(std::numbers::pi * n * u) / (n * s);
  return a * std::polar(1.0, 2.0 * kc * d) * ratio;
}

}  // namespace

TEST(PolAmplitude, IdentityCoPolar) {
  ScatteringCenter c;
  EXPECT_EQ(pol_amplitude(c, Pol::H, Pol::H), cplx(1.0, 0.0));
}

TEST(PolAmplitude, IdentityCrossPolarIsZero) {
  ScatteringCenter c;
  EXPECT_EQ(pol_amplitude(c, Pol::H, Pol::V), cplx(0.0, 0.0));
}

TEST(PolAmplitude, ComplexProduct) {
  ScatteringCenter c;
  c.scattering.vh = {0.0, 0.5};
  c.amplitude = {2.0, 0.0};
  const auto a = pol_amplitude(c, Pol::H, Pol::V);
  EXPECT_DOUBLE_EQ(a.real(), 0.0);
  EXPECT_DOUBLE_EQ(a.imag(), 1.0);
}

TEST(PolAmplitude, IndexingIsReceiveThenTransmit) {
  ScatteringCenter c;
  c.scattering = {{1, 0}, {2, 0}, {3, 0}, {4, 0}};
  EXPECT_EQ(pol_amplitude(c, Pol::H, Pol::H).real(), 1.0);
  EXPECT_EQ(pol_amplitude(c, Pol::V, Pol::H).real(), 2.0);  // S_HV: receive H, transmit V
  EXPECT_EQ(pol_amplitude(c, Pol::H, Pol::V).real(), 3.0);  // S_VH: receive V, transmit H
  EXPECT_EQ(pol_amplitude(c, Pol::V, Pol::V).real(), 4.0);
}

TEST(RadarConfig, FrequencyCountAndWindow) {
  const RadarConfig r;
  EXPECT_EQ(r.frequency_count(), 401u);
  EXPECT_EQ(desk().frequency_count(), 101u);
  EXPECT_NEAR(desk().half_window_m(), kSpeedOfLight / 8e7, 1e-12);
  // bin width equals c/(2B) * (n_freq - 1) / L
  EXPECT_NEAR(desk().bin_width_m(), kSpeedOfLight / (2.0 * 2e9) * 100.0 / 128.0, 1e-15);
}

TEST(RadarConfig, RejectsBadConfigs) {
  EXPECT_THROW((RadarConfig{9e9, 2e9, 3e7, 128}.validate()), ConfigError);  // B not a multiple of step
  EXPECT_THROW((RadarConfig{9e9, 2e9, 20e6, 64}.validate()), ConfigError);  // L < n_freq
  EXPECT_THROW((RadarConfig{9e9, -1.0, 20e6, 128}.validate()), ConfigError);
  EXPECT_THROW((RadarConfig{9e9, 2e9, 0.0, 128}.validate()), ConfigError);
  EXPECT_NO_THROW((RadarConfig{9e9, 2e9, 20e6, 101}.validate()));
}

TEST(FreqResponse, CenterAtOriginIsAllOnes) {
  const auto e = freq_response(single(0.0), Pol::H, Pol::H, desk());
  ASSERT_EQ(e.size(), 101u);
  for (const auto& v : e) {
    EXPECT_DOUBLE_EQ(v.real(), 1.0);
    EXPECT_DOUBLE_EQ(v.imag(), 0.0);
  }
}

TEST(FreqResponse, OffsetCenterHasUnitModulus) {
  const auto e = freq_response(single(0.731), Pol::H, Pol::H, desk());
  for (const auto& v : e) EXPECT_NEAR(std::abs(v), 1.0, 1e-12);
}

TEST(FreqResponse, SymmetricPairIsRealCosine) {
  const double x = 0.4;
  auto s = single(x);
  s.centers.push_back(single(-x).centers[0]);
  const auto r = desk();
  const auto e = freq_response(s, Pol::H, Pol::H, r);
  for (std::size_t n = 0; n < e.size(); ++n) {
    const double f = r.start_frequency_hz() + static_cast<double>(n) * r.step_frequency_hz;
    EXPECT_NEAR(e[n].real(), 2.0 * std::cos(4.0 * std::numbers::pi * f * x / kSpeedOfLight), 1e-9);
    EXPECT_NEAR(e[n].imag(), 0.0, 1e-9);
  }
}

TEST(FreqResponse, LinearInCenterList) {
  Rng rng(3);
  const auto r = desk();
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_set(rng, r, 3), b = random_set(rng, r, 4);
    auto u = a;
    u.centers.insert(u.centers.end(), b.centers.begin(), b.centers.end());
    const auto ea = freq_response(a, Pol::H, Pol::V, r), eb = freq_response(b, Pol::H, Pol::V, r);
    const auto eu = freq_response(u, Pol::H, Pol::V, r);
    for (std::size_t n = 0; n < eu.size(); ++n) EXPECT_LT(std::abs(eu[n] - (ea[n] + eb[n])), 1e-12);
  }
}

TEST(FreqResponse, RejectsCentersOutsideWindowAndEmptySets) {
  EXPECT_THROW(freq_response(single(4.0), Pol::H, Pol::H, desk()), DataError);
  EXPECT_THROW(freq_response(ScatteringCenterSet{}, Pol::H, Pol::H, desk()), DataError);
}

TEST(RangeProfile, ConstantSpectrumPeaksAtCenterBin) {
  const auto r = desk();
  const std::vector<cplx> ones(r.frequency_count(), cplx{1.0, 0.0});
  const auto p = range_profile(ones, r);
  ASSERT_EQ(p.size(), 128u);
  std::size_t arg = 0;
  for (std::size_t b = 0; b < p.size(); ++b)
    if (std::abs(p[b]) > std::abs(p[arg])) arg = b;
  EXPECT_EQ(arg, 64u);
  EXPECT_NEAR(std::abs(p[64]), 1.0, 1e-12);
}

TEST(RangeProfile, LengthMismatchThrows) {
  const std::vector<cplx> bad(100);
  EXPECT_THROW(range_profile(bad, desk()), ShapeError);
}

TEST(RangeProfile, MatchesDirectTransform) {
  Rng rng(11);
  for (const auto& r : {desk(), RadarConfig{}, RadarConfig{10e9, 1e9, 10e6, 200}}) {
    const auto set = random_set(rng, r, 5);
    const auto e = freq_response(set, Pol::H, Pol::H, r);
    const auto fast = range_profile(e, r);
    const auto slow = direct_profile(e, r);
    double peak = 0.0;
    for (const auto& v : slow) peak = std::max(peak, std::abs(v));
    for (std::size_t b = 0; b < fast.size(); ++b) EXPECT_LT(std::abs(fast[b] - slow[b]) / peak, 1e-9) << "bin " << b;
  }
}

TEST(RangeProfile, MatchesSampledBandClosedForm) {
  Rng rng(5);
  const auto r = desk();
  const auto x = range_axis(r);
  for (int trial = 0; trial < 20; ++trial) {
    const auto set = random_set(rng, r, 1 + trial % 8);
    const auto p = range_profile(freq_response(set, Pol::H, Pol::H, r), r);
    for (std::size_t b = 0; b < x.size(); ++b) {
      cplx expect{0.0, 0.0};
      for (const auto& c : set.centers) expect += dirichlet(x[b] - c.position_m, pol_amplitude(c, Pol::H, Pol::H), r);
      EXPECT_LT(std::abs(p[b] - expect), 1e-9);
    }
  }
}

TEST(RangeProfile, ParsevalUnderChosenNormalization) {
  Rng rng(8);
  for (const auto& r : {desk(), RadarConfig{}}) {
    const auto e = freq_response(random_set(rng, r, 6), Pol::H, Pol::V, r);
    const auto p = range_profile(e, r);
    double es = 0.0, ps = 0.0;
    for (const auto& v : e) es += std::norm(v);
    for (const auto& v : p) ps += std::norm(v);
    const double n = static_cast<double>(r.frequency_count());
    const double expected = static_cast<double>(r.range_bins) / (n * n) * es;
    EXPECT_NEAR(ps / expected, 1.0, 1e-9);
  }
}

TEST(RangeProfile, PeaksSitAtIsolatedCenters) {
  Rng rng(21);
  const auto r = desk();
  const double w = r.bin_width_m();
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    ScatteringCenterSet set;
    const int count = 1 + static_cast<int>(rng.below(4));
    // Centers at least 8 bins apart with equal magnitudes.
    for (int i = 0; i < count; ++i) {
      ScatteringCenter c;
      c.position_m = (-36.0 + 24.0 * i + rng.uniform(-0.5, 0.5)) * w + rng.uniform(-4.0, 4.0) * w;
      c.amplitude = std::polar(1.0, rng.uniform(0.0, 6.28));
      set.centers.push_back(c);
    }
    const auto p = range_profile(freq_response(set, Pol::H, Pol::H, r), r);
    for (const auto& c : set.centers) {
      const double frac = c.position_m / w - std::round(c.position_m / w);
      if (std::abs(frac) > 0.35) continue;  // bin boundary: neighbors are near ties
      const auto nb = r.nearest_bin(c.position_m);
      std::size_t arg = nb;
      for (std::size_t b = nb - 3; b <= nb + 3; ++b)
        if (std::abs(p[b]) > std::abs(p[arg])) arg = b;
      EXPECT_EQ(arg, nb);
      ++checked;
    }
  }
  EXPECT_GT(checked, 200);
}

TEST(AnalyticProfile, PeakValue) {
  const auto r = desk();
  const double xi = 0.37;
  const std::vector<double> grid{xi};
  const auto v = analytic_profile(single(xi, {0.0, 2.0}), Pol::H, Pol::H, r, grid);
  EXPECT_NEAR(std::abs(v[0]), 2.0 * r.bandwidth_hz / kSpeedOfLight * 2.0, 1e-9);
}

TEST(AnalyticProfile, FirstNull) {
  const auto r = desk();
  const double xi = -0.2;
  const std::vector<double> grid{xi + kSpeedOfLight / (2.0 * r.bandwidth_hz)};
  const auto v = analytic_profile(single(xi), Pol::H, Pol::H, r, grid);
  EXPECT_LT(std::abs(v[0]), 1e-12);
}

TEST(AnalyticProfile, MainLobeTracksDiscreteProfile) {
  // The sampled band gives a periodic (Dirichlet) kernel while the closed
  // form is a sinc, so agreement is approximate: on the main lobe the two
  // scaled envelopes agree to about one percent at n_freq = 101.
  Rng rng(4);
  const auto r = desk();
  const auto x = range_axis(r);
  const double scale = kSpeedOfLight / (2.0 * r.bandwidth_hz);
  for (int trial = 0; trial < 10; ++trial) {
    const auto set = single(rng.uniform(-1.5, 1.5));
    const auto p = range_profile(freq_response(set, Pol::H, Pol::H, r), r);
    const auto a = analytic_profile(set, Pol::H, Pol::H, r, x);
    const auto nb = r.nearest_bin(set.centers[0].position_m);
    EXPECT_NEAR(std::abs(p[nb]), scale * std::abs(a[nb]), 0.02);
  }
}

TEST(Polarization, ChannelsDifferWhenScatteringDiffers) {
  Rng rng(9);
  const auto r = desk();
  const auto set = random_set(rng, r, 4);
  const auto hh = range_profile(freq_response(set, Pol::H, Pol::H, r), r);
  const auto vh = range_profile(freq_response(set, Pol::H, Pol::V, r), r);
  double diff = 0.0;
  for (std::size_t b = 0; b < hh.size(); ++b) diff = std::max(diff, std::abs(std::abs(hh[b]) - std::abs(vh[b])));
  EXPECT_GT(diff, 1e-3);
}

TEST(RangeAxis, CenterBinIsZero) {
  const auto r = desk();
  EXPECT_EQ(r.range_of_bin(64), 0.0);
  EXPECT_EQ(r.nearest_bin(0.0), 64u);
  EXPECT_EQ(r.nearest_bin(r.bin_width_m() * 3.2), 67u);
}
