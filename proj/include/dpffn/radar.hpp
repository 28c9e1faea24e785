#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <fftw3.h>

#include "dpffn/error.hpp"
#include "dpffn/json_util.hpp"

namespace dpffn::radar {

inline constexpr double kSpeedOfLight = 299792458.0;

using cplx = std::complex<double>;

enum class Pol { H, V };

/// Stepped-frequency radar parameters.
struct RadarConfig {
  double center_frequency_hz = 9e9;
  double bandwidth_hz = 2e9;
  double step_frequency_hz = 5e6;
  int range_bins = 512;

  std::size_t frequency_count() const {
    return static_cast<std::size_t>(std::llround(bandwidth_hz / step_frequency_hz)) + 1;
  }

  double start_frequency_hz() const { return center_frequency_hz - bandwidth_hz / 2.0; }

  /// Half-width of the unambiguous range window, c / (4 * step).
  double half_window_m() const { return kSpeedOfLight / (4.0 * step_frequency_hz); }

  /// Width of one output range bin, c / (2 * step * L).
  double bin_width_m() const { return kSpeedOfLight / (2.0 * step_frequency_hz * range_bins); }

  /// Range of bin b; bin L/2 is x = 0.
  double range_of_bin(std::size_t b) const {
    return (static_cast<double>(b) - static_cast<double>(range_bins / 2)) * bin_width_m();
  }

  std::size_t nearest_bin(double x) const {
    const long b = std::lround(x / bin_width_m()) + range_bins / 2;
    return static_cast<std::size_t>(((b % range_bins) + range_bins) % range_bins);
  }

  void validate() const {
    if (!(bandwidth_hz > 0.0)) throw ConfigError("radar.bandwidth_hz: must be positive");
    if (!(step_frequency_hz > 0.0)) throw ConfigError("radar.step_frequency_hz: must be positive");
    if (!(center_frequency_hz > bandwidth_hz / 2.0))
      throw ConfigError("radar.center_frequency_hz: must exceed half the bandwidth");
    const double ratio = bandwidth_hz / step_frequency_hz;
    if (std::abs(ratio - std::round(ratio)) > 1e-9 * ratio)
      throw ConfigError("radar.bandwidth_hz: must be an integer multiple of step_frequency_hz");
    if (range_bins < 1) throw ConfigError("radar.range_bins: must be positive");
    if (static_cast<std::size_t>(range_bins) < frequency_count())
      throw ConfigError("radar.range_bins: must be >= frequency count " + std::to_string(frequency_count()));
  }
};

inline void to_json(Json& j, const RadarConfig& r) {
  j = Json{{"center_frequency_hz", r.center_frequency_hz},
           {"bandwidth_hz", r.bandwidth_hz},
           {"step_frequency_hz", r.step_frequency_hz},
           {"range_bins", r.range_bins}};
}

inline void from_json(const Json& j, RadarConfig& r) {
  const std::string p = "radar";
  detail::read_field(j, "center_frequency_hz", p, r.center_frequency_hz);
  detail::read_field(j, "bandwidth_hz", p, r.bandwidth_hz);
  detail::read_field(j, "step_frequency_hz", p, r.step_frequency_hz);
  detail::read_field(j, "range_bins", p, r.range_bins);
}

/// [[S_HH, S_HV], [S_VH, S_VV]]; first letter = receive, second = transmit.
struct ScatteringMatrix {
  cplx hh{1.0, 0.0}, hv{0.0, 0.0}, vh{0.0, 0.0}, vv{1.0, 0.0};

  cplx operator()(Pol rx, Pol tx) const {
    if (rx == Pol::H) return tx == Pol::H ? hh : hv;
    return tx == Pol::H ? vh : vv;
  }
};

struct ScatteringCenter {
  double position_m = 0.0;     // along the line of sight, origin at target center
  double cross_range_m = 0.0;  // body-frame offset used only when rotating postures
  ScatteringMatrix scattering;
  cplx amplitude{1.0, 0.0};
};

struct ScatteringCenterSet {
  std::vector<ScatteringCenter> centers;
  int class_id = 0;

  void validate(const RadarConfig& radar) const {
    if (centers.empty()) throw DataError("scattering center set is empty");
    const double limit = radar.half_window_m();
    for (const auto& c : centers)
      if (!(std::abs(c.position_m) < limit))
        throw DataError("scattering center at " + std::to_string(c.position_m) +
                        " m lies outside the unambiguous window +/-" + std::to_string(limit) + " m");
  }
};

/// Effective complex amplitude of a center in the (tx -> rx) channel.
inline cplx pol_amplitude(const ScatteringCenter& c, Pol tx, Pol rx) { return c.scattering(rx, tx) * c.amplitude; }

/// Sampled backscatter E(f_n) = sum_i a_i exp(-j 4 pi f_n x_i / c) over
/// f_n = f_c - B/2 + n * step, n = 0 .. n_freq-1.
inline std::vector<cplx> freq_response(const ScatteringCenterSet& set, Pol tx, Pol rx, const RadarConfig& radar) {
  radar.validate();
  set.validate(radar);
  const std::size_t n_freq = radar.frequency_count();
  std::vector<cplx> e(n_freq, cplx{0.0, 0.0});
  const double f0 = radar.start_frequency_hz();
  for (const auto& c : set.centers) {
    const cplx a = pol_amplitude(c, tx, rx);
    for (std::size_t n = 0; n < n_freq; ++n) {
      const double f = f0 + static_cast<double>(n) * radar.step_frequency_hz;
      e[n] += a * std::polar(1.0, -4.0 * std::numbers::pi * f * c.position_m / kSpeedOfLight);
    }
  }
  return e;
}

namespace detail {

class FftPlanCache {
 public:
  static FftPlanCache& instance() {
    static FftPlanCache cache;
    return cache;
  }

  // Backward (positive exponent) unnormalized transform of length n.
  fftw_plan backward_plan(std::size_t n) {
    std::lock_guard lock(mu_);
    auto it = plans_.find(n);
    if (it != plans_.end()) return it->second;
    fftw_complex* in = fftw_alloc_complex(n);
    fftw_complex* out = fftw_alloc_complex(n);
    fftw_plan p = fftw_plan_dft_1d(static_cast<int>(n), in, out, FFTW_BACKWARD, FFTW_ESTIMATE);
    fftw_free(in);
    fftw_free(out);
    plans_.emplace(n, p);
    return p;
  }

  ~FftPlanCache() {
    for (auto& [n, p] : plans_) fftw_destroy_plan(p);
  }

 private:
  std::mutex mu_;
  std::map<std::size_t, fftw_plan> plans_;
};

struct FftwBuffer {
  explicit FftwBuffer(std::size_t n) : ptr(fftw_alloc_complex(n)) {}
  ~FftwBuffer() { fftw_free(ptr); }
  FftwBuffer(const FftwBuffer&) = delete;
  FftwBuffer& operator=(const FftwBuffer&) = delete;
  fftw_complex* ptr;
};

}  // namespace detail

/// Inverse transform of the sampled band onto the range grid x_b =
/// (b - L/2) * bin_width:
///   profile[b] = (1/n_freq) sum_n E_n exp(+j 4 pi f_n x_b / c).
/// Evaluated as a zero-padded length-L FFT with a start-frequency phase ramp.
/// Energy: sum |profile|^2 = L / n_freq^2 * sum |E|^2.
inline std::vector<cplx> range_profile(std::span<const cplx> spectrum, const RadarConfig& radar) {
  radar.validate();
  const std::size_t n_freq = radar.frequency_count();
  if (spectrum.size() != n_freq)
    throw ShapeError("range_profile: spectrum has " + std::to_string(spectrum.size()) + " samples, expected " +
                     std::to_string(n_freq));
  const std::size_t L = static_cast<std::size_t>(radar.range_bins);
  detail::FftwBuffer in(L), out(L);
  for (std::size_t n = 0; n < L; ++n) {
    in.ptr[n][0] = n < n_freq ? spectrum[n].real() : 0.0;
    in.ptr[n][1] = n < n_freq ? spectrum[n].imag() : 0.0;
  }
  fftw_execute_dft(detail::FftPlanCache::instance().backward_plan(L), in.ptr, out.ptr);

  std::vector<cplx> profile(L);
  const double f0_over_step = radar.start_frequency_hz() / radar.step_frequency_hz;
  const long half = static_cast<long>(L / 2);
  for (std::size_t b = 0; b < L; ++b) {
    const long shift = static_cast<long>(b) - half;
    const std::size_t k = static_cast<std::size_t>(((shift % static_cast<long>(L)) + static_cast<long>(L)) %
                                                   static_cast<long>(L));
    // exp(j 2 pi (f0/step) * shift / L), reduced modulo one turn for accuracy
    const double turns = std::fmod(f0_over_step * static_cast<double>(shift), static_cast<double>(L)) /
                         static_cast<double>(L);
    const cplx ramp = std::polar(1.0, 2.0 * std::numbers::pi * turns);
    profile[b] = ramp * cplx{out.ptr[k][0], out.ptr[k][1]} / static_cast<double>(n_freq);
  }
  return profile;
}

/// Normalized sinc: sin(pi u) / (pi u), sinc(0) = 1.
inline double sinc(double u) {
  if (u == 0.0) return 1.0;
  const double pu = std::numbers::pi * u;
  return std::sin(pu) / pu;
}

/// Closed-form band-limited profile
///   (2B/c) sum_i a_i exp(j 2 k_c (x - x_i)) sinc((2B/c)(x - x_i)).
inline std::vector<cplx> analytic_profile(const ScatteringCenterSet& set, Pol tx, Pol rx, const RadarConfig& radar,
                                          std::span<const double> x_grid) {
  const double kc = 2.0 * std::numbers::pi * radar.center_frequency_hz / kSpeedOfLight;
  const double s = 2.0 * radar.bandwidth_hz / kSpeedOfLight;
  std::vector<cplx> out(x_grid.size(), cplx{0.0, 0.0});
  for (const auto& c : set.centers) {
    const cplx a = pol_amplitude(c, tx, rx);
    for (std::size_t b = 0; b < x_grid.size(); ++b) {
      const double dx = x_grid[b] - c.position_m;
      out[b] += s * a * std::polar(1.0, 2.0 * kc * dx) * sinc(s * dx);
    }
  }
  return out;
}

/// Range coordinates of every output bin.
inline std::vector<double> range_axis(const RadarConfig& radar) {
  std::vector<double> x(static_cast<std::size_t>(radar.range_bins));
  for (std::size_t b = 0; b < x.size(); ++b) x[b] = radar.range_of_bin(b);
  return x;
}

}  // namespace dpffn::radar
