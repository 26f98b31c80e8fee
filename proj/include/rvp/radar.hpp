#pragma once

// FMCW frame synthesis. A scene frame is a set of point scatterers in the
// horizontal room plane (x lateral, y downrange, radar at the origin facing
// +y). Each scatterer contributes a separable phasor product across the
// three IQ axes: beat frequency over fast time (range), carrier phase
// advance over chirps (Doppler, stop-and-hop), and a linear phase ramp over
// the virtual antennas (azimuth).

#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

#include <rvp/errors.hpp>
#include <rvp/fft.hpp>
#include <rvp/rng.hpp>

namespace rvp {

constexpr double kSpeedOfLight = 299792458.0;

struct RadarConfig {
  double start_freq = 77e9;         // Hz
  double slope = 65.998e12;         // Hz/s
  double adc_rate = 4.8e6;          // samples/s
  int64_t n_adc = 256;              // samples per chirp
  int64_t n_chirps = 255;           // chirps per frame
  double chirp_interval = 160.2e-6; // s, chirp-to-chirp spacing
  int64_t n_antennas = 8;           // virtual array elements
  double frame_interval = 0.1;      // s between frame starts
  double noise_std = 1.0;           // complex noise std per IQ sample

  double wavelength() const { return kSpeedOfLight / start_freq; }
  // Half-wavelength virtual element spacing.
  double antenna_spacing() const { return wavelength() / 2.0; }
  double chirp_duration() const { return double(n_adc) / adc_rate; }
  double range_resolution() const {
    return kSpeedOfLight * adc_rate / (2.0 * slope * double(n_adc));
  }
  double max_range() const { return range_resolution() * double(n_adc); }
  double doppler_resolution() const {
    return wavelength() / (2.0 * double(n_chirps) * chirp_interval);
  }
  double max_radial_velocity() const {
    return wavelength() / (4.0 * chirp_interval);
  }
  int64_t samples_per_frame() const { return n_chirps * n_adc * n_antennas; }

  void validate() const {
    if (start_freq <= 0 || slope <= 0 || adc_rate <= 0)
      throw config_error("radar: frequencies and slope must be positive");
    if (n_adc < 2 || n_chirps < 2 || n_antennas < 1)
      throw config_error("radar: need at least 2 adc samples, 2 chirps, 1 antenna");
    if ((n_adc & (n_adc - 1)) != 0)
      throw config_error("radar: n_adc must be a power of two");
    if (chirp_interval < chirp_duration())
      throw config_error("radar: chirp_interval shorter than chirp duration");
    if (double(n_chirps) * chirp_interval > frame_interval)
      throw config_error("radar: chirps do not fit in the frame interval");
    if (noise_std < 0) throw config_error("radar: negative noise_std");
  }
};

struct Scatterer {
  double x = 0, y = 1;   // room position, metres
  double vx = 0, vy = 0; // velocity, m/s
  double amp = 1.0;      // reflectivity
};

inline double scatterer_range(const Scatterer& s) {
  return std::sqrt(s.x * s.x + s.y * s.y);
}

// Radial velocity, positive when receding from the radar.
inline double scatterer_radial_velocity(const Scatterer& s) {
  const double r = scatterer_range(s);
  return r > 1e-9 ? (s.x * s.vx + s.y * s.vy) / r : 0.0;
}

inline double scatterer_azimuth(const Scatterer& s) {
  return std::atan2(s.x, s.y);
}

// Adds one frame of scatterer returns into out[c][s][a] (length
// n_chirps*n_adc*n_antennas, caller-zeroed). All phase recurrences run in
// f64; only the final per-sample product is rounded to c32.
inline void synth_frame_add(const RadarConfig& rc,
                            const std::vector<Scatterer>& scatterers,
                            c32* out) {
  const double lambda = rc.wavelength();
  const double du = rc.antenna_spacing() / lambda;  // 0.5 for half-wavelength
  const int64_t C = rc.n_chirps, S = rc.n_adc, A = rc.n_antennas;
  std::vector<c64> adc(static_cast<size_t>(S));
  std::vector<c32> ant(static_cast<size_t>(A));
  for (const Scatterer& sc : scatterers) {
    const double r = scatterer_range(sc);
    if (r < 1e-6) continue;
    const double vr = scatterer_radial_velocity(sc);
    const double az = scatterer_azimuth(sc);
    const double f_beat = 2.0 * rc.slope * r / kSpeedOfLight;
    const double phi0 = 2.0 * M_PI * std::fmod(rc.start_freq * 2.0 * r / kSpeedOfLight, 1.0);
    const double dphi_adc = 2.0 * M_PI * f_beat / rc.adc_rate;
    const double dphi_chirp = 2.0 * M_PI * (2.0 * vr / lambda) * rc.chirp_interval;
    const double dphi_ant = 2.0 * M_PI * du * std::sin(az);

    const c64 rot_adc(std::cos(dphi_adc), std::sin(dphi_adc));
    const c64 rot_chirp(std::cos(dphi_chirp), std::sin(dphi_chirp));
    adc[0] = c64(1, 0);
    for (int64_t s = 1; s < S; ++s) adc[static_cast<size_t>(s)] = adc[static_cast<size_t>(s - 1)] * rot_adc;
    for (int64_t a = 0; a < A; ++a) {
      const double p = dphi_ant * double(a);
      ant[static_cast<size_t>(a)] = c32(float(std::cos(p)), float(std::sin(p)));
    }
    c64 chirp_ph = sc.amp * c64(std::cos(phi0), std::sin(phi0));
    for (int64_t c = 0; c < C; ++c) {
      c32* frame_row = out + c * S * A;
      for (int64_t s = 0; s < S; ++s) {
        const c32 v = c32(chirp_ph * adc[static_cast<size_t>(s)]);
        c32* dst = frame_row + s * A;
        for (int64_t a = 0; a < A; ++a) dst[a] += v * ant[static_cast<size_t>(a)];
      }
      chirp_ph *= rot_chirp;
    }
  }
}

// Circular complex Gaussian noise: each component gets std/sqrt(2) so the
// complex sample has the requested std.
inline void add_noise(c32* out, int64_t n, double noise_std, Rng& rng) {
  if (noise_std <= 0) return;
  const double comp = noise_std / std::sqrt(2.0);
  for (int64_t i = 0; i < n; ++i)
    out[i] += c32(float(rng.normal() * comp), float(rng.normal() * comp));
}

inline std::vector<c32> synth_frame(const RadarConfig& rc,
                                    const std::vector<Scatterer>& scatterers,
                                    Rng& noise_rng) {
  std::vector<c32> iq(static_cast<size_t>(rc.samples_per_frame()), c32(0, 0));
  synth_frame_add(rc, scatterers, iq.data());
  add_noise(iq.data(), rc.samples_per_frame(), rc.noise_std, noise_rng);
  return iq;
}

}  // namespace rvp
