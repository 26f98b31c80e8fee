#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <vector>

#include <rvp/fft.hpp>
#include <rvp/radar.hpp>
#include <rvp/scene.hpp>

using namespace rvp;

namespace {

int peak_bin(const std::vector<c32>& spectrum) {
  int best = 0;
  double best_mag = -1.0;
  for (size_t i = 0; i < spectrum.size(); ++i) {
    const double m = std::abs(c64(spectrum[i]));
    if (m > best_mag) {
      best_mag = m;
      best = int(i);
    }
  }
  return best;
}

RadarConfig quiet_radar() {
  RadarConfig rc;
  rc.noise_std = 0.0;
  return rc;
}

std::vector<c32> gather(const std::vector<c32>& iq, const RadarConfig& rc,
                        int64_t n, int64_t base, int64_t stride) {
  std::vector<c32> out(static_cast<size_t>(n));
  (void)rc;
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = iq[static_cast<size_t>(base + i * stride)];
  return out;
}

}  // namespace

TEST(RadarConfig, DerivedQuantitiesMatchPinnedValues) {
  RadarConfig rc;
  EXPECT_NEAR(rc.wavelength(), 0.0038934, 1e-6);
  EXPECT_NEAR(rc.range_resolution(), 0.042585, 1e-5);
  EXPECT_NEAR(rc.max_range(), 10.9019, 1e-3);
  EXPECT_NEAR(rc.doppler_resolution(), 0.047654, 1e-5);
  EXPECT_NEAR(rc.max_radial_velocity(), 6.0759, 1e-3);
  EXPECT_NEAR(rc.chirp_duration(), 53.333e-6, 1e-8);
  EXPECT_EQ(rc.samples_per_frame(), 255 * 256 * 8);
  EXPECT_NO_THROW(rc.validate());
}

TEST(RadarConfig, ValidationRejectsBrokenSetups) {
  RadarConfig rc;
  rc.n_adc = 200;  // not a power of two
  EXPECT_THROW(rc.validate(), config_error);
  rc = RadarConfig();
  rc.chirp_interval = 10e-6;  // shorter than the 53.3 us sweep
  EXPECT_THROW(rc.validate(), config_error);
  rc = RadarConfig();
  rc.frame_interval = 0.02;  // 255 chirps need 40.8 ms
  EXPECT_THROW(rc.validate(), config_error);
  rc = RadarConfig();
  rc.noise_std = -1.0;
  EXPECT_THROW(rc.validate(), config_error);
}

TEST(RadarSynth, RangePeakLandsOnAnalyticBeatBin) {
  const RadarConfig rc = quiet_radar();
  Rng rng(1);
  for (double r : {0.8, 1.7, 2.5, 3.9, 6.0}) {
    Scatterer s;
    s.x = 0;
    s.y = r;
    std::vector<c32> iq = synth_frame(rc, {s}, rng);
    // Fast-time series of chirp 0, antenna 0.
    std::vector<c32> fast = gather(iq, rc, rc.n_adc, 0, rc.n_antennas);
    fft_inplace(fast);
    const double f_beat = 2.0 * rc.slope * r / kSpeedOfLight;
    const int expected = int(std::llround(f_beat * double(rc.n_adc) / rc.adc_rate));
    EXPECT_EQ(peak_bin(fast), expected) << "range " << r;
  }
}

TEST(RadarSynth, DopplerPeakMatchesRadialVelocity) {
  const RadarConfig rc = quiet_radar();
  Rng rng(2);
  for (double v : {0.5, 1.3, -0.9, -2.2, 3.1}) {
    Scatterer s;
    s.x = 0;
    s.y = 2.0;
    s.vy = v;  // radial because the scatterer sits on boresight
    std::vector<c32> iq = synth_frame(rc, {s}, rng);
    // Slow-time series at adc sample 0, antenna 0.
    std::vector<c32> slow = gather(iq, rc, rc.n_chirps, 0, rc.n_adc * rc.n_antennas);
    fft_inplace(slow);
    const double f_d = 2.0 * v / rc.wavelength();
    int expected = int(std::llround(f_d * rc.chirp_interval * double(rc.n_chirps)));
    expected = ((expected % int(rc.n_chirps)) + int(rc.n_chirps)) % int(rc.n_chirps);
    EXPECT_EQ(peak_bin(slow), expected) << "velocity " << v;
  }
}

TEST(RadarSynth, ApproachingTargetLandsBelowCenterAfterShift) {
  const RadarConfig rc = quiet_radar();
  Rng rng(3);
  Scatterer s;
  s.x = 0;
  s.y = 2.0;
  s.vy = -10.0 * rc.doppler_resolution();  // toward the radar
  std::vector<c32> iq = synth_frame(rc, {s}, rng);
  std::vector<c32> slow = gather(iq, rc, rc.n_chirps, 0, rc.n_adc * rc.n_antennas);
  fft_inplace(slow);
  const int shifted = int(fftshift_index(int64_t(peak_bin(slow)), rc.n_chirps));
  EXPECT_EQ(shifted, 127 - 10);
}

TEST(RadarSynth, AnglePeakMatchesArrayGeometry) {
  const RadarConfig rc = quiet_radar();
  Rng rng(4);
  const int64_t n_fft = 64;
  for (double az_deg : {30.0, -30.0, 0.0, 12.0, -41.0, 48.0}) {
    const double az = az_deg * M_PI / 180.0;
    Scatterer s;
    s.x = 2.0 * std::sin(az);
    s.y = 2.0 * std::cos(az);
    std::vector<c32> iq = synth_frame(rc, {s}, rng);
    // Antenna series at chirp 0, adc sample 0, zero-padded to 64.
    std::vector<c32> ant(static_cast<size_t>(n_fft), c32(0, 0));
    for (int64_t a = 0; a < rc.n_antennas; ++a) ant[static_cast<size_t>(a)] = iq[static_cast<size_t>(a)];
    fft_inplace(ant);
    const double u = (rc.antenna_spacing() / rc.wavelength()) * std::sin(az);
    int expected = int(std::llround(u * double(n_fft)));
    expected = ((expected % int(n_fft)) + int(n_fft)) % int(n_fft);
    EXPECT_EQ(peak_bin(ant), expected) << "azimuth " << az_deg;
    if (az_deg == 30.0) {
      EXPECT_EQ(fftshift_index(int64_t(peak_bin(ant)), n_fft), 48);
    }
  }
}

TEST(RadarSynth, SuperpositionIsExact) {
  const RadarConfig rc = quiet_radar();
  Scatterer a;
  a.x = 0.4;
  a.y = 1.9;
  a.vy = 0.7;
  Scatterer b;
  b.x = -0.8;
  b.y = 3.1;
  b.vx = -0.4;
  b.amp = 2.5;
  std::vector<c32> both(static_cast<size_t>(rc.samples_per_frame()), c32(0, 0));
  synth_frame_add(rc, {a, b}, both.data());
  std::vector<c32> seq(static_cast<size_t>(both.size()), c32(0, 0));
  synth_frame_add(rc, {a}, seq.data());
  synth_frame_add(rc, {b}, seq.data());
  // Tolerance is a few f32 ulps; fused-multiply-add contraction keeps the
  // two evaluation orders from being bitwise identical.
  for (size_t i = 0; i < both.size(); ++i) {
    ASSERT_NEAR(both[i].real(), seq[i].real(), 2e-6) << i;
    ASSERT_NEAR(both[i].imag(), seq[i].imag(), 2e-6) << i;
  }
}

TEST(RadarSynth, AmplitudeScalesLinearly) {
  const RadarConfig rc = quiet_radar();
  Scatterer s;
  s.x = 0.3;
  s.y = 2.2;
  s.amp = 1.0;
  std::vector<c32> one(static_cast<size_t>(rc.samples_per_frame()), c32(0, 0));
  synth_frame_add(rc, {s}, one.data());
  s.amp = 3.0;
  std::vector<c32> three(static_cast<size_t>(one.size()), c32(0, 0));
  synth_frame_add(rc, {s}, three.data());
  for (size_t i = 0; i < one.size(); i += 9973) {
    EXPECT_NEAR(three[i].real(), 3.0f * one[i].real(), 1e-4);
    EXPECT_NEAR(three[i].imag(), 3.0f * one[i].imag(), 1e-4);
  }
}

TEST(RadarSynth, UnitPhasorsKeepConstantMagnitude) {
  const RadarConfig rc = quiet_radar();
  Scatterer s;
  s.x = 1.1;
  s.y = 2.7;
  s.vx = 0.5;
  s.vy = -0.8;
  s.amp = 1.5;
  std::vector<c32> iq(static_cast<size_t>(rc.samples_per_frame()), c32(0, 0));
  synth_frame_add(rc, {s}, iq.data());
  for (size_t i = 0; i < iq.size(); i += 4999)
    EXPECT_NEAR(std::abs(c64(iq[i])), 1.5, 1e-4) << i;
}

TEST(RadarSynth, NoiseMatchesRequestedStd) {
  RadarConfig rc;
  rc.noise_std = 0.8;
  Rng rng(77);
  std::vector<c32> iq = synth_frame(rc, {}, rng);
  double sum_re = 0, sum_sq = 0;
  for (const c32& v : iq) {
    sum_re += v.real() + v.imag();
    sum_sq += double(v.real()) * v.real() + double(v.imag()) * v.imag();
  }
  const double n_comp = 2.0 * double(iq.size());
  EXPECT_NEAR(sum_re / n_comp, 0.0, 5e-3);
  // Complex variance = twice the per-component variance.
  EXPECT_NEAR(std::sqrt(sum_sq / double(iq.size())), 0.8, 5e-3);
}

TEST(RadarSynth, DeterministicGivenSeed) {
  RadarConfig rc;
  Scatterer s;
  s.x = 0.5;
  s.y = 2.0;
  Rng rng_a = derive_rng(123, "noise", 0, 0, 0);
  Rng rng_b = derive_rng(123, "noise", 0, 0, 0);
  Rng rng_c = derive_rng(123, "noise", 0, 0, 1);
  std::vector<c32> fa = synth_frame(rc, {s}, rng_a);
  std::vector<c32> fb = synth_frame(rc, {s}, rng_b);
  std::vector<c32> fc = synth_frame(rc, {s}, rng_c);
  EXPECT_TRUE(std::equal(fa.begin(), fa.end(), fb.begin()));
  EXPECT_FALSE(std::equal(fa.begin(), fa.end(), fc.begin()));
}

TEST(Scene, DatasetShapeAndDeterminism) {
  SceneConfig sc;
  sc.n_persons = 3;
  sc.n_actions = 2;
  sc.clips_per_pair = 2;
  auto clips = generate_scenes(sc, 42);
  ASSERT_EQ(clips.size(), 12u);
  for (const ClipScene& c : clips) {
    EXPECT_EQ(c.frames.size(), 20u);
    EXPECT_EQ(c.labels.size(), 20u * kNumJoints * 2);
    for (const auto& frame : c.frames) EXPECT_EQ(frame.size(), size_t(kNumJoints));
  }
  auto again = generate_scenes(sc, 42);
  ASSERT_EQ(again.size(), clips.size());
  for (size_t i = 0; i < clips.size(); ++i)
    EXPECT_EQ(clips[i].labels, again[i].labels);
  auto other = generate_scenes(sc, 43);
  bool any_diff = false;
  for (size_t i = 0; i < clips.size() && !any_diff; ++i)
    any_diff = clips[i].labels != other[i].labels;
  EXPECT_TRUE(any_diff);
}

TEST(Scene, LabelsAreNormalizedJointPositions) {
  SceneConfig sc;
  sc.n_persons = 2;
  sc.n_actions = 3;
  sc.clips_per_pair = 1;
  auto clips = generate_scenes(sc, 7);
  for (const ClipScene& c : clips) {
    for (int f = 0; f < sc.frames_per_clip; ++f) {
      for (int j = 0; j < kNumJoints; ++j) {
        const Scatterer& s = c.frames[static_cast<size_t>(f)][static_cast<size_t>(j)];
        const float lx = c.labels[static_cast<size_t>((f * kNumJoints + j) * 2)];
        const float ly = c.labels[static_cast<size_t>((f * kNumJoints + j) * 2 + 1)];
        EXPECT_GE(lx, 0.0f);
        EXPECT_LT(lx, 1.0f);
        EXPECT_GE(ly, 0.0f);
        EXPECT_LT(ly, 1.0f);
        EXPECT_NEAR(double(lx), (s.x - sc.x_min) / sc.span_x(), 1e-5);
        EXPECT_NEAR(double(ly), (s.y - sc.y_min) / sc.span_y(), 1e-5);
      }
    }
  }
}

TEST(Scene, JointsStayInRoomAndBelowAliasingVelocity) {
  SceneConfig sc;
  sc.n_persons = 5;
  sc.n_actions = 6;
  sc.clips_per_pair = 2;
  sc.interference = true;
  const RadarConfig rc;
  auto clips = generate_scenes(sc, 99);
  for (const ClipScene& c : clips) {
    for (const auto& frame : c.frames) {
      EXPECT_EQ(frame.size(), size_t(kNumJoints + sc.bystander_scatterers));
      for (const Scatterer& s : frame) {
        EXPECT_GE(s.x, sc.x_min);
        EXPECT_LE(s.x, sc.x_max);
        EXPECT_GE(s.y, sc.y_min);
        EXPECT_LE(s.y, sc.y_max);
        EXPECT_LT(std::abs(scatterer_radial_velocity(s)), rc.max_radial_velocity());
        EXPECT_LT(scatterer_range(s), rc.max_range());
      }
    }
  }
}

TEST(Scene, PersonGeometryIsStableAcrossClipsAndDistinctAcrossPersons) {
  SceneConfig sc;
  sc.n_persons = 4;
  sc.n_actions = 3;
  sc.clips_per_pair = 2;
  auto clips = generate_scenes(sc, 11);
  std::map<int, double> widths;
  for (const ClipScene& c : clips) {
    for (const auto& frame : c.frames) {
      const Scatterer& l = frame[kLeftShoulder];
      const Scatterer& r = frame[kRightShoulder];
      const double w = std::hypot(l.x - r.x, l.y - r.y);
      auto it = widths.find(c.person);
      if (it == widths.end())
        widths[c.person] = w;
      else
        EXPECT_NEAR(it->second, w, 1e-9) << clip_name(c);
    }
  }
  ASSERT_EQ(widths.size(), 4u);
  for (const auto& [pa, wa] : widths)
    for (const auto& [pb, wb] : widths)
      if (pa < pb) {
        EXPECT_GT(std::abs(wa - wb), 1e-4);
      }
}

TEST(Scene, InterferenceReplaysTheSameClipWithExtraScatterers) {
  SceneConfig clean;
  clean.n_persons = 2;
  clean.n_actions = 2;
  clean.clips_per_pair = 1;
  SceneConfig noisy = clean;
  noisy.interference = true;
  auto a = generate_scenes(clean, 5);
  auto b = generate_scenes(noisy, 5);
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].labels, b[i].labels);
    for (size_t f = 0; f < a[i].frames.size(); ++f) {
      ASSERT_EQ(b[i].frames[f].size(), a[i].frames[f].size() + 5);
      for (int j = 0; j < kNumJoints; ++j) {
        EXPECT_EQ(a[i].frames[f][static_cast<size_t>(j)].x, b[i].frames[f][static_cast<size_t>(j)].x);
        EXPECT_EQ(a[i].frames[f][static_cast<size_t>(j)].y, b[i].frames[f][static_cast<size_t>(j)].y);
      }
    }
  }
}

TEST(Scene, ActionsProduceTheMotionTheyPromise) {
  SceneConfig sc;
  sc.n_persons = 3;
  sc.n_actions = 2;  // walk, wave
  sc.clips_per_pair = 1;
  auto clips = generate_scenes(sc, 21);
  for (const ClipScene& c : clips) {
    const auto joint_travel = [&](int j) {
      const Scatterer& first = c.frames.front()[static_cast<size_t>(j)];
      const Scatterer& last = c.frames.back()[static_cast<size_t>(j)];
      return std::hypot(last.x - first.x, last.y - first.y);
    };
    const auto joint_path_len = [&](int j) {
      double len = 0;
      for (size_t f = 1; f < c.frames.size(); ++f) {
        const Scatterer& a = c.frames[f - 1][static_cast<size_t>(j)];
        const Scatterer& b = c.frames[f][static_cast<size_t>(j)];
        len += std::hypot(b.x - a.x, b.y - a.y);
      }
      return len;
    };
    if (c.action_name == "walk") {
      // The torso crosses a meaningful fraction of the room in 2 s.
      EXPECT_GT(joint_travel(kNose), 0.7) << clip_name(c);
    } else if (c.action_name == "wave") {
      EXPECT_LT(joint_travel(kNose), 0.15) << clip_name(c);
      EXPECT_GT(joint_path_len(kRightWrist), 3.0 * joint_path_len(kLeftWrist))
          << clip_name(c);
    }
  }
}

TEST(Scene, TorsoOutshinesLimbsAndClipNamesAreStable)
{
  SceneConfig sc;
  sc.n_persons = 1;
  sc.n_actions = 1;
  sc.clips_per_pair = 2;
  auto clips = generate_scenes(sc, 3);
  ASSERT_EQ(clips.size(), 2u);
  EXPECT_EQ(clip_name(clips[0]), "p0_walk_c0");
  EXPECT_EQ(clip_name(clips[1]), "p0_walk_c1");
  const auto& frame = clips[0].frames[0];
  EXPECT_NEAR(frame[kNose].amp / frame[kLeftWrist].amp, 3.0, 1e-9);
  EXPECT_NEAR(frame[kLeftShoulder].amp, frame[kRightHip].amp, 1e-12);
}

TEST(Scene, ConfigValidationCatchesNonsense) {
  SceneConfig sc;
  sc.n_actions = 99;
  EXPECT_THROW(sc.validate(), config_error);
  sc = SceneConfig();
  sc.y_min = 0.05;
  EXPECT_THROW(sc.validate(), config_error);
  sc = SceneConfig();
  sc.frames_per_clip = 1;
  EXPECT_THROW(sc.validate(), config_error);
}
