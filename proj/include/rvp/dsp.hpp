#pragma once

// IQ frame to spectrogram maps. The FFT cascade runs range (fast time),
// Doppler (slow time, centred by fftshift), then azimuth (zero-padded
// virtual array, centred by fftshift). The cube is collapsed by magnitude
// max into a range-Doppler and a range-angle map per frame; a clip of maps
// becomes a video tensor via log1p, bilinear resize, and per-clip min-max
// normalization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <rvp/errors.hpp>
#include <rvp/fft.hpp>
#include <rvp/radar.hpp>
#include <rvp/tensor.hpp>

namespace rvp {

struct DspConfig {
  int64_t angle_fft = 64;  // azimuth bins after zero padding
  int64_t out_h = 224, out_w = 224;  // video frame size

  void validate(const RadarConfig& rc) const {
    if (angle_fft < rc.n_antennas)
      throw config_error("dsp: angle_fft smaller than the antenna count");
    if ((angle_fft & (angle_fft - 1)) != 0)
      throw config_error("dsp: angle_fft must be a power of two");
    if (out_h < 8 || out_w < 8)
      throw config_error("dsp: output frames smaller than 8x8");
  }
};

struct FrameMaps {
  // rd: [n_adc rows, n_chirps cols], Doppler centred (static targets in the
  // middle column). ra: [n_adc rows, angle_fft cols], boresight centred.
  std::vector<float> rd;
  std::vector<float> ra;
};

inline FrameMaps iq_to_maps(const RadarConfig& rc, const c32* iq,
                            int64_t angle_fft) {
  const int64_t C = rc.n_chirps, S = rc.n_adc, A = rc.n_antennas;
  std::vector<c32> cube(iq, iq + rc.samples_per_frame());
  // Range FFT along fast time for every (chirp, antenna).
  for (int64_t c = 0; c < C; ++c)
    for (int64_t a = 0; a < A; ++a)
      fft_strided(cube.data() + c * S * A + a, S, A, false);
  // Doppler FFT along chirps for every (range, antenna).
  for (int64_t r = 0; r < S; ++r)
    for (int64_t a = 0; a < A; ++a)
      fft_strided(cube.data() + r * A + a, C, S * A, false);

  FrameMaps maps;
  maps.rd.assign(static_cast<size_t>(S * C), 0.0f);
  maps.ra.assign(static_cast<size_t>(S * angle_fft), 0.0f);
  std::vector<c32> ant(static_cast<size_t>(angle_fft));
  for (int64_t d = 0; d < C; ++d) {
    const int64_t ds = fftshift_index(d, C);
    for (int64_t r = 0; r < S; ++r) {
      const c32* src = cube.data() + d * S * A + r * A;
      std::fill(ant.begin(), ant.end(), c32(0, 0));
      for (int64_t a = 0; a < A; ++a) ant[static_cast<size_t>(a)] = src[a];
      fft_inplace(ant);
      float best = 0.0f;
      float* ra_row = maps.ra.data() + r * angle_fft;
      for (int64_t k = 0; k < angle_fft; ++k) {
        const float m = std::abs(ant[static_cast<size_t>(k)]);
        best = std::max(best, m);
        float& cell = ra_row[fftshift_index(k, angle_fft)];
        cell = std::max(cell, m);
      }
      maps.rd[static_cast<size_t>(r * C + ds)] = best;
    }
  }
  return maps;
}

// Bilinear resample with half-pixel centres and edge clamping.
inline std::vector<float> bilinear_resize(const float* src, int64_t h,
                                          int64_t w, int64_t oh, int64_t ow) {
  if (h < 1 || w < 1 || oh < 1 || ow < 1)
    throw dimension_error("bilinear_resize: empty image");
  std::vector<float> dst(static_cast<size_t>(oh * ow));
  const double sy = double(h) / double(oh);
  const double sx = double(w) / double(ow);
  for (int64_t oy = 0; oy < oh; ++oy) {
    double fy = (double(oy) + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), double(h - 1));
    const int64_t y0 = int64_t(fy);
    const int64_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - double(y0);
    for (int64_t ox = 0; ox < ow; ++ox) {
      double fx = (double(ox) + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), double(w - 1));
      const int64_t x0 = int64_t(fx);
      const int64_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - double(x0);
      const double top = (1.0 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1];
      const double bot = (1.0 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1];
      dst[static_cast<size_t>(oy * ow + ox)] = float((1.0 - wy) * top + wy * bot);
    }
  }
  return dst;
}

// Stacks per-frame maps into a [T, out_h, out_w] video: log1p compresses
// dynamic range before resampling, then the whole clip is min-max scaled to
// [0, 1]. A flat clip comes back as zeros with *degenerate set.
inline Tensor maps_to_clip(const std::vector<const float*>& frames,
                           int64_t src_h, int64_t src_w, int64_t out_h,
                           int64_t out_w, bool* degenerate) {
  if (frames.empty()) throw dimension_error("maps_to_clip: no frames");
  const int64_t T = int64_t(frames.size());
  Tensor video = Tensor::zeros({T, out_h, out_w});
  std::vector<float> logged(static_cast<size_t>(src_h * src_w));
  float lo = std::numeric_limits<float>::infinity();
  float hi = -std::numeric_limits<float>::infinity();
  for (int64_t t = 0; t < T; ++t) {
    const float* src = frames[static_cast<size_t>(t)];
    for (int64_t i = 0; i < src_h * src_w; ++i) {
      const float v = src[i];
      if (!std::isfinite(v) || v < 0)
        throw numeric_error("maps_to_clip: map values must be finite and non-negative");
      logged[static_cast<size_t>(i)] = std::log1p(v);
    }
    std::vector<float> frame = bilinear_resize(logged.data(), src_h, src_w, out_h, out_w);
    float* dst = video.data() + t * out_h * out_w;
    for (int64_t i = 0; i < out_h * out_w; ++i) {
      dst[i] = frame[static_cast<size_t>(i)];
      lo = std::min(lo, dst[i]);
      hi = std::max(hi, dst[i]);
    }
  }
  if (degenerate) *degenerate = false;
  if (!(hi - lo > 1e-12f)) {
    if (degenerate) *degenerate = true;
    return Tensor::zeros({T, out_h, out_w});
  }
  const float scale = 1.0f / (hi - lo);
  float* v = video.data();
  for (int64_t i = 0; i < video.numel(); ++i) v[i] = (v[i] - lo) * scale;
  return video;
}

struct ClipVideos {
  Tensor rd;  // [T, out_h, out_w]
  Tensor ra;  // [T, out_h, out_w]
  bool rd_degenerate = false;
  bool ra_degenerate = false;
};

// Full per-clip front end: synthesizes every frame's IQ, maps it, and packs
// the two spectrogram videos.
inline ClipVideos clip_to_videos(const RadarConfig& rc, const DspConfig& dc,
                                 const std::vector<std::vector<Scatterer>>& frames,
                                 Rng& noise_rng) {
  rc.validate();
  dc.validate(rc);
  std::vector<FrameMaps> maps;
  maps.reserve(frames.size());
  for (const auto& scatterers : frames) {
    std::vector<c32> iq = synth_frame(rc, scatterers, noise_rng);
    maps.push_back(iq_to_maps(rc, iq.data(), dc.angle_fft));
  }
  std::vector<const float*> rd_frames, ra_frames;
  for (const FrameMaps& m : maps) {
    rd_frames.push_back(m.rd.data());
    ra_frames.push_back(m.ra.data());
  }
  ClipVideos out;
  out.rd = maps_to_clip(rd_frames, rc.n_adc, rc.n_chirps, dc.out_h, dc.out_w,
                        &out.rd_degenerate);
  out.ra = maps_to_clip(ra_frames, rc.n_adc, dc.angle_fft, dc.out_h, dc.out_w,
                        &out.ra_degenerate);
  return out;
}

}  // namespace rvp
