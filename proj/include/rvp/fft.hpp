#pragma once

// c32 FFT: iterative radix-2 for powers of two, Bluestein's chirp-z
// otherwise. Twiddles and chirp tables are computed at f64 and cached per
// length. Forward transform is unnormalized (so sum|X|^2 = N sum|x|^2);
// inverse divides by N, making ifft(fft(x)) = x.

#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <vector>

#include <rvp/errors.hpp>

namespace rvp {

using c32 = std::complex<float>;
using c64 = std::complex<double>;

namespace detail {

constexpr double kPi = 3.14159265358979323846264338327950288;

inline bool is_pow2(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

// Per-length forward twiddle table e^{-2pi i k / n}, k < n/2.
inline const std::vector<c32>& twiddles(int64_t n) {
  thread_local std::map<int64_t, std::vector<c32>> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  std::vector<c32> tw(size_t(n / 2));
  for (int64_t k = 0; k < n / 2; ++k) {
    const double a = -2.0 * kPi * double(k) / double(n);
    tw[size_t(k)] = c32(float(std::cos(a)), float(std::sin(a)));
  }
  return cache.emplace(n, std::move(tw)).first->second;
}

inline void fft_pow2(c32* x, int64_t n, bool inverse) {
  // bit reversal
  for (int64_t i = 1, j = 0; i < n; ++i) {
    int64_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j |= bit;
    if (i < j) std::swap(x[i], x[j]);
  }
  const auto& tw = twiddles(n);
  for (int64_t len = 2; len <= n; len <<= 1) {
    const int64_t step = n / len;
    for (int64_t i = 0; i < n; i += len)
      for (int64_t k = 0; k < len / 2; ++k) {
        c32 w = tw[size_t(k * step)];
        if (inverse) w = std::conj(w);
        const c32 u = x[i + k];
        const c32 v = x[i + k + len / 2] * w;
        x[i + k] = u + v;
        x[i + k + len / 2] = u - v;
      }
  }
  if (inverse) {
    const float inv = 1.0f / float(n);
    for (int64_t i = 0; i < n; ++i) x[i] *= inv;
  }
}

struct BluesteinPlan {
  int64_t n, m;
  std::vector<c32> chirp;    // e^{-i pi j^2 / n}, j < n
  std::vector<c32> bfft;     // FFT of the symmetric conjugate-chirp kernel
};

inline const BluesteinPlan& bluestein_plan(int64_t n) {
  thread_local std::map<int64_t, BluesteinPlan> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  BluesteinPlan p;
  p.n = n;
  p.m = 1;
  while (p.m < 2 * n - 1) p.m <<= 1;
  p.chirp.resize(static_cast<size_t>(n));
  std::vector<c32> b(size_t(p.m), c32(0, 0));
  for (int64_t j = 0; j < n; ++j) {
    // j^2 mod 2n keeps the angle small so the f64 trig stays exact
    const int64_t q = (j * j) % (2 * n);
    const double a = -kPi * double(q) / double(n);
    p.chirp[size_t(j)] = c32(float(std::cos(a)), float(std::sin(a)));
    const c32 bj = std::conj(p.chirp[size_t(j)]);
    b[size_t(j)] = bj;
    if (j > 0) b[size_t(p.m - j)] = bj;
  }
  fft_pow2(b.data(), p.m, false);
  p.bfft = std::move(b);
  return cache.emplace(n, std::move(p)).first->second;
}

inline void fft_bluestein(c32* x, int64_t n) {
  const BluesteinPlan& p = bluestein_plan(n);
  std::vector<c32> a(size_t(p.m), c32(0, 0));
  for (int64_t j = 0; j < n; ++j) a[size_t(j)] = x[j] * p.chirp[size_t(j)];
  fft_pow2(a.data(), p.m, false);
  for (int64_t j = 0; j < p.m; ++j) a[size_t(j)] *= p.bfft[size_t(j)];
  fft_pow2(a.data(), p.m, true);
  for (int64_t k = 0; k < n; ++k) x[k] = a[size_t(k)] * p.chirp[size_t(k)];
}

}  // namespace detail

inline void fft_inplace(c32* x, int64_t n, bool inverse = false) {
  if (n <= 0) throw dimension_error("fft: length must be positive");
  if (n == 1) return;
  if (detail::is_pow2(n)) {
    detail::fft_pow2(x, n, inverse);
    return;
  }
  if (!inverse) {
    detail::fft_bluestein(x, n);
  } else {
    // ifft(x) = conj(fft(conj(x))) / n
    for (int64_t i = 0; i < n; ++i) x[i] = std::conj(x[i]);
    detail::fft_bluestein(x, n);
    const float inv = 1.0f / float(n);
    for (int64_t i = 0; i < n; ++i) x[i] = std::conj(x[i]) * inv;
  }
}

inline void fft_inplace(std::vector<c32>& v, bool inverse = false) {
  fft_inplace(v.data(), int64_t(v.size()), inverse);
}

// FFT along a strided axis: gathers into a contiguous scratch, transforms,
// scatters back. Lets the spectrogram code run transforms along any axis of
// a packed multi-dim array.
inline void fft_strided(c32* base, int64_t n, int64_t stride,
                        bool inverse = false) {
  thread_local std::vector<c32> buf;
  buf.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) buf[size_t(i)] = base[i * stride];
  fft_inplace(buf.data(), n, inverse);
  for (int64_t i = 0; i < n; ++i) base[i * stride] = buf[size_t(i)];
}

// Rotates so the DC bin lands at floor(n/2). out[(k + n/2) % n] = in[k].
inline void fftshift_inplace(c32* x, int64_t n) {
  thread_local std::vector<c32> buf;
  buf.resize(static_cast<size_t>(n));
  const int64_t h = n / 2;
  for (int64_t k = 0; k < n; ++k) buf[size_t((k + h) % n)] = x[k];
  for (int64_t k = 0; k < n; ++k) x[k] = buf[size_t(k)];
}

inline int64_t fftshift_index(int64_t k, int64_t n) { return (k + n / 2) % n; }

}  // namespace rvp
