#pragma once

// Statistical comparison machinery: Friedman rank test as the omnibus gate,
// Shapiro-Wilk normality screening on paired differences, then a paired t
// or Wilcoxon signed-rank test per pair with Bonferroni adjustment. Special
// functions (incomplete gamma/beta, inverse normal CDF) are implemented
// here in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <rvp/errors.hpp>

namespace rvp {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / M_SQRT2); }
inline double normal_sf(double z) { return 0.5 * std::erfc(z / M_SQRT2); }

// Acklam's rational approximation, relative error below 1.2e-9.
inline double inverse_normal_cdf(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw numeric_error("inverse_normal_cdf: p must lie in (0, 1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425, phigh = 1 - plow;
  double q, r, x;
  if (p < plow) {
    q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= phigh) {
    q = p - 0.5;
    r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    q = std::sqrt(-2 * std::log(1 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  // One Halley refinement pushes the error to near machine precision.
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2 * M_PI) * std::exp(x * x / 2);
  x = x - u / (1 + x * u / 2);
  return x;
}

namespace detail {

// Regularized lower incomplete gamma P(a, x) by series expansion.
inline double gamma_p_series(double a, double x) {
  double ap = a;
  double sum = 1.0 / a;
  double del = sum;
  for (int n = 0; n < 500; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * 1e-15) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Regularized upper incomplete gamma Q(a, x) by continued fraction.
inline double gamma_q_cf(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -double(i) * (double(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

inline double betacf(double a, double b, double x) {
  const double tiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 500; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  return h;
}

}  // namespace detail

inline double regularized_gamma_q(double a, double x) {
  if (a <= 0 || x < 0) throw numeric_error("regularized_gamma_q: bad arguments");
  if (x == 0) return 1.0;
  if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
  return detail::gamma_q_cf(a, x);
}

inline double incomplete_beta(double a, double b, double x) {
  if (a <= 0 || b <= 0) throw numeric_error("incomplete_beta: bad shape");
  if (x <= 0) return 0.0;
  if (x >= 1) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log(1.0 - x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::betacf(a, b, x) / a;
  return 1.0 - front * detail::betacf(b, a, 1.0 - x) / b;
}

inline double chi2_sf(double x, int df) {
  if (df < 1) throw numeric_error("chi2_sf: df must be positive");
  if (x <= 0) return 1.0;
  return regularized_gamma_q(0.5 * df, 0.5 * x);
}

inline double t_sf_two_sided(double t, int df) {
  if (df < 1) throw numeric_error("t_sf_two_sided: df must be positive");
  return incomplete_beta(0.5 * df, 0.5, double(df) / (double(df) + t * t));
}

// 1-based ranks with ties replaced by their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * (double(i + 1) + double(j + 1));
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

struct FriedmanResult {
  double statistic = 0;
  double p_value = 1;
  std::vector<double> mean_ranks;
};

// scores[subject][method]; ranks are per subject with average ties and the
// statistic carries the standard tie correction. Fully tied data has no
// rank information and comes back as statistic 0, p 1.
inline FriedmanResult friedman_test(const std::vector<std::vector<double>>& scores) {
  const size_t n = scores.size();
  if (n < 2) throw numeric_error("friedman_test: need at least 2 subjects");
  const size_t k = scores[0].size();
  if (k < 2) throw numeric_error("friedman_test: need at least 2 methods");
  for (const auto& row : scores)
    if (row.size() != k) throw dimension_error("friedman_test: ragged scores");

  std::vector<double> rank_sum(k, 0.0);
  double tie_term = 0.0;
  for (const auto& row : scores) {
    const std::vector<double> r = average_ranks(row);
    for (size_t j = 0; j < k; ++j) rank_sum[j] += r[j];
    // Count tie group sizes within the row.
    std::vector<double> sorted(row.begin(), row.end());
    std::sort(sorted.begin(), sorted.end());
    size_t i = 0;
    while (i < k) {
      size_t j = i;
      while (j + 1 < k && sorted[j + 1] == sorted[i]) ++j;
      const double t = double(j - i + 1);
      tie_term += t * t * t - t;
      i = j + 1;
    }
  }
  FriedmanResult res;
  res.mean_ranks.resize(k);
  for (size_t j = 0; j < k; ++j) res.mean_ranks[j] = rank_sum[j] / double(n);
  double ssbn = 0.0;
  for (size_t j = 0; j < k; ++j) ssbn += rank_sum[j] * rank_sum[j];
  const double kk = double(k), nn = double(n);
  const double c = 1.0 - tie_term / (kk * (kk * kk - 1.0) * nn);
  if (c <= 0.0) return res;  // every row fully tied
  res.statistic = (12.0 / (kk * nn * (kk + 1.0)) * ssbn - 3.0 * nn * (kk + 1.0)) / c;
  res.statistic = std::max(res.statistic, 0.0);
  res.p_value = chi2_sf(res.statistic, int(k) - 1);
  return res;
}

struct ShapiroResult {
  double w = 0;
  double p_value = 0;
};

// Royston's AS R94 approximation, 3 <= n <= 5000.
inline ShapiroResult shapiro_wilk(std::vector<double> x) {
  const size_t n = x.size();
  if (n < 3) throw numeric_error("shapiro_wilk: need at least 3 samples");
  if (n > 5000) throw numeric_error("shapiro_wilk: n above 5000 unsupported");
  std::sort(x.begin(), x.end());
  if (!(x.back() - x.front() > 0))
    throw numeric_error("shapiro_wilk: zero range");

  std::vector<double> m(n);
  double ssq_m = 0.0;
  for (size_t i = 0; i < n; ++i) {
    m[i] = inverse_normal_cdf((double(i + 1) - 0.375) / (double(n) + 0.25));
    ssq_m += m[i] * m[i];
  }
  std::vector<double> a(n);
  const double rsqrt_ssq = 1.0 / std::sqrt(ssq_m);
  if (n == 3) {
    a[0] = -M_SQRT1_2;
    a[1] = 0.0;
    a[2] = M_SQRT1_2;
  } else {
    const double u = 1.0 / std::sqrt(double(n));
    const double cn = m[n - 1] * rsqrt_ssq;
    const double an = -2.706056 * std::pow(u, 5) + 4.434685 * std::pow(u, 4) -
                      2.071190 * std::pow(u, 3) - 0.147981 * u * u +
                      0.221157 * u + cn;
    double phi;
    if (n > 5) {
      const double cn1 = m[n - 2] * rsqrt_ssq;
      const double an1 = -3.582633 * std::pow(u, 5) + 5.682633 * std::pow(u, 4) -
                         1.752461 * std::pow(u, 3) - 0.293762 * u * u +
                         0.042981 * u + cn1;
      phi = (ssq_m - 2.0 * m[n - 1] * m[n - 1] - 2.0 * m[n - 2] * m[n - 2]) /
            (1.0 - 2.0 * an * an - 2.0 * an1 * an1);
      a[n - 1] = an;
      a[0] = -an;
      a[n - 2] = an1;
      a[1] = -an1;
      for (size_t i = 2; i + 2 < n; ++i) a[i] = m[i] / std::sqrt(phi);
    } else {
      phi = (ssq_m - 2.0 * m[n - 1] * m[n - 1]) / (1.0 - 2.0 * an * an);
      a[n - 1] = an;
      a[0] = -an;
      for (size_t i = 1; i + 1 < n; ++i) a[i] = m[i] / std::sqrt(phi);
    }
  }

  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= double(n);
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < n; ++i) {
    num += a[i] * x[i];
    den += (x[i] - mean) * (x[i] - mean);
  }
  ShapiroResult res;
  res.w = num * num / den;
  res.w = std::min(res.w, 1.0);

  if (n == 3) {
    const double pi6 = 6.0 / M_PI;
    const double stqr = std::asin(std::sqrt(0.75));
    res.p_value = pi6 * (std::asin(std::sqrt(res.w)) - stqr);
    res.p_value = std::min(std::max(res.p_value, 0.0), 1.0);
    return res;
  }
  double mu, sigma, wstat;
  if (n <= 11) {
    const double nn = double(n);
    const double gamma = -2.273 + 0.459 * nn;
    wstat = -std::log(gamma - std::log1p(-res.w));
    mu = 0.5440 - 0.39978 * nn + 0.025054 * nn * nn - 0.0006714 * nn * nn * nn;
    sigma = std::exp(1.3822 - 0.77857 * nn + 0.062767 * nn * nn -
                     0.0020322 * nn * nn * nn);
  } else {
    const double ln_n = std::log(double(n));
    wstat = std::log1p(-res.w);
    mu = -1.5861 - 0.31082 * ln_n - 0.083751 * ln_n * ln_n +
         0.0038915 * ln_n * ln_n * ln_n;
    sigma = std::exp(-0.4803 - 0.082676 * ln_n + 0.0030302 * ln_n * ln_n);
  }
  res.p_value = normal_sf((wstat - mu) / sigma);
  return res;
}

struct PairedTResult {
  double t = 0;
  double p_value = 1;
  double effect = 0;  // Cohen's d on the differences
};

inline PairedTResult paired_t_test(const std::vector<double>& a,
                                   const std::vector<double>& b) {
  if (a.size() != b.size()) throw dimension_error("paired_t_test: size mismatch");
  const size_t n = a.size();
  if (n < 2) throw numeric_error("paired_t_test: need at least 2 pairs");
  double mean = 0.0;
  for (size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= double(n);
  double ss = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i] - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / double(n - 1));
  if (!(sd > 0)) throw numeric_error("paired_t_test: constant differences");
  PairedTResult res;
  res.t = mean / (sd / std::sqrt(double(n)));
  res.p_value = t_sf_two_sided(res.t, int(n) - 1);
  res.effect = mean / sd;
  return res;
}

struct WilcoxonResult {
  double w = 0;        // min of signed-rank sums, scipy convention
  double z = 0;
  double p_value = 1;
  double effect_r = 0; // |z| / sqrt(2n)
  int64_t n_used = 0;  // pairs left after dropping zero differences
};

// Signed-rank test with zero differences dropped, average ranks with tie
// variance correction, and a continuity-corrected normal approximation.
// Zero differences are dropped, |diff| gets average ranks, and W is the sum
// of positive-difference ranks. Z always comes from the tie-corrected normal
// approximation with continuity correction. The p-value is exact (all sign
// patterns of the ranks enumerated) when at most 8 nonzero pairs remain; the
// approximation can drift more than 0.02 from the exact tail there, while
// from n = 9 it stays within 0.02 for every achievable W.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                           const std::vector<double>& b) {
  if (a.size() != b.size())
    throw dimension_error("wilcoxon_signed_rank: size mismatch");
  if (a.size() < 5)
    throw numeric_error("wilcoxon_signed_rank: need at least 5 pairs");
  std::vector<double> d;
  for (size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    if (diff != 0.0) d.push_back(diff);
  }
  if (d.empty())
    throw numeric_error("wilcoxon_signed_rank: all differences are zero");
  WilcoxonResult res;
  res.n_used = int64_t(d.size());
  const size_t n = d.size();
  std::vector<double> mags(n);
  for (size_t i = 0; i < n; ++i) mags[i] = std::abs(d[i]);
  const std::vector<double> ranks = average_ranks(mags);
  double r_plus = 0.0;
  for (size_t i = 0; i < n; ++i)
    if (d[i] > 0) r_plus += ranks[i];
  res.w = r_plus;
  const double nn = double(n);
  const double mu = nn * (nn + 1.0) / 4.0;
  double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0;
  std::vector<double> sorted(mags);
  std::sort(sorted.begin(), sorted.end());
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
    const double t = double(j - i + 1);
    var -= (t * t * t - t) / 48.0;
    i = j + 1;
  }
  const double dev = r_plus - mu;
  if (var > 0) {
    const double correction = dev > 0 ? 0.5 : (dev < 0 ? -0.5 : 0.0);
    res.z = (dev - correction) / std::sqrt(var);
  }
  res.effect_r = std::abs(res.z) / std::sqrt(2.0 * nn);
  if (n <= 8) {
    const uint64_t total = uint64_t(1) << n;
    uint64_t le = 0, ge = 0;
    for (uint64_t mask = 0; mask < total; ++mask) {
      double w = 0;
      for (size_t k = 0; k < n; ++k)
        if (mask & (uint64_t(1) << k)) w += ranks[k];
      if (w <= r_plus + 1e-9) ++le;
      if (w >= r_plus - 1e-9) ++ge;
    }
    res.p_value =
        std::min(1.0, 2.0 * double(std::min(le, ge)) / double(total));
  } else {
    res.p_value = std::min(1.0, 2.0 * normal_sf(std::abs(res.z)));
  }
  return res;
}

inline double bonferroni(double p, int n_comparisons) {
  if (n_comparisons < 1) throw numeric_error("bonferroni: bad comparison count");
  return std::min(1.0, p * double(n_comparisons));
}

struct PairwiseComparison {
  int method_a = 0, method_b = 0;
  std::string test;  // "paired_t", "wilcoxon", or "degenerate"
  double statistic = 0;
  double p_raw = 1;
  double p_adjusted = 1;
  double effect = 0;
  bool significant = false;
};

struct StatsReport {
  double friedman_statistic = 0;
  double friedman_p = 1;
  bool friedman_significant = false;
  std::vector<double> mean_ranks;
  std::vector<double> method_shapiro_p;  // per method, filled when gate opens
  bool all_methods_normal = false;
  std::vector<PairwiseComparison> pairwise;  // empty unless the gate opened
  double alpha = 0.05;
};

// Omnibus-gated pairwise comparison: pairwise tests run only when Friedman
// rejects. Shapiro-Wilk screens each method's per-fold values; the whole
// pairwise family uses the paired t test when every method passes at alpha
// and Wilcoxon otherwise. Bonferroni adjusts over the pair count. A method
// with zero fold-to-fold variance counts as failing the normality screen,
// and a pair whose differences are all zero (or exactly constant under the
// t family, where the statistic is undefined) is reported as "degenerate"
// with p = 1.
inline StatsReport compare_methods(const std::vector<std::vector<double>>& scores,
                                   double alpha = 0.05) {
  StatsReport report;
  report.alpha = alpha;
  const FriedmanResult fr = friedman_test(scores);
  report.friedman_statistic = fr.statistic;
  report.friedman_p = fr.p_value;
  report.mean_ranks = fr.mean_ranks;
  report.friedman_significant = fr.p_value < alpha;
  if (!report.friedman_significant) return report;

  const size_t k = scores[0].size();
  const size_t n = scores.size();
  report.method_shapiro_p.assign(k, 0.0);
  report.all_methods_normal = true;
  for (size_t m = 0; m < k; ++m) {
    std::vector<double> col(n);
    for (size_t s = 0; s < n; ++s) col[s] = scores[s][m];
    const auto [lo, hi] = std::minmax_element(col.begin(), col.end());
    if (*lo == *hi) {
      report.all_methods_normal = false;
      continue;
    }
    const ShapiroResult sw = shapiro_wilk(col);
    report.method_shapiro_p[m] = sw.p_value;
    if (sw.p_value < alpha) report.all_methods_normal = false;
  }

  const int n_pairs = int(k * (k - 1) / 2);
  for (size_t i = 0; i < k; ++i) {
    for (size_t j = i + 1; j < k; ++j) {
      PairwiseComparison cmp;
      cmp.method_a = int(i);
      cmp.method_b = int(j);
      std::vector<double> va(n), vb(n);
      bool all_zero = true, constant = true;
      for (size_t s = 0; s < n; ++s) {
        va[s] = scores[s][i];
        vb[s] = scores[s][j];
        all_zero &= va[s] == vb[s];
        constant &= va[s] - vb[s] == va[0] - vb[0];
      }
      if (all_zero || (constant && report.all_methods_normal)) {
        cmp.test = "degenerate";
        report.pairwise.push_back(cmp);
        continue;
      }
      if (report.all_methods_normal) {
        const PairedTResult t = paired_t_test(va, vb);
        cmp.test = "paired_t";
        cmp.statistic = t.t;
        cmp.p_raw = t.p_value;
        cmp.effect = t.effect;
      } else {
        const WilcoxonResult w = wilcoxon_signed_rank(va, vb);
        cmp.test = "wilcoxon";
        cmp.statistic = w.z;
        cmp.p_raw = w.p_value;
        cmp.effect = w.effect_r;
      }
      cmp.p_adjusted = bonferroni(cmp.p_raw, n_pairs);
      cmp.significant = cmp.p_adjusted < alpha;
      report.pairwise.push_back(cmp);
    }
  }
  return report;
}

}  // namespace rvp
