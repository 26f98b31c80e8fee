#pragma once

#include <array>
#include <cmath>
#include <cstring>

#include <rvp/gemm.hpp>
#include <rvp/tensor.hpp>

namespace rvp {

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw dimension_error(std::string(op) + ": shape mismatch " +
                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// (outer, n, inner) view of an axis: numel = outer * n * inner, where the
// axis stride is `inner` and consecutive slices along it are `inner` apart.
inline void axis_split(const Shape& s, int64_t axis, int64_t& outer, int64_t& n,
                       int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[size_t(i)];
  n = s[size_t(axis)];
  for (size_t i = size_t(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

inline int64_t normalize_axis(int64_t axis, int64_t ndim, const char* op) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim)
    throw dimension_error(std::string(op) + ": axis out of range");
  return axis;
}

inline std::vector<float> permute_raw(const float* src, const Shape& shape,
                                      const std::vector<int64_t>& perm,
                                      Shape& out_shape) {
  const int64_t nd = int64_t(shape.size());
  std::vector<int64_t> src_strides(size_t(nd), 1);
  for (int64_t i = nd - 2; i >= 0; --i)
    src_strides[size_t(i)] = src_strides[size_t(i + 1)] * shape[size_t(i + 1)];
  out_shape.resize(static_cast<size_t>(nd));
  std::vector<int64_t> step(static_cast<size_t>(nd));  // src stride in output axis order
  for (int64_t i = 0; i < nd; ++i) {
    out_shape[size_t(i)] = shape[size_t(perm[size_t(i)])];
    step[size_t(i)] = src_strides[size_t(perm[size_t(i)])];
  }
  const int64_t total = shape_numel(shape);
  std::vector<float> out(static_cast<size_t>(total));
  // Mixed-radix counter over the output index; src offset tracks via steps.
  std::vector<int64_t> idx(size_t(nd), 0);
  int64_t src_off = 0;
  for (int64_t o = 0; o < total; ++o) {
    out[size_t(o)] = src[src_off];
    for (int64_t d = nd - 1; d >= 0; --d) {
      src_off += step[size_t(d)];
      if (++idx[size_t(d)] < out_shape[size_t(d)]) break;
      src_off -= step[size_t(d)] * out_shape[size_t(d)];
      idx[size_t(d)] = 0;
    }
  }
  return out;
}

}  // namespace detail

// ---- elementwise ----

// add(a, b): same shape, or b is 1-D matching a's last dim (bias broadcast).
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias = b.ndim() == 1 && a.ndim() > 1 &&
                    b.dim(0) == a.dim(a.ndim() - 1) && a.shape() != b.shape();
  if (!bias) detail::check_same_shape(a, b, "add");
  std::vector<float> out(a.vec());
  const int64_t n = a.numel(), d = bias ? b.dim(0) : 0;
  if (bias) {
    const float* bp = b.data();
    for (int64_t i = 0; i < n; ++i) out[size_t(i)] += bp[i % d];
  } else {
    const float* bp = b.data();
    for (int64_t i = 0; i < n; ++i) out[size_t(i)] += bp[i];
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_op_result(
      a.shape(), std::move(out), "add", {a, b},
      [ai, bi, bias, n, d](TensorImpl& o) {
        const float* g = o.grad.data();
        if (ai->requires_grad) {
          ai->ensure_grad();
          float* ga = ai->grad.data();
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (bi->requires_grad) {
          bi->ensure_grad();
          float* gb = bi->grad.data();
          if (bias) {
            // f64 partial sums per bias element
            std::vector<double> acc(size_t(d), 0.0);
            for (int64_t i = 0; i < n; ++i) acc[size_t(i % d)] += double(g[i]);
            for (int64_t j = 0; j < d; ++j) gb[j] += float(acc[size_t(j)]);
          } else {
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
          }
        }
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<float> out(a.vec());
  const float* bp = b.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[size_t(i)] -= bp[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return make_op_result(a.shape(), std::move(out), "sub", {a, b},
                        [ai, bi, n](TensorImpl& o) {
                          const float* g = o.grad.data();
                          if (ai->requires_grad) {
                            ai->ensure_grad();
                            for (int64_t i = 0; i < n; ++i) ai->grad[size_t(i)] += g[i];
                          }
                          if (bi->requires_grad) {
                            bi->ensure_grad();
                            for (int64_t i = 0; i < n; ++i) bi->grad[size_t(i)] -= g[i];
                          }
                        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  const int64_t n = a.numel();
  std::vector<float> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    out[size_t(i)] = a.data()[i] * b.data()[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return make_op_result(a.shape(), std::move(out), "mul", {a, b},
                        [ai, bi, n](TensorImpl& o) {
                          const float* g = o.grad.data();
                          if (ai->requires_grad) {
                            ai->ensure_grad();
                            for (int64_t i = 0; i < n; ++i)
                              ai->grad[size_t(i)] += g[i] * bi->data[size_t(i)];
                          }
                          if (bi->requires_grad) {
                            bi->ensure_grad();
                            for (int64_t i = 0; i < n; ++i)
                              bi->grad[size_t(i)] += g[i] * ai->data[size_t(i)];
                          }
                        });
}

inline Tensor scale(const Tensor& a, float s) {
  const int64_t n = a.numel();
  std::vector<float> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[size_t(i)] = a.data()[i] * s;
  auto ai = a.impl();
  return make_op_result(a.shape(), std::move(out), "scale", {a},
                        [ai, s, n](TensorImpl& o) {
                          if (!ai->requires_grad) return;
                          ai->ensure_grad();
                          const float* g = o.grad.data();
                          for (int64_t i = 0; i < n; ++i) ai->grad[size_t(i)] += g[i] * s;
                        });
}

inline Tensor add_scalar(const Tensor& a, float c) {
  const int64_t n = a.numel();
  std::vector<float> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[size_t(i)] = a.data()[i] + c;
  auto ai = a.impl();
  return make_op_result(a.shape(), std::move(out), "add_scalar", {a},
                        [ai, n](TensorImpl& o) {
                          if (!ai->requires_grad) return;
                          ai->ensure_grad();
                          const float* g = o.grad.data();
                          for (int64_t i = 0; i < n; ++i) ai->grad[size_t(i)] += g[i];
                        });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0f); }

// ---- activations ----

inline Tensor gelu(const Tensor& a) {
  // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
  constexpr double kC = 0.7978845608028653558798921198687;
  constexpr double kA = 0.044715;
  const int64_t n = a.numel();
  std::vector<float> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double x = double(a.data()[i]);
    out[size_t(i)] = float(0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x))));
  }
  auto ai = a.impl();
  return make_op_result(
      a.shape(), std::move(out), "gelu", {a}, [ai, n](TensorImpl& o) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        const float* g = o.grad.data();
        for (int64_t i = 0; i < n; ++i) {
          const double x = double(ai->data[size_t(i)]);
          const double t = std::tanh(kC * (x + kA * x * x * x));
          const double du = kC * (1.0 + 3.0 * kA * x * x);
          const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
          ai->grad[size_t(i)] += float(double(g[i]) * d);
        }
      });
}

inline Tensor sigmoid(const Tensor& a) {
  const int64_t n = a.numel();
  std::vector<float> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double x = double(a.data()[i]);
    out[size_t(i)] = float(x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                    : std::exp(x) / (1.0 + std::exp(x)));
  }
  auto ai = a.impl();
  return make_op_result(a.shape(), std::move(out), "sigmoid", {a},
                        [ai, n](TensorImpl& o) {
                          if (!ai->requires_grad) return;
                          ai->ensure_grad();
                          const float* g = o.grad.data();
                          const float* y = o.data.data();
                          for (int64_t i = 0; i < n; ++i)
                            ai->grad[size_t(i)] += g[i] * y[i] * (1.0f - y[i]);
                        });
}

// ---- reductions ----

inline Tensor mean_all(const Tensor& a) {
  const int64_t n = a.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += double(a.data()[i]);
  auto ai = a.impl();
  return make_op_result(Shape{1}, {float(s / double(n))}, "mean_all", {a},
                        [ai, n](TensorImpl& o) {
                          if (!ai->requires_grad) return;
                          ai->ensure_grad();
                          const float g = o.grad[0] / float(n);
                          for (int64_t i = 0; i < n; ++i) ai->grad[size_t(i)] += g;
                        });
}

inline Tensor sum_all(const Tensor& a) {
  const int64_t n = a.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += double(a.data()[i]);
  auto ai = a.impl();
  return make_op_result(Shape{1}, {float(s)}, "sum_all", {a},
                        [ai, n](TensorImpl& o) {
                          if (!ai->requires_grad) return;
                          ai->ensure_grad();
                          const float g = o.grad[0];
                          for (int64_t i = 0; i < n; ++i) ai->grad[size_t(i)] += g;
                        });
}

// Mean along one axis; that axis is removed from the shape (unless it is the
// only axis, in which case the result is a scalar-shaped [1]).
inline Tensor mean_axis(const Tensor& a, int64_t axis) {
  axis = detail::normalize_axis(axis, a.ndim(), "mean_axis");
  int64_t outer, n, inner;
  detail::axis_split(a.shape(), axis, outer, n, inner);
  Shape os;
  for (int64_t i = 0; i < a.ndim(); ++i)
    if (i != axis) os.push_back(a.dim(i));
  if (os.empty()) os.push_back(1);
  std::vector<float> out(size_t(outer * inner));
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      double s = 0.0;
      const float* p = a.data() + o * n * inner + in;
      for (int64_t k = 0; k < n; ++k) s += double(p[k * inner]);
      out[size_t(o * inner + in)] = float(s / double(n));
    }
  auto ai = a.impl();
  return make_op_result(std::move(os), std::move(out), "mean_axis", {a},
                        [ai, outer, n, inner](TensorImpl& o) {
                          if (!ai->requires_grad) return;
                          ai->ensure_grad();
                          const float* g = o.grad.data();
                          for (int64_t ou = 0; ou < outer; ++ou)
                            for (int64_t in = 0; in < inner; ++in) {
                              const float gv = g[ou * inner + in] / float(n);
                              float* p = ai->grad.data() + ou * n * inner + in;
                              for (int64_t k = 0; k < n; ++k) p[k * inner] += gv;
                            }
                        });
}

// ---- shape ops ----

inline Tensor reshape(const Tensor& a, Shape ns) {
  int64_t known = 1, infer = -1;
  for (size_t i = 0; i < ns.size(); ++i) {
    if (ns[i] == -1) {
      if (infer >= 0) throw dimension_error("reshape: multiple -1 dims");
      infer = int64_t(i);
    } else {
      known *= ns[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || a.numel() % known != 0)
      throw dimension_error("reshape: cannot infer dim");
    ns[size_t(infer)] = a.numel() / known;
  }
  if (shape_numel(ns) != a.numel())
    throw dimension_error("reshape: numel mismatch " + shape_str(a.shape()) +
                          " -> " + shape_str(ns));
  auto ai = a.impl();
  const int64_t n = a.numel();
  return make_op_result(std::move(ns), a.vec(), "reshape", {a},
                        [ai, n](TensorImpl& o) {
                          if (!ai->requires_grad) return;
                          ai->ensure_grad();
                          for (int64_t i = 0; i < n; ++i)
                            ai->grad[size_t(i)] += o.grad[size_t(i)];
                        });
}

inline Tensor permute(const Tensor& a, std::vector<int64_t> perm) {
  const int64_t nd = a.ndim();
  if (int64_t(perm.size()) != nd)
    throw dimension_error("permute: perm rank mismatch");
  std::vector<bool> used(size_t(nd), false);
  for (int64_t p : perm) {
    if (p < 0 || p >= nd || used[size_t(p)])
      throw dimension_error("permute: invalid permutation");
    used[size_t(p)] = true;
  }
  Shape os;
  std::vector<float> out = detail::permute_raw(a.data(), a.shape(), perm, os);
  // Inverse permutation routes gradients back.
  std::vector<int64_t> inv(static_cast<size_t>(nd));
  for (int64_t i = 0; i < nd; ++i) inv[size_t(perm[size_t(i)])] = i;
  auto ai = a.impl();
  Shape oshape = os;
  return make_op_result(std::move(os), std::move(out), "permute", {a},
                        [ai, inv, oshape](TensorImpl& o) {
                          if (!ai->requires_grad) return;
                          ai->ensure_grad();
                          Shape dummy;
                          std::vector<float> gin = detail::permute_raw(
                              o.grad.data(), oshape, inv, dummy);
                          for (size_t i = 0; i < gin.size(); ++i)
                            ai->grad[i] += gin[i];
                        });
}

inline Tensor transpose(const Tensor& a, int64_t d0, int64_t d1) {
  d0 = detail::normalize_axis(d0, a.ndim(), "transpose");
  d1 = detail::normalize_axis(d1, a.ndim(), "transpose");
  std::vector<int64_t> perm(size_t(a.ndim()));
  for (int64_t i = 0; i < a.ndim(); ++i) perm[size_t(i)] = i;
  std::swap(perm[size_t(d0)], perm[size_t(d1)]);
  return permute(a, perm);
}

inline Tensor concat(const std::vector<Tensor>& xs, int64_t axis) {
  if (xs.empty()) throw dimension_error("concat: empty input list");
  axis = detail::normalize_axis(axis, xs[0].ndim(), "concat");
  Shape os = xs[0].shape();
  int64_t total_axis = 0;
  for (const Tensor& t : xs) {
    if (t.ndim() != xs[0].ndim())
      throw dimension_error("concat: rank mismatch");
    for (int64_t i = 0; i < t.ndim(); ++i)
      if (i != axis && t.dim(i) != os[size_t(i)])
        throw dimension_error("concat: shape mismatch off-axis");
    total_axis += t.dim(axis);
  }
  os[size_t(axis)] = total_axis;
  int64_t outer, n_unused, inner;
  detail::axis_split(os, axis, outer, n_unused, inner);
  std::vector<float> out(size_t(shape_numel(os)));
  std::vector<int64_t> axis_sizes, offsets;
  int64_t off = 0;
  for (const Tensor& t : xs) {
    axis_sizes.push_back(t.dim(axis));
    offsets.push_back(off);
    off += t.dim(axis);
  }
  for (size_t s = 0; s < xs.size(); ++s) {
    const float* src = xs[s].data();
    const int64_t an = axis_sizes[s];
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * total_axis + offsets[s]) * inner,
                  src + o * an * inner, size_t(an * inner) * sizeof(float));
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const Tensor& t : xs) impls.push_back(t.impl());
  return make_op_result(
      std::move(os), std::move(out), "concat", xs,
      [impls, axis_sizes, offsets, outer, total_axis, inner](TensorImpl& o) {
        for (size_t s = 0; s < impls.size(); ++s) {
          if (!impls[s]->requires_grad) continue;
          impls[s]->ensure_grad();
          const int64_t an = axis_sizes[s];
          for (int64_t ou = 0; ou < outer; ++ou) {
            const float* g = o.grad.data() + (ou * total_axis + offsets[s]) * inner;
            float* dst = impls[s]->grad.data() + ou * an * inner;
            for (int64_t i = 0; i < an * inner; ++i) dst[i] += g[i];
          }
        }
      });
}

inline Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t len) {
  axis = detail::normalize_axis(axis, a.ndim(), "slice");
  if (start < 0 || len <= 0 || start + len > a.dim(axis))
    throw dimension_error("slice: range out of bounds");
  int64_t outer, n, inner;
  detail::axis_split(a.shape(), axis, outer, n, inner);
  Shape os = a.shape();
  os[size_t(axis)] = len;
  std::vector<float> out(size_t(outer * len * inner));
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner,
                a.data() + (o * n + start) * inner,
                size_t(len * inner) * sizeof(float));
  auto ai = a.impl();
  return make_op_result(std::move(os), std::move(out), "slice", {a},
                        [ai, outer, n, inner, start, len](TensorImpl& o) {
                          if (!ai->requires_grad) return;
                          ai->ensure_grad();
                          for (int64_t ou = 0; ou < outer; ++ou) {
                            const float* g = o.grad.data() + ou * len * inner;
                            float* dst = ai->grad.data() + (ou * n + start) * inner;
                            for (int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
                          }
                        });
}

inline Tensor index_select(const Tensor& a, int64_t axis,
                           const std::vector<int64_t>& idx) {
  axis = detail::normalize_axis(axis, a.ndim(), "index_select");
  int64_t outer, n, inner;
  detail::axis_split(a.shape(), axis, outer, n, inner);
  for (int64_t i : idx)
    if (i < 0 || i >= n) throw dimension_error("index_select: index out of range");
  const int64_t m = int64_t(idx.size());
  if (m == 0) throw dimension_error("index_select: empty index list");
  Shape os = a.shape();
  os[size_t(axis)] = m;
  std::vector<float> out(size_t(outer * m * inner));
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < m; ++j)
      std::memcpy(out.data() + (o * m + j) * inner,
                  a.data() + (o * n + idx[size_t(j)]) * inner,
                  size_t(inner) * sizeof(float));
  auto ai = a.impl();
  return make_op_result(std::move(os), std::move(out), "index_select", {a},
                        [ai, idx, outer, n, m, inner](TensorImpl& o) {
                          if (!ai->requires_grad) return;
                          ai->ensure_grad();
                          for (int64_t ou = 0; ou < outer; ++ou)
                            for (int64_t j = 0; j < m; ++j) {
                              const float* g = o.grad.data() + (ou * m + j) * inner;
                              float* dst =
                                  ai->grad.data() + (ou * n + idx[size_t(j)]) * inner;
                              for (int64_t i = 0; i < inner; ++i) dst[i] += g[i];
                            }
                        });
}

// Repeats a tensor whose leading dim is 1 n times along dim 0.
inline Tensor repeat_dim0(const Tensor& a, int64_t n) {
  if (a.dim(0) != 1) throw dimension_error("repeat_dim0: leading dim must be 1");
  const int64_t inner = a.numel();
  Shape os = a.shape();
  os[0] = n;
  std::vector<float> out(size_t(n * inner));
  for (int64_t r = 0; r < n; ++r)
    std::memcpy(out.data() + r * inner, a.data(), size_t(inner) * sizeof(float));
  auto ai = a.impl();
  return make_op_result(std::move(os), std::move(out), "repeat_dim0", {a},
                        [ai, n, inner](TensorImpl& o) {
                          if (!ai->requires_grad) return;
                          ai->ensure_grad();
                          for (int64_t i = 0; i < inner; ++i) {
                            double s = 0.0;
                            for (int64_t r = 0; r < n; ++r)
                              s += double(o.grad[size_t(r * inner + i)]);
                            ai->grad[size_t(i)] += float(s);
                          }
                        });
}

// Nearest-neighbour 2x upsampling of the last two axes.
inline Tensor nearest_upsample2x_spatial(const Tensor& a) {
  if (a.ndim() < 2) throw dimension_error("upsample: need at least 2 dims");
  const int64_t H = a.dim(a.ndim() - 2), W = a.dim(a.ndim() - 1);
  const int64_t lead = a.numel() / (H * W);
  Shape os = a.shape();
  os[size_t(a.ndim() - 2)] = 2 * H;
  os[size_t(a.ndim() - 1)] = 2 * W;
  std::vector<float> out(size_t(lead * 4 * H * W));
  for (int64_t l = 0; l < lead; ++l) {
    const float* src = a.data() + l * H * W;
    float* dst = out.data() + l * 4 * H * W;
    for (int64_t i = 0; i < 2 * H; ++i)
      for (int64_t j = 0; j < 2 * W; ++j)
        dst[i * 2 * W + j] = src[(i / 2) * W + (j / 2)];
  }
  auto ai = a.impl();
  return make_op_result(std::move(os), std::move(out), "upsample2x", {a},
                        [ai, lead, H, W](TensorImpl& o) {
                          if (!ai->requires_grad) return;
                          ai->ensure_grad();
                          for (int64_t l = 0; l < lead; ++l) {
                            const float* g = o.grad.data() + l * 4 * H * W;
                            float* dst = ai->grad.data() + l * H * W;
                            for (int64_t i = 0; i < 2 * H; ++i)
                              for (int64_t j = 0; j < 2 * W; ++j)
                                dst[(i / 2) * W + (j / 2)] += g[i * 2 * W + j];
                          }
                        });
}

// ---- matmul ----

namespace detail {

inline void mm_grad_a(const float* gout, const float* b, float* ga, int64_t m,
                      int64_t k, int64_t n) {
  // dA[m,k] = dC[m,n] . B^T; materialize B^T then reuse the nn kernel.
  std::vector<float> bt(size_t(k * n));
  transpose_2d(b, bt.data(), k, n);
  gemm(gout, bt.data(), ga, m, n, k, /*accumulate=*/true);
}

inline void mm_grad_b(const float* a, const float* gout, float* gb, int64_t m,
                      int64_t k, int64_t n) {
  // dB[k,n] = A^T . dC
  std::vector<float> at(size_t(m * k));
  transpose_2d(a, at.data(), m, k);
  gemm(at.data(), gout, gb, k, m, n, /*accumulate=*/true);
}

}  // namespace detail

// matmul(a, b):
//   [m,k] x [k,n]                 -> [m,n]
//   [*..,m,k] x [k,n]             -> [*..,m,n]   (b shared across batch)
//   [m,k] x [*..,k,n]             -> [*..,m,n]   (a shared across batch)
//   [*..,m,k] x [*..,k,n]         -> [*..,m,n]   (equal batch dims)
// No other broadcasting. Accumulation is f64 inside the kernel.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw dimension_error("matmul: inputs must have rank >= 2");
  const int64_t m = a.dim(a.ndim() - 2), ka = a.dim(a.ndim() - 1);
  const int64_t kb = b.dim(b.ndim() - 2), n = b.dim(b.ndim() - 1);
  if (ka != kb)
    throw dimension_error("matmul: inner dim mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
  const int64_t k = ka;
  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  if (!abatch.empty() && !bbatch.empty() && abatch != bbatch)
    throw dimension_error("matmul: batch dims mismatch " +
                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Shape batch = abatch.empty() ? bbatch : abatch;
  const int64_t nb = shape_numel(batch.empty() ? Shape{1} : batch);
  const bool a_batched = !abatch.empty(), b_batched = !bbatch.empty();

  Shape os = batch;
  os.push_back(m);
  os.push_back(n);
  std::vector<float> out(size_t(nb * m * n));

  if (!b_batched) {
    // Fold batch into rows: one big gemm.
    gemm(a.data(), b.data(), out.data(), nb * m, k, n);
  } else if (!a_batched) {
    for (int64_t s = 0; s < nb; ++s)
      gemm(a.data(), b.data() + s * k * n, out.data() + s * m * n, m, k, n);
  } else {
    for (int64_t s = 0; s < nb; ++s)
      gemm(a.data() + s * m * k, b.data() + s * k * n, out.data() + s * m * n,
           m, k, n);
  }

  auto ai = a.impl();
  auto bi = b.impl();
  return make_op_result(
      std::move(os), std::move(out), "matmul", {a, b},
      [ai, bi, m, k, n, nb, a_batched, b_batched](TensorImpl& o) {
        const float* g = o.grad.data();
        if (ai->requires_grad) {
          ai->ensure_grad();
          if (!b_batched) {
            detail::mm_grad_a(g, bi->data.data(), ai->grad.data(), nb * m, k, n);
          } else if (!a_batched) {
            for (int64_t s = 0; s < nb; ++s)
              detail::mm_grad_a(g + s * m * n, bi->data.data() + s * k * n,
                                ai->grad.data(), m, k, n);
          } else {
            for (int64_t s = 0; s < nb; ++s)
              detail::mm_grad_a(g + s * m * n, bi->data.data() + s * k * n,
                                ai->grad.data() + s * m * k, m, k, n);
          }
        }
        if (bi->requires_grad) {
          bi->ensure_grad();
          if (!b_batched) {
            detail::mm_grad_b(ai->data.data(), g, bi->grad.data(), nb * m, k, n);
          } else if (!a_batched) {
            for (int64_t s = 0; s < nb; ++s)
              detail::mm_grad_b(ai->data.data(), g + s * m * n,
                                bi->grad.data() + s * k * n, m, k, n);
          } else {
            for (int64_t s = 0; s < nb; ++s)
              detail::mm_grad_b(ai->data.data() + s * m * k, g + s * m * n,
                                bi->grad.data() + s * k * n, m, k, n);
          }
        }
      });
}

// ---- softmax / layer norm ----

inline Tensor softmax(const Tensor& a, int64_t axis) {
  axis = detail::normalize_axis(axis, a.ndim(), "softmax");
  int64_t outer, n, inner;
  detail::axis_split(a.shape(), axis, outer, n, inner);
  std::vector<float> out(size_t(a.numel()));
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      const float* p = a.data() + o * n * inner + in;
      float* q = out.data() + o * n * inner + in;
      double mx = -1e300;
      for (int64_t j = 0; j < n; ++j) mx = std::max(mx, double(p[j * inner]));
      double sum = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        const double e = std::exp(double(p[j * inner]) - mx);
        q[j * inner] = float(e);
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (int64_t j = 0; j < n; ++j) q[j * inner] = float(double(q[j * inner]) * inv);
    }
  auto ai = a.impl();
  return make_op_result(
      a.shape(), std::move(out), "softmax", {a},
      [ai, outer, n, inner](TensorImpl& o) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        for (int64_t ou = 0; ou < outer; ++ou)
          for (int64_t in = 0; in < inner; ++in) {
            const float* y = o.data.data() + ou * n * inner + in;
            const float* g = o.grad.data() + ou * n * inner + in;
            float* dst = ai->grad.data() + ou * n * inner + in;
            double dot = 0.0;
            for (int64_t j = 0; j < n; ++j)
              dot += double(g[j * inner]) * double(y[j * inner]);
            for (int64_t j = 0; j < n; ++j)
              dst[j * inner] += float(double(y[j * inner]) *
                                      (double(g[j * inner]) - dot));
          }
      });
}

// Layer norm over the last axis. gamma/beta are 1-D of that size.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, float eps = 1e-6f) {
  const int64_t d = x.dim(x.ndim() - 1);
  if (gamma.ndim() != 1 || gamma.dim(0) != d || beta.ndim() != 1 ||
      beta.dim(0) != d)
    throw dimension_error("layer_norm: gamma/beta must be [last_dim]");
  const int64_t rows = x.numel() / d;
  std::vector<float> out(size_t(x.numel()));
  for (int64_t r = 0; r < rows; ++r) {
    const float* p = x.data() + r * d;
    float* q = out.data() + r * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += double(p[j]);
    mu /= double(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = double(p[j]) - mu;
      var += c * c;
    }
    var /= double(d);
    const double inv = 1.0 / std::sqrt(var + double(eps));
    for (int64_t j = 0; j < d; ++j)
      q[j] = float((double(p[j]) - mu) * inv * double(gamma.data()[j]) +
                   double(beta.data()[j]));
  }
  auto xi = x.impl();
  auto gi = gamma.impl();
  auto bi = beta.impl();
  return make_op_result(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [xi, gi, bi, rows, d, eps](TensorImpl& o) {
        std::vector<double> dgam(size_t(d), 0.0), dbet(size_t(d), 0.0);
        const bool need_x = xi->requires_grad;
        if (need_x) xi->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const float* p = xi->data.data() + r * d;
          const float* g = o.grad.data() + r * d;
          double mu = 0.0;
          for (int64_t j = 0; j < d; ++j) mu += double(p[j]);
          mu /= double(d);
          double var = 0.0;
          for (int64_t j = 0; j < d; ++j) {
            const double c = double(p[j]) - mu;
            var += c * c;
          }
          var /= double(d);
          const double inv = 1.0 / std::sqrt(var + double(eps));
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (int64_t j = 0; j < d; ++j) {
            const double xhat = (double(p[j]) - mu) * inv;
            const double dy = double(g[j]);
            dgam[size_t(j)] += dy * xhat;
            dbet[size_t(j)] += dy;
            const double dxhat = dy * double(gi->data[size_t(j)]);
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
          }
          mean_dxhat /= double(d);
          mean_dxhat_xhat /= double(d);
          if (need_x) {
            float* dst = xi->grad.data() + r * d;
            for (int64_t j = 0; j < d; ++j) {
              const double xhat = (double(p[j]) - mu) * inv;
              const double dxhat = double(g[j]) * double(gi->data[size_t(j)]);
              dst[j] += float(inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
            }
          }
        }
        if (gi->requires_grad) {
          gi->ensure_grad();
          for (int64_t j = 0; j < d; ++j) gi->grad[size_t(j)] += float(dgam[size_t(j)]);
        }
        if (bi->requires_grad) {
          bi->ensure_grad();
          for (int64_t j = 0; j < d; ++j) bi->grad[size_t(j)] += float(dbet[size_t(j)]);
        }
      });
}

// ---- conv3d ----

namespace detail {

struct Conv3dDims {
  int64_t B, C, T, H, W;
  int64_t OC, kt, kh, kw;
  int64_t st, sh, sw, pt, ph, pw;
  int64_t To, Ho, Wo;
  int64_t P, CK;
};

inline Conv3dDims conv3d_dims(const Shape& xs, const Shape& ws,
                              const std::array<int64_t, 3>& stride,
                              const std::array<int64_t, 3>& pad) {
  if (xs.size() != 5 || ws.size() != 5)
    throw dimension_error("conv3d: x must be [B,C,T,H,W], w [OC,C,kt,kh,kw]");
  Conv3dDims d;
  d.B = xs[0]; d.C = xs[1]; d.T = xs[2]; d.H = xs[3]; d.W = xs[4];
  d.OC = ws[0]; d.kt = ws[2]; d.kh = ws[3]; d.kw = ws[4];
  if (ws[1] != d.C) throw dimension_error("conv3d: channel mismatch");
  d.st = stride[0]; d.sh = stride[1]; d.sw = stride[2];
  d.pt = pad[0]; d.ph = pad[1]; d.pw = pad[2];
  if (d.st <= 0 || d.sh <= 0 || d.sw <= 0)
    throw dimension_error("conv3d: stride must be positive");
  d.To = (d.T + 2 * d.pt - d.kt) / d.st + 1;
  d.Ho = (d.H + 2 * d.ph - d.kh) / d.sh + 1;
  d.Wo = (d.W + 2 * d.pw - d.kw) / d.sw + 1;
  if (d.To <= 0 || d.Ho <= 0 || d.Wo <= 0)
    throw dimension_error("conv3d: kernel larger than padded input");
  d.P = d.B * d.To * d.Ho * d.Wo;
  d.CK = d.C * d.kt * d.kh * d.kw;
  return d;
}

// Rows ordered (b,to,ho,wo); columns ordered (c,dt,dh,dw).
inline void im2col(const float* x, const Conv3dDims& d, float* cols) {
  int64_t row = 0;
  for (int64_t b = 0; b < d.B; ++b)
    for (int64_t to = 0; to < d.To; ++to)
      for (int64_t ho = 0; ho < d.Ho; ++ho)
        for (int64_t wo = 0; wo < d.Wo; ++wo, ++row) {
          const int64_t t0 = to * d.st - d.pt;
          const int64_t h0 = ho * d.sh - d.ph;
          const int64_t w0 = wo * d.sw - d.pw;
          float* dst = cols + row * d.CK;
          for (int64_t c = 0; c < d.C; ++c)
            for (int64_t dt = 0; dt < d.kt; ++dt) {
              const int64_t t = t0 + dt;
              for (int64_t dh = 0; dh < d.kh; ++dh) {
                const int64_t h = h0 + dh;
                if (t < 0 || t >= d.T || h < 0 || h >= d.H) {
                  for (int64_t dw = 0; dw < d.kw; ++dw) *dst++ = 0.0f;
                  continue;
                }
                const float* src =
                    x + (((b * d.C + c) * d.T + t) * d.H + h) * d.W;
                for (int64_t dw = 0; dw < d.kw; ++dw) {
                  const int64_t w = w0 + dw;
                  *dst++ = (w >= 0 && w < d.W) ? src[w] : 0.0f;
                }
              }
            }
        }
}

inline void col2im_add(const float* cols, const Conv3dDims& d, float* dx) {
  int64_t row = 0;
  for (int64_t b = 0; b < d.B; ++b)
    for (int64_t to = 0; to < d.To; ++to)
      for (int64_t ho = 0; ho < d.Ho; ++ho)
        for (int64_t wo = 0; wo < d.Wo; ++wo, ++row) {
          const int64_t t0 = to * d.st - d.pt;
          const int64_t h0 = ho * d.sh - d.ph;
          const int64_t w0 = wo * d.sw - d.pw;
          const float* src = cols + row * d.CK;
          for (int64_t c = 0; c < d.C; ++c)
            for (int64_t dt = 0; dt < d.kt; ++dt) {
              const int64_t t = t0 + dt;
              for (int64_t dh = 0; dh < d.kh; ++dh) {
                const int64_t h = h0 + dh;
                if (t < 0 || t >= d.T || h < 0 || h >= d.H) {
                  src += d.kw;
                  continue;
                }
                float* dst = dx + (((b * d.C + c) * d.T + t) * d.H + h) * d.W;
                for (int64_t dw = 0; dw < d.kw; ++dw) {
                  const int64_t w = w0 + dw;
                  if (w >= 0 && w < d.W) dst[w] += src[dw];
                }
                src += d.kw;
              }
            }
        }
}

}  // namespace detail

// 3-D convolution, x:[B,C,T,H,W] w:[OC,C,kt,kh,kw] b:[OC] (pass an undefined
// tensor for no bias). Output [B,OC,To,Ho,Wo]. im2col + gemm; the column
// matrix is rebuilt in backward instead of being kept alive in the graph.
inline Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b,
                     std::array<int64_t, 3> stride, std::array<int64_t, 3> pad) {
  const auto d = detail::conv3d_dims(x.shape(), w.shape(), stride, pad);
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != d.OC))
    throw dimension_error("conv3d: bias must be [OC]");

  std::vector<float> cols(size_t(d.P * d.CK));
  detail::im2col(x.data(), d, cols.data());
  std::vector<float> wt(size_t(d.CK * d.OC));
  transpose_2d(w.data(), wt.data(), d.OC, d.CK);
  std::vector<float> out_mat(size_t(d.P * d.OC));
  gemm(cols.data(), wt.data(), out_mat.data(), d.P, d.CK, d.OC);
  if (b.defined()) {
    const float* bp = b.data();
    for (int64_t r = 0; r < d.P; ++r) {
      float* q = out_mat.data() + r * d.OC;
      for (int64_t oc = 0; oc < d.OC; ++oc) q[oc] += bp[oc];
    }
  }
  cols.clear();
  cols.shrink_to_fit();

  // (b,to,ho,wo,oc) -> (b,oc,to,ho,wo)
  const int64_t S = d.To * d.Ho * d.Wo;
  std::vector<float> out(size_t(d.B * d.OC * S));
  for (int64_t bb = 0; bb < d.B; ++bb)
    for (int64_t s = 0; s < S; ++s) {
      const float* src = out_mat.data() + (bb * S + s) * d.OC;
      for (int64_t oc = 0; oc < d.OC; ++oc)
        out[size_t((bb * d.OC + oc) * S + s)] = src[oc];
    }
  out_mat.clear();
  out_mat.shrink_to_fit();

  auto xi = x.impl();
  auto wi = w.impl();
  auto bi = b.defined() ? b.impl() : nullptr;
  std::vector<Tensor> inputs = {x, w};
  if (b.defined()) inputs.push_back(b);
  Shape os = {d.B, d.OC, d.To, d.Ho, d.Wo};
  return make_op_result(
      std::move(os), std::move(out), "conv3d", std::move(inputs),
      [xi, wi, bi, d, S](TensorImpl& o) {
        // Gather dOut back to (P, OC) row layout.
        std::vector<float> gmat(size_t(d.P * d.OC));
        for (int64_t bb = 0; bb < d.B; ++bb)
          for (int64_t s = 0; s < S; ++s) {
            float* dst = gmat.data() + (bb * S + s) * d.OC;
            for (int64_t oc = 0; oc < d.OC; ++oc)
              dst[oc] = o.grad[size_t((bb * d.OC + oc) * S + s)];
          }
        if (bi && bi->requires_grad) {
          bi->ensure_grad();
          std::vector<double> acc(size_t(d.OC), 0.0);
          for (int64_t r = 0; r < d.P; ++r)
            for (int64_t oc = 0; oc < d.OC; ++oc)
              acc[size_t(oc)] += double(gmat[size_t(r * d.OC + oc)]);
          for (int64_t oc = 0; oc < d.OC; ++oc)
            bi->grad[size_t(oc)] += float(acc[size_t(oc)]);
        }
        if (wi->requires_grad) {
          wi->ensure_grad();
          std::vector<float> cols(size_t(d.P * d.CK));
          detail::im2col(xi->data.data(), d, cols.data());
          std::vector<float> gt(size_t(d.OC * d.P));
          transpose_2d(gmat.data(), gt.data(), d.P, d.OC);
          gemm(gt.data(), cols.data(), wi->grad.data(), d.OC, d.P, d.CK,
               /*accumulate=*/true);
        }
        if (xi->requires_grad) {
          xi->ensure_grad();
          std::vector<float> dcols(size_t(d.P * d.CK));
          gemm(gmat.data(), wi->data.data(), dcols.data(), d.P, d.OC, d.CK);
          detail::col2im_add(dcols.data(), d, xi->grad.data());
        }
      });
}

// y = x . W + b with x:[...,in], W:[in,out], b:[out] (undefined b skips bias).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (b.defined()) y = add(y, b);
  return y;
}

}  // namespace rvp
