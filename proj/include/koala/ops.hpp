#ifndef KOALA_OPS_HPP
#define KOALA_OPS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "koala/common.hpp"
#include "koala/gemm.hpp"
#include "koala/tape.hpp"
#include "koala/tensor.hpp"

namespace koala {

namespace detail {

template <typename T>
bool want_record(TapeT<T>* tape, std::initializer_list<const TensorT<T>*> ins) {
  if (!tape) return false;
  for (const auto* t : ins)
    if (t->tracked()) return true;
  return false;
}

// Unpads & samples: value of x(b, c, y, xx) under a border mode.
template <typename T>
inline T border_read(const TensorT<T>& x, int b, int c, int y, int xx, Border border) {
  if (border == Border::kReplicate) {
    y = std::clamp(y, 0, x.h() - 1);
    xx = std::clamp(xx, 0, x.w() - 1);
    return x.at(b, c, y, xx);
  }
  if (y < 0 || y >= x.h() || xx < 0 || xx >= x.w()) return T(0);
  return x.at(b, c, y, xx);
}

// col[(ic*kh+dy)*kw+dx][oy*outW+ox] = x(b, ic, oy*stride+dy-pb, ...) with
// zero fill outside.
template <typename T>
void im2col(const TensorT<T>& x, int b, int kh, int kw, int stride, int pb,
            int outH, int outW, T* col) {
  const int H = x.h(), W = x.w(), C = x.c();
  const int64_t npix = static_cast<int64_t>(outH) * outW;
  for (int ic = 0; ic < C; ++ic) {
    for (int dy = 0; dy < kh; ++dy) {
      for (int dx = 0; dx < kw; ++dx) {
        T* dst = col + ((static_cast<int64_t>(ic) * kh + dy) * kw + dx) * npix;
        for (int oy = 0; oy < outH; ++oy) {
          const int y = oy * stride + dy - pb;
          T* row = dst + static_cast<int64_t>(oy) * outW;
          if (y < 0 || y >= H) {
            std::fill(row, row + outW, T(0));
            continue;
          }
          const T* src = &x.at(b, ic, y, 0);
          for (int ox = 0; ox < outW; ++ox) {
            const int xx = ox * stride + dx - pb;
            row[ox] = (xx < 0 || xx >= W) ? T(0) : src[xx];
          }
        }
      }
    }
  }
}

// Scatter-adds dcol back into dx for one batch item (single caller thread
// per item keeps accumulation single-owner).
template <typename T>
void col2im_add(const T* dcol, int b, int kh, int kw, int stride, int pb,
                int outH, int outW, TensorT<T>& dx_holder, T* dx) {
  const int H = dx_holder.h(), W = dx_holder.w(), C = dx_holder.c();
  const int64_t npix = static_cast<int64_t>(outH) * outW;
  const int64_t plane = static_cast<int64_t>(H) * W;
  for (int ic = 0; ic < C; ++ic) {
    T* dplane = dx + (static_cast<int64_t>(b) * C + ic) * plane;
    for (int dy = 0; dy < kh; ++dy) {
      for (int dx2 = 0; dx2 < kw; ++dx2) {
        const T* src = dcol + ((static_cast<int64_t>(ic) * kh + dy) * kw + dx2) * npix;
        for (int oy = 0; oy < outH; ++oy) {
          const int y = oy * stride + dy - pb;
          if (y < 0 || y >= H) continue;
          const T* row = src + static_cast<int64_t>(oy) * outW;
          for (int ox = 0; ox < outW; ++ox) {
            const int xx = ox * stride + dx2 - pb;
            if (xx < 0 || xx >= W) continue;
            dplane[static_cast<int64_t>(y) * W + xx] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, weight [outC, inC, kh, kw], bias [1, outC, 1, 1].
// kSame zero-pads with front pad (k - stride) / 2; kValid pads nothing.
// ---------------------------------------------------------------------------
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias,
                  int stride, Padding padding, TapeT<T>* tape) {
  check_value(stride >= 1, "conv2d: stride must be >= 1");
  const int B = x.n(), inC = x.c(), H = x.h(), W = x.w();
  const int outC = w.n(), kh = w.h(), kw = w.w();
  check_shape(w.c() == inC, "conv2d: weight inC " + std::to_string(w.c()) +
                                " != input channels " + std::to_string(inC));
  check_shape(bias.shape() == Shape{1, outC, 1, 1},
              "conv2d: bias must be [1," + std::to_string(outC) + ",1,1]");
  int pb = 0, padTotal = 0;
  if (padding == Padding::kSame) {
    check_value(kh >= stride && kw >= stride, "conv2d: kernel smaller than stride");
    pb = same_pad_before(kh, stride);
    padTotal = same_pad_total(kh, stride);
  }
  const int outH = (H + padTotal - kh) / stride + 1;
  const int outW = (W + padTotal - kw) / stride + 1;
  check_shape(outH >= 1 && outW >= 1, "conv2d: zero-size spatial output");

  TensorT<T> out(Shape{B, outC, outH, outW});
  const int64_t npix = static_cast<int64_t>(outH) * outW;
  const int64_t kdim = static_cast<int64_t>(inC) * kh * kw;
  const int threads = effective_threads();
  const bool batch_par = threads > 1 && B >= threads;

#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(threads) if (batch_par)
#endif
  for (int b = 0; b < B; ++b) {
    std::vector<T> col(kdim * npix);
    detail::im2col(x, b, kh, kw, stride, pb, outH, outW, col.data());
    T* ob = out.data() + static_cast<int64_t>(b) * outC * npix;
    gemm_nn<T>(outC, npix, kdim, w.data(), col.data(), ob, false);
    for (int oc = 0; oc < outC; ++oc) {
      const T bv = bias.data()[oc];
      T* orow = ob + static_cast<int64_t>(oc) * npix;
      for (int64_t i = 0; i < npix; ++i) orow[i] += bv;
    }
  }

  if (detail::want_record(tape, {&x, &w, &bias})) {
    out.mark_tracked();
    TensorT<T> xc = x, wc = w, bc = bias, oc = out;
    tape->record([=]() mutable {
      if (!oc.has_grad()) return;
      const T* dout = oc.grad();
      if (bc.tracked()) {
        bc.ensure_grad();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int c = 0; c < outC; ++c) {
          double acc = 0;
          for (int b = 0; b < B; ++b) {
            const T* p = dout + (static_cast<int64_t>(b) * outC + c) * npix;
            for (int64_t i = 0; i < npix; ++i) acc += static_cast<double>(p[i]);
          }
          bc.grad()[c] += static_cast<T>(acc);
        }
      }
      if (wc.tracked()) {
        wc.ensure_grad();
        std::vector<T> col(kdim * npix);
        for (int b = 0; b < B; ++b) {
          detail::im2col(xc, b, kh, kw, stride, pb, outH, outW, col.data());
          gemm_nt<T>(outC, kdim, npix, dout + static_cast<int64_t>(b) * outC * npix,
                     col.data(), wc.grad(), true);
        }
      }
      if (xc.tracked()) {
        xc.ensure_grad();
        const int nthr = effective_threads();
        const bool bp = nthr > 1 && B >= nthr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nthr) if (bp)
#endif
        for (int b = 0; b < B; ++b) {
          std::vector<T> dcol(kdim * npix);
          gemm_tn<T>(kdim, npix, outC, wc.data(),
                     dout + static_cast<int64_t>(b) * outC * npix, dcol.data(), false);
          detail::col2im_add(dcol.data(), b, kh, kw, stride, pb, outH, outW, xc,
                             xc.grad());
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------
template <typename T>
TensorT<T> relu(const TensorT<T>& x, TapeT<T>* tape) {
  TensorT<T> out(x.shape());
  const int64_t n = x.numel();
  const T* in = x.data();
  T* o = out.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(effective_threads()) if (n > 65536)
#endif
  for (int64_t i = 0; i < n; ++i) o[i] = in[i] > T(0) ? in[i] : T(0);

  if (detail::want_record(tape, {&x})) {
    out.mark_tracked();
    TensorT<T> xc = x, oc = out;
    tape->record([=]() mutable {
      if (!oc.has_grad() || !xc.tracked()) return;
      xc.ensure_grad();
      const T* dout = oc.grad();
      const T* in2 = xc.data();
      T* dx = xc.grad();
      for (int64_t i = 0; i < n; ++i)
        if (in2[i] > T(0)) dx[i] += dout[i];  // gradient at exactly 0 is 0
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// pixel_shuffle / pixel_unshuffle
// out(b, c, r*h+dy, r*w+dx) = in(b, c*r^2 + dy*r + dx, h, w)
// ---------------------------------------------------------------------------
template <typename T>
TensorT<T> pixel_shuffle(const TensorT<T>& x, int r, TapeT<T>* tape) {
  check_value(r >= 1, "pixel_shuffle: r must be >= 1");
  check_shape(x.c() % (r * r) == 0, "pixel_shuffle: channels " + std::to_string(x.c()) +
                                        " not divisible by r^2");
  const int B = x.n(), C = x.c() / (r * r), H = x.h(), W = x.w();
  TensorT<T> out(Shape{B, C, H * r, W * r});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int dy = 0; dy < r; ++dy)
        for (int dx = 0; dx < r; ++dx) {
          const int ic = c * r * r + dy * r + dx;
          for (int y = 0; y < H; ++y) {
            const T* src = &x.at(b, ic, y, 0);
            T* dst = &out.at(b, c, y * r + dy, dx);
            for (int xx = 0; xx < W; ++xx) dst[static_cast<int64_t>(xx) * r] = src[xx];
          }
        }

  if (detail::want_record(tape, {&x})) {
    out.mark_tracked();
    TensorT<T> xc = x, oc = out;
    tape->record([=]() mutable {
      if (!oc.has_grad() || !xc.tracked()) return;
      xc.ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int dy = 0; dy < r; ++dy)
            for (int dx = 0; dx < r; ++dx) {
              const int ic = c * r * r + dy * r + dx;
              for (int y = 0; y < H; ++y) {
                T* dst = &xc.grad()[xc.index(b, ic, y, 0)];
                const T* src = &oc.grad()[oc.index(b, c, y * r + dy, dx)];
                for (int xx = 0; xx < W; ++xx) dst[xx] += src[static_cast<int64_t>(xx) * r];
              }
            }
    });
  }
  return out;
}

template <typename T>
TensorT<T> pixel_unshuffle(const TensorT<T>& x, int r, TapeT<T>* tape) {
  check_value(r >= 1, "pixel_unshuffle: r must be >= 1");
  check_shape(x.h() % r == 0 && x.w() % r == 0,
              "pixel_unshuffle: spatial dims not divisible by r");
  const int B = x.n(), C = x.c(), H = x.h() / r, W = x.w() / r;
  TensorT<T> out(Shape{B, C * r * r, H, W});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int dy = 0; dy < r; ++dy)
        for (int dx = 0; dx < r; ++dx) {
          const int ocn = c * r * r + dy * r + dx;
          for (int y = 0; y < H; ++y) {
            const T* src = &x.at(b, c, y * r + dy, dx);
            T* dst = &out.at(b, ocn, y, 0);
            for (int xx = 0; xx < W; ++xx) dst[xx] = src[static_cast<int64_t>(xx) * r];
          }
        }

  if (detail::want_record(tape, {&x})) {
    out.mark_tracked();
    TensorT<T> xc = x, oc = out;
    tape->record([=]() mutable {
      if (!oc.has_grad() || !xc.tracked()) return;
      xc.ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int dy = 0; dy < r; ++dy)
            for (int dx = 0; dx < r; ++dx) {
              const int ocn = c * r * r + dy * r + dx;
              for (int y = 0; y < H; ++y) {
                T* dst = &xc.grad()[xc.index(b, c, y * r + dy, dx)];
                const T* src = &oc.grad()[oc.index(b, ocn, y, 0)];
                for (int xx = 0; xx < W; ++xx) dst[static_cast<int64_t>(xx) * r] += src[xx];
              }
            }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// local_filter: per-pixel k x k kernels shared across channels.
// out(b,c,i,j) = sum_{dy,dx} x(b,c, i*s+dy-off, j*s+dx-off) * f(b, dy*k+dx, i, j)
// with off = (k - stride) / 2 (same anchor convention as conv2d kSame).
// ---------------------------------------------------------------------------
template <typename T>
TensorT<T> local_filter(const TensorT<T>& x, const TensorT<T>& filters, int k,
                        int stride, Border border, TapeT<T>* tape) {
  check_value(k >= 1 && stride >= 1, "local_filter: bad kernel/stride");
  const int B = x.n(), C = x.c(), H = x.h(), W = x.w();
  check_shape(filters.n() == B, "local_filter: batch mismatch");
  check_shape(filters.c() == k * k, "local_filter: filters must have k^2 channels, got " +
                                        std::to_string(filters.c()));
  check_shape(H % stride == 0 && W % stride == 0,
              "local_filter: input dims must be divisible by stride");
  const int outH = H / stride, outW = W / stride;
  check_shape(filters.h() == outH && filters.w() == outW,
              "local_filter: filter grid " + filters.shape().str() +
                  " inconsistent with output " + std::to_string(outH) + "x" +
                  std::to_string(outW));
  const int off = same_pad_before(k, stride);

  TensorT<T> out(Shape{B, C, outH, outW});
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) num_threads(effective_threads())
#endif
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < outH; ++i)
        for (int j = 0; j < outW; ++j) {
          T acc = 0;
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) {
              const T xv = detail::border_read(x, b, c, i * stride + dy - off,
                                               j * stride + dx - off, border);
              acc = std::fma(xv, filters.at(b, dy * k + dx, i, j), acc);
            }
          out.at(b, c, i, j) = acc;
        }

  if (detail::want_record(tape, {&x, &filters})) {
    out.mark_tracked();
    TensorT<T> xc = x, fc = filters, oc = out;
    tape->record([=]() mutable {
      if (!oc.has_grad()) return;
      if (fc.tracked()) {
        fc.ensure_grad();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) num_threads(effective_threads())
#endif
        for (int b = 0; b < B; ++b)
          for (int i = 0; i < outH; ++i)
            for (int j = 0; j < outW; ++j)
              for (int dy = 0; dy < k; ++dy)
                for (int dx = 0; dx < k; ++dx) {
                  T acc = 0;
                  for (int c = 0; c < C; ++c) {
                    const T xv = detail::border_read(xc, b, c, i * stride + dy - off,
                                                     j * stride + dx - off, border);
                    acc = std::fma(xv, oc.grad()[oc.index(b, c, i, j)], acc);
                  }
                  fc.grad()[fc.index(b, dy * k + dx, i, j)] += acc;
                }
      }
      if (xc.tracked()) {
        xc.ensure_grad();
        // Scatter with one owner thread per (b, c) plane; replicate-border
        // taps accumulate into the clamped edge pixel, matching forward.
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) num_threads(effective_threads())
#endif
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c)
            for (int i = 0; i < outH; ++i)
              for (int j = 0; j < outW; ++j) {
                const T g = oc.grad()[oc.index(b, c, i, j)];
                for (int dy = 0; dy < k; ++dy)
                  for (int dx = 0; dx < k; ++dx) {
                    int y = i * stride + dy - off;
                    int xx = j * stride + dx - off;
                    if (border == Border::kReplicate) {
                      y = std::clamp(y, 0, H - 1);
                      xx = std::clamp(xx, 0, W - 1);
                    } else if (y < 0 || y >= H || xx < 0 || xx >= W) {
                      continue;
                    }
                    xc.grad()[xc.index(b, c, y, xx)] +=
                        g * fc.data()[fc.index(b, dy * k + dx, i, j)];
                  }
              }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalize_kernels: per consecutive n-channel block, out = in - mean + 1/n
// so each per-pixel kernel sums to 1. Jacobian is I - (1/n) * ones.
// ---------------------------------------------------------------------------
template <typename T>
TensorT<T> normalize_kernels(const TensorT<T>& x, int n, TapeT<T>* tape) {
  check_value(n >= 1, "normalize_kernels: n must be >= 1");
  check_shape(x.c() % n == 0, "normalize_kernels: channel count " + std::to_string(x.c()) +
                                  " not divisible by kernel size " + std::to_string(n));
  const int B = x.n(), G = x.c() / n, H = x.h(), W = x.w();
  const int64_t plane = static_cast<int64_t>(H) * W;
  TensorT<T> out(x.shape());
  const T bias = T(1) / static_cast<T>(n);
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) num_threads(effective_threads())
#endif
  for (int b = 0; b < B; ++b)
    for (int g = 0; g < G; ++g)
      for (int64_t p = 0; p < plane; ++p) {
        double acc = 0;
        const int64_t base = (static_cast<int64_t>(b) * G + g) * n * plane + p;
        for (int q = 0; q < n; ++q) acc += static_cast<double>(x.data()[base + q * plane]);
        const T mean = static_cast<T>(acc / n);
        for (int q = 0; q < n; ++q)
          out.data()[base + q * plane] = x.data()[base + q * plane] - mean + bias;
      }

  if (detail::want_record(tape, {&x})) {
    out.mark_tracked();
    TensorT<T> xc = x, oc = out;
    tape->record([=]() mutable {
      if (!oc.has_grad() || !xc.tracked()) return;
      xc.ensure_grad();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) num_threads(effective_threads())
#endif
      for (int b = 0; b < B; ++b)
        for (int g = 0; g < G; ++g)
          for (int64_t p = 0; p < plane; ++p) {
            double acc = 0;
            const int64_t base = (static_cast<int64_t>(b) * G + g) * n * plane + p;
            for (int q = 0; q < n; ++q) acc += static_cast<double>(oc.grad()[base + q * plane]);
            const T mean = static_cast<T>(acc / n);
            for (int q = 0; q < n; ++q)
              xc.grad()[base + q * plane] += oc.grad()[base + q * plane] - mean;
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// l1_loss: mean absolute difference -> scalar [1,1,1,1].
// ---------------------------------------------------------------------------
template <typename T>
TensorT<T> l1_loss(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape) {
  check_shape(a.shape() == b.shape(),
              "l1_loss: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  const int64_t n = a.numel();
  check_value(n > 0, "l1_loss: empty tensors");
  double acc = 0;
  for (int64_t i = 0; i < n; ++i)
    acc += std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]));
  TensorT<T> out(Shape{1, 1, 1, 1});
  out.data()[0] = static_cast<T>(acc / static_cast<double>(n));

  if (detail::want_record(tape, {&a, &b})) {
    out.mark_tracked();
    TensorT<T> ac = a, bc = b, oc = out;
    tape->record([=]() mutable {
      if (!oc.has_grad()) return;
      const T g = oc.grad()[0] / static_cast<T>(n);
      if (ac.tracked()) ac.ensure_grad();
      if (bc.tracked()) bc.ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const T d = ac.data()[i] - bc.data()[i];
        const T s = d > T(0) ? g : (d < T(0) ? -g : T(0));
        if (ac.tracked()) ac.grad()[i] += s;
        if (bc.tracked()) bc.grad()[i] -= s;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// spatial_mean: mean over (h, w) per (batch, channel) -> [B, C, 1, 1].
// ---------------------------------------------------------------------------
template <typename T>
TensorT<T> spatial_mean(const TensorT<T>& x, TapeT<T>* tape) {
  const int B = x.n(), C = x.c();
  const int64_t plane = static_cast<int64_t>(x.h()) * x.w();
  check_value(plane > 0, "spatial_mean: empty spatial dims");
  TensorT<T> out(Shape{B, C, 1, 1});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      double acc = 0;
      const T* p = &x.at(b, c, 0, 0);
      for (int64_t i = 0; i < plane; ++i) acc += static_cast<double>(p[i]);
      out.at(b, c, 0, 0) = static_cast<T>(acc / static_cast<double>(plane));
    }

  if (detail::want_record(tape, {&x})) {
    out.mark_tracked();
    TensorT<T> xc = x, oc = out;
    tape->record([=]() mutable {
      if (!oc.has_grad() || !xc.tracked()) return;
      xc.ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const T g = oc.grad()[oc.index(b, c, 0, 0)] / static_cast<T>(plane);
          T* dp = &xc.grad()[xc.index(b, c, 0, 0)];
          for (int64_t i = 0; i < plane; ++i) dp[i] += g;
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise add / sub / mul. Shapes must match, or b may be a per-channel
// tensor [1|B, C, 1, 1] broadcast over the spatial dims.
// ---------------------------------------------------------------------------
namespace detail {

enum class EwKind { kAdd, kSub, kMul };

template <typename T>
inline bool chan_broadcast(const TensorT<T>& a, const TensorT<T>& b) {
  return b.c() == a.c() && b.h() == 1 && b.w() == 1 && (b.n() == a.n() || b.n() == 1);
}

template <typename T>
TensorT<T> elementwise(const TensorT<T>& a, const TensorT<T>& b, EwKind kind,
                       TapeT<T>* tape) {
  const bool same = a.shape() == b.shape();
  const bool bcast = !same && chan_broadcast(a, b);
  check_shape(same || bcast, "elementwise: incompatible shapes " + a.shape().str() +
                                 " vs " + b.shape().str());
  const int B = a.n(), C = a.c();
  const int64_t plane = static_cast<int64_t>(a.h()) * a.w();
  TensorT<T> out(a.shape());
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) num_threads(effective_threads())
#endif
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c) {
      const T* pa = &a.at(bi, c, 0, 0);
      T* po = &out.at(bi, c, 0, 0);
      if (same) {
        const T* pb = &b.at(bi, c, 0, 0);
        switch (kind) {
          case EwKind::kAdd:
            for (int64_t i = 0; i < plane; ++i) po[i] = pa[i] + pb[i];
            break;
          case EwKind::kSub:
            for (int64_t i = 0; i < plane; ++i) po[i] = pa[i] - pb[i];
            break;
          case EwKind::kMul:
            for (int64_t i = 0; i < plane; ++i) po[i] = pa[i] * pb[i];
            break;
        }
      } else {
        const T bv = b.at(b.n() == 1 ? 0 : bi, c, 0, 0);
        switch (kind) {
          case EwKind::kAdd:
            for (int64_t i = 0; i < plane; ++i) po[i] = pa[i] + bv;
            break;
          case EwKind::kSub:
            for (int64_t i = 0; i < plane; ++i) po[i] = pa[i] - bv;
            break;
          case EwKind::kMul:
            for (int64_t i = 0; i < plane; ++i) po[i] = pa[i] * bv;
            break;
        }
      }
    }

  if (want_record(tape, {&a, &b})) {
    out.mark_tracked();
    TensorT<T> ac = a, bc = b, oc = out;
    tape->record([=]() mutable {
      if (!oc.has_grad()) return;
      if (ac.tracked()) {
        ac.ensure_grad();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) num_threads(effective_threads())
#endif
        for (int bi = 0; bi < B; ++bi)
          for (int c = 0; c < C; ++c) {
            const T* g = &oc.grad()[oc.index(bi, c, 0, 0)];
            T* da = &ac.grad()[ac.index(bi, c, 0, 0)];
            if (kind == EwKind::kMul) {
              if (same) {
                const T* pb = &bc.at(bi, c, 0, 0);
                for (int64_t i = 0; i < plane; ++i) da[i] += g[i] * pb[i];
              } else {
                const T bv = bc.at(bc.n() == 1 ? 0 : bi, c, 0, 0);
                for (int64_t i = 0; i < plane; ++i) da[i] += g[i] * bv;
              }
            } else {
              for (int64_t i = 0; i < plane; ++i) da[i] += g[i];
            }
          }
      }
      if (bc.tracked()) {
        bc.ensure_grad();
        const T sign = kind == EwKind::kSub ? T(-1) : T(1);
        if (same) {
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) num_threads(effective_threads())
#endif
          for (int bi = 0; bi < B; ++bi)
            for (int c = 0; c < C; ++c) {
              const T* g = &oc.grad()[oc.index(bi, c, 0, 0)];
              T* db = &bc.grad()[bc.index(bi, c, 0, 0)];
              if (kind == EwKind::kMul) {
                const T* pa = &ac.at(bi, c, 0, 0);
                for (int64_t i = 0; i < plane; ++i) db[i] += g[i] * pa[i];
              } else {
                for (int64_t i = 0; i < plane; ++i) db[i] += sign * g[i];
              }
            }
        } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(effective_threads())
#endif
          for (int c = 0; c < C; ++c) {
            for (int bi = 0; bi < B; ++bi) {
              double acc = 0;
              const T* g = &oc.grad()[oc.index(bi, c, 0, 0)];
              if (kind == EwKind::kMul) {
                const T* pa = &ac.at(bi, c, 0, 0);
                for (int64_t i = 0; i < plane; ++i)
                  acc += static_cast<double>(g[i]) * static_cast<double>(pa[i]);
              } else {
                for (int64_t i = 0; i < plane; ++i) acc += static_cast<double>(g[i]);
              }
              const int bn = bc.n() == 1 ? 0 : bi;
              bc.grad()[bc.index(bn, c, 0, 0)] += sign * static_cast<T>(acc);
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape) {
  return detail::elementwise(a, b, detail::EwKind::kAdd, tape);
}
template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape) {
  return detail::elementwise(a, b, detail::EwKind::kSub, tape);
}
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape) {
  return detail::elementwise(a, b, detail::EwKind::kMul, tape);
}

// y = x + s (scalar shift, gradient passes through).
template <typename T>
TensorT<T> add_scalar(const TensorT<T>& x, double s, TapeT<T>* tape) {
  TensorT<T> out(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] + static_cast<T>(s);
  if (detail::want_record(tape, {&x})) {
    out.mark_tracked();
    TensorT<T> xc = x, oc = out;
    tape->record([=]() mutable {
      if (!oc.has_grad() || !xc.tracked()) return;
      xc.ensure_grad();
      for (int64_t i = 0; i < n; ++i) xc.grad()[i] += oc.grad()[i];
    });
  }
  return out;
}

// Sum of all elements -> scalar.
template <typename T>
TensorT<T> sum_all(const TensorT<T>& x, TapeT<T>* tape) {
  double acc = 0;
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(x.data()[i]);
  TensorT<T> out(Shape{1, 1, 1, 1});
  out.data()[0] = static_cast<T>(acc);
  if (detail::want_record(tape, {&x})) {
    out.mark_tracked();
    TensorT<T> xc = x, oc = out;
    tape->record([=]() mutable {
      if (!oc.has_grad() || !xc.tracked()) return;
      xc.ensure_grad();
      const T g = oc.grad()[0];
      for (int64_t i = 0; i < n; ++i) xc.grad()[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// nearest_upsample2x: each pixel copied to a 2x2 block.
// ---------------------------------------------------------------------------
template <typename T>
TensorT<T> nearest_upsample2x(const TensorT<T>& x, TapeT<T>* tape) {
  const int B = x.n(), C = x.c(), H = x.h(), W = x.w();
  TensorT<T> out(Shape{B, C, H * 2, W * 2});
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) num_threads(effective_threads())
#endif
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y) {
        const T* src = &x.at(b, c, y, 0);
        T* d0 = &out.at(b, c, 2 * y, 0);
        T* d1 = &out.at(b, c, 2 * y + 1, 0);
        for (int xx = 0; xx < W; ++xx) {
          d0[2 * xx] = src[xx];
          d0[2 * xx + 1] = src[xx];
          d1[2 * xx] = src[xx];
          d1[2 * xx + 1] = src[xx];
        }
      }
  if (detail::want_record(tape, {&x})) {
    out.mark_tracked();
    TensorT<T> xc = x, oc = out;
    tape->record([=]() mutable {
      if (!oc.has_grad() || !xc.tracked()) return;
      xc.ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < H; ++y) {
            T* dst = &xc.grad()[xc.index(b, c, y, 0)];
            const T* g0 = &oc.grad()[oc.index(b, c, 2 * y, 0)];
            const T* g1 = &oc.grad()[oc.index(b, c, 2 * y + 1, 0)];
            for (int xx = 0; xx < W; ++xx)
              dst[xx] += (g0[2 * xx] + g0[2 * xx + 1]) + (g1[2 * xx] + g1[2 * xx + 1]);
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// concat_channels / interleave_channels
// ---------------------------------------------------------------------------
template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape) {
  check_shape(a.n() == b.n() && a.h() == b.h() && a.w() == b.w(),
              "concat_channels: mismatched dims");
  const int B = a.n(), Ca = a.c(), Cb = b.c();
  const int64_t plane = static_cast<int64_t>(a.h()) * a.w();
  TensorT<T> out(Shape{B, Ca + Cb, a.h(), a.w()});
  for (int bi = 0; bi < B; ++bi) {
    std::copy_n(&a.at(bi, 0, 0, 0), Ca * plane, &out.at(bi, 0, 0, 0));
    std::copy_n(&b.at(bi, 0, 0, 0), Cb * plane, &out.at(bi, Ca, 0, 0));
  }
  if (detail::want_record(tape, {&a, &b})) {
    out.mark_tracked();
    TensorT<T> ac = a, bc = b, oc = out;
    tape->record([=]() mutable {
      if (!oc.has_grad()) return;
      for (int bi = 0; bi < B; ++bi) {
        if (ac.tracked()) {
          ac.ensure_grad();
          const T* g = &oc.grad()[oc.index(bi, 0, 0, 0)];
          T* da = &ac.grad()[ac.index(bi, 0, 0, 0)];
          for (int64_t i = 0; i < Ca * plane; ++i) da[i] += g[i];
        }
        if (bc.tracked()) {
          bc.ensure_grad();
          const T* g = &oc.grad()[oc.index(bi, Ca, 0, 0)];
          T* db = &bc.grad()[bc.index(bi, 0, 0, 0)];
          for (int64_t i = 0; i < Cb * plane; ++i) db[i] += g[i];
        }
      }
    });
  }
  return out;
}

// out channel c*P + p = parts[p] channel c. With P = r^2 and p = dy*r + dx
// this is exactly the channel order pixel_shuffle expects.
template <typename T>
TensorT<T> interleave_channels(const std::vector<TensorT<T>>& parts, TapeT<T>* tape) {
  check_value(!parts.empty(), "interleave_channels: empty input");
  const int P = static_cast<int>(parts.size());
  const Shape s0 = parts[0].shape();
  for (const auto& p : parts)
    check_shape(p.shape() == s0, "interleave_channels: mismatched part shapes");
  const int B = s0.n, C = s0.c;
  const int64_t plane = static_cast<int64_t>(s0.h) * s0.w;
  TensorT<T> out(Shape{B, C * P, s0.h, s0.w});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < P; ++p)
        std::copy_n(&parts[p].at(b, c, 0, 0), plane, &out.at(b, c * P + p, 0, 0));

  bool track = false;
  if (tape)
    for (const auto& p : parts) track = track || p.tracked();
  if (track) {
    out.mark_tracked();
    std::vector<TensorT<T>> pc = parts;
    TensorT<T> oc = out;
    tape->record([=]() mutable {
      if (!oc.has_grad()) return;
      for (int p = 0; p < P; ++p) {
        if (!pc[p].tracked()) continue;
        pc[p].ensure_grad();
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            const T* g = &oc.grad()[oc.index(b, c * P + p, 0, 0)];
            T* d = &pc[p].grad()[pc[p].index(b, c, 0, 0)];
            for (int64_t i = 0; i < plane; ++i) d[i] += g[i];
          }
      }
    });
  }
  return out;
}

}  // namespace koala

#endif  // KOALA_OPS_HPP
