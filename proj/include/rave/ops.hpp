#pragma once

// Differentiable operations on rank-<=4 channel-last tensors. Free functions:
// each computes its forward value and, when a gradient tape is active and any
// input participates, records a reverse closure. Convolution is lowered to
// im2col + Eigen GEMM; everything runs single-threaded and deterministic.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "rave/tensor.hpp"

namespace rave {

enum class Padding { Same, Valid };

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapRM = Eigen::Map<MatRM<S>>;
template <typename S>
using ConstMapRM = Eigen::Map<const MatRM<S>>;

// Gathers k*k*Cin patches of `in` (H x W x Cin, row-major channel-last) into
// a (Ho*Wo) x (k*k*Cin) matrix. Out-of-bounds reads under same-padding are
// zeros. Column index is ((kh*k)+kw)*Cin + c, which matches the row-major
// layout of a [k,k,Cin,Cout] weight tensor.
template <typename S>
void im2col(const S* in, Index h, Index w, Index cin, Index k, Index stride, Index pad,
            Index ho, Index wo, S* cols) {
  const Index patch = k * k * cin;
  for (Index oy = 0; oy < ho; ++oy) {
    for (Index ox = 0; ox < wo; ++ox) {
      S* row = cols + (oy * wo + ox) * patch;
      for (Index ky = 0; ky < k; ++ky) {
        const Index iy = oy * stride + ky - pad;
        for (Index kx = 0; kx < k; ++kx) {
          const Index ix = ox * stride + kx - pad;
          S* dst = row + (ky * k + kx) * cin;
          if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
            std::fill(dst, dst + cin, S(0));
          } else {
            const S* src = in + (iy * w + ix) * cin;
            std::copy(src, src + cin, dst);
          }
        }
      }
    }
  }
}

// Scatter-add transpose of im2col.
template <typename S>
void col2im_add(const S* cols, Index h, Index w, Index cin, Index k, Index stride, Index pad,
                Index ho, Index wo, S* in_grad) {
  const Index patch = k * k * cin;
  for (Index oy = 0; oy < ho; ++oy) {
    for (Index ox = 0; ox < wo; ++ox) {
      const S* row = cols + (oy * wo + ox) * patch;
      for (Index ky = 0; ky < k; ++ky) {
        const Index iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        for (Index kx = 0; kx < k; ++kx) {
          const Index ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= w) continue;
          const S* src = row + (ky * k + kx) * cin;
          S* dst = in_grad + (iy * w + ix) * cin;
          for (Index c = 0; c < cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace detail

// 2-D convolution of a [H,W,Cin] frame with a [k,k,Cin,Cout] weight and
// [Cout] bias. Same padding keeps H,W at stride 1 (k must be odd); valid
// padding takes equidistant patches and requires H,W >= k.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                 Index stride, Padding padding) {
  detail::require(input.shape.rank() == 3,
                  "conv2d: input rank " + std::to_string(input.shape.rank()) + " != 3");
  detail::require(weight.shape.rank() == 4, "conv2d: weight rank != 4 " + weight.shape.str());
  detail::require(stride >= 1, "conv2d: stride must be >= 1");
  const Index h = input.shape.dim(0), w = input.shape.dim(1), cin = input.shape.dim(2);
  const Index k = weight.shape.dim(0);
  detail::require(weight.shape.dim(1) == k, "conv2d: weight kernel not square " + weight.shape.str());
  detail::require(weight.shape.dim(2) == cin,
                  "conv2d: input channels (axis 2) = " + std::to_string(cin) +
                      " do not match weight Cin = " + std::to_string(weight.shape.dim(2)));
  const Index cout = weight.shape.dim(3);
  detail::require(bias.shape.rank() == 1 && bias.shape.dim(0) == cout,
                  "conv2d: bias shape " + bias.shape.str() + " does not match Cout = " + std::to_string(cout));

  Index pad = 0, ho = 0, wo = 0;
  if (padding == Padding::Same) {
    detail::require(k % 2 == 1, "conv2d: same padding requires odd kernel, got k = " + std::to_string(k));
    pad = (k - 1) / 2;
    ho = (h + 2 * pad - k) / stride + 1;
    wo = (w + 2 * pad - k) / stride + 1;
  } else {
    detail::require(h >= k && w >= k,
                    "conv2d: valid padding needs H,W >= k, got " + input.shape.str() + " vs k = " + std::to_string(k));
    ho = (h - k) / stride + 1;
    wo = (w - k) / stride + 1;
  }

  const Index patch = k * k * cin;
  std::vector<S> cols(static_cast<std::size_t>(ho * wo * patch));
  detail::im2col(input.data(), h, w, cin, k, stride, pad, ho, wo, cols.data());

  Tensor<S> out = Tensor<S>::zeros(TensorShape{ho, wo, cout});
  {
    detail::ConstMapRM<S> C(cols.data(), ho * wo, patch);
    detail::ConstMapRM<S> W(weight.data(), patch, cout);
    detail::MapRM<S> O(out.data(), ho * wo, cout);
    O.noalias() = C * W;
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> B(bias.data(), cout);
    O.rowwise() += B.transpose();
  }
  detail::debug_check_finite(out, "conv2d");

  if (auto* tape = detail::tape_if_tracked(input, weight, bias)) {
    out.slot = tape->alloc_slot(out.size());
    auto in_store = input.store;
    auto w_store = weight.store;
    const auto in_slot = input.slot, w_slot = weight.slot, b_slot = bias.slot, out_slot = out.slot;
    tape->record([=](GradientTape<S>& t) {
      const auto& go = t.grad_buffer(out_slot);
      detail::ConstMapRM<S> GO(go.data(), ho * wo, cout);
      if (b_slot != Tensor<S>::kNoSlot) {
        auto& gb = t.grad_buffer(b_slot);
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> GB(gb.data(), cout);
        GB += GO.colwise().sum().transpose();
      }
      if (w_slot != Tensor<S>::kNoSlot) {
        std::vector<S> cols2(static_cast<std::size_t>(ho * wo * patch));
        detail::im2col(in_store->data(), h, w, cin, k, stride, pad, ho, wo, cols2.data());
        detail::ConstMapRM<S> C2(cols2.data(), ho * wo, patch);
        auto& gw = t.grad_buffer(w_slot);
        detail::MapRM<S> GW(gw.data(), patch, cout);
        GW.noalias() += C2.transpose() * GO;
      }
      if (in_slot != Tensor<S>::kNoSlot) {
        detail::ConstMapRM<S> W2(w_store->data(), patch, cout);
        std::vector<S> gcols(static_cast<std::size_t>(ho * wo * patch));
        detail::MapRM<S> GC(gcols.data(), ho * wo, patch);
        GC.noalias() = GO * W2.transpose();
        auto& gi = t.grad_buffer(in_slot);
        detail::col2im_add(gcols.data(), h, w, cin, k, stride, pad, ho, wo, gi.data());
      }
    });
  }
  return out;
}

// Rearranges [H,W,C] into [H/b, W/b, C*b^2]; output channel index is
// (dy*b + dx)*C + c for sub-pixel offset (dy,dx).
template <typename S>
Tensor<S> space_to_depth(const Tensor<S>& input, Index block) {
  detail::require(input.shape.rank() == 3, "space_to_depth: input rank != 3");
  detail::require(block >= 1, "space_to_depth: block must be >= 1");
  const Index h = input.shape.dim(0), w = input.shape.dim(1), c = input.shape.dim(2);
  detail::require(h % block == 0, "space_to_depth: H = " + std::to_string(h) + " not divisible by block " + std::to_string(block));
  detail::require(w % block == 0, "space_to_depth: W = " + std::to_string(w) + " not divisible by block " + std::to_string(block));
  const Index ho = h / block, wo = w / block, co = c * block * block;

  Tensor<S> out = Tensor<S>::zeros(TensorShape{ho, wo, co});
  const S* src = input.data();
  S* dst = out.data();
  for (Index oy = 0; oy < ho; ++oy)
    for (Index ox = 0; ox < wo; ++ox)
      for (Index dy = 0; dy < block; ++dy)
        for (Index dx = 0; dx < block; ++dx) {
          const S* s = src + ((oy * block + dy) * w + (ox * block + dx)) * c;
          S* d = dst + (oy * wo + ox) * co + (dy * block + dx) * c;
          std::copy(s, s + c, d);
        }

  if (auto* tape = detail::tape_if_tracked(input)) {
    out.slot = tape->alloc_slot(out.size());
    const auto in_slot = input.slot, out_slot = out.slot;
    tape->record([=](GradientTape<S>& t) {
      const auto& go = t.grad_buffer(out_slot);
      auto& gi = t.grad_buffer(in_slot);
      for (Index oy = 0; oy < ho; ++oy)
        for (Index ox = 0; ox < wo; ++ox)
          for (Index dy = 0; dy < block; ++dy)
            for (Index dx = 0; dx < block; ++dx) {
              const S* g = go.data() + (oy * wo + ox) * co + (dy * block + dx) * c;
              S* d = gi.data() + ((oy * block + dy) * w + (ox * block + dx)) * c;
              for (Index i = 0; i < c; ++i) d[i] += g[i];
            }
    });
  }
  return out;
}

// Inverse of space_to_depth.
template <typename S>
Tensor<S> depth_to_space(const Tensor<S>& input, Index block) {
  detail::require(input.shape.rank() == 3, "depth_to_space: input rank != 3");
  const Index ho = input.shape.dim(0), wo = input.shape.dim(1), co = input.shape.dim(2);
  detail::require(co % (block * block) == 0,
                  "depth_to_space: channels = " + std::to_string(co) + " not divisible by block^2");
  const Index c = co / (block * block), h = ho * block, w = wo * block;

  Tensor<S> out = Tensor<S>::zeros(TensorShape{h, w, c});
  const S* src = input.data();
  S* dst = out.data();
  for (Index oy = 0; oy < ho; ++oy)
    for (Index ox = 0; ox < wo; ++ox)
      for (Index dy = 0; dy < block; ++dy)
        for (Index dx = 0; dx < block; ++dx) {
          const S* s = src + (oy * wo + ox) * co + (dy * block + dx) * c;
          S* d = dst + ((oy * block + dy) * w + (ox * block + dx)) * c;
          std::copy(s, s + c, d);
        }

  if (auto* tape = detail::tape_if_tracked(input)) {
    out.slot = tape->alloc_slot(out.size());
    const auto in_slot = input.slot, out_slot = out.slot;
    tape->record([=](GradientTape<S>& t) {
      const auto& go = t.grad_buffer(out_slot);
      auto& gi = t.grad_buffer(in_slot);
      for (Index oy = 0; oy < ho; ++oy)
        for (Index ox = 0; ox < wo; ++ox)
          for (Index dy = 0; dy < block; ++dy)
            for (Index dx = 0; dx < block; ++dx) {
              const S* g = go.data() + ((oy * block + dy) * w + (ox * block + dx)) * c;
              S* d = gi.data() + (oy * wo + ox) * co + (dy * block + dx) * c;
              for (Index i = 0; i < c; ++i) d[i] += g[i];
            }
    });
  }
  return out;
}

namespace detail {

// Half-pixel source coordinate and interpolation weights for 2x upscaling.
struct BilinearTap {
  Index lo, hi;
  double w_hi;  // weight on hi; weight on lo is 1 - w_hi
};

inline BilinearTap bilinear_tap_x2(Index out_i, Index in_extent) {
  const double src = (static_cast<double>(out_i) + 0.5) / 2.0 - 0.5;
  double clamped = std::min(std::max(src, 0.0), static_cast<double>(in_extent - 1));
  Index lo = static_cast<Index>(std::floor(clamped));
  Index hi = std::min(lo + 1, in_extent - 1);
  return {lo, hi, clamped - static_cast<double>(lo)};
}

}  // namespace detail

// Doubles H and W by bilinear interpolation with half-pixel alignment
// (align-corners-false); border samples clamp to the edge.
template <typename S>
Tensor<S> bilinear_resize_x2(const Tensor<S>& input) {
  detail::require(input.shape.rank() == 3, "bilinear_resize_x2: input rank != 3");
  const Index h = input.shape.dim(0), w = input.shape.dim(1), c = input.shape.dim(2);
  const Index ho = 2 * h, wo = 2 * w;

  std::vector<detail::BilinearTap> ty(ho), tx(wo);
  for (Index i = 0; i < ho; ++i) ty[i] = detail::bilinear_tap_x2(i, h);
  for (Index j = 0; j < wo; ++j) tx[j] = detail::bilinear_tap_x2(j, w);

  Tensor<S> out = Tensor<S>::zeros(TensorShape{ho, wo, c});
  const S* src = input.data();
  S* dst = out.data();
  for (Index oy = 0; oy < ho; ++oy) {
    const auto& y = ty[oy];
    for (Index ox = 0; ox < wo; ++ox) {
      const auto& x = tx[ox];
      const S w00 = static_cast<S>((1.0 - y.w_hi) * (1.0 - x.w_hi));
      const S w01 = static_cast<S>((1.0 - y.w_hi) * x.w_hi);
      const S w10 = static_cast<S>(y.w_hi * (1.0 - x.w_hi));
      const S w11 = static_cast<S>(y.w_hi * x.w_hi);
      const S* p00 = src + (y.lo * w + x.lo) * c;
      const S* p01 = src + (y.lo * w + x.hi) * c;
      const S* p10 = src + (y.hi * w + x.lo) * c;
      const S* p11 = src + (y.hi * w + x.hi) * c;
      S* d = dst + (oy * wo + ox) * c;
      for (Index i = 0; i < c; ++i) d[i] = w00 * p00[i] + w01 * p01[i] + w10 * p10[i] + w11 * p11[i];
    }
  }

  if (auto* tape = detail::tape_if_tracked(input)) {
    out.slot = tape->alloc_slot(out.size());
    const auto in_slot = input.slot, out_slot = out.slot;
    tape->record([=](GradientTape<S>& t) {
      const auto& go = t.grad_buffer(out_slot);
      auto& gi = t.grad_buffer(in_slot);
      for (Index oy = 0; oy < ho; ++oy) {
        const auto& y = ty[oy];
        for (Index ox = 0; ox < wo; ++ox) {
          const auto& x = tx[ox];
          const S w00 = static_cast<S>((1.0 - y.w_hi) * (1.0 - x.w_hi));
          const S w01 = static_cast<S>((1.0 - y.w_hi) * x.w_hi);
          const S w10 = static_cast<S>(y.w_hi * (1.0 - x.w_hi));
          const S w11 = static_cast<S>(y.w_hi * x.w_hi);
          const S* g = go.data() + (oy * wo + ox) * c;
          for (Index i = 0; i < c; ++i) {
            gi[(y.lo * w + x.lo) * c + i] += w00 * g[i];
            gi[(y.lo * w + x.hi) * c + i] += w01 * g[i];
            gi[(y.hi * w + x.lo) * c + i] += w10 * g[i];
            gi[(y.hi * w + x.hi) * c + i] += w11 * g[i];
          }
        }
      }
    });
  }
  return out;
}

// Spatial average over H,W per channel: [H,W,F] -> [1,1,F].
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& input) {
  detail::require(input.shape.rank() == 3, "global_avg_pool: input rank != 3");
  const Index h = input.shape.dim(0), w = input.shape.dim(1), f = input.shape.dim(2);
  const S inv = S(1) / static_cast<S>(h * w);

  Tensor<S> out = Tensor<S>::zeros(TensorShape{1, 1, f});
  const S* src = input.data();
  S* dst = out.data();
  for (Index p = 0; p < h * w; ++p)
    for (Index i = 0; i < f; ++i) dst[i] += src[p * f + i];
  for (Index i = 0; i < f; ++i) dst[i] *= inv;

  if (auto* tape = detail::tape_if_tracked(input)) {
    out.slot = tape->alloc_slot(out.size());
    const auto in_slot = input.slot, out_slot = out.slot;
    tape->record([=](GradientTape<S>& t) {
      const auto& go = t.grad_buffer(out_slot);
      auto& gi = t.grad_buffer(in_slot);
      for (Index p = 0; p < h * w; ++p)
        for (Index i = 0; i < f; ++i) gi[p * f + i] += go[i] * inv;
    });
  }
  return out;
}

// Copies a [1,1,F] vector to every spatial location of an [H,W,F] map.
template <typename S>
Tensor<S> replicate_spatial(const Tensor<S>& v, Index h, Index w) {
  detail::require(v.shape.rank() == 3 && v.shape.dim(0) == 1 && v.shape.dim(1) == 1,
                  "replicate_spatial: expected [1,1,F], got " + v.shape.str());
  detail::require(h >= 1 && w >= 1, "replicate_spatial: target extents must be >= 1");
  const Index f = v.shape.dim(2);

  Tensor<S> out = Tensor<S>::zeros(TensorShape{h, w, f});
  const S* src = v.data();
  S* dst = out.data();
  for (Index p = 0; p < h * w; ++p) std::copy(src, src + f, dst + p * f);

  if (auto* tape = detail::tape_if_tracked(v)) {
    out.slot = tape->alloc_slot(out.size());
    const auto in_slot = v.slot, out_slot = out.slot;
    tape->record([=](GradientTape<S>& t) {
      const auto& go = t.grad_buffer(out_slot);
      auto& gi = t.grad_buffer(in_slot);
      for (Index p = 0; p < h * w; ++p)
        for (Index i = 0; i < f; ++i) gi[i] += go[p * f + i];
    });
  }
  return out;
}

// Mean over the spatial map of a single-channel [H,W,1] tensor -> scalar.
template <typename S>
Tensor<S> spatial_mean(const Tensor<S>& input) {
  detail::require(input.shape.rank() == 3 && input.shape.dim(2) == 1,
                  "spatial_mean: expected [H,W,1], got " + input.shape.str());
  const Index n = input.size();
  const S inv = S(1) / static_cast<S>(n);
  S acc = S(0);
  for (Index i = 0; i < n; ++i) acc += input.data()[i];

  Tensor<S> out = Tensor<S>::scalar(acc * inv);
  if (auto* tape = detail::tape_if_tracked(input)) {
    out.slot = tape->alloc_slot(1);
    const auto in_slot = input.slot, out_slot = out.slot;
    tape->record([=](GradientTape<S>& t) {
      const S g = t.grad_buffer(out_slot)[0] * inv;
      auto& gi = t.grad_buffer(in_slot);
      for (auto& v : gi) v += g;
    });
  }
  return out;
}

// Concatenates [H,W,Ci] parts along the channel axis, order preserved.
template <typename S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& parts) {
  detail::require(!parts.empty(), "concat_channels: no parts");
  const Index h = parts[0].shape.dim(0), w = parts[0].shape.dim(1);
  Index ctot = 0;
  for (const auto& p : parts) {
    detail::require(p.shape.rank() == 3, "concat_channels: part rank != 3");
    detail::require(p.shape.dim(0) == h && p.shape.dim(1) == w,
                    "concat_channels: part " + p.shape.str() + " does not match H,W of first part [" +
                        std::to_string(h) + "," + std::to_string(w) + "]");
    ctot += p.shape.dim(2);
  }

  Tensor<S> out = Tensor<S>::zeros(TensorShape{h, w, ctot});
  S* dst = out.data();
  Index coff = 0;
  for (const auto& p : parts) {
    const Index c = p.shape.dim(2);
    const S* src = p.data();
    for (Index pos = 0; pos < h * w; ++pos)
      std::copy(src + pos * c, src + (pos + 1) * c, dst + pos * ctot + coff);
    coff += c;
  }

  GradientTape<S>* tape = GradientTape<S>::active();
  bool tracked = false;
  if (tape)
    for (const auto& p : parts) tracked = tracked || p.on_tape();
  if (tape && tracked) {
    out.slot = tape->alloc_slot(out.size());
    std::vector<std::int64_t> slots;
    std::vector<Index> chans;
    for (const auto& p : parts) {
      slots.push_back(p.slot);
      chans.push_back(p.shape.dim(2));
    }
    const auto out_slot = out.slot;
    tape->record([=](GradientTape<S>& t) {
      const auto& go = t.grad_buffer(out_slot);
      Index off = 0;
      for (std::size_t i = 0; i < slots.size(); ++i) {
        const Index c = chans[i];
        if (slots[i] != Tensor<S>::kNoSlot) {
          auto& gi = t.grad_buffer(slots[i]);
          for (Index pos = 0; pos < h * w; ++pos)
            for (Index j = 0; j < c; ++j) gi[pos * c + j] += go[pos * ctot + off + j];
        }
        off += c;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise operations. Binary ops accept equal shapes or a scalar
// (size-1) operand on either side.
// ---------------------------------------------------------------------------

namespace detail {

template <typename S, typename FwdFn, typename BwdA, typename BwdB>
Tensor<S> binary_ew(const char* name, const Tensor<S>& a, const Tensor<S>& b, FwdFn fwd, BwdA da,
                    BwdB db) {
  const bool a_scalar = a.size() == 1, b_scalar = b.size() == 1;
  require(a.shape == b.shape || a_scalar || b_scalar,
          std::string(name) + ": shape mismatch " + a.shape.str() + " vs " + b.shape.str() +
              " (equal shapes or scalar broadcast required)");
  const Tensor<S>& big = b_scalar ? a : b;
  const Index n = big.size();

  Tensor<S> out = Tensor<S>::zeros(big.shape);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (Index i = 0; i < n; ++i) po[i] = fwd(pa[a_scalar ? 0 : i], pb[b_scalar ? 0 : i]);
  debug_check_finite(out, name);

  if (auto* tape = tape_if_tracked(a, b)) {
    out.slot = tape->alloc_slot(n);
    auto a_store = a.store;
    auto b_store = b.store;
    const auto a_slot = a.slot, b_slot = b.slot, out_slot = out.slot;
    tape->record([=](GradientTape<S>& t) {
      const auto& go = t.grad_buffer(out_slot);
      if (a_slot != Tensor<S>::kNoSlot) {
        auto& ga = t.grad_buffer(a_slot);
        for (Index i = 0; i < n; ++i) {
          const S g = go[i] * da((*a_store)[a_scalar ? 0 : i], (*b_store)[b_scalar ? 0 : i]);
          ga[a_scalar ? 0 : i] += g;
        }
      }
      if (b_slot != Tensor<S>::kNoSlot) {
        auto& gb = t.grad_buffer(b_slot);
        for (Index i = 0; i < n; ++i) {
          const S g = go[i] * db((*a_store)[a_scalar ? 0 : i], (*b_store)[b_scalar ? 0 : i]);
          gb[b_scalar ? 0 : i] += g;
        }
      }
    });
  }
  return out;
}

template <typename S, typename FwdFn, typename BwdFn>
Tensor<S> unary_ew(const char* name, const Tensor<S>& x, FwdFn fwd, BwdFn bwd) {
  const Index n = x.size();
  Tensor<S> out = Tensor<S>::zeros(x.shape);
  const S* px = x.data();
  S* po = out.data();
  for (Index i = 0; i < n; ++i) po[i] = fwd(px[i]);
  debug_check_finite(out, name);

  if (auto* tape = tape_if_tracked(x)) {
    out.slot = tape->alloc_slot(n);
    auto x_store = x.store;
    const auto x_slot = x.slot, out_slot = out.slot;
    tape->record([=](GradientTape<S>& t) {
      const auto& go = t.grad_buffer(out_slot);
      auto& gx = t.grad_buffer(x_slot);
      for (Index i = 0; i < n; ++i) gx[i] += go[i] * bwd((*x_store)[i]);
    });
  }
  return out;
}

template <typename S>
S stable_sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <typename S>
S stable_softplus(S x) {
  return x > S(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_ew<S>(
      "add", a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
      [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_ew<S>(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
      [](S, S) { return S(-1); });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_ew<S>(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; },
      [](S x, S) { return x; });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& x) {
  return detail::unary_ew<S>(
      "neg", x, [](S v) { return -v; }, [](S) { return S(-1); });
}

template <typename S>
Tensor<S> square(const Tensor<S>& x) {
  return detail::unary_ew<S>(
      "square", x, [](S v) { return v * v; }, [](S v) { return S(2) * v; });
}

// relu with subgradient 0 at 0.
template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return detail::unary_ew<S>(
      "relu", x, [](S v) { return v > S(0) ? v : S(0); },
      [](S v) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& x, S slope = S(0.2)) {
  return detail::unary_ew<S>(
      "leaky_relu", x, [slope](S v) { return v > S(0) ? v : slope * v; },
      [slope](S v) { return v > S(0) ? S(1) : slope; });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return detail::unary_ew<S>(
      "sigmoid", x, [](S v) { return detail::stable_sigmoid(v); },
      [](S v) {
        const S s = detail::stable_sigmoid(v);
        return s * (S(1) - s);
      });
}

// Natural log; throws NumericError on non-positive input. Loss code must use
// softplus instead of composing log with sigmoid.
template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  for (Index i = 0; i < x.size(); ++i) {
    if (!(x.data()[i] > S(0))) {
      throw NumericError("log: non-positive value " + std::to_string(static_cast<double>(x.data()[i])) +
                         " at flat index " + std::to_string(i));
    }
  }
  return detail::unary_ew<S>(
      "log", x, [](S v) { return std::log(v); }, [](S v) { return S(1) / v; });
}

// log(1 + exp(x)) in the overflow-safe form; gradient is sigmoid(x).
template <typename S>
Tensor<S> softplus(const Tensor<S>& x) {
  return detail::unary_ew<S>(
      "softplus", x, [](S v) { return detail::stable_softplus(v); },
      [](S v) { return detail::stable_sigmoid(v); });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  return detail::unary_ew<S>(
      "scale", x, [c](S v) { return c * v; }, [c](S) { return c; });
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  S acc = S(0);
  for (Index i = 0; i < x.size(); ++i) acc += x.data()[i];
  Tensor<S> out = Tensor<S>::scalar(acc);
  if (auto* tape = detail::tape_if_tracked(x)) {
    out.slot = tape->alloc_slot(1);
    const auto x_slot = x.slot, out_slot = out.slot;
    tape->record([=](GradientTape<S>& t) {
      const S g = t.grad_buffer(out_slot)[0];
      for (auto& v : t.grad_buffer(x_slot)) v += g;
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  return scale(sum_all(x), S(1) / static_cast<S>(x.size()));
}

// ---------------------------------------------------------------------------
// Sequence plumbing: slicing one time step out of a rank-4 tensor and
// stacking per-step frames back into a sequence.
// ---------------------------------------------------------------------------

// [T,H,W,C] -> [H,W,C] at step t.
template <typename S>
Tensor<S> slice_step(const Tensor<S>& seq, Index t) {
  detail::require(seq.shape.rank() == 4, "slice_step: sequence rank != 4");
  const Index T = seq.shape.dim(0);
  detail::require(t >= 0 && t < T, "slice_step: step " + std::to_string(t) + " out of range T = " + std::to_string(T));
  const Index h = seq.shape.dim(1), w = seq.shape.dim(2), c = seq.shape.dim(3);
  const Index n = h * w * c;

  Tensor<S> out = Tensor<S>::zeros(TensorShape{h, w, c});
  std::copy(seq.data() + t * n, seq.data() + (t + 1) * n, out.data());

  if (auto* tape = detail::tape_if_tracked(seq)) {
    out.slot = tape->alloc_slot(n);
    const auto in_slot = seq.slot, out_slot = out.slot;
    tape->record([=](GradientTape<S>& t2) {
      const auto& go = t2.grad_buffer(out_slot);
      auto& gi = t2.grad_buffer(in_slot);
      for (Index i = 0; i < n; ++i) gi[t * n + i] += go[i];
    });
  }
  return out;
}

// list of [H,W,C] -> [T,H,W,C] in the given order.
template <typename S>
Tensor<S> stack_steps(const std::vector<Tensor<S>>& frames) {
  detail::require(!frames.empty(), "stack_steps: no frames");
  const TensorShape fs = frames[0].shape;
  detail::require(fs.rank() == 3, "stack_steps: frame rank != 3");
  for (const auto& f : frames)
    detail::require(f.shape == fs, "stack_steps: frame " + f.shape.str() + " does not match " + fs.str());
  const Index T = static_cast<Index>(frames.size());
  const Index n = fs.count();

  Tensor<S> out = Tensor<S>::zeros(TensorShape{T, fs.dim(0), fs.dim(1), fs.dim(2)});
  for (Index t = 0; t < T; ++t)
    std::copy(frames[t].data(), frames[t].data() + n, out.data() + t * n);

  GradientTape<S>* tape = GradientTape<S>::active();
  bool tracked = false;
  if (tape)
    for (const auto& f : frames) tracked = tracked || f.on_tape();
  if (tape && tracked) {
    out.slot = tape->alloc_slot(out.size());
    std::vector<std::int64_t> slots;
    for (const auto& f : frames) slots.push_back(f.slot);
    const auto out_slot = out.slot;
    tape->record([=](GradientTape<S>& t2) {
      const auto& go = t2.grad_buffer(out_slot);
      for (Index t = 0; t < T; ++t) {
        if (slots[static_cast<std::size_t>(t)] == Tensor<S>::kNoSlot) continue;
        auto& gi = t2.grad_buffer(slots[static_cast<std::size_t>(t)]);
        for (Index i = 0; i < n; ++i) gi[i] += go[t * n + i];
      }
    });
  }
  return out;
}

// Export-time clamp to [0,1]; intentionally not differentiable.
template <typename S>
Tensor<S> clamp01(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape);
  for (Index i = 0; i < x.size(); ++i)
    out.data()[i] = std::min(std::max(x.data()[i], S(0)), S(1));
  return out;
}

// Spatio-temporal crop of a [T,H,W,C] sequence (plain data utility).
template <typename S>
Tensor<S> crop_thw(const Tensor<S>& seq, Index t0, Index h0, Index w0, Index tc, Index hc, Index wc) {
  detail::require(seq.shape.rank() == 4, "crop_thw: sequence rank != 4");
  const Index T = seq.shape.dim(0), h = seq.shape.dim(1), w = seq.shape.dim(2), c = seq.shape.dim(3);
  detail::require(t0 >= 0 && h0 >= 0 && w0 >= 0 && t0 + tc <= T && h0 + hc <= h && w0 + wc <= w,
                  "crop_thw: crop outside bounds");
  Tensor<S> out = Tensor<S>::zeros(TensorShape{tc, hc, wc, c});
  for (Index t = 0; t < tc; ++t)
    for (Index y = 0; y < hc; ++y) {
      const S* src = seq.data() + (((t0 + t) * h + (h0 + y)) * w + w0) * c;
      S* dst = out.data() + ((t * hc + y) * wc) * c;
      std::copy(src, src + wc * c, dst);
    }
  return out;
}

}  // namespace rave
