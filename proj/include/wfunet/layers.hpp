#pragma once

// Forward and backward passes of the building blocks of the 3D UNet. All
// functions are free templates over the scalar type so the same code runs in
// float for training and in double for gradient checking.

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "wfunet/error.hpp"
#include "wfunet/tensor.hpp"

namespace wfunet::layers {

inline constexpr std::size_t kKernel = 3;
inline constexpr std::size_t kTaps = kKernel * kKernel * kKernel;

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using StridedMap = Eigen::Map<RowMatrix<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using ConstStridedMap = Eigen::Map<const RowMatrix<S>, 0, Eigen::OuterStride<>>;

/// Fills `col` (rows = cin*27, cols = (t1-t0)*H*W) with the zero-padded
/// 3x3x3 neighbourhood of every voxel in output time steps [t0, t1).
template <typename S>
void im2col(const FeatureBlock<S>& in, std::size_t t0, std::size_t t1, std::vector<S>& col) {
  const std::size_t T = in.time, H = in.height, W = in.width, HW = H * W;
  const std::size_t N = (t1 - t0) * HW;
  col.assign(in.channels * kTaps * N, S{0});
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < in.channels; ++ci) {
    for (std::size_t kt = 0; kt < kKernel; ++kt) {
      for (std::size_t kh = 0; kh < kKernel; ++kh) {
        for (std::size_t kw = 0; kw < kKernel; ++kw, ++row) {
          const long dh = static_cast<long>(kh) - 1, dw = static_cast<long>(kw) - 1;
          const std::size_t w_lo = dw < 0 ? 1 : 0;
          const std::size_t w_hi = dw > 0 ? W - 1 : W;
          for (std::size_t t = t0; t < t1; ++t) {
            const long ts = static_cast<long>(t) + static_cast<long>(kt) - 1;
            if (ts < 0 || ts >= static_cast<long>(T)) continue;
            S* dst = col.data() + row * N + (t - t0) * HW;
            const S* src = in.values.data() + (ci * T + static_cast<std::size_t>(ts)) * HW;
            for (std::size_t h = 0; h < H; ++h) {
              const long hs = static_cast<long>(h) + dh;
              if (hs < 0 || hs >= static_cast<long>(H)) continue;
              const S* s = src + static_cast<std::size_t>(hs) * W;
              S* d = dst + h * W;
              for (std::size_t w = w_lo; w < w_hi; ++w) d[w] = s[static_cast<long>(w) + dw];
            }
          }
        }
      }
    }
  }
}

/// Adds the columns of `col` back onto their source voxels (adjoint of im2col).
template <typename S>
void col2im_add(const S* col, std::size_t t0, std::size_t t1, FeatureBlock<S>& grad_in) {
  const std::size_t T = grad_in.time, H = grad_in.height, W = grad_in.width, HW = H * W;
  const std::size_t N = (t1 - t0) * HW;
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < grad_in.channels; ++ci) {
    for (std::size_t kt = 0; kt < kKernel; ++kt) {
      for (std::size_t kh = 0; kh < kKernel; ++kh) {
        for (std::size_t kw = 0; kw < kKernel; ++kw, ++row) {
          const long dh = static_cast<long>(kh) - 1, dw = static_cast<long>(kw) - 1;
          const std::size_t w_lo = dw < 0 ? 1 : 0;
          const std::size_t w_hi = dw > 0 ? W - 1 : W;
          for (std::size_t t = t0; t < t1; ++t) {
            const long ts = static_cast<long>(t) + static_cast<long>(kt) - 1;
            if (ts < 0 || ts >= static_cast<long>(T)) continue;
            const S* src = col + row * N + (t - t0) * HW;
            S* dst = grad_in.values.data() + (ci * T + static_cast<std::size_t>(ts)) * HW;
            for (std::size_t h = 0; h < H; ++h) {
              const long hs = static_cast<long>(h) + dh;
              if (hs < 0 || hs >= static_cast<long>(H)) continue;
              S* d = dst + static_cast<std::size_t>(hs) * W;
              const S* s = src + h * W;
              for (std::size_t w = w_lo; w < w_hi; ++w) d[static_cast<long>(w) + dw] += s[w];
            }
          }
        }
      }
    }
  }
}

/// Time steps per im2col chunk, keeping the column buffer near 32 MiB.
template <typename S>
std::size_t time_chunk(std::size_t rows, std::size_t plane, std::size_t time) {
  const std::size_t budget = (std::size_t{32} << 20) / sizeof(S);
  const std::size_t per_step = std::max<std::size_t>(1, rows * plane);
  return std::clamp<std::size_t>(budget / per_step, 1, time);
}

/// 3x3x3 convolution with unit stride and same padding in time, height and
/// width. `weight` is (cout, cin, 3, 3, 3), `bias` is (cout).
template <typename S>
FeatureBlock<S> conv3d(const FeatureBlock<S>& in, std::span<const S> weight,
                       std::span<const S> bias, std::size_t cout) {
  const std::size_t K = in.channels * kTaps;
  if (weight.size() != cout * K || bias.size() != cout) {
    throw ConfigurationError("conv3d: kernel holds " + std::to_string(weight.size()) +
                             " weights, input " + in.shape_string() + " needs " +
                             std::to_string(cout * K));
  }
  const std::size_t T = in.time, HW = in.plane();
  FeatureBlock<S> out(cout, T, in.height, in.width);
  Eigen::Map<const RowMatrix<S>> wm(weight.data(), static_cast<Eigen::Index>(cout),
                                    static_cast<Eigen::Index>(K));
  std::vector<S> col;
  const std::size_t chunk = time_chunk<S>(K, HW, T);
  for (std::size_t t0 = 0; t0 < T; t0 += chunk) {
    const std::size_t t1 = std::min(T, t0 + chunk);
    const auto N = static_cast<Eigen::Index>((t1 - t0) * HW);
    im2col(in, t0, t1, col);
    Eigen::Map<const RowMatrix<S>> cm(col.data(), static_cast<Eigen::Index>(K), N);
    StridedMap<S> om(out.values.data() + t0 * HW, static_cast<Eigen::Index>(cout), N,
                     Eigen::OuterStride<>(T * HW));
    om.noalias() = wm * cm;
    for (std::size_t co = 0; co < cout; ++co) om.row(static_cast<Eigen::Index>(co)).array() += bias[co];
  }
  return out;
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `want_input_grad` is set (an empty block otherwise).
template <typename S>
FeatureBlock<S> conv3d_backward(const FeatureBlock<S>& in, std::span<const S> weight,
                                const FeatureBlock<S>& grad_out, std::span<S> grad_weight,
                                std::span<S> grad_bias, bool want_input_grad) {
  const std::size_t cout = grad_out.channels, K = in.channels * kTaps;
  const std::size_t T = in.time, HW = in.plane();
  Eigen::Map<const RowMatrix<S>> wm(weight.data(), static_cast<Eigen::Index>(cout),
                                    static_cast<Eigen::Index>(K));
  Eigen::Map<RowMatrix<S>> gwm(grad_weight.data(), static_cast<Eigen::Index>(cout),
                               static_cast<Eigen::Index>(K));
  FeatureBlock<S> grad_in;
  if (want_input_grad) grad_in = FeatureBlock<S>(in.channels, T, in.height, in.width);
  std::vector<S> col;
  RowMatrix<S> dcol;
  const std::size_t chunk = time_chunk<S>(K, HW, T);
  for (std::size_t t0 = 0; t0 < T; t0 += chunk) {
    const std::size_t t1 = std::min(T, t0 + chunk);
    const auto N = static_cast<Eigen::Index>((t1 - t0) * HW);
    ConstStridedMap<S> gm(grad_out.values.data() + t0 * HW, static_cast<Eigen::Index>(cout), N,
                          Eigen::OuterStride<>(T * HW));
    im2col(in, t0, t1, col);
    Eigen::Map<const RowMatrix<S>> cm(col.data(), static_cast<Eigen::Index>(K), N);
    gwm.noalias() += gm * cm.transpose();
    for (std::size_t co = 0; co < cout; ++co) grad_bias[co] += gm.row(static_cast<Eigen::Index>(co)).sum();
    if (want_input_grad) {
      dcol.noalias() = wm.transpose() * gm;
      col2im_add(dcol.data(), t0, t1, grad_in);
    }
  }
  return grad_in;
}

template <typename S>
void relu_inplace(FeatureBlock<S>& x) {
  for (auto& v : x.values) v = v > S{0} ? v : S{0};
}

/// Gradient through a rectifier given its output.
template <typename S>
void relu_backward_inplace(const FeatureBlock<S>& out, FeatureBlock<S>& grad) {
  for (std::size_t i = 0; i < grad.values.size(); ++i)
    if (!(out.values[i] > S{0})) grad.values[i] = S{0};
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Inverted-dropout mask: each element is 0 with probability `rate` and
/// 1/(1-rate) otherwise. Element i depends only on (seed, i).
template <typename S>
std::vector<S> dropout_mask(std::size_t n, double rate, std::uint64_t seed) {
  std::vector<S> mask(n);
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  const std::uint64_t base = splitmix64(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = static_cast<double>(splitmix64(base ^ (i * 0xD1B54A32D192ED03ull)) >> 11) *
                     0x1.0p-53;
    mask[i] = u < rate ? S{0} : keep_scale;
  }
  return mask;
}

/// 1x2x2 max pooling; `argmax` records the winning position (0..3) per output.
template <typename S>
FeatureBlock<S> maxpool_spatial(const FeatureBlock<S>& in, std::vector<std::uint8_t>& argmax) {
  if (in.height % 2 != 0 || in.width % 2 != 0)
    throw ConfigurationError("spatial pooling needs even height and width, got " +
                             in.shape_string());
  const std::size_t Ho = in.height / 2, Wo = in.width / 2, W = in.width;
  FeatureBlock<S> out(in.channels, in.time, Ho, Wo);
  argmax.assign(out.size(), 0);
  const std::size_t slices = in.channels * in.time;
  for (std::size_t s = 0; s < slices; ++s) {
    const S* src = in.values.data() + s * in.plane();
    S* dst = out.values.data() + s * out.plane();
    std::uint8_t* am = argmax.data() + s * out.plane();
    for (std::size_t h = 0; h < Ho; ++h) {
      for (std::size_t w = 0; w < Wo; ++w) {
        const S* p = src + 2 * h * W + 2 * w;
        const S cand[4] = {p[0], p[1], p[W], p[W + 1]};
        std::uint8_t best = 0;
        for (std::uint8_t k = 1; k < 4; ++k)
          if (cand[k] > cand[best]) best = k;
        dst[h * Wo + w] = cand[best];
        am[h * Wo + w] = best;
      }
    }
  }
  return out;
}

template <typename S>
FeatureBlock<S> maxpool_spatial_backward(const FeatureBlock<S>& grad_out,
                                         const std::vector<std::uint8_t>& argmax,
                                         std::size_t in_height, std::size_t in_width) {
  FeatureBlock<S> grad_in(grad_out.channels, grad_out.time, in_height, in_width);
  const std::size_t Ho = grad_out.height, Wo = grad_out.width, W = in_width;
  const std::size_t slices = grad_out.channels * grad_out.time;
  for (std::size_t s = 0; s < slices; ++s) {
    const S* g = grad_out.values.data() + s * grad_out.plane();
    const std::uint8_t* am = argmax.data() + s * grad_out.plane();
    S* dst = grad_in.values.data() + s * grad_in.plane();
    for (std::size_t h = 0; h < Ho; ++h) {
      for (std::size_t w = 0; w < Wo; ++w) {
        const std::uint8_t k = am[h * Wo + w];
        dst[(2 * h + k / 2) * W + 2 * w + k % 2] += g[h * Wo + w];
      }
    }
  }
  return grad_in;
}

/// Nearest-neighbour x2 spatial upsampling.
template <typename S>
FeatureBlock<S> upsample_spatial(const FeatureBlock<S>& in) {
  FeatureBlock<S> out(in.channels, in.time, in.height * 2, in.width * 2);
  const std::size_t slices = in.channels * in.time, Wo = out.width;
  for (std::size_t s = 0; s < slices; ++s) {
    const S* src = in.values.data() + s * in.plane();
    S* dst = out.values.data() + s * out.plane();
    for (std::size_t h = 0; h < out.height; ++h)
      for (std::size_t w = 0; w < Wo; ++w) dst[h * Wo + w] = src[(h / 2) * in.width + w / 2];
  }
  return out;
}

template <typename S>
FeatureBlock<S> upsample_spatial_backward(const FeatureBlock<S>& grad_out) {
  FeatureBlock<S> grad_in(grad_out.channels, grad_out.time, grad_out.height / 2,
                          grad_out.width / 2);
  const std::size_t slices = grad_out.channels * grad_out.time, Wo = grad_out.width;
  for (std::size_t s = 0; s < slices; ++s) {
    const S* g = grad_out.values.data() + s * grad_out.plane();
    S* dst = grad_in.values.data() + s * grad_in.plane();
    for (std::size_t h = 0; h < grad_out.height; ++h)
      for (std::size_t w = 0; w < Wo; ++w) dst[(h / 2) * grad_in.width + w / 2] += g[h * Wo + w];
  }
  return grad_in;
}

/// Channel concatenation: `first` channels, then `second` channels.
template <typename S>
FeatureBlock<S> concat_channels(const FeatureBlock<S>& first, const FeatureBlock<S>& second) {
  if (first.time != second.time || first.height != second.height || first.width != second.width)
    throw ConfigurationError("cannot concatenate " + first.shape_string() + " with " +
                             second.shape_string());
  FeatureBlock<S> out(first.channels + second.channels, first.time, first.height, first.width);
  std::copy(first.values.begin(), first.values.end(), out.values.begin());
  std::copy(second.values.begin(), second.values.end(),
            out.values.begin() + static_cast<long>(first.size()));
  return out;
}

template <typename S>
std::pair<FeatureBlock<S>, FeatureBlock<S>> split_channels(const FeatureBlock<S>& grad,
                                                           std::size_t first_channels) {
  FeatureBlock<S> a(first_channels, grad.time, grad.height, grad.width);
  FeatureBlock<S> b(grad.channels - first_channels, grad.time, grad.height, grad.width);
  std::copy(grad.values.begin(), grad.values.begin() + static_cast<long>(a.size()),
            a.values.begin());
  std::copy(grad.values.begin() + static_cast<long>(a.size()), grad.values.end(),
            b.values.begin());
  return {std::move(a), std::move(b)};
}

/// Convolution whose kernel spans the whole time axis: (C, T, H, W) -> (H, W),
/// one output channel, no padding in time, linear. `weight` is (1, C, T, 1, 1).
template <typename S>
std::vector<S> temporal_projection(const FeatureBlock<S>& in, std::span<const S> weight, S bias) {
  if (weight.size() != in.channels * in.time)
    throw ConfigurationError("final projection expects " + std::to_string(weight.size()) +
                             " (channel, time) taps, input is " + in.shape_string());
  const std::size_t HW = in.plane();
  std::vector<S> out(HW, bias);
  for (std::size_t k = 0; k < in.channels * in.time; ++k) {
    const S wk = weight[k];
    const S* src = in.values.data() + k * HW;
    for (std::size_t i = 0; i < HW; ++i) out[i] += wk * src[i];
  }
  return out;
}

template <typename S>
FeatureBlock<S> temporal_projection_backward(const FeatureBlock<S>& in, std::span<const S> weight,
                                             std::span<const S> grad_out,
                                             std::span<S> grad_weight, S& grad_bias) {
  const std::size_t HW = in.plane();
  FeatureBlock<S> grad_in(in.channels, in.time, in.height, in.width);
  S gb{0};
  for (std::size_t i = 0; i < HW; ++i) gb += grad_out[i];
  grad_bias += gb;
  for (std::size_t k = 0; k < in.channels * in.time; ++k) {
    const S* src = in.values.data() + k * HW;
    S* dst = grad_in.values.data() + k * HW;
    S acc{0};
    for (std::size_t i = 0; i < HW; ++i) {
      acc += grad_out[i] * src[i];
      dst[i] = weight[k] * grad_out[i];
    }
    grad_weight[k] += acc;
  }
  return grad_in;
}

}  // namespace wfunet::layers
