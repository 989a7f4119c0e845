#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdj/tensor.hpp"

// Forward and backward kernels for the handful of operations the network
// needs. All functions are pure: they read their inputs and return fresh
// tensors. The autodiff layer wires these into tape nodes.
namespace cdj::nn {

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, int stride,
                                   int padding, const char* which) {
  const std::size_t padded = in + 2 * static_cast<std::size_t>(padding);
  if (k > padded) {
    throw std::invalid_argument(
        std::string("conv2d: kernel ") + which + " " + std::to_string(k) +
        " exceeds padded input " + which + " " + std::to_string(padded));
  }
  return (padded - k) / static_cast<std::size_t>(stride) + 1;
}

inline void check_conv_args(const Tensor& input, const Tensor& filters,
                            const Tensor& bias, int stride, int padding) {
  if (input.rank() != 4) {
    throw std::invalid_argument("conv2d: input must be N x Cin x H x W, got " +
                                input.shape_string());
  }
  if (filters.rank() != 4) {
    throw std::invalid_argument(
        "conv2d: filters must be Cout x Cin x kh x kw, got " +
        filters.shape_string());
  }
  if (input.dim(1) != filters.dim(1)) {
    throw std::invalid_argument(
        "conv2d: input channels " + std::to_string(input.dim(1)) +
        " != filter input channels " + std::to_string(filters.dim(1)));
  }
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != filters.dim(0))) {
    throw std::invalid_argument("conv2d: bias must have one entry per output "
                                "map, got " + bias.shape_string());
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding < 0) {
    throw std::invalid_argument("conv2d: padding must be >= 0");
  }
}

/// Zero-pad the spatial dims of an N x C x H x W tensor.
inline Tensor pad_spatial(const Tensor& x, std::size_t pad) {
  if (pad == 0) return x;
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({n, c, h + 2 * pad, w + 2 * pad});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          out(i, j, y + pad, xx + pad) = x(i, j, y, xx);
  return out;
}

inline Tensor crop_spatial(const Tensor& x, std::size_t pad,
                           std::size_t out_h, std::size_t out_w) {
  if (pad == 0) return x;
  const std::size_t n = x.dim(0), c = x.dim(1);
  Tensor out({n, c, out_h, out_w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t xx = 0; xx < out_w; ++xx)
          out(i, j, y, xx) = x(i, j, y + pad, xx + pad);
  return out;
}

/// Cross-correlation (no kernel flip). out[n,k] = bias[k] + sum_j in[n,j] * f[k,j].
inline Tensor conv2d(const Tensor& input, const Tensor& filters,
                     const Tensor& bias, int stride, int padding) {
  check_conv_args(input, filters, bias, stride, padding);
  const std::size_t n = input.dim(0), cin = input.dim(1);
  const std::size_t cout = filters.dim(0);
  const std::size_t kh = filters.dim(2), kw = filters.dim(3);
  const std::size_t oh = conv_out_extent(input.dim(2), kh, stride, padding, "height");
  const std::size_t ow = conv_out_extent(input.dim(3), kw, stride, padding, "width");
  const Tensor& x = padding ? pad_spatial(input, static_cast<std::size_t>(padding))
                            : input;
  const std::size_t s = static_cast<std::size_t>(stride);

  Tensor out({n, cout, oh, ow});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < cout; ++k) {
      const real b = bias.empty() ? real(0) : bias[k];
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          real acc = b;
          for (std::size_t j = 0; j < cin; ++j) {
            for (std::size_t u = 0; u < kh; ++u) {
              const real* row = &x(i, j, y * s + u, xx * s);
              const real* frow = &filters(k, j, u, 0);
              for (std::size_t v = 0; v < kw; ++v) acc += row[v] * frow[v];
            }
          }
          out(i, k, y, xx) = acc;
        }
      }
    }
  }
  return out;
}

inline Tensor conv2d_grad_bias(const Tensor& grad_out) {
  const std::size_t cout = grad_out.dim(1);
  Tensor g({cout});
  for (std::size_t i = 0; i < grad_out.dim(0); ++i)
    for (std::size_t k = 0; k < cout; ++k)
      for (std::size_t y = 0; y < grad_out.dim(2); ++y)
        for (std::size_t xx = 0; xx < grad_out.dim(3); ++xx)
          g[k] += grad_out(i, k, y, xx);
  return g;
}

inline Tensor conv2d_grad_filters(const Tensor& input, const Tensor& grad_out,
                                  int stride, int padding,
                                  const std::vector<std::size_t>& filter_shape) {
  const Tensor& x = padding ? pad_spatial(input, static_cast<std::size_t>(padding))
                            : input;
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t n = grad_out.dim(0), cout = grad_out.dim(1);
  const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
  const std::size_t cin = filter_shape[1], kh = filter_shape[2], kw = filter_shape[3];

  Tensor g(filter_shape);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < cout; ++k)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const real go = grad_out(i, k, y, xx);
          if (go == real(0)) continue;
          for (std::size_t j = 0; j < cin; ++j)
            for (std::size_t u = 0; u < kh; ++u) {
              const real* row = &x(i, j, y * s + u, xx * s);
              real* grow = &g(k, j, u, 0);
              for (std::size_t v = 0; v < kw; ++v) grow[v] += go * row[v];
            }
        }
  return g;
}

inline Tensor conv2d_grad_input(const Tensor& filters, const Tensor& grad_out,
                                int stride, int padding,
                                const std::vector<std::size_t>& input_shape) {
  const std::size_t pad = static_cast<std::size_t>(padding);
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t n = grad_out.dim(0), cout = grad_out.dim(1);
  const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
  const std::size_t cin = filters.dim(1), kh = filters.dim(2), kw = filters.dim(3);

  Tensor gpad({input_shape[0], input_shape[1], input_shape[2] + 2 * pad,
               input_shape[3] + 2 * pad});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < cout; ++k)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const real go = grad_out(i, k, y, xx);
          if (go == real(0)) continue;
          for (std::size_t j = 0; j < cin; ++j)
            for (std::size_t u = 0; u < kh; ++u) {
              real* row = &gpad(i, j, y * s + u, xx * s);
              const real* frow = &filters(k, j, u, 0);
              for (std::size_t v = 0; v < kw; ++v) row[v] += go * frow[v];
            }
        }
  return crop_spatial(gpad, pad, input_shape[2], input_shape[3]);
}

inline Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = x[i] > real(0) ? x[i] : real(0);
  return out;
}

/// Subgradient 0 at the kink.
inline Tensor relu_grad(const Tensor& x, const Tensor& grad_out) {
  Tensor g = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i)
    g[i] = x[i] > real(0) ? grad_out[i] : real(0);
  return g;
}

inline void check_pool_args(const Tensor& input, int window, int stride) {
  if (input.rank() != 4) {
    throw std::invalid_argument("max_pool2d: input must be N x C x H x W, got " +
                                input.shape_string());
  }
  if (window < 1 || stride < 1) {
    throw std::invalid_argument("max_pool2d: window and stride must be >= 1");
  }
  if (static_cast<std::size_t>(window) > input.dim(2) ||
      static_cast<std::size_t>(window) > input.dim(3)) {
    throw std::invalid_argument(
        "max_pool2d: window " + std::to_string(window) +
        " larger than spatial extent " + std::to_string(input.dim(2)) + "x" +
        std::to_string(input.dim(3)));
  }
}

/// Max pooling. If `argmax` is given it receives, per output cell, the flat
/// index of the winning input cell; ties go to the first maximum in
/// row-major scan order, which is where the gradient flows.
inline Tensor max_pool2d(const Tensor& input, int window, int stride,
                         std::vector<std::size_t>* argmax = nullptr) {
  check_pool_args(input, window, stride);
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3);
  const std::size_t win = static_cast<std::size_t>(window);
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t oh = (h - win) / s + 1;
  const std::size_t ow = (w - win) / s + 1;

  Tensor out({n, c, oh, ow});
  if (argmax) argmax->assign(out.size(), 0);
  std::size_t cell = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          real best = input(i, j, y * s, xx * s);
          std::size_t best_idx = input.offset4(i, j, y * s, xx * s);
          for (std::size_t u = 0; u < win; ++u)
            for (std::size_t v = 0; v < win; ++v) {
              const real val = input(i, j, y * s + u, xx * s + v);
              if (val > best) {
                best = val;
                best_idx = input.offset4(i, j, y * s + u, xx * s + v);
              }
            }
          out(i, j, y, xx) = best;
          if (argmax) (*argmax)[cell] = best_idx;
          ++cell;
        }
  return out;
}

inline Tensor max_pool2d_grad(const std::vector<std::size_t>& input_shape,
                              const std::vector<std::size_t>& argmax,
                              const Tensor& grad_out) {
  Tensor g(input_shape);
  for (std::size_t cell = 0; cell < grad_out.size(); ++cell)
    g[argmax[cell]] += grad_out[cell];
  return g;
}

/// Spatial mean per (sample, channel): N x C x H x W -> N x C.
inline Tensor global_avg_pool(const Tensor& input) {
  if (input.rank() != 4) {
    throw std::invalid_argument(
        "global_avg_pool: input must be N x C x H x W, got " +
        input.shape_string());
  }
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t area = input.dim(2) * input.dim(3);
  Tensor out({n, c});
  const real* p = input.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      real acc = 0;
      for (std::size_t k = 0; k < area; ++k) acc += *p++;
      out(i, j) = acc / static_cast<real>(area);
    }
  return out;
}

inline Tensor global_avg_pool_grad(const std::vector<std::size_t>& input_shape,
                                   const Tensor& grad_out) {
  Tensor g(input_shape);
  const std::size_t area = input_shape[2] * input_shape[3];
  const real inv = real(1) / static_cast<real>(area);
  real* p = g.data();
  for (std::size_t i = 0; i < input_shape[0]; ++i)
    for (std::size_t j = 0; j < input_shape[1]; ++j) {
      const real v = grad_out(i, j) * inv;
      for (std::size_t k = 0; k < area; ++k) *p++ = v;
    }
  return g;
}

inline void check_affine_args(const Tensor& input, const Tensor& weights,
                              const Tensor& bias) {
  if (input.rank() != 2 || weights.rank() != 2) {
    throw std::invalid_argument("affine: input must be N x D and weights D x M");
  }
  if (input.dim(1) != weights.dim(0)) {
    throw std::invalid_argument(
        "affine: inner dimensions differ, input D=" +
        std::to_string(input.dim(1)) + " vs weights D=" +
        std::to_string(weights.dim(0)));
  }
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != weights.dim(1))) {
    throw std::invalid_argument("affine: bias must have one entry per output, "
                                "got " + bias.shape_string());
  }
}

inline Tensor affine(const Tensor& input, const Tensor& weights,
                     const Tensor& bias) {
  check_affine_args(input, weights, bias);
  const std::size_t n = input.dim(0), d = input.dim(1), m = weights.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      const real xv = input(i, k);
      if (xv == real(0)) continue;
      for (std::size_t j = 0; j < m; ++j) out(i, j) += xv * weights(k, j);
    }
  if (!bias.empty())
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out(i, j) += bias[j];
  return out;
}

inline Tensor affine_grad_input(const Tensor& weights, const Tensor& grad_out) {
  const std::size_t n = grad_out.dim(0), m = grad_out.dim(1), d = weights.dim(0);
  Tensor g({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      real acc = 0;
      for (std::size_t j = 0; j < m; ++j) acc += grad_out(i, j) * weights(k, j);
      g(i, k) = acc;
    }
  return g;
}

inline Tensor affine_grad_weights(const Tensor& input, const Tensor& grad_out) {
  const std::size_t n = input.dim(0), d = input.dim(1), m = grad_out.dim(1);
  Tensor g({d, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      const real xv = input(i, k);
      if (xv == real(0)) continue;
      for (std::size_t j = 0; j < m; ++j) g(k, j) += xv * grad_out(i, j);
    }
  return g;
}

inline Tensor affine_grad_bias(const Tensor& grad_out) {
  Tensor g({grad_out.dim(1)});
  for (std::size_t i = 0; i < grad_out.dim(0); ++i)
    for (std::size_t j = 0; j < grad_out.dim(1); ++j) g[j] += grad_out(i, j);
  return g;
}

inline void check_labels(const std::vector<int>& labels, std::size_t count,
                         std::size_t num_classes, const char* what) {
  if (labels.size() != count) {
    throw std::invalid_argument(std::string(what) + ": got " +
                                std::to_string(labels.size()) +
                                " labels for " + std::to_string(count) +
                                " samples");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw std::invalid_argument(
          std::string(what) + ": label " + std::to_string(labels[i]) +
          " at sample " + std::to_string(i) + " outside [0, " +
          std::to_string(num_classes) + ")");
    }
  }
}

/// Row-wise softmax with max-subtraction, N x C -> N x C.
inline Tensor softmax(const Tensor& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor p({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    real mx = logits(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits(i, j));
    real z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      p(i, j) = std::exp(logits(i, j) - mx);
      z += p(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) p(i, j) /= z;
  }
  return p;
}

/// Mean over samples of -ln p(true class). `probs_out`, when given,
/// receives the softmax probabilities for reuse in the backward pass.
inline real softmax_cross_entropy(const Tensor& logits,
                                  const std::vector<int>& labels,
                                  Tensor* probs_out = nullptr) {
  if (logits.rank() != 2) {
    throw std::invalid_argument("softmax_cross_entropy: logits must be N x C, "
                                "got " + logits.shape_string());
  }
  check_labels(labels, logits.dim(0), logits.dim(1), "softmax_cross_entropy");
  Tensor p = softmax(logits);
  const std::size_t n = logits.dim(0);
  real loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    loss -= std::log(p(i, static_cast<std::size_t>(labels[i])));
  }
  if (probs_out) *probs_out = std::move(p);
  return loss / static_cast<real>(n);
}

/// d(mean xent)/d(logits) = (softmax - onehot) / N, times upstream.
inline Tensor softmax_cross_entropy_grad(const Tensor& probs,
                                         const std::vector<int>& labels,
                                         real upstream) {
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  const real scale = upstream / static_cast<real>(n);
  Tensor g({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) g(i, j) = probs(i, j) * scale;
    g(i, static_cast<std::size_t>(labels[i])) -= scale;
  }
  return g;
}

}  // namespace cdj::nn
