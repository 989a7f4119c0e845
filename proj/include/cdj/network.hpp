#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdj/autodiff.hpp"
#include "cdj/nn_ops.hpp"
#include "cdj/rng.hpp"
#include "cdj/tensor.hpp"

namespace cdj {

struct PoolSpec {
  int window = 2;
  int stride = 2;
};

/// One layer of the network. A layer owns R_l response maps; `pool_after`
/// describes the max-pool half of the activation applied to this layer's
/// output before it feeds the next layer. `routing_enabled` marks layers
/// whose response maps participate in the routing and balancing losses.
struct LayerSpec {
  enum class Kind { conv, fully_connected };

  Kind kind = Kind::conv;
  std::size_t num_maps = 1;  // R_l
  int kernel_h = 1, kernel_w = 1;
  int stride = 1;
  int padding = 0;
  std::optional<PoolSpec> pool_after;
  bool routing_enabled = false;

  static LayerSpec conv(std::size_t maps, int kh, int kw, int stride = 1,
                        int padding = 0) {
    LayerSpec s;
    s.kind = Kind::conv;
    s.num_maps = maps;
    s.kernel_h = kh;
    s.kernel_w = kw;
    s.stride = stride;
    s.padding = padding;
    return s;
  }

  static LayerSpec fully_connected(std::size_t maps) {
    LayerSpec s;
    s.kind = Kind::fully_connected;
    s.num_maps = maps;
    return s;
  }

  LayerSpec& with_pool(int window, int stride) {
    pool_after = PoolSpec{window, stride};
    return *this;
  }

  LayerSpec& with_routing(bool enabled = true) {
    routing_enabled = enabled;
    return *this;
  }
};

/// Per-layer shapes resolved against a concrete input size.
struct LayerShapes {
  std::size_t in_channels, in_h, in_w;  // after the previous layer's activation
  std::size_t out_h, out_w;             // of the retained response map
};

struct NetworkTopology {
  std::size_t in_channels = 1, in_height = 1, in_width = 1;
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 2;
  bool use_bias = true;

  /// Walk the layer chain and resolve every intermediate shape. Throws with
  /// the offending layer index if any step is inconsistent.
  std::vector<LayerShapes> shape_chain() const {
    if (layers.empty()) {
      throw std::invalid_argument("topology: no layers");
    }
    std::vector<LayerShapes> chain;
    std::size_t c = in_channels, h = in_height, w = in_width;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const LayerSpec& spec = layers[l];
      if (spec.num_maps < 1) {
        throw std::invalid_argument("topology: layer " + std::to_string(l) +
                                    " has no response maps");
      }
      LayerShapes s{c, h, w, 1, 1};
      try {
        if (spec.kind == LayerSpec::Kind::conv) {
          s.out_h = nn::conv_out_extent(h, static_cast<std::size_t>(spec.kernel_h),
                                        spec.stride, spec.padding, "height");
          s.out_w = nn::conv_out_extent(w, static_cast<std::size_t>(spec.kernel_w),
                                        spec.stride, spec.padding, "width");
        }
        // fully connected: consumes the flattened input, emits 1x1 maps
        c = spec.num_maps;
        h = s.out_h;
        w = s.out_w;
        if (spec.pool_after) {
          const std::size_t win = static_cast<std::size_t>(spec.pool_after->window);
          const std::size_t ps = static_cast<std::size_t>(spec.pool_after->stride);
          if (win > h || win > w) {
            throw std::invalid_argument("pool window " + std::to_string(win) +
                                        " larger than map " + std::to_string(h) +
                                        "x" + std::to_string(w));
          }
          h = (h - win) / ps + 1;
          w = (w - win) / ps + 1;
        }
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("topology: layer " + std::to_string(l) +
                                    ": " + e.what());
      }
      chain.push_back(s);
    }
    return chain;
  }

  /// Structural checks; `routing_classes` is the class count the routing
  /// loss will be built over (defaults to num_classes).
  void validate(std::size_t routing_classes = 0) const {
    if (routing_classes == 0) routing_classes = num_classes;
    shape_chain();
    if (layers.back().num_maps != num_classes) {
      throw std::invalid_argument(
          "topology: final layer has " + std::to_string(layers.back().num_maps) +
          " maps, expected one per class (" + std::to_string(num_classes) + ")");
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].routing_enabled && layers[l].num_maps < routing_classes) {
        throw std::invalid_argument(
            "topology: layer " + std::to_string(l) + " has routing enabled but only " +
            std::to_string(layers[l].num_maps) + " maps for " +
            std::to_string(routing_classes) + " routing classes");
      }
    }
  }

  std::vector<std::size_t> routing_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].routing_enabled) out.push_back(l);
    }
    return out;
  }
};

/// All convolution filters and biases of the network, one entry per layer.
/// Convolution filters are Cout x Cin x kh x kw; fully-connected weights are
/// D x M. Biases are one per output map (empty in no-bias mode).
struct ParameterSet {
  struct Layer {
    Tensor filters;
    Tensor bias;
  };
  std::vector<Layer> layers;

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const Layer& l : layers) n += l.filters.size() + l.bias.size();
    return n;
  }
};

/// Parameters lifted into Vars, tracked on a tape or plain constants.
struct ParameterVars {
  struct Layer {
    Var filters;
    Var bias;
  };
  std::vector<Layer> layers;

  static ParameterVars track(const ParameterSet& params, Tape& tape) {
    ParameterVars out;
    for (const ParameterSet::Layer& l : params.layers) {
      out.layers.push_back({tape.parameter(l.filters), tape.parameter(l.bias)});
    }
    return out;
  }

  static ParameterVars constants(const ParameterSet& params) {
    ParameterVars out;
    for (const ParameterSet::Layer& l : params.layers) {
      out.layers.push_back({Var::constant(l.filters), Var::constant(l.bias)});
    }
    return out;
  }
};

/// Everything one forward pass retains: the raw pre-activation response maps
/// R^(l) per layer (N x R_l x H_l x W_l; fully-connected maps are 1x1), the
/// N x C logits, and the parameter handles used, so gradients can be read
/// back after a backward pass.
struct ForwardTrace {
  std::vector<Var> response_maps;
  Var logits;
  ParameterVars params;
};

/// He-style fan-in initialization: filters ~ N(0, sqrt(2/fan_in)), biases
/// zero. Deterministic given the seed.
inline ParameterSet init_parameters(const NetworkTopology& topology,
                                    std::uint64_t seed) {
  const std::vector<LayerShapes> chain = topology.shape_chain();
  Rng rng(seed);
  ParameterSet params;
  for (std::size_t l = 0; l < topology.layers.size(); ++l) {
    const LayerSpec& spec = topology.layers[l];
    const LayerShapes& sh = chain[l];
    ParameterSet::Layer layer;
    if (spec.kind == LayerSpec::Kind::conv) {
      const std::size_t fan_in = sh.in_channels *
                                 static_cast<std::size_t>(spec.kernel_h) *
                                 static_cast<std::size_t>(spec.kernel_w);
      const real stddev = std::sqrt(real(2) / static_cast<real>(fan_in));
      layer.filters = random_normal({spec.num_maps, sh.in_channels,
                                     static_cast<std::size_t>(spec.kernel_h),
                                     static_cast<std::size_t>(spec.kernel_w)},
                                    stddev, rng);
    } else {
      const std::size_t fan_in = sh.in_channels * sh.in_h * sh.in_w;
      const real stddev = std::sqrt(real(2) / static_cast<real>(fan_in));
      layer.filters = random_normal({fan_in, spec.num_maps}, stddev, rng);
    }
    if (topology.use_bias) layer.bias = Tensor({spec.num_maps});
    params.layers.push_back(std::move(layer));
  }
  return params;
}

inline void check_parameters_fit(const NetworkTopology& topology,
                                 const ParameterSet& params) {
  const std::vector<LayerShapes> chain = topology.shape_chain();
  if (params.layers.size() != topology.layers.size()) {
    throw std::invalid_argument(
        "parameters: " + std::to_string(params.layers.size()) +
        " layers for a " + std::to_string(topology.layers.size()) +
        "-layer topology");
  }
  for (std::size_t l = 0; l < topology.layers.size(); ++l) {
    const LayerSpec& spec = topology.layers[l];
    const LayerShapes& sh = chain[l];
    const std::vector<std::size_t> want =
        spec.kind == LayerSpec::Kind::conv
            ? std::vector<std::size_t>{spec.num_maps, sh.in_channels,
                                       static_cast<std::size_t>(spec.kernel_h),
                                       static_cast<std::size_t>(spec.kernel_w)}
            : std::vector<std::size_t>{sh.in_channels * sh.in_h * sh.in_w,
                                       spec.num_maps};
    if (params.layers[l].filters.shape() != want) {
      throw std::invalid_argument("parameters: layer " + std::to_string(l) +
                                  " filter shape " +
                                  params.layers[l].filters.shape_string() +
                                  " does not fit the topology");
    }
  }
}

/// Run the network on a batch. Each layer convolves the activated output of
/// the previous layer (ReLU, then max-pool when configured); the raw
/// pre-activation maps are retained in the trace, and the logits are the
/// spatial means of the final layer's maps. When `tape` is given the whole
/// pass is recorded for backward.
inline ForwardTrace forward(const NetworkTopology& topology,
                            const ParameterSet& params, const Tensor& batch,
                            Tape* tape = nullptr) {
  check_parameters_fit(topology, params);
  if (batch.rank() != 4 || batch.dim(1) != topology.in_channels ||
      batch.dim(2) != topology.in_height || batch.dim(3) != topology.in_width) {
    throw std::invalid_argument(
        "forward: batch shape " + batch.shape_string() + " does not match " +
        "topology input " + std::to_string(topology.in_channels) + "x" +
        std::to_string(topology.in_height) + "x" +
        std::to_string(topology.in_width));
  }
  const std::size_t n = batch.dim(0);

  ForwardTrace trace;
  trace.params = tape ? ParameterVars::track(params, *tape)
                      : ParameterVars::constants(params);

  Var cur = Var::constant(batch);
  for (std::size_t l = 0; l < topology.layers.size(); ++l) {
    const LayerSpec& spec = topology.layers[l];
    if (l > 0) {
      cur = relu(trace.response_maps[l - 1]);
      const LayerSpec& prev = topology.layers[l - 1];
      if (prev.pool_after) {
        cur = max_pool2d(cur, prev.pool_after->window, prev.pool_after->stride);
      }
    }
    Var out;
    if (spec.kind == LayerSpec::Kind::conv) {
      out = conv2d(cur, trace.params.layers[l].filters,
                   trace.params.layers[l].bias, spec.stride, spec.padding);
    } else {
      const Tensor& in = cur.value();
      const std::size_t d = in.dim(1) * in.dim(2) * in.dim(3);
      Var flat = reshape(cur, {n, d});
      Var act = affine(flat, trace.params.layers[l].filters,
                       trace.params.layers[l].bias);
      out = reshape(act, {n, spec.num_maps, 1, 1});
    }
    trace.response_maps.push_back(out);
  }
  trace.logits = global_avg_pool(trace.response_maps.back());
  return trace;
}

}  // namespace cdj
