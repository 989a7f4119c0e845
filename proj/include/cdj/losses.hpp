#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cdj/autodiff.hpp"
#include "cdj/network.hpp"
#include "cdj/tensor.hpp"

// The decision-jungle objective. Each response map of a layer is read as a
// decision node; its scalar activation per sample (ReLU then spatial mean)
// is accumulated per class into the class-activation matrix C_hj. The
// routing loss is the negative per-node class variance of that matrix, a
// differentiable surrogate for class purity: minimizing it peaks every
// node's class profile. The balancing cost penalizes unequal per-class
// total mass, which blocks the degenerate optimum of suppressing whole
// classes. The combined objective is
//
//   total = softmax_loss + lambda1 * sum_l routing(l) + lambda2 * sum_l balancing(l)
//
// over the layers with routing enabled.
namespace cdj {

/// Class-activation matrix of one layer: row h holds the summed node
/// activations of the samples labeled h. Carries the layer index and the
/// mini-batch size it was accumulated over.
struct ClassActivationMatrix {
  Tensor values;  // num_classes x num_maps
  std::size_t layer_index = 0;
  std::size_t batch_size = 0;

  std::size_t num_classes() const { return values.dim(0); }
  std::size_t num_nodes() const { return values.dim(1); }
};

/// Node activations a_ij: ReLU then global average pooling of each retained
/// response map. Shape N x R_l.
inline Var node_activations(const Var& layer_maps) {
  return global_avg_pool(relu(layer_maps));
}

inline Tensor node_activations(const Tensor& layer_maps) {
  return nn::global_avg_pool(nn::relu(layer_maps));
}

/// C_hj = sum_i a_ij [y_i = h]. Raw sums, no normalization.
inline Tensor class_activation_matrix(const Tensor& activations,
                                      const std::vector<int>& labels,
                                      std::size_t num_classes) {
  if (activations.rank() != 2) {
    throw std::invalid_argument(
        "class_activation_matrix: activations must be N x R, got " +
        activations.shape_string());
  }
  nn::check_labels(labels, activations.dim(0), num_classes,
                   "class_activation_matrix");
  const std::size_t n = activations.dim(0), r = activations.dim(1);
  Tensor c({num_classes, r});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t h = static_cast<std::size_t>(labels[i]);
    for (std::size_t j = 0; j < r; ++j) c(h, j) += activations(i, j);
  }
  return c;
}

/// Differentiable version; dC_hj/da_ij is 1 exactly when y_i = h.
inline Var class_activation_matrix(const Var& activations,
                                   std::vector<int> labels,
                                   std::size_t num_classes) {
  Tensor c = class_activation_matrix(activations.value(), labels, num_classes);
  Tape* tape = detail::common_tape({&activations});
  if (!tape) return Var::constant(std::move(c));
  return tape->record(
      std::move(c), [activations, labels = std::move(labels)](Tape& t,
                                                              const Tensor& g) {
        const std::size_t n = activations.value().dim(0);
        const std::size_t r = activations.value().dim(1);
        Tensor ga({n, r});
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t h = static_cast<std::size_t>(labels[i]);
          for (std::size_t j = 0; j < r; ++j) ga(i, j) = g(h, j);
        }
        t.accumulate(activations, ga);
      });
}

inline void check_cmatrix(const Tensor& cmat, const char* what,
                          bool need_two_classes) {
  if (cmat.rank() != 2 || cmat.dim(1) < 1) {
    throw std::invalid_argument(std::string(what) +
                                ": expected a classes x nodes matrix, got " +
                                cmat.shape_string());
  }
  if (need_two_classes && cmat.dim(0) < 2) {
    throw std::invalid_argument(
        std::string(what) +
        ": needs at least 2 classes; variance across a single class is "
        "identically zero");
  }
}

/// Routing loss: -(1/(R*C)) * sum_j sum_h (C_hj - mu_j)^2 where mu_j is the
/// column mean. Always <= 0; more negative means purer nodes.
inline real routing_loss(const Tensor& cmat) {
  check_cmatrix(cmat, "routing_loss", true);
  const std::size_t c = cmat.dim(0), r = cmat.dim(1);
  real acc = 0;
  for (std::size_t j = 0; j < r; ++j) {
    real mu = 0;
    for (std::size_t h = 0; h < c; ++h) mu += cmat(h, j);
    mu /= static_cast<real>(c);
    for (std::size_t h = 0; h < c; ++h) {
      const real d = cmat(h, j) - mu;
      acc += d * d;
    }
  }
  return -acc / static_cast<real>(r * c);
}

/// d(routing)/dC_hj = -2 (C_hj - mu_j) / (R*C). Columns sum to zero.
inline Tensor routing_loss_gradient(const Tensor& cmat) {
  check_cmatrix(cmat, "routing_loss_gradient", true);
  const std::size_t c = cmat.dim(0), r = cmat.dim(1);
  const real k = real(-2) / static_cast<real>(r * c);
  Tensor g({c, r});
  for (std::size_t j = 0; j < r; ++j) {
    real mu = 0;
    for (std::size_t h = 0; h < c; ++h) mu += cmat(h, j);
    mu /= static_cast<real>(c);
    for (std::size_t h = 0; h < c; ++h) g(h, j) = k * (cmat(h, j) - mu);
  }
  return g;
}

inline Var routing_loss(const Var& cmat) {
  const real value = routing_loss(cmat.value());
  Tape* tape = detail::common_tape({&cmat});
  if (!tape) return Var::constant(Tensor::scalar(value));
  return tape->record(Tensor::scalar(value), [cmat](Tape& t, const Tensor& g) {
    Tensor gc = routing_loss_gradient(cmat.value());
    scale_inplace(gc, g[0]);
    t.accumulate(cmat, gc);
  });
}

/// Label balancing cost: variance of the per-class total mass,
/// (1/C) * sum_h (s_h - s_bar)^2 with s_h = sum_j C_hj. Zero exactly when
/// every class carries the same mass.
inline real balancing_cost(const Tensor& cmat) {
  check_cmatrix(cmat, "balancing_cost", true);
  const std::size_t c = cmat.dim(0), r = cmat.dim(1);
  std::vector<real> s(c, 0);
  for (std::size_t h = 0; h < c; ++h)
    for (std::size_t j = 0; j < r; ++j) s[h] += cmat(h, j);
  real mean = 0;
  for (real v : s) mean += v;
  mean /= static_cast<real>(c);
  real acc = 0;
  for (real v : s) acc += (v - mean) * (v - mean);
  return acc / static_cast<real>(c);
}

/// d(balancing)/dC_hj = (2/C)(s_h - s_bar); constant within each row.
inline Tensor balancing_cost_gradient(const Tensor& cmat) {
  check_cmatrix(cmat, "balancing_cost_gradient", true);
  const std::size_t c = cmat.dim(0), r = cmat.dim(1);
  std::vector<real> s(c, 0);
  for (std::size_t h = 0; h < c; ++h)
    for (std::size_t j = 0; j < r; ++j) s[h] += cmat(h, j);
  real mean = 0;
  for (real v : s) mean += v;
  mean /= static_cast<real>(c);
  Tensor g({c, r});
  for (std::size_t h = 0; h < c; ++h) {
    const real v = real(2) / static_cast<real>(c) * (s[h] - mean);
    for (std::size_t j = 0; j < r; ++j) g(h, j) = v;
  }
  return g;
}

inline Var balancing_cost(const Var& cmat) {
  const real value = balancing_cost(cmat.value());
  Tape* tape = detail::common_tape({&cmat});
  if (!tape) return Var::constant(Tensor::scalar(value));
  return tape->record(Tensor::scalar(value), [cmat](Tape& t, const Tensor& g) {
    Tensor gc = balancing_cost_gradient(cmat.value());
    scale_inplace(gc, g[0]);
    t.accumulate(cmat, gc);
  });
}

/// Scalar record of one objective evaluation.
struct LossBreakdown {
  struct LayerTerm {
    std::size_t layer;
    real routing;
    real balancing;
  };

  real training_cost = 0;               // C_S, mean softmax loss
  std::vector<LayerTerm> layer_terms;   // one per routing-enabled layer
  real lambda1 = 0, lambda2 = 0;
  real total = 0;

  real routing_sum() const {
    real s = 0;
    for (const LayerTerm& t : layer_terms) s += t.routing;
    return s;
  }
  real balancing_sum() const {
    real s = 0;
    for (const LayerTerm& t : layer_terms) s += t.balancing;
    return s;
  }
  bool finite() const {
    if (!std::isfinite(total) || !std::isfinite(training_cost)) return false;
    for (const LayerTerm& t : layer_terms) {
      if (!std::isfinite(t.routing) || !std::isfinite(t.balancing)) return false;
    }
    return true;
  }
};

struct TotalCostOptions {
  real lambda1 = 0;
  real lambda2 = 0;
  /// Divide each class-activation matrix by the mini-batch size before the
  /// loss terms, so lambda1/lambda2 mean the same thing at every batch
  /// size. Off reproduces the raw accumulated sums.
  bool normalize_c_by_batch = true;
  /// Class count of the routing labels; 0 means the topology's class count.
  std::size_t routing_classes = 0;
};

struct TotalCost {
  LossBreakdown breakdown;
  Var total;  // differentiable when the trace was recorded on a tape
};

/// The full objective on one forward trace. `routing_labels` may be the
/// class labels themselves or any auxiliary labels; empty means "use
/// `labels`". The softmax term always uses `labels`.
inline TotalCost total_cost(const ForwardTrace& trace,
                            const NetworkTopology& topology,
                            const std::vector<int>& labels,
                            const std::vector<int>& routing_labels,
                            const TotalCostOptions& opt) {
  const std::vector<int>& rlabels =
      routing_labels.empty() ? labels : routing_labels;
  const std::size_t routing_classes =
      opt.routing_classes ? opt.routing_classes : topology.num_classes;
  const std::size_t batch = trace.logits.value().dim(0);

  TotalCost out;
  out.breakdown.lambda1 = opt.lambda1;
  out.breakdown.lambda2 = opt.lambda2;

  Var cs = softmax_cross_entropy(trace.logits, labels);
  out.breakdown.training_cost = cs.value()[0];
  Var total = cs;

  const bool need_grad_terms = opt.lambda1 != real(0) || opt.lambda2 != real(0);
  for (std::size_t l = 0; l < topology.layers.size(); ++l) {
    if (!topology.layers[l].routing_enabled) continue;
    if (topology.layers[l].num_maps < routing_classes) {
      throw std::invalid_argument(
          "total_cost: layer " + std::to_string(l) + " has " +
          std::to_string(topology.layers[l].num_maps) + " maps, fewer than the " +
          std::to_string(routing_classes) + " routing classes");
    }
    const real inv_batch = real(1) / static_cast<real>(batch);
    real routing_value, balancing_value;
    if (need_grad_terms) {
      Var a = node_activations(trace.response_maps[l]);
      Var cmat = class_activation_matrix(a, rlabels, routing_classes);
      if (opt.normalize_c_by_batch) cmat = scale(cmat, inv_batch);
      Var r = routing_loss(cmat);
      Var b = balancing_cost(cmat);
      routing_value = r.value()[0];
      balancing_value = b.value()[0];
      if (opt.lambda1 != real(0)) total = add(total, scale(r, opt.lambda1));
      if (opt.lambda2 != real(0)) total = add(total, scale(b, opt.lambda2));
    } else {
      // Reporting only: stay off the tape.
      Tensor a = node_activations(trace.response_maps[l].value());
      Tensor cmat = class_activation_matrix(a, rlabels, routing_classes);
      if (opt.normalize_c_by_batch) scale_inplace(cmat, inv_batch);
      routing_value = routing_loss(cmat);
      balancing_value = balancing_cost(cmat);
    }
    out.breakdown.layer_terms.push_back({l, routing_value, balancing_value});
  }

  out.breakdown.total = total.value()[0];
  out.total = total;
  return out;
}

}  // namespace cdj
