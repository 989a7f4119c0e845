#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdj/dataset.hpp"
#include "cdj/losses.hpp"
#include "cdj/network.hpp"

// Measurement instruments: per-layer class entropy, class-activation
// snapshots, and accuracy. Everything here is read-only over parameters
// and data.
namespace cdj::probes {

constexpr real kDeadNodeMass = real(1e-12);

/// Per-layer entropy summary. `average_entropy` is the mean Shannon entropy
/// (nats) of the column-normalized class distribution over nodes with mass
/// above the dead threshold; empty when every node is dead.
struct LayerEntropy {
  std::size_t layer_index = 0;
  std::optional<real> average_entropy;
  std::size_t live_nodes = 0;
  std::size_t dead_nodes = 0;
};

inline LayerEntropy layer_entropy(const Tensor& cmat,
                                  std::size_t layer_index = 0,
                                  real eps = kDeadNodeMass) {
  check_cmatrix(cmat, "layer_entropy", true);
  const std::size_t c = cmat.dim(0), r = cmat.dim(1);
  LayerEntropy out;
  out.layer_index = layer_index;
  real sum = 0;
  for (std::size_t j = 0; j < r; ++j) {
    real mass = 0;
    for (std::size_t h = 0; h < c; ++h) mass += cmat(h, j);
    if (mass <= eps) {
      out.dead_nodes++;
      continue;
    }
    real entropy = 0;
    for (std::size_t h = 0; h < c; ++h) {
      const real p = cmat(h, j) / mass;
      if (p > real(0)) entropy -= p * std::log(p);
    }
    sum += entropy;
    out.live_nodes++;
  }
  if (out.live_nodes > 0) {
    out.average_entropy = sum / static_cast<real>(out.live_nodes);
  }
  return out;
}

inline LayerEntropy layer_entropy(const ClassActivationMatrix& cmat,
                                  real eps = kDeadNodeMass) {
  return layer_entropy(cmat.values, cmat.layer_index, eps);
}

/// A class-activation matrix normalized for display: columns scaled to sum
/// to one (dead columns flagged instead), per-class total mass, and the
/// peak of each normalized column.
struct PuritySnapshot {
  std::size_t layer_index = 0;
  Tensor normalized;                    // classes x nodes
  std::vector<std::uint8_t> zero_mass;  // per node
  std::vector<real> class_mass;         // s_h
  std::vector<real> peakedness;         // max of normalized column; 0 if dead
};

inline PuritySnapshot purity_snapshot(const ClassActivationMatrix& cmat,
                                      real eps = kDeadNodeMass) {
  check_cmatrix(cmat.values, "purity_snapshot", false);
  const std::size_t c = cmat.values.dim(0), r = cmat.values.dim(1);
  PuritySnapshot snap;
  snap.layer_index = cmat.layer_index;
  snap.normalized = Tensor({c, r});
  snap.zero_mass.assign(r, 0);
  snap.class_mass.assign(c, 0);
  snap.peakedness.assign(r, 0);
  for (std::size_t h = 0; h < c; ++h)
    for (std::size_t j = 0; j < r; ++j) snap.class_mass[h] += cmat.values(h, j);
  for (std::size_t j = 0; j < r; ++j) {
    real mass = 0;
    for (std::size_t h = 0; h < c; ++h) mass += cmat.values(h, j);
    if (mass <= eps) {
      snap.zero_mass[j] = 1;
      continue;
    }
    real peak = 0;
    for (std::size_t h = 0; h < c; ++h) {
      const real p = cmat.values(h, j) / mass;
      snap.normalized(h, j) = p;
      peak = std::max(peak, p);
    }
    snap.peakedness[j] = peak;
  }
  return snap;
}

/// Layers whose map count can support a routing loss over `num_classes`.
inline std::vector<std::size_t> routing_capable_layers(
    const NetworkTopology& topology, std::size_t num_classes) {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < topology.layers.size(); ++l) {
    if (topology.layers[l].num_maps >= num_classes) out.push_back(l);
  }
  return out;
}

/// One forward pass over the slice; returns the class-activation matrix of
/// every routing-capable layer (raw sums over the slice).
inline std::vector<ClassActivationMatrix> collect_class_activations(
    const NetworkTopology& topology, const ParameterSet& params,
    const Dataset& slice) {
  if (slice.empty()) {
    throw std::invalid_argument("collect_class_activations: empty slice");
  }
  const std::vector<std::size_t> idx = slice.all_indices();
  const Tensor batch = slice.stack(idx);
  const std::vector<int> labels = slice.labels(idx);
  const ForwardTrace trace = forward(topology, params, batch);

  std::vector<ClassActivationMatrix> out;
  for (std::size_t l : routing_capable_layers(topology, slice.num_classes)) {
    Tensor a = node_activations(trace.response_maps[l].value());
    ClassActivationMatrix cmat;
    cmat.values = class_activation_matrix(a, labels, slice.num_classes);
    cmat.layer_index = l;
    cmat.batch_size = idx.size();
    out.push_back(std::move(cmat));
  }
  return out;
}

/// The Fig.-3d style probe: average node entropy per routing-capable layer.
/// The slice must cover every class at least once.
inline std::vector<LayerEntropy> entropy_profile(
    const NetworkTopology& topology, const ParameterSet& params,
    const Dataset& slice) {
  std::vector<std::size_t> per_class(slice.num_classes, 0);
  for (const LabeledSample& s : slice.samples) {
    per_class[static_cast<std::size_t>(s.label)]++;
  }
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (per_class[c] == 0) {
      throw std::invalid_argument("entropy_profile: class " +
                                  std::to_string(c) +
                                  " missing from the probe slice");
    }
  }
  std::vector<LayerEntropy> out;
  for (const ClassActivationMatrix& cmat :
       collect_class_activations(topology, params, slice)) {
    out.push_back(layer_entropy(cmat));
  }
  return out;
}

/// Argmax class per sample; ties go to the lowest class index.
inline std::vector<int> predict(const NetworkTopology& topology,
                                const ParameterSet& params,
                                const Tensor& batch) {
  const ForwardTrace trace = forward(topology, params, batch);
  const Tensor& logits = trace.logits.value();
  std::vector<int> out(logits.dim(0));
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.dim(1); ++j) {
      if (logits(i, j) > logits(i, best)) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline real evaluate_accuracy(const NetworkTopology& topology,
                              const ParameterSet& params,
                              const Dataset& slice) {
  if (slice.empty()) {
    throw std::invalid_argument("evaluate_accuracy: empty slice");
  }
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < slice.size(); start += kChunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(slice.size(), start + kChunk); ++i) {
      idx.push_back(i);
    }
    const std::vector<int> pred = predict(topology, params, slice.stack(idx));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (pred[i] == slice.samples[idx[i]].label) ++correct;
    }
  }
  return static_cast<real>(correct) / static_cast<real>(slice.size());
}

}  // namespace cdj::probes
