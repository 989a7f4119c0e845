#pragma once

// The pinned fixtures the trainer, probe, CLI, and acceptance suites share:
// a 4-class separable blob set, a small network with two routing-enabled
// layers, and a 3-class toy setup small enough for full finite-difference
// sweeps.

#include <cstdint>
#include <utility>

#include "cdj/dataset.hpp"
#include "cdj/network.hpp"
#include "cdj/trainer.hpp"

namespace fixtures {

constexpr std::uint64_t kDataSeed = 20;
constexpr std::uint64_t kTrainSeeds[3] = {11, 12, 13};

inline std::pair<cdj::Dataset, cdj::Dataset> blob_fixture(
    std::uint64_t data_seed = kDataSeed) {
  cdj::Dataset full = cdj::generate_blobs(4, 60, 12, 6.0, data_seed);
  return cdj::split(full, 0.25, data_seed);
}

/// conv 8 (3x3, pad 1, pool 2/2) -> conv 12 (3x3) -> fc 16 -> fc 4.
/// Routing on the second conv and the hidden fc; the logits layer has
/// exactly C maps and so takes no routing loss.
inline cdj::NetworkTopology fixture_topology() {
  cdj::NetworkTopology topo;
  topo.in_channels = 1;
  topo.in_height = 12;
  topo.in_width = 12;
  topo.num_classes = 4;
  topo.layers = {
      cdj::LayerSpec::conv(8, 3, 3, 1, 1).with_pool(2, 2),
      cdj::LayerSpec::conv(12, 3, 3).with_routing(),
      cdj::LayerSpec::fully_connected(16).with_routing(),
      cdj::LayerSpec::fully_connected(4),
  };
  return topo;
}

inline cdj::TrainingConfig fixture_config(std::uint64_t seed, cdj::real lambda1,
                                          cdj::real lambda2,
                                          std::size_t epochs = 30) {
  cdj::TrainingConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 0;  // 10 x C
  cfg.lambda1 = lambda1;
  cfg.lambda2 = lambda2;
  cfg.schedule = {{1, cdj::real(0.05)}, {epochs, cdj::real(0.005)}};
  cfg.seed = seed;
  return cfg;
}

/// 3-class toy for exhaustive gradient sweeps: 341 parameters.
inline cdj::NetworkTopology toy_topology() {
  cdj::NetworkTopology topo;
  topo.in_channels = 1;
  topo.in_height = 8;
  topo.in_width = 8;
  topo.num_classes = 3;
  topo.layers = {
      cdj::LayerSpec::conv(4, 3, 3, 1, 1).with_pool(2, 2),
      cdj::LayerSpec::conv(6, 3, 3).with_routing(),
      cdj::LayerSpec::fully_connected(3).with_routing(),
  };
  return topo;
}

/// Deterministic 3-class batch for the toy network.
inline std::pair<cdj::Tensor, std::vector<int>> toy_batch(std::size_t per_class,
                                                          std::uint64_t seed) {
  cdj::Rng rng(seed);
  const std::size_t n = 3 * per_class;
  cdj::Tensor batch({n, 1, 8, 8});
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 3);
    labels[i] = label;
    for (std::size_t p = 0; p < 64; ++p) {
      batch[i * 64 + p] = static_cast<cdj::real>(
          rng.normal(0.3 * (label + 1), 1.0));
    }
  }
  return {std::move(batch), std::move(labels)};
}

}  // namespace fixtures
