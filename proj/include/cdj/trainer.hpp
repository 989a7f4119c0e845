#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cdj/dataset.hpp"
#include "cdj/losses.hpp"
#include "cdj/network.hpp"
#include "cdj/probes.hpp"
#include "cdj/rng.hpp"

// Mini-batch SGD over the combined objective: per batch, run the network
// forward, build the class-activation matrix of every routing-enabled
// layer, evaluate softmax + routing + balancing, and backpropagate the
// whole thing to the filters. Batches are class-balanced so the
// class-activation matrices see every (routing) class.
namespace cdj {

enum class RoutingLabelSource { class_labels, auxiliary };

struct LrBreakpoint {
  std::size_t epoch;  // 1-based
  real rate;
};

/// Piecewise-geometric learning-rate schedule: the rate at an epoch between
/// two breakpoints interpolates geometrically (log-linearly); before the
/// first breakpoint the first rate holds, after the last the last one.
inline real learning_rate_at(const std::vector<LrBreakpoint>& schedule,
                             std::size_t epoch) {
  if (schedule.empty()) {
    throw std::invalid_argument("learning_rate_at: empty schedule");
  }
  if (epoch <= schedule.front().epoch) return schedule.front().rate;
  for (std::size_t i = 1; i < schedule.size(); ++i) {
    if (epoch <= schedule[i].epoch) {
      const LrBreakpoint& a = schedule[i - 1];
      const LrBreakpoint& b = schedule[i];
      const real t = static_cast<real>(epoch - a.epoch) /
                     static_cast<real>(b.epoch - a.epoch);
      return a.rate * std::pow(b.rate / a.rate, t);
    }
  }
  return schedule.back().rate;
}

struct TrainingConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 0;  // 0: 10 x number of routing classes
  real lambda1 = real(0.1);
  real lambda2 = real(0.1);
  std::vector<LrBreakpoint> schedule = {{1, real(0.01)}};
  std::uint64_t seed = 1;
  RoutingLabelSource routing_label_source = RoutingLabelSource::class_labels;
  real momentum = real(0.9);
  bool normalize_c_by_batch = true;
  std::size_t probe_max_per_class = 10;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
    if (lambda1 < 0 || lambda2 < 0) {
      throw std::invalid_argument("config: lambda1/lambda2 must be >= 0");
    }
    if (momentum < 0 || momentum >= 1) {
      throw std::invalid_argument("config: momentum must be in [0, 1)");
    }
    if (schedule.empty()) {
      throw std::invalid_argument("config: learning-rate schedule is empty");
    }
    for (std::size_t i = 0; i < schedule.size(); ++i) {
      if (schedule[i].rate <= 0) {
        throw std::invalid_argument("config: schedule rates must be positive");
      }
      if (i > 0 && schedule[i].epoch < schedule[i - 1].epoch) {
        throw std::invalid_argument(
            "config: schedule epochs must be non-decreasing");
      }
    }
  }
};

struct EpochStats {
  std::size_t epoch = 0;
  LossBreakdown mean_loss;  // averaged over the epoch's batches
  real train_accuracy = 0;
  real test_accuracy = 0;  // NaN when no eval split was given
  std::vector<probes::LayerEntropy> entropy;
  double wall_seconds = 0;  // not serialized; reruns must be byte-identical
};

struct TrainingReport {
  std::vector<EpochStats> epochs;
};

struct TrainResult {
  ParameterSet params;
  TrainingReport report;
};

/// Raised when the loss stops being finite; carries the failing step and
/// the last finite breakdown so the caller can see what exploded.
class TrainingDivergedError : public std::runtime_error {
 public:
  TrainingDivergedError(std::size_t step, LossBreakdown last)
      : std::runtime_error("training diverged: non-finite loss at step " +
                           std::to_string(step)),
        step(step),
        last_finite(std::move(last)) {}

  std::size_t step;
  LossBreakdown last_finite;
};

/// Class-balanced batch: per-class counts differ by at most one (the
/// classes receiving the extra sample are drawn by the rng), samples drawn
/// with replacement within each class. With `use_aux` the balance is over
/// auxiliary labels instead. Returns indices into the dataset.
inline std::vector<std::size_t> sample_balanced_batch(const Dataset& dataset,
                                                      std::size_t batch_size,
                                                      std::size_t num_classes,
                                                      Rng& rng,
                                                      bool use_aux = false) {
  if (batch_size < num_classes) {
    throw std::invalid_argument(
        "sample_balanced_batch: batch size " + std::to_string(batch_size) +
        " below class count " + std::to_string(num_classes));
  }
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const LabeledSample& s = dataset.samples[i];
    const int label = use_aux ? (s.aux_label ? *s.aux_label : -1) : s.label;
    if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
      throw std::invalid_argument(
          "sample_balanced_batch: sample " + std::to_string(i) +
          (use_aux ? " has no usable auxiliary label" : " label out of range"));
    }
    by_class[static_cast<std::size_t>(label)].push_back(i);
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (by_class[c].empty()) {
      throw std::invalid_argument("sample_balanced_batch: class " +
                                  std::to_string(c) + " has no samples");
    }
  }

  std::vector<std::size_t> counts(num_classes, batch_size / num_classes);
  std::vector<std::size_t> order(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) order[c] = c;
  rng.shuffle(order);
  for (std::size_t i = 0; i < batch_size % num_classes; ++i) counts[order[i]]++;

  std::vector<std::size_t> batch;
  batch.reserve(batch_size);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t k = 0; k < counts[c]; ++k) {
      batch.push_back(by_class[c][rng.index(by_class[c].size())]);
    }
  }
  return batch;
}

namespace detail {

inline void sgd_step(ParameterSet& params, const ForwardTrace& trace,
                     std::vector<ParameterSet::Layer>& velocity, real lr,
                     real momentum) {
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const Tensor& gf = trace.params.layers[l].filters.grad();
    Tensor& vf = velocity[l].filters;
    Tensor& wf = params.layers[l].filters;
    for (std::size_t i = 0; i < wf.size(); ++i) {
      vf[i] = momentum * vf[i] - lr * gf[i];
      wf[i] += vf[i];
    }
    if (!params.layers[l].bias.empty()) {
      const Tensor& gb = trace.params.layers[l].bias.grad();
      Tensor& vb = velocity[l].bias;
      Tensor& wb = params.layers[l].bias;
      for (std::size_t i = 0; i < wb.size(); ++i) {
        vb[i] = momentum * vb[i] - lr * gb[i];
        wb[i] += vb[i];
      }
    }
  }
}

inline void accumulate_breakdown(LossBreakdown& acc, const LossBreakdown& b) {
  if (acc.layer_terms.empty() && !b.layer_terms.empty()) {
    acc.layer_terms = b.layer_terms;
    for (LossBreakdown::LayerTerm& t : acc.layer_terms) {
      t.routing = 0;
      t.balancing = 0;
    }
  }
  acc.training_cost += b.training_cost;
  acc.total += b.total;
  for (std::size_t i = 0; i < b.layer_terms.size(); ++i) {
    acc.layer_terms[i].routing += b.layer_terms[i].routing;
    acc.layer_terms[i].balancing += b.layer_terms[i].balancing;
  }
}

}  // namespace detail

/// Algorithm: for each of `epochs` passes, draw class-balanced mini-batches
/// (with replacement), build the combined cost on a fresh tape, backprop,
/// and apply momentum SGD. The routing labels come from the class labels or
/// the dataset's auxiliary labels per the config; the softmax term always
/// trains on the class labels.
using EpochCallback =
    std::function<void(const EpochStats&, const ParameterSet&)>;

inline TrainResult train(const NetworkTopology& topology, ParameterSet params,
                         const Dataset& train_set, const Dataset& eval_set,
                         const TrainingConfig& config,
                         const EpochCallback& on_epoch = {}) {
  config.validate();
  train_set.validate();
  check_parameters_fit(topology, params);
  if (train_set.num_classes != topology.num_classes) {
    throw std::invalid_argument(
        "train: dataset has " + std::to_string(train_set.num_classes) +
        " classes, topology expects " + std::to_string(topology.num_classes));
  }

  const bool aux_mode =
      config.routing_label_source == RoutingLabelSource::auxiliary;
  if (aux_mode && train_set.num_aux_classes == 0) {
    throw std::invalid_argument(
        "train: auxiliary routing requested but the dataset has no auxiliary "
        "labels");
  }
  const std::size_t routing_classes =
      aux_mode ? train_set.num_aux_classes : train_set.num_classes;
  topology.validate(routing_classes);

  const std::size_t batch_size =
      config.batch_size ? config.batch_size : 10 * routing_classes;
  if (batch_size < routing_classes) {
    throw std::invalid_argument("train: batch size " +
                                std::to_string(batch_size) +
                                " cannot balance " +
                                std::to_string(routing_classes) + " classes");
  }

  TotalCostOptions cost_opt;
  cost_opt.lambda1 = config.lambda1;
  cost_opt.lambda2 = config.lambda2;
  cost_opt.normalize_c_by_batch = config.normalize_c_by_batch;
  cost_opt.routing_classes = routing_classes;

  std::vector<ParameterSet::Layer> velocity;
  for (const ParameterSet::Layer& l : params.layers) {
    velocity.push_back({Tensor::zeros_like(l.filters),
                        Tensor::zeros_like(l.bias)});
  }

  Rng rng(config.seed);
  Tape tape;
  TrainResult result;
  const std::size_t batches_per_epoch =
      (train_set.size() + batch_size - 1) / batch_size;
  std::size_t step = 0;
  LossBreakdown last_finite;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const real lr = learning_rate_at(config.schedule, epoch);
    LossBreakdown epoch_acc;
    epoch_acc.lambda1 = config.lambda1;
    epoch_acc.lambda2 = config.lambda2;

    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      ++step;
      const std::vector<std::size_t> idx = sample_balanced_batch(
          train_set, batch_size, routing_classes, rng, aux_mode);
      const Tensor batch = train_set.stack(idx);
      const std::vector<int> labels = train_set.labels(idx);
      const std::vector<int> routing_labels =
          aux_mode ? train_set.aux_labels(idx) : std::vector<int>();

      tape.reset();
      ForwardTrace trace = forward(topology, params, batch, &tape);
      TotalCost cost =
          total_cost(trace, topology, labels, routing_labels, cost_opt);
      if (!cost.breakdown.finite()) {
        throw TrainingDivergedError(step, last_finite);
      }
      last_finite = cost.breakdown;
      tape.backward(cost.total);
      detail::sgd_step(params, trace, velocity, lr, config.momentum);
      detail::accumulate_breakdown(epoch_acc, cost.breakdown);
    }

    const real inv = real(1) / static_cast<real>(batches_per_epoch);
    epoch_acc.training_cost *= inv;
    epoch_acc.total *= inv;
    for (LossBreakdown::LayerTerm& t : epoch_acc.layer_terms) {
      t.routing *= inv;
      t.balancing *= inv;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.mean_loss = epoch_acc;
    stats.train_accuracy = probes::evaluate_accuracy(topology, params, train_set);
    const Dataset& probe_base = eval_set.empty() ? train_set : eval_set;
    stats.test_accuracy =
        eval_set.empty()
            ? std::numeric_limits<real>::quiet_NaN()
            : probes::evaluate_accuracy(topology, params, eval_set);
    stats.entropy = probes::entropy_profile(
        topology, params,
        balanced_slice(probe_base, config.probe_max_per_class));
    stats.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    if (on_epoch) on_epoch(stats, params);
    result.report.epochs.push_back(std::move(stats));
  }

  result.params = std::move(params);
  return result;
}

/// Independent trainings differing only in seed (parameter init and batch
/// sampling), returned in seed order.
inline std::vector<TrainResult> train_ensemble(
    const NetworkTopology& topology, const Dataset& train_set,
    const Dataset& eval_set, const TrainingConfig& config,
    const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) {
    throw std::invalid_argument("train_ensemble: need at least one seed");
  }
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    for (std::size_t j = i + 1; j < seeds.size(); ++j) {
      if (seeds[i] == seeds[j]) {
        throw std::invalid_argument("train_ensemble: duplicate seed " +
                                    std::to_string(seeds[i]));
      }
    }
  }
  std::vector<TrainResult> members;
  for (std::uint64_t seed : seeds) {
    TrainingConfig member_config = config;
    member_config.seed = seed;
    members.push_back(train(topology, init_parameters(topology, seed),
                            train_set, eval_set, member_config));
  }
  return members;
}

/// Average the members' softmax probabilities, then take the argmax; ties
/// break toward the lowest class index.
inline std::vector<int> predict_ensemble(
    const std::vector<ParameterSet>& members, const NetworkTopology& topology,
    const Tensor& batch) {
  if (members.empty()) {
    throw std::invalid_argument("predict_ensemble: no members");
  }
  Tensor mean_probs;
  for (const ParameterSet& params : members) {
    const ForwardTrace trace = forward(topology, params, batch);
    Tensor probs = nn::softmax(trace.logits.value());
    if (mean_probs.empty()) {
      mean_probs = std::move(probs);
    } else {
      add_inplace(mean_probs, probs);
    }
  }
  scale_inplace(mean_probs, real(1) / static_cast<real>(members.size()));
  std::vector<int> out(mean_probs.dim(0));
  for (std::size_t i = 0; i < mean_probs.dim(0); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < mean_probs.dim(1); ++j) {
      if (mean_probs(i, j) > mean_probs(i, best)) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline real ensemble_accuracy(const std::vector<ParameterSet>& members,
                              const NetworkTopology& topology,
                              const Dataset& slice) {
  if (slice.empty()) {
    throw std::invalid_argument("ensemble_accuracy: empty slice");
  }
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < slice.size(); start += kChunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(slice.size(), start + kChunk);
         ++i) {
      idx.push_back(i);
    }
    const std::vector<int> pred =
        predict_ensemble(members, topology, slice.stack(idx));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (pred[i] == slice.samples[idx[i]].label) ++correct;
    }
  }
  return static_cast<real>(correct) / static_cast<real>(slice.size());
}

}  // namespace cdj
