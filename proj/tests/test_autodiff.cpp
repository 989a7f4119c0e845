#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "cdj/autodiff.hpp"
#include "cdj/network.hpp"
#include "support/fixtures.hpp"
#include "support/test_util.hpp"

using Catch::Approx;
using cdj::Tape;
using cdj::Tensor;
using cdj::Var;
using cdj::real;

namespace {

// Values distinct pairwise and bounded away from zero, so relu and max-pool
// sit far from their kinks during finite differencing.
Tensor kink_free(const std::vector<std::size_t>& shape, std::uint64_t seed) {
  Tensor t(shape);
  cdj::Rng rng(seed);
  std::vector<real> values(t.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const real magnitude = real(0.5) + real(0.13) * static_cast<real>(i);
    values[i] = (rng.uniform() < 0.5 ? -1 : 1) * magnitude;
  }
  rng.shuffle(values);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = values[i];
  return t;
}

Tensor random_weights(const std::vector<std::size_t>& shape,
                      std::uint64_t seed) {
  cdj::Rng rng(seed);
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<real>(rng.normal(0.0, 0.7));
  }
  return t;
}

// Reduce an op output to a scalar with a fixed linear functional so every
// output element contributes a distinct upstream gradient.
real weighted_sum(const Tensor& t, std::uint64_t seed) {
  const Tensor w = random_weights(t.shape(), seed);
  real acc = 0;
  for (std::size_t i = 0; i < t.size(); ++i) acc += t[i] * w[i];
  return acc;
}

Var weighted_sum(const Var& v, std::uint64_t seed) {
  return cdj::sum(cdj::mul(v, Var::constant(random_weights(v.value().shape(), seed))));
}

void check_grad(const std::function<Var(Tape&, const Var&)>& build,
                const Tensor& at,
                const std::function<double(const Tensor&)>& reference,
                double rel = 1e-5, double abs = 1e-8) {
  Tape tape;
  Var x = tape.parameter(at);
  Var loss = build(tape, x);
  tape.backward(loss);
  const Tensor got = x.grad();
  const Tensor want = testutil::finite_diff(reference, at);
  const testutil::CompareResult res =
      testutil::compare_elementwise(got, want, rel, abs, "gradient");
  INFO(res.detail);
  REQUIRE(res.ok);
}

}  // namespace

TEST_CASE("tape rejects a root from another tape") {
  Tape a, b;
  Var x = a.parameter(Tensor::scalar(1));
  Var y = b.parameter(Tensor::scalar(1));
  REQUIRE_THROWS_WITH(a.backward(y),
                      Catch::Matchers::ContainsSubstring("not produced"));
  REQUIRE_THROWS_AS(a.backward(Var::constant(Tensor::scalar(1))),
                    std::invalid_argument);
  (void)x;
}

TEST_CASE("tape rejects a non-scalar root") {
  Tape tape;
  Var x = tape.parameter(Tensor({2}, {1, 2}));
  REQUIRE_THROWS_WITH(tape.backward(x),
                      Catch::Matchers::ContainsSubstring("scalar"));
}

TEST_CASE("tape cannot be consumed twice without a reset") {
  Tape tape;
  Var w = tape.parameter(Tensor::scalar(3));
  Var loss = cdj::mul(w, w);
  tape.backward(loss);
  REQUIRE_THROWS_WITH(tape.backward(loss),
                      Catch::Matchers::ContainsSubstring("reset"));
  tape.reset();
  Var w2 = tape.parameter(Tensor::scalar(4));
  Var loss2 = cdj::mul(w2, w2);
  tape.backward(loss2);
  REQUIRE(w2.grad()[0] == Approx(8.0));
}

TEST_CASE("constant loss yields all-zero gradients") {
  Tape tape;
  Var w = tape.parameter(Tensor({2, 2}, {1, 2, 3, 4}));
  Var c = tape.parameter(Tensor::scalar(5));
  tape.backward(c);
  const Tensor& g = w.grad();
  for (std::size_t i = 0; i < g.size(); ++i) REQUIRE(g[i] == 0.0);
}

TEST_CASE("w squared has gradient 2w") {
  Tape tape;
  Var w = tape.parameter(Tensor::scalar(3));
  Var loss = cdj::mul(w, w);
  tape.backward(loss);
  REQUIRE(w.grad()[0] == Approx(6.0));
}

TEST_CASE("gradients accumulate across consumers") {
  Tape tape;
  Var w = tape.parameter(Tensor::scalar(3));
  Var loss = cdj::add(cdj::mul(w, w), cdj::scale(w, 2));
  tape.backward(loss);
  REQUIRE(w.grad()[0] == Approx(8.0));  // 2w + 2
}

TEST_CASE("untracked operands stay constant") {
  Tape tape;
  Var w = tape.parameter(Tensor::scalar(2));
  Var c = Var::constant(Tensor::scalar(5));
  Var loss = cdj::mul(w, c);
  REQUIRE(loss.value()[0] == Approx(10.0));
  tape.backward(loss);
  REQUIRE(w.grad()[0] == Approx(5.0));
}

TEST_CASE("conv2d gradient w.r.t. filters, bias, and input") {
  const Tensor input = kink_free({2, 2, 5, 5}, 101);
  const Tensor filters = random_weights({3, 2, 3, 3}, 102);
  const Tensor bias = random_weights({3}, 103);

  SECTION("filters") {
    check_grad(
        [&](Tape&, const Var& f) {
          return weighted_sum(
              cdj::conv2d(Var::constant(input), f, Var::constant(bias), 1, 1),
              7);
        },
        filters,
        [&](const Tensor& f) {
          return weighted_sum(cdj::nn::conv2d(input, f, bias, 1, 1), 7);
        });
  }
  SECTION("bias") {
    check_grad(
        [&](Tape&, const Var& b) {
          return weighted_sum(
              cdj::conv2d(Var::constant(input), Var::constant(filters), b, 1, 1),
              7);
        },
        bias,
        [&](const Tensor& b) {
          return weighted_sum(cdj::nn::conv2d(input, filters, b, 1, 1), 7);
        });
  }
  SECTION("input, strided") {
    check_grad(
        [&](Tape&, const Var& x) {
          return weighted_sum(
              cdj::conv2d(x, Var::constant(filters), Var::constant(bias), 2, 1),
              7);
        },
        input,
        [&](const Tensor& x) {
          return weighted_sum(cdj::nn::conv2d(x, filters, bias, 2, 1), 7);
        });
  }
}

TEST_CASE("relu gradient away from the kink") {
  const Tensor input = kink_free({2, 3, 4, 4}, 104);
  check_grad(
      [&](Tape&, const Var& x) { return weighted_sum(cdj::relu(x), 9); },
      input,
      [&](const Tensor& x) { return weighted_sum(cdj::nn::relu(x), 9); });
}

TEST_CASE("max_pool2d gradient away from ties") {
  const Tensor input = kink_free({2, 2, 6, 6}, 105);
  check_grad(
      [&](Tape&, const Var& x) {
        return weighted_sum(cdj::max_pool2d(x, 2, 2), 11);
      },
      input,
      [&](const Tensor& x) {
        return weighted_sum(cdj::nn::max_pool2d(x, 2, 2), 11);
      });
}

TEST_CASE("global_avg_pool gradient") {
  const Tensor input = random_weights({3, 4, 3, 3}, 106);
  check_grad(
      [&](Tape&, const Var& x) {
        return weighted_sum(cdj::global_avg_pool(x), 13);
      },
      input,
      [&](const Tensor& x) {
        return weighted_sum(cdj::nn::global_avg_pool(x), 13);
      });
}

TEST_CASE("affine gradients") {
  const Tensor input = random_weights({4, 5}, 107);
  const Tensor weights = random_weights({5, 3}, 108);
  const Tensor bias = random_weights({3}, 109);

  SECTION("weights") {
    check_grad(
        [&](Tape&, const Var& w) {
          return weighted_sum(
              cdj::affine(Var::constant(input), w, Var::constant(bias)), 15);
        },
        weights,
        [&](const Tensor& w) {
          return weighted_sum(cdj::nn::affine(input, w, bias), 15);
        });
  }
  SECTION("input") {
    check_grad(
        [&](Tape&, const Var& x) {
          return weighted_sum(
              cdj::affine(x, Var::constant(weights), Var::constant(bias)), 15);
        },
        input,
        [&](const Tensor& x) {
          return weighted_sum(cdj::nn::affine(x, weights, bias), 15);
        });
  }
  SECTION("bias") {
    check_grad(
        [&](Tape&, const Var& b) {
          return weighted_sum(
              cdj::affine(Var::constant(input), Var::constant(weights), b), 15);
        },
        bias,
        [&](const Tensor& b) {
          return weighted_sum(cdj::nn::affine(input, weights, b), 15);
        });
  }
}

TEST_CASE("softmax cross entropy gradient") {
  const Tensor logits = random_weights({5, 4}, 110);
  const std::vector<int> labels = {0, 2, 3, 1, 2};
  check_grad(
      [&](Tape&, const Var& x) {
        return cdj::softmax_cross_entropy(x, labels);
      },
      logits,
      [&](const Tensor& x) {
        return cdj::nn::softmax_cross_entropy(x, labels);
      });
}

TEST_CASE("full network softmax loss matches finite differences") {
  const cdj::NetworkTopology topo = fixtures::toy_topology();
  cdj::ParameterSet params = cdj::init_parameters(topo, 42);
  auto [batch, labels] = fixtures::toy_batch(3, 43);

  auto loss_at = [&](const cdj::ParameterSet& p) {
    const cdj::ForwardTrace trace = cdj::forward(topo, p, batch);
    return double(cdj::nn::softmax_cross_entropy(trace.logits.value(), labels));
  };

  Tape tape;
  cdj::ForwardTrace trace = cdj::forward(topo, params, batch, &tape);
  Var loss = cdj::softmax_cross_entropy(trace.logits, labels);
  tape.backward(loss);

  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    for (int which = 0; which < 2; ++which) {
      Tensor& target = which == 0 ? params.layers[l].filters
                                  : params.layers[l].bias;
      const Tensor got = which == 0 ? trace.params.layers[l].filters.grad()
                                    : trace.params.layers[l].bias.grad();
      const Tensor want = testutil::finite_diff(
          [&](const Tensor& t) {
            cdj::ParameterSet probe = params;
            (which == 0 ? probe.layers[l].filters : probe.layers[l].bias) = t;
            return loss_at(probe);
          },
          target);
      const testutil::CompareResult res = testutil::compare_elementwise(
          got, want, 1e-5, 1e-8,
          "layer " + std::to_string(l) + (which == 0 ? " filters" : " bias"));
      INFO(res.detail);
      REQUIRE(res.ok);
    }
  }
}

TEST_CASE("forward pass without a tape is pure") {
  const cdj::NetworkTopology topo = fixtures::toy_topology();
  const cdj::ParameterSet params = cdj::init_parameters(topo, 5);
  auto [batch, labels] = fixtures::toy_batch(2, 6);
  (void)labels;
  const cdj::ForwardTrace a = cdj::forward(topo, params, batch);
  const cdj::ForwardTrace b = cdj::forward(topo, params, batch);
  REQUIRE(a.logits.value() == b.logits.value());
  REQUIRE_FALSE(a.logits.tracked());
}
