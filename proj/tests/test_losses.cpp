#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "cdj/losses.hpp"
#include "cdj/network.hpp"
#include "support/fixtures.hpp"
#include "support/test_util.hpp"

using Catch::Approx;
using cdj::Tape;
using cdj::Tensor;
using cdj::Var;
using cdj::real;

TEST_CASE("node activations: relu then spatial mean") {
  Tensor maps({1, 1, 2, 2}, {-1, 3, 1, 1});
  Tensor a = cdj::node_activations(maps);
  REQUIRE(a.shape() == std::vector<std::size_t>{1, 1});
  REQUIRE(a[0] == Approx(1.25));

  Tensor negative({1, 2, 2, 2});
  negative.fill(-2);
  Tensor a_neg = cdj::node_activations(negative);
  REQUIRE(a_neg(0, 0) == 0.0);
  REQUIRE(a_neg(0, 1) == 0.0);

  Tensor constant({1, 1, 3, 3});
  constant.fill(0.75);
  REQUIRE(cdj::node_activations(constant)[0] == Approx(0.75));
}

TEST_CASE("class activation matrix accumulates per class") {
  // one sample per class, identity-like
  Tensor a({2, 2}, {1, 0, 0, 2});
  Tensor c = cdj::class_activation_matrix(a, {0, 1}, 2);
  REQUIRE(c == Tensor({2, 2}, {1, 0, 0, 2}));

  Tensor zeros({3, 2});
  Tensor cz = cdj::class_activation_matrix(zeros, {0, 1, 0}, 2);
  for (std::size_t i = 0; i < cz.size(); ++i) REQUIRE(cz[i] == 0.0);

  // rows sum the per-class activations
  Tensor a3({3, 2}, {1, 1, 2, 0, 0, 3});
  Tensor c3 = cdj::class_activation_matrix(a3, {0, 0, 1}, 2);
  REQUIRE(c3 == Tensor({2, 2}, {3, 1, 0, 3}));

  REQUIRE_THROWS_WITH(cdj::class_activation_matrix(a, {0, 2}, 2),
                      Catch::Matchers::ContainsSubstring("outside"));
}

TEST_CASE("class activation matrix conserves mass") {
  cdj::Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.index(12), r = 1 + rng.index(8);
    const std::size_t classes = 2 + rng.index(4);
    Tensor a({n, r});
    std::vector<int> labels(n);
    real total = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = static_cast<real>(rng.uniform());
      total += a[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(rng.index(classes));
    }
    Tensor c = cdj::class_activation_matrix(a, labels, classes);
    real mass = 0;
    for (std::size_t i = 0; i < c.size(); ++i) mass += c[i];
    REQUIRE(mass == Approx(total).epsilon(1e-12));
  }
}

TEST_CASE("routing loss frozen values") {
  // uniform columns: the maximum, zero
  Tensor uniform({2, 3});
  uniform.fill(0.7);
  REQUIRE(cdj::routing_loss(uniform) == 0.0);

  // 2x2 identity: -0.25
  Tensor identity({2, 2}, {1, 0, 0, 1});
  REQUIRE(cdj::routing_loss(identity) == Approx(-0.25).epsilon(1e-12));

  // C=3, R=6, one-hot columns with unit mass: -2/9
  Tensor onehot({3, 6});
  for (std::size_t j = 0; j < 6; ++j) onehot(j % 3, j) = 1;
  REQUIRE(cdj::routing_loss(onehot) == Approx(-2.0 / 9.0).epsilon(1e-12));

  Tensor single_class({1, 4});
  REQUIRE_THROWS_WITH(cdj::routing_loss(single_class),
                      Catch::Matchers::ContainsSubstring("single class"));
}

TEST_CASE("routing loss gradient frozen values") {
  Tensor uniform({3, 2});
  uniform.fill(1.5);
  Tensor gu = cdj::routing_loss_gradient(uniform);
  for (std::size_t i = 0; i < gu.size(); ++i) REQUIRE(gu[i] == 0.0);

  // column [1, 0] with C=2, R=2: gradient -0.25 / +0.25
  Tensor c({2, 2}, {1, 0, 0, 1});
  Tensor g = cdj::routing_loss_gradient(c);
  REQUIRE(g(0, 0) == Approx(-0.25));
  REQUIRE(g(1, 0) == Approx(0.25));
  REQUIRE(g(0, 1) == Approx(0.25));
  REQUIRE(g(1, 1) == Approx(-0.25));
}

TEST_CASE("routing loss gradient columns sum to zero") {
  cdj::Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor c = testutil::random_cmatrix(rng, 2 + rng.index(5),
                                              1 + rng.index(10));
    const Tensor g = cdj::routing_loss_gradient(c);
    for (std::size_t j = 0; j < c.dim(1); ++j) {
      real col = 0;
      for (std::size_t h = 0; h < c.dim(0); ++h) col += g(h, j);
      REQUIRE(std::abs(col) < 1e-14);
    }
  }
}

TEST_CASE("balancing cost frozen values") {
  Tensor equal({2, 2}, {1, 1, 1, 1});
  REQUIRE(cdj::balancing_cost(equal) == 0.0);

  // row sums [2, 0] with C=2: 1.0
  Tensor skew({2, 2}, {1, 1, 0, 0});
  REQUIRE(cdj::balancing_cost(skew) == Approx(1.0).epsilon(1e-12));

  Tensor balanced3({3, 3}, {1, 1, 1, 2, 0.5, 0.5, 0, 1, 2});
  REQUIRE(cdj::balancing_cost(balanced3) == Approx(0.0).margin(1e-14));
}

TEST_CASE("balancing cost gradient frozen values") {
  Tensor equal({3, 4});
  equal.fill(0.25);
  Tensor ge = cdj::balancing_cost_gradient(equal);
  for (std::size_t i = 0; i < ge.size(); ++i) REQUIRE(ge[i] == 0.0);

  // row sums [2, 0]: +1 across row one, -1 across row two
  Tensor skew({2, 2}, {1, 1, 0, 0});
  Tensor g = cdj::balancing_cost_gradient(skew);
  REQUIRE(g(0, 0) == Approx(1.0));
  REQUIRE(g(0, 1) == Approx(1.0));
  REQUIRE(g(1, 0) == Approx(-1.0));
  REQUIRE(g(1, 1) == Approx(-1.0));
}

TEST_CASE("balancing cost gradient agrees with finite differences") {
  cdj::Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor c = testutil::random_cmatrix(rng, 2 + rng.index(4),
                                              1 + rng.index(6));
    const Tensor got = cdj::balancing_cost_gradient(c);
    const Tensor want = testutil::finite_diff(
        [](const Tensor& t) { return double(cdj::balancing_cost(t)); }, c);
    const testutil::CompareResult res =
        testutil::compare_elementwise(got, want, 1e-6, 1e-9, "balancing grad");
    INFO(res.detail);
    REQUIRE(res.ok);
  }
}

TEST_CASE("losses match the brute-force evaluators on random matrices") {
  cdj::Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor c = testutil::random_cmatrix(rng, 2 + rng.index(5),
                                              1 + rng.index(12));
    REQUIRE(cdj::routing_loss(c) ==
            Approx(testutil::brute_routing_loss(c)).epsilon(1e-12));
    REQUIRE(cdj::balancing_cost(c) ==
            Approx(testutil::brute_balancing_cost(c)).epsilon(1e-12));
    const auto grad_res = testutil::compare_elementwise(
        cdj::routing_loss_gradient(c), testutil::brute_routing_gradient(c),
        1e-12, 1e-14, "routing grad vs brute force");
    INFO(grad_res.detail);
    REQUIRE(grad_res.ok);
    const auto bal_res = testutil::compare_elementwise(
        cdj::balancing_cost_gradient(c), testutil::brute_balancing_gradient(c),
        1e-12, 1e-14, "balancing grad vs brute force");
    INFO(bal_res.detail);
    REQUIRE(bal_res.ok);
  }
}

TEST_CASE("sign bounds hold for random non-negative matrices") {
  cdj::Rng rng(37);
  for (int trial = 0; trial < 10000; ++trial) {
    const Tensor c = testutil::random_cmatrix(rng, 2 + rng.index(5),
                                              1 + rng.index(10));
    REQUIRE(cdj::routing_loss(c) <= 0.0);
    REQUIRE(cdj::balancing_cost(c) >= 0.0);
  }
}

TEST_CASE("losses are invariant to class and node permutations") {
  cdj::Rng rng(41);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t classes = 2 + rng.index(4), nodes = 1 + rng.index(8);
    const Tensor c = testutil::random_cmatrix(rng, classes, nodes);
    std::vector<std::size_t> class_perm(classes), node_perm(nodes);
    for (std::size_t i = 0; i < classes; ++i) class_perm[i] = i;
    for (std::size_t j = 0; j < nodes; ++j) node_perm[j] = j;
    rng.shuffle(class_perm);
    rng.shuffle(node_perm);
    Tensor permuted({classes, nodes});
    for (std::size_t h = 0; h < classes; ++h) {
      for (std::size_t j = 0; j < nodes; ++j) {
        permuted(h, j) = c(class_perm[h], node_perm[j]);
      }
    }
    // bitwise equality: the sums see the same values
    REQUIRE(cdj::routing_loss(permuted) ==
            Approx(cdj::routing_loss(c)).epsilon(1e-13));
    REQUIRE(cdj::balancing_cost(permuted) ==
            Approx(cdj::balancing_cost(c)).epsilon(1e-13));
  }
}

TEST_CASE("routing loss scales quadratically") {
  cdj::Rng rng(43);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor c = testutil::random_cmatrix(rng, 2 + rng.index(4),
                                              1 + rng.index(6));
    const real alpha = static_cast<real>(rng.uniform(0.1, 4.0));
    Tensor scaled = c;
    cdj::scale_inplace(scaled, alpha);
    REQUIRE(cdj::routing_loss(scaled) ==
            Approx(alpha * alpha * cdj::routing_loss(c)).epsilon(1e-12));
    REQUIRE(cdj::balancing_cost(scaled) ==
            Approx(alpha * alpha * cdj::balancing_cost(c)).epsilon(1e-12));
  }
}

TEST_CASE("suppressing a class minimizes routing alone; balancing fixes it") {
  // Fixed candidate grid, C=3, R=6, total mass 6. Peaked candidates put the
  // whole mass of each active class on its own node.
  const std::size_t classes = 3, nodes = 6;
  auto peaked = [&](std::size_t active_classes) {
    Tensor c({classes, nodes});
    const real mass = real(6) / static_cast<real>(active_classes);
    for (std::size_t h = 0; h < active_classes; ++h) c(h, h) = mass;
    return c;
  };
  Tensor uniform({classes, nodes});
  uniform.fill(real(6) / real(classes * nodes));
  const Tensor balanced = peaked(3);
  const Tensor one_suppressed = peaked(2);  // class 3 gets nothing
  const Tensor all_in_one = peaked(1);

  const std::vector<const Tensor*> grid = {&uniform, &balanced,
                                           &one_suppressed, &all_in_one};

  // routing alone prefers the most class-suppressing candidate
  const Tensor* best_routing = nullptr;
  for (const Tensor* c : grid) {
    if (!best_routing ||
        cdj::routing_loss(*c) < cdj::routing_loss(*best_routing)) {
      best_routing = c;
    }
  }
  REQUIRE(best_routing == &all_in_one);
  REQUIRE(cdj::routing_loss(one_suppressed) < cdj::routing_loss(balanced));

  // with lambda2 = 1 every class-suppressing candidate loses to the
  // balanced peaked one
  const real lambda2 = 1.0;
  auto total = [&](const Tensor& c) {
    return cdj::routing_loss(c) + lambda2 * cdj::balancing_cost(c);
  };
  REQUIRE(total(balanced) < total(one_suppressed));
  REQUIRE(total(balanced) < total(all_in_one));
  REQUIRE(total(balanced) < total(uniform));

  // the crossover: below lambda2 = 1/9 the suppressed candidate wins
  const real threshold = real(1.0) / real(9.0);
  auto total_at = [&](const Tensor& c, real l2) {
    return cdj::routing_loss(c) + l2 * cdj::balancing_cost(c);
  };
  REQUIRE(total_at(one_suppressed, threshold / 2) <
          total_at(balanced, threshold / 2));
  REQUIRE(total_at(one_suppressed, threshold * 2) >
          total_at(balanced, threshold * 2));
}

TEST_CASE("total cost with zero lambdas equals the softmax loss") {
  const cdj::NetworkTopology topo = fixtures::toy_topology();
  const cdj::ParameterSet params = cdj::init_parameters(topo, 3);
  auto [batch, labels] = fixtures::toy_batch(2, 4);

  const cdj::ForwardTrace trace = cdj::forward(topo, params, batch);
  cdj::TotalCostOptions opt;  // lambdas zero
  const cdj::TotalCost cost = cdj::total_cost(trace, topo, labels, {}, opt);
  const real cs = cdj::nn::softmax_cross_entropy(trace.logits.value(), labels);
  REQUIRE(cost.breakdown.total == cs);  // exact: no terms were added
  REQUIRE(cost.breakdown.training_cost == cs);
  REQUIRE(cost.breakdown.layer_terms.size() == 2);
}

TEST_CASE("zero-activation trace has zero routing and balancing terms") {
  cdj::NetworkTopology topo = fixtures::toy_topology();
  cdj::ParameterSet params = cdj::init_parameters(topo, 3);
  for (cdj::ParameterSet::Layer& l : params.layers) {
    l.filters.fill(0);
    l.bias.fill(0);
  }
  cdj::Tensor batch({3, 1, 8, 8});
  const std::vector<int> labels = {0, 1, 2};
  const cdj::ForwardTrace trace = cdj::forward(topo, params, batch);
  cdj::TotalCostOptions opt;
  opt.lambda1 = opt.lambda2 = real(0.1);
  const cdj::TotalCost cost = cdj::total_cost(trace, topo, labels, {}, opt);
  for (const cdj::LossBreakdown::LayerTerm& t : cost.breakdown.layer_terms) {
    REQUIRE(t.routing == 0.0);
    REQUIRE(t.balancing == 0.0);
  }
  REQUIRE(cost.breakdown.total == Approx(cost.breakdown.training_cost));
}

TEST_CASE("breakdown satisfies the weighted-total identity") {
  const cdj::NetworkTopology topo = fixtures::toy_topology();
  const cdj::ParameterSet params = cdj::init_parameters(topo, 9);
  auto [batch, labels] = fixtures::toy_batch(3, 10);
  const cdj::ForwardTrace trace = cdj::forward(topo, params, batch);
  cdj::TotalCostOptions opt;
  opt.lambda1 = real(0.3);
  opt.lambda2 = real(0.7);
  const cdj::TotalCost cost = cdj::total_cost(trace, topo, labels, {}, opt);
  const cdj::LossBreakdown& b = cost.breakdown;
  REQUIRE(b.total == Approx(b.training_cost + b.lambda1 * b.routing_sum() +
                            b.lambda2 * b.balancing_sum())
                         .epsilon(1e-12));
  for (const cdj::LossBreakdown::LayerTerm& t : b.layer_terms) {
    REQUIRE(t.routing <= 0.0);
    REQUIRE(t.balancing >= 0.0);
  }
}

TEST_CASE("routing rejected when a layer is narrower than the class count") {
  cdj::NetworkTopology topo = fixtures::toy_topology();
  const cdj::ParameterSet params = cdj::init_parameters(topo, 3);
  auto [batch, labels] = fixtures::toy_batch(2, 4);
  const cdj::ForwardTrace trace = cdj::forward(topo, params, batch);
  cdj::TotalCostOptions opt;
  opt.lambda1 = real(0.1);
  opt.routing_classes = 5;  // more routing classes than layer maps
  REQUIRE_THROWS_WITH(cdj::total_cost(trace, topo, labels, {}, opt),
                      Catch::Matchers::ContainsSubstring("fewer than"));
}

TEST_CASE("end-to-end gradient of the combined objective matches finite differences") {
  const cdj::NetworkTopology topo = fixtures::toy_topology();
  cdj::ParameterSet params = cdj::init_parameters(topo, 21);
  auto [batch, labels] = fixtures::toy_batch(3, 22);

  cdj::TotalCostOptions opt;
  opt.lambda1 = real(0.1);
  opt.lambda2 = real(0.1);

  auto loss_at = [&](const cdj::ParameterSet& p) {
    const cdj::ForwardTrace trace = cdj::forward(topo, p, batch);
    return double(
        cdj::total_cost(trace, topo, labels, {}, opt).breakdown.total);
  };

  Tape tape;
  cdj::ForwardTrace trace = cdj::forward(topo, params, batch, &tape);
  cdj::TotalCost cost = cdj::total_cost(trace, topo, labels, {}, opt);
  tape.backward(cost.total);

  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const Tensor got = trace.params.layers[l].filters.grad();
    const Tensor want = testutil::finite_diff(
        [&](const Tensor& t) {
          cdj::ParameterSet probe = params;
          probe.layers[l].filters = t;
          return loss_at(probe);
        },
        params.layers[l].filters);
    const testutil::CompareResult res = testutil::compare_elementwise(
        got, want, 1e-5, 1e-8, "layer " + std::to_string(l) + " filters");
    INFO(res.detail);
    REQUIRE(res.ok);
  }
}

TEST_CASE("auxiliary routing labels drive the routing terms") {
  const cdj::NetworkTopology topo = fixtures::toy_topology();
  const cdj::ParameterSet params = cdj::init_parameters(topo, 31);
  auto [batch, labels] = fixtures::toy_batch(4, 32);
  std::vector<int> aux(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) aux[i] = labels[i] == 2 ? 1 : 0;

  const cdj::ForwardTrace trace = cdj::forward(topo, params, batch);
  cdj::TotalCostOptions opt;
  opt.lambda1 = real(0.1);
  opt.lambda2 = real(0.1);
  opt.routing_classes = 2;
  const cdj::TotalCost with_aux = cdj::total_cost(trace, topo, labels, aux, opt);

  cdj::TotalCostOptions class_opt = opt;
  class_opt.routing_classes = 3;
  const cdj::TotalCost with_y = cdj::total_cost(trace, topo, labels, {}, class_opt);

  // same softmax term, different routing terms
  REQUIRE(with_aux.breakdown.training_cost == with_y.breakdown.training_cost);
  REQUIRE(with_aux.breakdown.layer_terms[0].routing !=
          with_y.breakdown.layer_terms[0].routing);
}
