#include <cmath>

#include "doctest.h"
#include "eduloop/simulation.hpp"
#include "support.hpp"

using namespace eduloop;
using namespace eduloop::becat;

namespace {

// P(X >= k), X ~ Binomial(n, 1/2), from exact Pascal counts.
double upper_tail(int n, int k) {
  std::vector<double> row{1.0};
  for (int i = 0; i < n; ++i) {
    std::vector<double> next(row.size() + 1, 0.0);
    for (std::size_t j = 0; j < row.size(); ++j) {
      next[j] += row[j];
      next[j + 1] += row[j];
    }
    row = next;
  }
  double tail = 0;
  for (int j = k; j <= n; ++j) tail += row[static_cast<std::size_t>(j)];
  return tail / std::pow(2.0, n);
}

struct World {
  DataBundle data;
  ncd::NcdModel model;
  ResponseDataset held_out;
};

World make_world() {
  World w;
  w.data = testing::tiny_bundle(10);
  w.model = testing::random_model(10, 8, 4, 3);
  const auto split = split_dataset(w.data.dataset, 0.5, 0);
  w.held_out = split.test;
  return w;
}

}  // namespace

TEST_CASE("sign test matches the exact binomial tail") {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 1 + static_cast<int>(uniform_below(rng, 40));
    std::vector<double> a, b;
    int wins = 0, losses = 0;
    for (int i = 0; i < n; ++i) {
      const auto r = uniform_below(rng, 3);
      a.push_back(static_cast<double>(r));
      b.push_back(1.0);
      wins += r == 0;
      losses += r == 2;
    }
    const auto t = sign_test(a, b);
    CHECK(t.wins == wins);
    CHECK(t.losses == losses);
    CHECK(t.ties == n - wins - losses);
    if (wins + losses > 0) {
      CHECK(t.p_value == doctest::Approx(upper_tail(wins + losses, wins)).epsilon(1e-10));
    } else {
      CHECK(t.p_value == 1.0);
    }
  }
  CHECK(sign_test({0, 0, 0}, {1, 1, 1}).p_value == doctest::Approx(0.125));
  CHECK(sign_test({1, 1, 1}, {0, 0, 0}).p_value == doctest::Approx(1.0));
  CHECK_THROWS_AS(sign_test({1}, {1, 2}), Error);
}

TEST_CASE("policy names round-trip") {
  for (auto p : {Policy::becat, Policy::random, Policy::emc, Policy::gain}) {
    CHECK(policy_from_string(to_string(p)) == p);
  }
  CHECK_THROWS_AS(policy_from_string("fisher"), Error);
}

TEST_CASE("initial error is the distance to the replayed reference") {
  auto w = make_world();
  SimulationConfig cfg;
  cfg.n_students = 10;
  cfg.budget = 2;
  cfg.min_held_out = 1;
  const auto report = simulate(w.model, w.data, w.held_out, cfg);
  REQUIRE_FALSE(report.students.empty());
  for (std::size_t i = 0; i < report.students.size(); ++i) {
    const int s = report.students[i];
    std::vector<double> theta(w.model.theta_row(s).begin(), w.model.theta_row(s).end());
    const auto start = theta;
    for (const auto& r : w.held_out.records) {
      if (r.student != s) continue;
      const auto g = ncd::ability_gradient(w.model, theta, r.item, w.data.q_matrix.row(r.item),
                                           r.correct);
      for (std::size_t k = 0; k < theta.size(); ++k) theta[k] -= cfg.selection.learning_rate * g[k];
    }
    double d = 0;
    for (std::size_t k = 0; k < theta.size(); ++k) d += (theta[k] - start[k]) * (theta[k] - start[k]);
    CHECK(report.initial_error[i] == doctest::Approx(std::sqrt(d)).epsilon(1e-12));
  }
  for (const auto& r : report.results) {
    CHECK(r.mean_error.size() == 2);
    CHECK(r.final_error.size() == report.students.size());
  }
}

TEST_CASE("budget zero leaves every error at its initial value") {
  auto w = make_world();
  SimulationConfig cfg;
  cfg.n_students = 5;
  cfg.budget = 0;
  cfg.min_held_out = 1;
  const auto report = simulate(w.model, w.data, w.held_out, cfg);
  for (const auto& r : report.results) {
    CHECK(r.mean_error.empty());
    CHECK(r.final_error == report.initial_error);
  }
}

TEST_CASE("same seed gives the same report") {
  auto w = make_world();
  SimulationConfig cfg;
  cfg.n_students = 6;
  cfg.budget = 3;
  cfg.min_held_out = 2;
  cfg.seed = 5;
  for (auto scope : {PoolScope::held_out, PoolScope::all}) {
    cfg.pool = scope;
    const auto a = to_json(simulate(w.model, w.data, w.held_out, cfg), cfg, w.data.maps);
    const auto b = to_json(simulate(w.model, w.data, w.held_out, cfg), cfg, w.data.maps);
    CHECK(a.dump() == b.dump());
  }
}

TEST_CASE("students below the held-out minimum are skipped") {
  auto w = make_world();
  SimulationConfig cfg;
  cfg.n_students = 10;
  cfg.budget = 2;
  cfg.min_held_out = 100;
  CHECK(simulate(w.model, w.data, w.held_out, cfg).students.empty());
  cfg.budget = -1;
  CHECK_THROWS_AS(simulate(w.model, w.data, w.held_out, cfg), Error);
}
