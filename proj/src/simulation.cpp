#include "eduloop/simulation.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace eduloop::becat {

namespace {

std::uint64_t mix(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double keyed_uniform(std::uint64_t seed, int student, int item) {
  const std::uint64_t h =
      mix(mix(seed ^ 0xA5A5A5A5ULL) ^ mix(static_cast<std::uint64_t>(student) << 32 |
                                          static_cast<std::uint32_t>(item)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

const char* to_string(Policy policy) {
  switch (policy) {
    case Policy::becat:
      return "becat";
    case Policy::random:
      return "random";
    case Policy::emc:
      return "emc";
    case Policy::gain:
      return "gain";
  }
  return "unknown";
}

Policy policy_from_string(const std::string& name) {
  for (Policy p : {Policy::becat, Policy::random, Policy::emc, Policy::gain}) {
    if (name == to_string(p)) return p;
  }
  throw Error(ErrorKind::usage, "unknown policy '" + name + "'");
}

SignTest sign_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error(ErrorKind::usage, "sign test: unpaired samples");
  SignTest t;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] < b[i]) {
      ++t.wins;
    } else if (a[i] > b[i]) {
      ++t.losses;
    } else {
      ++t.ties;
    }
  }
  const int n = t.wins + t.losses;
  if (n == 0) return t;
  // P(X >= wins) for X ~ Binomial(n, 1/2), summed in log space.
  double p = 0.0;
  for (int k = t.wins; k <= n; ++k) {
    const double log_term = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) -
                            std::lgamma(n - k + 1.0) - n * std::log(2.0);
    p += std::exp(log_term);
  }
  t.p_value = std::min(1.0, p);
  return t;
}

const PolicyResult& SimulationReport::result(Policy policy) const {
  for (const auto& r : results) {
    if (r.policy == policy) return r;
  }
  throw Error(ErrorKind::not_found, std::string("policy not simulated: ") + to_string(policy));
}

SimulationReport simulate(const ncd::NcdModel& model, const DataBundle& data,
                          const ResponseDataset& held_out,
                          const SimulationConfig& config) {
  if (config.budget < 0) throw Error(ErrorKind::usage, "budget must be >= 0");
  if (config.n_students < 0) throw Error(ErrorKind::usage, "n_students must be >= 0");
  config.selection.validate();
  const auto& q = data.q_matrix;

  // Held-out log per student in order; the first answer to an item wins.
  std::map<int, std::vector<std::pair<int, int>>> logs;
  for (const auto& r : held_out.records) {
    if (r.student < model.n_students) logs[r.student].emplace_back(r.item, r.correct);
  }
  const std::size_t min_items = static_cast<std::size_t>(
      config.min_held_out > 0 ? config.min_held_out : 2 * config.budget);

  std::vector<int> eligible;
  std::map<int, std::map<int, int>> answers;
  for (const auto& [student, log] : logs) {
    auto& a = answers[student];
    for (const auto& [item, correct] : log) a.try_emplace(item, correct);
    if (a.size() >= std::max<std::size_t>(min_items, 1)) eligible.push_back(student);
  }
  Rng pick(config.seed);
  shuffle(eligible, pick);
  if (static_cast<int>(eligible.size()) > config.n_students) {
    eligible.resize(static_cast<std::size_t>(config.n_students));
  }
  std::sort(eligible.begin(), eligible.end());
  if (static_cast<int>(eligible.size()) < config.n_students) {
    spdlog::warn("simulation: only {} students have >= {} held-out items ({} requested)",
                 eligible.size(), min_items, config.n_students);
  }

  SimulationReport report;
  report.students = eligible;
  std::vector<int> all_items(static_cast<std::size_t>(model.n_items));
  std::iota(all_items.begin(), all_items.end(), 0);

  // Per-student fixtures shared by every policy.
  struct Fixture {
    std::vector<double> start;
    std::vector<double> reference;
    std::vector<int> pool;
  };
  std::vector<Fixture> fixtures;
  for (int student : eligible) {
    Fixture f;
    const auto row = model.theta_row(student);
    f.start.assign(row.begin(), row.end());
    SelectionState replay;
    replay.theta = f.start;
    replay.learning_rate = config.selection.learning_rate;
    for (const auto& [item, correct] : logs[student]) {
      update_ability(model, q, replay, item, correct);
    }
    f.reference = replay.theta;
    std::vector<double> mastery(f.start.size());
    for (std::size_t k = 0; k < mastery.size(); ++k) mastery[k] = sigmoid(f.start[k]);
    std::vector<int> scope;
    if (config.pool == PoolScope::all) {
      scope = all_items;
    } else {
      for (const auto& [item, correct] : answers[student]) scope.push_back(item);
    }
    f.pool = filter_candidates(q, data.graph, mastery, config.selection.threshold, scope);
    report.initial_error.push_back(distance(f.start, f.reference));
    fixtures.push_back(std::move(f));
  }

  for (Policy policy : config.policies) {
    PolicyResult result;
    result.policy = policy;
    result.mean_error.assign(static_cast<std::size_t>(config.budget), 0.0);
    for (std::size_t si = 0; si < eligible.size(); ++si) {
      const int student = eligible[si];
      const auto& f = fixtures[si];
      SelectionConfig sel = config.selection;
      sel.budget = config.budget;
      sel.seed = mix(config.seed ^ static_cast<std::uint64_t>(student));
      if (policy == Policy::emc) sel.lambda_mix = 1.0;
      if (policy == Policy::gain) sel.lambda_mix = 0.0;
      SelectionState state = start_selection(model, q, f.start, f.pool, sel);
      Rng random_pick(mix(sel.seed + 17));
      const auto& logged = answers[student];
      double err = distance(state.theta, f.reference);
      for (int step = 0; step < config.budget; ++step) {
        if (!state.exhausted()) {
          int item;
          if (policy == Policy::random) {
            std::vector<int> open;
            for (int c : state.candidate_ids) {
              if (!state.is_selected(c)) open.push_back(c);
            }
            item = open[uniform_below(random_pick, open.size())];
            state.selected.push_back(item);
          } else {
            item = select_next(model, q, state).item;
          }
          int observed;
          if (auto it = logged.find(item); it != logged.end()) {
            observed = it->second;
          } else {
            const double p = ncd::predict(model, f.reference, item, q.row(item));
            observed = keyed_uniform(config.seed, student, item) < p ? 1 : 0;
          }
          update_ability(model, q, state, item, observed);
          err = distance(state.theta, f.reference);
        }
        result.mean_error[static_cast<std::size_t>(step)] += err;
      }
      result.final_error.push_back(err);
    }
    if (!eligible.empty()) {
      for (auto& e : result.mean_error) e /= static_cast<double>(eligible.size());
    }
    report.results.push_back(std::move(result));
  }
  return report;
}

nlohmann::json to_json(const SimulationReport& report,
                       const SimulationConfig& config, const IdMaps& maps) {
  nlohmann::json students = nlohmann::json::array();
  for (int s : report.students) students.push_back(maps.students.raw(s));
  nlohmann::json policies = nlohmann::json::object();
  for (const auto& r : report.results) {
    const double final_mean =
        r.final_error.empty()
            ? 0.0
            : std::accumulate(r.final_error.begin(), r.final_error.end(), 0.0) /
                  static_cast<double>(r.final_error.size());
    policies[to_string(r.policy)] = {{"mean_error_curve", r.mean_error},
                                     {"final_mean_error", final_mean},
                                     {"final_error", r.final_error}};
  }
  nlohmann::json comparisons = nlohmann::json::object();
  const auto has = [&](Policy p) {
    return std::any_of(report.results.begin(), report.results.end(),
                       [&](const PolicyResult& r) { return r.policy == p; });
  };
  if (has(Policy::random)) {
    for (Policy p : {Policy::becat, Policy::emc, Policy::gain}) {
      if (!has(p)) continue;
      const auto t = sign_test(report.result(p).final_error,
                               report.result(Policy::random).final_error);
      comparisons[std::string(to_string(p)) + "_vs_random"] = {
          {"wins", t.wins}, {"losses", t.losses}, {"ties", t.ties},
          {"p_value", t.p_value}};
    }
  }
  return {{"seed", config.seed},
          {"budget", config.budget},
          {"n_students", report.students.size()},
          {"lambda_mix", config.selection.lambda_mix},
          {"learning_rate", config.selection.learning_rate},
          {"n_samples", config.selection.n_samples},
          {"pool", config.pool == PoolScope::all ? "all" : "held_out"},
          {"min_held_out", config.min_held_out > 0 ? config.min_held_out : 2 * config.budget},
          {"students", students},
          {"initial_mean_error",
           report.initial_error.empty()
               ? 0.0
               : std::accumulate(report.initial_error.begin(),
                                 report.initial_error.end(), 0.0) /
                     static_cast<double>(report.initial_error.size())},
          {"policies", policies},
          {"comparisons", comparisons}};
}

}  // namespace eduloop::becat
