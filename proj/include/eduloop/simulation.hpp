#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eduloop/becat.hpp"
#include "eduloop/data_ingest.hpp"
#include "eduloop/ncd.hpp"
#include "json.hpp"

namespace eduloop::becat {

enum class Policy { becat, random, emc, gain };

const char* to_string(Policy policy);
Policy policy_from_string(const std::string& name);

// Which items a simulated session may pick from.
enum class PoolScope {
  held_out,  // the student's held-out items (every answer is logged)
  all,       // every item; unlogged answers are drawn from the model
};

struct SimulationConfig {
  std::vector<Policy> policies{Policy::becat, Policy::random, Policy::emc,
                               Policy::gain};
  int n_students = 100;
  int budget = 10;
  std::uint64_t seed = 0;
  PoolScope pool = PoolScope::held_out;
  // Students need at least this many distinct held-out items; 0 means
  // 2 * budget, so every policy has a real choice to make.
  int min_held_out = 0;
  SelectionConfig selection;  // budget and seed are taken from above
};

struct PolicyResult {
  Policy policy = Policy::becat;
  std::vector<double> mean_error;  // after step 1..budget
  std::vector<double> final_error;  // per student, aligned with students
};

// One-sided sign test of "a below b" over paired values; ties dropped.
struct SignTest {
  int wins = 0;
  int losses = 0;
  int ties = 0;
  double p_value = 1.0;
};
SignTest sign_test(const std::vector<double>& a, const std::vector<double>& b);

struct SimulationReport {
  std::vector<int> students;
  std::vector<double> initial_error;
  std::vector<PolicyResult> results;

  const PolicyResult& result(Policy policy) const;
};

// Offline replay of adaptive sessions. Each sampled student starts from the
// model's ability row, which never saw the held-out responses. The reference
// is the full-data estimate: the same update rule applied to every held-out
// response in log order. The policy then picks `budget` items from the
// filtered pool; answers come from the held-out log, or for unlogged items
// (PoolScope::all) from Bernoulli(p) under the reference, drawn from a
// stream keyed by (seed, student, item) so every policy sees the same answer
// to the same item. Error is |theta_session - theta_reference|_2.
SimulationReport simulate(const ncd::NcdModel& model, const DataBundle& data,
                          const ResponseDataset& held_out,
                          const SimulationConfig& config);

nlohmann::json to_json(const SimulationReport& report,
                       const SimulationConfig& config, const IdMaps& maps);

}  // namespace eduloop::becat
