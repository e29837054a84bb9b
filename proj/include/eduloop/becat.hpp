#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eduloop/common.hpp"
#include "eduloop/data_ingest.hpp"
#include "eduloop/ncd.hpp"
#include "json.hpp"

namespace eduloop::becat {

// Symmetric inter-item weights over a candidate pool. w(i,i) = c and every
// entry lies in [0, c].
struct WeightMatrix {
  Matrix w;
  double c = 0.0;
  std::vector<int> candidate_ids;

  // Position of `item` in candidate_ids, or -1.
  int index_of(int item) const;
  std::size_t size() const { return candidate_ids.size(); }

  bool operator==(const WeightMatrix&) const = default;
};

struct SelectionConfig {
  int budget = 10;
  double lambda_mix = 0.5;
  int n_samples = 16;
  double threshold = 0.6;
  double learning_rate = 0.1;  // step size of the ability update
  int max_pool = 512;
  std::uint64_t seed = 0;

  void validate() const;
};

// One hypothetical gradient step on theta under each label, weighted by the
// predicted probability:
//   EMC = p * |lr * g(1)| + (1 - p) * |lr * g(0)|.
double expected_model_change(const ncd::NcdModel& model,
                             std::span<const double> theta, int item,
                             std::span<const int> q_row, double lr);
double expected_model_change(const ncd::NcdModel& model, int student, int item,
                             std::span<const int> q_row, double lr);

// Monte Carlo estimate of W = C - E|grad_i - grad_j| with gradients taken
// w.r.t. theta. Each sample draws one uniform u shared by all items and sets
// item i's response to [u < p_i], so identical items always agree.
WeightMatrix weight_matrix(const ncd::NcdModel& model,
                           std::span<const double> theta,
                           std::span<const int> candidates, const QMatrix& q,
                           int n_samples, std::uint64_t seed);

// F(S) = sum over i not in S of max over j in S of w(i, j); F({}) = 0.
double info_score(const WeightMatrix& weight, std::span<const int> selected);

// F(S + q) - F(S).
double marginal_gain(const WeightMatrix& weight, std::span<const int> selected,
                     int item);

// Items covering a knowledge point below `threshold`, or a direct
// prerequisite of one. Falls back to the whole pool when nothing matches.
std::vector<int> filter_candidates(const QMatrix& q, const KnowledgeGraph& graph,
                                   std::span<const double> mastery_row,
                                   double threshold, std::span<const int> pool);

struct StepScore {
  int item = -1;
  double emc = 0.0;
  double gain = 0.0;
  double score = 0.0;
  double predicted_p = 0.5;
};

struct SelectionState {
  std::vector<double> theta;
  std::vector<int> candidate_ids;
  std::vector<int> selected;
  WeightMatrix weight;
  std::vector<double> emc_cache;  // aligned with candidate_ids
  bool emc_valid = false;
  int budget = 0;
  double lambda_mix = 0.5;
  double learning_rate = 0.1;
  std::vector<std::pair<int, int>> responses;  // (item, correct)

  bool is_selected(int item) const;
  bool exhausted() const;
};

// Builds a session over `pool`: pools above config.max_pool are cut to the
// top items by EMC at `theta` (ties by id), then W is estimated.
SelectionState start_selection(const ncd::NcdModel& model, const QMatrix& q,
                               std::vector<double> theta,
                               std::span<const int> pool,
                               const SelectionConfig& config);

// Argmax over unselected candidates of
//   lambda * norm(EMC) + (1 - lambda) * norm(gain)
// with min-max normalization over the unselected pool (constant -> 0) and
// ties to the smallest item id. Appends the choice to state.selected.
StepScore select_next(const ncd::NcdModel& model, const QMatrix& q,
                      SelectionState& state);

struct AbilityUpdate {
  std::vector<double> theta;
  double step_norm = 0.0;
};

// One gradient step on theta alone under the observed label. Items and the
// MLP stay frozen. Invalidates the EMC cache.
AbilityUpdate update_ability(const ncd::NcdModel& model, const QMatrix& q,
                             SelectionState& state, int item, int observed);

// One served item of a session trace; observed is -1 until answered.
struct TraceStep {
  int step = 0;
  int item = -1;
  double emc = 0.0;
  double gain = 0.0;
  double score = 0.0;
  double predicted_p = 0.5;
  int observed = -1;
  double theta_norm_change = 0.0;

  bool operator==(const TraceStep&) const = default;
};

// `items` maps dense ids to raw ids in the output when given.
nlohmann::json to_json(const TraceStep& step, const IdMap* items = nullptr);
TraceStep trace_step_from_json(const nlohmann::json& doc);
// One JSON object per line.
std::string to_jsonl(const std::vector<TraceStep>& trace, const IdMap* items = nullptr);

nlohmann::json to_json(const SelectionState& state);
SelectionState selection_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const StepScore& step);

}  // namespace eduloop::becat
