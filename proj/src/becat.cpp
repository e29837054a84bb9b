#include "eduloop/becat.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace eduloop::becat {

namespace {

// Sparse ability gradient direction of one item: dz/dtheta on the item's
// knowledge row.
struct ItemJacobian {
  std::vector<int> row;
  std::vector<double> values;  // aligned with row
  double p = 0.5;
  double slope_correct = 0.0;    // dLoss/dz when the response is 1
  double slope_incorrect = 0.0;  // ... when 0
};

ItemJacobian item_jacobian(const ncd::NcdModel& model,
                           std::span<const double> theta, int item,
                           const QMatrix& q) {
  const auto& row = q.row(item);
  const auto jac = ncd::ability_jacobian(model, theta, item, row);
  ItemJacobian out;
  out.row = row;
  out.p = jac.probability;
  out.slope_correct = ncd::loss_slope(jac.probability, 1);
  out.slope_incorrect = ncd::loss_slope(jac.probability, 0);
  for (int k : row) out.values.push_back(jac.dz_dtheta[static_cast<std::size_t>(k)]);
  return out;
}

// |a * Ji - b * Jj| over the union of both supports.
double scaled_distance(const ItemJacobian& i, double a, const ItemJacobian& j,
                       double b) {
  double sum = 0.0;
  std::size_t x = 0;
  std::size_t y = 0;
  while (x < i.row.size() || y < j.row.size()) {
    double diff;
    if (y == j.row.size() || (x < i.row.size() && i.row[x] < j.row[y])) {
      diff = a * i.values[x++];
    } else if (x == i.row.size() || j.row[y] < i.row[x]) {
      diff = -b * j.values[y++];
    } else {
      diff = a * i.values[x++] - b * j.values[y++];
    }
    sum += diff * diff;
  }
  return std::sqrt(sum);
}

std::vector<std::size_t> positions(const WeightMatrix& weight,
                                   std::span<const int> selected) {
  std::vector<std::size_t> pos;
  pos.reserve(selected.size());
  for (int item : selected) {
    const int idx = weight.index_of(item);
    if (idx < 0) {
      throw Error(ErrorKind::not_found,
                  "item " + std::to_string(item) + " is not a candidate");
    }
    if (std::find(pos.begin(), pos.end(), static_cast<std::size_t>(idx)) != pos.end()) {
      throw Error(ErrorKind::usage,
                  "item " + std::to_string(item) + " listed twice in selection");
    }
    pos.push_back(static_cast<std::size_t>(idx));
  }
  return pos;
}

// Min-max normalization; a constant vector maps to zeros.
std::vector<double> normalized(const std::vector<double>& v) {
  if (v.empty()) return {};
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double range = *hi - *lo;
  std::vector<double> out(v.size(), 0.0);
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / range;
  return out;
}

void refresh_emc(const ncd::NcdModel& model, const QMatrix& q,
                 SelectionState& state) {
  if (state.emc_valid && state.emc_cache.size() == state.candidate_ids.size()) return;
  state.emc_cache.resize(state.candidate_ids.size());
  for (std::size_t i = 0; i < state.candidate_ids.size(); ++i) {
    const int item = state.candidate_ids[i];
    state.emc_cache[i] = state.is_selected(item)
                             ? 0.0
                             : expected_model_change(model, state.theta, item,
                                                     q.row(item), state.learning_rate);
  }
  state.emc_valid = true;
}

}  // namespace

int WeightMatrix::index_of(int item) const {
  auto it = std::lower_bound(candidate_ids.begin(), candidate_ids.end(), item);
  if (it != candidate_ids.end() && *it == item) {
    return static_cast<int>(it - candidate_ids.begin());
  }
  // Candidate lists built outside start_selection may be unsorted.
  auto lin = std::find(candidate_ids.begin(), candidate_ids.end(), item);
  return lin == candidate_ids.end() ? -1 : static_cast<int>(lin - candidate_ids.begin());
}

void SelectionConfig::validate() const {
  if (budget < 0) throw Error(ErrorKind::usage, "budget must be >= 0");
  if (!(lambda_mix >= 0.0 && lambda_mix <= 1.0)) {
    throw Error(ErrorKind::usage, "lambda_mix must lie in [0,1]");
  }
  if (n_samples < 1) throw Error(ErrorKind::usage, "n_samples must be positive");
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw Error(ErrorKind::usage, "threshold must lie in [0,1]");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorKind::usage, "selection learning rate must be positive");
  }
  if (max_pool < 1) throw Error(ErrorKind::usage, "max_pool must be positive");
}

double expected_model_change(const ncd::NcdModel& model,
                             std::span<const double> theta, int item,
                             std::span<const int> q_row, double lr) {
  if (!(lr >= 0.0)) throw Error(ErrorKind::usage, "EMC learning rate must be >= 0");
  const auto jac = ncd::ability_jacobian(model, theta, item, q_row);
  const double norm_j = l2_norm(jac.dz_dtheta);
  const double p = jac.probability;
  const double step_correct = lr * std::abs(ncd::loss_slope(p, 1)) * norm_j;
  const double step_incorrect = lr * std::abs(ncd::loss_slope(p, 0)) * norm_j;
  return p * step_correct + (1.0 - p) * step_incorrect;
}

double expected_model_change(const ncd::NcdModel& model, int student, int item,
                             std::span<const int> q_row, double lr) {
  return expected_model_change(model, model.theta_row(student), item, q_row, lr);
}

WeightMatrix weight_matrix(const ncd::NcdModel& model,
                           std::span<const double> theta,
                           std::span<const int> candidates, const QMatrix& q,
                           int n_samples, std::uint64_t seed) {
  if (candidates.empty()) throw Error(ErrorKind::usage, "empty candidate pool");
  if (n_samples < 1) throw Error(ErrorKind::usage, "n_samples must be positive");
  const std::size_t m = candidates.size();
  std::vector<ItemJacobian> jac;
  jac.reserve(m);
  for (int item : candidates) jac.push_back(item_jacobian(model, theta, item, q));

  Matrix dist(m, m, 0.0);
  Rng rng(seed);
  std::vector<double> slope(m);
  for (int t = 0; t < n_samples; ++t) {
    const double u = uniform01(rng);
    for (std::size_t i = 0; i < m; ++i) {
      slope[i] = u < jac[i].p ? jac[i].slope_correct : jac[i].slope_incorrect;
    }
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = i + 1; j < m; ++j) {
        dist(i, j) += scaled_distance(jac[i], slope[i], jac[j], slope[j]);
      }
    }
  }

  WeightMatrix out;
  out.candidate_ids.assign(candidates.begin(), candidates.end());
  out.w = Matrix(m, m, 0.0);
  const double inv = 1.0 / static_cast<double>(n_samples);
  double c = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      dist(i, j) *= inv;
      c = std::max(c, dist(i, j));
    }
  }
  out.c = c;
  for (std::size_t i = 0; i < m; ++i) {
    out.w(i, i) = c;
    for (std::size_t j = i + 1; j < m; ++j) {
      out.w(i, j) = c - dist(i, j);
      out.w(j, i) = out.w(i, j);
    }
  }
  return out;
}

double info_score(const WeightMatrix& weight, std::span<const int> selected) {
  const auto pos = positions(weight, selected);
  if (pos.empty()) return 0.0;
  std::vector<char> in_s(weight.size(), 0);
  for (auto p : pos) in_s[p] = 1;
  double total = 0.0;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    if (in_s[i]) continue;
    double best = -std::numeric_limits<double>::infinity();
    for (auto j : pos) best = std::max(best, weight.w(i, j));
    total += best;
  }
  return total;
}

double marginal_gain(const WeightMatrix& weight, std::span<const int> selected,
                     int item) {
  if (weight.index_of(item) < 0) {
    throw Error(ErrorKind::not_found,
                "item " + std::to_string(item) + " is not a candidate");
  }
  if (std::find(selected.begin(), selected.end(), item) != selected.end()) {
    throw Error(ErrorKind::conflict,
                "item " + std::to_string(item) + " already selected");
  }
  std::vector<int> with(selected.begin(), selected.end());
  with.push_back(item);
  return info_score(weight, with) - info_score(weight, selected);
}

std::vector<int> filter_candidates(const QMatrix& q, const KnowledgeGraph& graph,
                                   std::span<const double> mastery_row,
                                   double threshold, std::span<const int> pool) {
  std::set<int> targets;
  for (std::size_t k = 0; k < mastery_row.size(); ++k) {
    if (mastery_row[k] < threshold) targets.insert(static_cast<int>(k));
  }
  std::vector<int> prereqs;
  for (const auto& e : graph.edges) {
    if (targets.count(e.dst)) prereqs.push_back(e.src);
  }
  targets.insert(prereqs.begin(), prereqs.end());

  std::vector<int> kept;
  if (!targets.empty()) {
    for (int item : pool) {
      const auto& row = q.row(item);
      if (std::any_of(row.begin(), row.end(),
                      [&](int k) { return targets.count(k) > 0; })) {
        kept.push_back(item);
      }
    }
  }
  if (kept.empty()) return {pool.begin(), pool.end()};
  return kept;
}

bool SelectionState::is_selected(int item) const {
  return std::find(selected.begin(), selected.end(), item) != selected.end();
}

bool SelectionState::exhausted() const {
  return static_cast<int>(selected.size()) >= budget ||
         selected.size() >= candidate_ids.size();
}

SelectionState start_selection(const ncd::NcdModel& model, const QMatrix& q,
                               std::vector<double> theta,
                               std::span<const int> pool,
                               const SelectionConfig& config) {
  config.validate();
  if (static_cast<int>(theta.size()) != model.dim()) {
    throw Error(ErrorKind::data, "ability vector length does not match model");
  }
  SelectionState state;
  state.theta = std::move(theta);
  state.budget = config.budget;
  state.lambda_mix = config.lambda_mix;
  state.learning_rate = config.learning_rate;

  std::vector<int> candidates(pool.begin(), pool.end());
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  if (candidates.empty()) throw Error(ErrorKind::usage, "empty candidate pool");
  if (static_cast<int>(candidates.size()) > config.max_pool) {
    std::vector<std::pair<double, int>> ranked;
    ranked.reserve(candidates.size());
    for (int item : candidates) {
      ranked.emplace_back(expected_model_change(model, state.theta, item, q.row(item),
                                                config.learning_rate),
                          item);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    ranked.resize(static_cast<std::size_t>(config.max_pool));
    candidates.clear();
    for (const auto& r : ranked) candidates.push_back(r.second);
    std::sort(candidates.begin(), candidates.end());
  }
  state.candidate_ids = candidates;
  state.weight = weight_matrix(model, state.theta, candidates, q, config.n_samples,
                               config.seed);
  return state;
}

StepScore select_next(const ncd::NcdModel& model, const QMatrix& q,
                      SelectionState& state) {
  if (static_cast<int>(state.selected.size()) >= state.budget) {
    throw Error(ErrorKind::finished, "selection budget exhausted");
  }
  refresh_emc(model, q, state);
  const auto& weight = state.weight;
  const std::size_t m = weight.size();

  // Coverage of each candidate by the current selection; F(S) and F(S + q)
  // are summed in index order, matching info_score.
  std::vector<char> in_s(m, 0);
  std::vector<double> cover(m, -std::numeric_limits<double>::infinity());
  for (int item : state.selected) {
    const int j = weight.index_of(item);
    if (j < 0) throw Error(ErrorKind::data, "selected item outside candidate pool");
    in_s[static_cast<std::size_t>(j)] = 1;
  }
  double base = 0.0;
  if (!state.selected.empty()) {
    for (std::size_t i = 0; i < m; ++i) {
      for (int item : state.selected) {
        cover[i] = std::max(cover[i], weight.w(i, static_cast<std::size_t>(weight.index_of(item))));
      }
    }
    for (std::size_t i = 0; i < m; ++i) {
      if (!in_s[i]) base += cover[i];
    }
  }

  std::vector<std::size_t> open;
  std::vector<double> emc;
  std::vector<double> gain;
  for (std::size_t qi = 0; qi < m; ++qi) {
    if (in_s[qi]) continue;
    double with = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (in_s[i] || i == qi) continue;
      with += state.selected.empty() ? weight.w(i, qi) : std::max(cover[i], weight.w(i, qi));
    }
    open.push_back(qi);
    emc.push_back(state.emc_cache[qi]);
    gain.push_back(with - base);
  }
  if (open.empty()) throw Error(ErrorKind::finished, "no unselected candidates left");

  const auto emc_n = normalized(emc);
  const auto gain_n = normalized(gain);
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < open.size(); ++k) {
    const double score =
        state.lambda_mix * emc_n[k] + (1.0 - state.lambda_mix) * gain_n[k];
    const int item = weight.candidate_ids[open[k]];
    if (score > best_score ||
        (score == best_score && item < weight.candidate_ids[open[best]])) {
      best = k;
      best_score = score;
    }
  }

  StepScore step;
  step.item = weight.candidate_ids[open[best]];
  step.emc = emc[best];
  step.gain = gain[best];
  step.score = best_score;
  step.predicted_p = ncd::predict(model, state.theta, step.item, q.row(step.item));
  state.selected.push_back(step.item);
  state.emc_cache[open[best]] = 0.0;
  return step;
}

AbilityUpdate update_ability(const ncd::NcdModel& model, const QMatrix& q,
                             SelectionState& state, int item, int observed) {
  if (observed != 0 && observed != 1) {
    throw Error(ErrorKind::usage, "observed response must be 0 or 1");
  }
  const auto grad = ncd::ability_gradient(model, state.theta, item, q.row(item), observed);
  AbilityUpdate out;
  double sq = 0.0;
  for (std::size_t k = 0; k < grad.size(); ++k) {
    const double delta = state.learning_rate * grad[k];
    state.theta[k] -= delta;
    sq += delta * delta;
  }
  out.step_norm = std::sqrt(sq);
  out.theta = state.theta;
  state.responses.emplace_back(item, observed);
  state.emc_valid = false;
  return out;
}

nlohmann::json to_json(const SelectionState& s) {
  return {{"theta", s.theta},
          {"candidate_ids", s.candidate_ids},
          {"selected", s.selected},
          {"weight", {{"c", s.weight.c}, {"w", s.weight.w.data}}},
          {"budget", s.budget},
          {"lambda_mix", s.lambda_mix},
          {"learning_rate", s.learning_rate},
          {"responses", s.responses}};
}

SelectionState selection_from_json(const nlohmann::json& doc) {
  SelectionState s;
  s.theta = doc.at("theta").get<std::vector<double>>();
  s.candidate_ids = doc.at("candidate_ids").get<std::vector<int>>();
  s.selected = doc.at("selected").get<std::vector<int>>();
  s.weight.candidate_ids = s.candidate_ids;
  s.weight.c = doc.at("weight").at("c").get<double>();
  const auto m = s.candidate_ids.size();
  s.weight.w.rows = m;
  s.weight.w.cols = m;
  s.weight.w.data = doc.at("weight").at("w").get<std::vector<double>>();
  if (s.weight.w.data.size() != m * m) {
    throw Error(ErrorKind::data, "weight matrix size does not match candidates");
  }
  s.budget = doc.at("budget").get<int>();
  s.lambda_mix = doc.at("lambda_mix").get<double>();
  s.learning_rate = doc.at("learning_rate").get<double>();
  s.responses = doc.at("responses").get<std::vector<std::pair<int, int>>>();
  return s;
}

nlohmann::json to_json(const TraceStep& t, const IdMap* items) {
  nlohmann::json id = items ? nlohmann::json(items->raw(t.item)) : nlohmann::json(t.item);
  return {{"step", t.step},
          {"item_id", id},
          {"emc", t.emc},
          {"gain", t.gain},
          {"score", t.score},
          {"predicted_p", t.predicted_p},
          {"observed", t.observed < 0 ? nlohmann::json(nullptr) : nlohmann::json(t.observed)},
          {"theta_norm_change", t.theta_norm_change}};
}

TraceStep trace_step_from_json(const nlohmann::json& doc) {
  TraceStep t;
  t.step = doc.at("step").get<int>();
  t.item = doc.at("item_id").get<int>();
  t.emc = doc.at("emc").get<double>();
  t.gain = doc.at("gain").get<double>();
  t.score = doc.at("score").get<double>();
  t.predicted_p = doc.at("predicted_p").get<double>();
  t.observed = doc.at("observed").is_null() ? -1 : doc.at("observed").get<int>();
  t.theta_norm_change = doc.at("theta_norm_change").get<double>();
  return t;
}

std::string to_jsonl(const std::vector<TraceStep>& trace, const IdMap* items) {
  std::string out;
  for (const auto& t : trace) out += to_json(t, items).dump() + "\n";
  return out;
}

nlohmann::json to_json(const StepScore& step) {
  return {{"item", step.item},
          {"emc", step.emc},
          {"gain", step.gain},
          {"score", step.score},
          {"predicted_p", step.predicted_p}};
}

}  // namespace eduloop::becat
