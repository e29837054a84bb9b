// Acceptance run: one PASS/FAIL line per primary criterion. Uses the
// synthetic desk-scale export unless EDULOOP_ASSISTMENTS_CSV names a real one.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "eduloop/becat.hpp"
#include "eduloop/cli.hpp"
#include "eduloop/feedback.hpp"
#include "eduloop/ncd.hpp"
#include "eduloop/session_service.hpp"
#include "eduloop/simulation.hpp"
#include "mock_llm.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace eduloop;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "PASS" : "FAIL") << "  " << name << "  " << detail << std::endl;
  if (!pass) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int quiet_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int rc = cli::run(args, out, err);
  if (rc != 0) std::cerr << err.str();
  spdlog::set_level(spdlog::level::err);
  return rc;
}

bool well_formed(const feedback::FeedbackReport& r) {
  if (r.mastery_analysis.empty() || r.recommendation_evaluation.empty() ||
      r.learning_suggestions.empty()) {
    return false;
  }
  for (const auto& b : r.learning_suggestions) {
    if (b.empty() || b.size() > feedback::kMaxBulletChars) return false;
  }
  return feedback::parse_feedback(feedback::to_text(r)).has_value();
}

DataBundle prepare_data(const testing::TempDir& dir) {
  const auto data = (dir / "data").string();
  if (const char* real = std::getenv("EDULOOP_ASSISTMENTS_CSV"); real && *real) {
    std::cout << "data: " << real << std::endl;
    if (quiet_cli({"ingest", "--log", real, "--out", data}) != 0) std::exit(1);
  } else {
    std::cout << "data: synthetic desk-scale export (2000 students, ~50000 interactions)"
              << std::endl;
    const auto raw = (dir / "raw").string();
    if (quiet_cli({"synth", "--out", raw}) != 0) std::exit(1);
    if (quiet_cli({"ingest", "--log", raw + "/raw_log.csv", "--graph",
                   raw + "/raw_knowledge_graph.csv", "--item-texts", raw + "/raw_item_texts.csv",
                   "--out", data}) != 0) {
      std::exit(1);
    }
  }
  return load_canonical(data);
}

void training_criteria(const DataBundle& data, ncd::NcdModel& trained) {
  const auto split = split_dataset(data.dataset, 0.2, 0);
  ncd::TrainConfig cfg;
  cfg.epochs = 10;
  const auto t0 = Clock::now();
  auto result = ncd::fit(split.train, split.test, data.q_matrix, cfg);
  const double secs = seconds_since(t0);

  bool smooth = true;
  std::string losses;
  for (std::size_t e = 0; e < result.history.size(); ++e) {
    losses += (e ? "," : "") + fmt("%.4f", result.history[e].train_loss);
    if (e > 0 && result.history[e].train_loss > result.history[e - 1].train_loss + 0.01) {
      smooth = false;
    }
  }
  report("training dynamics", smooth && secs < 600 && result.history.size() == 10,
         "10 epochs in " + fmt("%.1f", secs) + " s; train loss " + losses);

  const auto& last = result.history.back().valid;
  report("predictive quality", last.auc >= 0.70 && last.acc >= 0.68,
         "valid AUC " + fmt("%.4f", last.auc) + " (>= 0.70), ACC " +
             fmt("%.4f", last.acc) + " (>= 0.68)");
  trained = std::move(result.model);
}

void gradient_criterion(const DataBundle& data) {
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ncd::TrainConfig cfg;
    cfg.seed = seed;
    auto model = ncd::init_model(data.dataset.n_students, data.dataset.n_items,
                                 data.dataset.n_knowledge, cfg);
    ncd::match_base_rate(model, 0.6);
    Rng rng(seed);
    std::vector<ResponseRecord> sample;
    for (int i = 0; i < 16; ++i) {
      sample.push_back(data.dataset.records[uniform_below(rng, data.dataset.records.size())]);
    }
    worst = std::max(worst, ncd::grad_check(model, sample, data.q_matrix, 1e-5));
    // A model far from initialization exercises every curvature regime.
    Rng small(seed);
    const auto q = testing::random_q(12, 5, small);
    const auto records = testing::random_records(6, 12, 5, 16, small);
    worst = std::max(worst, ncd::grad_check(testing::random_model(6, 12, 5, seed), records.records, q,
                                            1e-5));
  }
  report("gradient correctness", worst < 1e-4,
         "max relative error " + fmt("%.3e", worst) + " over 5 seeds (< 1e-4)");
}

void monotonicity_criterion(const DataBundle& data, const ncd::NcdModel& model) {
  Rng rng(2024);
  int violations = 0;
  for (int probe = 0; probe < 1000; ++probe) {
    const int s = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(model.n_students)));
    const int item = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(model.n_items)));
    const auto& row = data.q_matrix.row(item);
    const int k = row[uniform_below(rng, row.size())];
    std::vector<double> theta(model.theta_row(s).begin(), model.theta_row(s).end());
    const double before = ncd::predict(model, theta, item, row);
    theta[static_cast<std::size_t>(k)] += uniform(rng, 1e-3, 2.0);
    if (ncd::predict(model, theta, item, row) < before) ++violations;
  }
  report("monotonicity", violations == 0, std::to_string(violations) + " violations in 1000 probes");
}

void emc_criterion(const DataBundle& data, const ncd::NcdModel& model) {
  Rng rng(77);
  double worst = 0;
  for (int pair = 0; pair < 100; ++pair) {
    const int s = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(model.n_students)));
    const int item = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(model.n_items)));
    const double emc = becat::expected_model_change(model, s, item, data.q_matrix.row(item), 0.1);
    const double oracle = testing::emc_oracle(model, data.q_matrix, s, item, 0.1);
    worst = std::max(worst, testing::rel_err(emc, oracle));
  }
  report("EMC oracle", worst < 1e-10,
         "max relative error " + fmt("%.3e", worst) + " on 100 (student, item) pairs (< 1e-10)");
}

void selection_math_criterion(const DataBundle& data, const ncd::NcdModel& model) {
  Rng rng(91);
  auto pick_items = [&](std::size_t n) {
    std::set<int> items;
    while (items.size() < n) {
      items.insert(static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(model.n_items))));
    }
    return std::vector<int>(items.begin(), items.end());
  };
  auto pick_student = [&] {
    return static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(model.n_students)));
  };

  double w_err = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const int s = pick_student();
    const auto items = pick_items(3);
    const auto theta = model.theta_row(s);
    const auto w = becat::weight_matrix(model, theta, items, data.q_matrix, 64, trial);
    double c = 0;
    const auto oracle = testing::weight_oracle(model, data.q_matrix, s, items, 64, trial, &c);
    w_err = std::max(w_err, std::abs(w.c - c));
    for (std::size_t i = 0; i < oracle.data.size(); ++i) {
      w_err = std::max(w_err, std::abs(w.w.data[i] - oracle.data[i]));
    }
  }

  long gain_checks = 0, gain_mismatch = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const int s = pick_student();
    const auto items = pick_items(6);
    const auto w = becat::weight_matrix(model, model.theta_row(s), items, data.q_matrix, 16, trial);
    for (unsigned mask = 0; mask < 64; ++mask) {
      std::vector<int> ids, local;
      for (int i = 0; i < 6; ++i) {
        if (mask & (1u << i)) {
          ids.push_back(items[static_cast<std::size_t>(i)]);
          local.push_back(i);
        }
      }
      for (int qi = 0; qi < 6; ++qi) {
        if (mask & (1u << qi)) continue;
        auto with = local;
        with.push_back(qi);
        const double expect = testing::f_oracle(w.w, with) - testing::f_oracle(w.w, local);
        const double got = becat::marginal_gain(w, ids, items[static_cast<std::size_t>(qi)]);
        ++gain_checks;
        if (std::abs(got - expect) > 1e-12 * std::max(1.0, std::abs(expect))) ++gain_mismatch;
      }
    }
  }

  int greedy_runs = 0, greedy_mismatch = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int s = pick_student();
    const auto items = pick_items(8);
    becat::SelectionConfig cfg;
    cfg.lambda_mix = 0.0;
    cfg.budget = 8;
    cfg.seed = static_cast<std::uint64_t>(trial);
    std::vector<double> theta(model.theta_row(s).begin(), model.theta_row(s).end());
    auto state = becat::start_selection(model, data.q_matrix, theta, items, cfg);
    std::vector<int> chosen;
    bool same = true;
    while (!state.exhausted()) {
      int best = -1;
      double best_gain = -1e300;
      for (int qi = 0; qi < 8; ++qi) {
        if (std::find(chosen.begin(), chosen.end(), qi) != chosen.end()) continue;
        auto with = chosen;
        with.push_back(qi);
        const double g = testing::f_oracle(state.weight.w, with) -
                         testing::f_oracle(state.weight.w, chosen);
        if (g > best_gain + 1e-12) {
          best_gain = g;
          best = qi;
        }
      }
      const int got = becat::select_next(model, data.q_matrix, state).item;
      if (got != state.candidate_ids[static_cast<std::size_t>(best)]) same = false;
      chosen.push_back(state.weight.index_of(got));
    }
    ++greedy_runs;
    if (!same) ++greedy_mismatch;
  }

  report("weight matrix, gain and greedy oracles",
         w_err < 1e-10 && gain_mismatch == 0 && greedy_mismatch == 0,
         "W max abs error " + fmt("%.3e", w_err) + " (< 1e-10); gain " +
             std::to_string(gain_checks - gain_mismatch) + "/" + std::to_string(gain_checks) +
             " exact; greedy " + std::to_string(greedy_runs - greedy_mismatch) + "/" +
             std::to_string(greedy_runs) + " sequences match");
}

void efficiency_criterion(const DataBundle& data) {
  const auto split = split_dataset(data.dataset, 0.5, 0);
  ncd::TrainConfig cfg;
  cfg.epochs = 10;
  const auto model = ncd::fit(split.train, split.test, data.q_matrix, cfg).model;

  becat::SimulationConfig sim;
  sim.n_students = 100;
  sim.budget = 10;
  sim.policies = {becat::Policy::becat, becat::Policy::random};
  const auto t0 = Clock::now();
  const auto rep = becat::simulate(model, data, split.test, sim);
  const double secs = seconds_since(t0);
  const auto& b = rep.result(becat::Policy::becat).final_error;
  const auto& r = rep.result(becat::Policy::random).final_error;
  const double mean_b = b.empty() ? 0 : std::accumulate(b.begin(), b.end(), 0.0) / b.size();
  const double mean_r = r.empty() ? 0 : std::accumulate(r.begin(), r.end(), 0.0) / r.size();
  const auto t = becat::sign_test(b, r);
  report("selection efficiency",
         rep.students.size() >= 100 && mean_b <= mean_r && t.p_value < 0.05 && secs < 300,
         std::to_string(rep.students.size()) + " students, budget 10: mean final error becat " +
             fmt("%.4f", mean_b) + " vs random " + fmt("%.4f", mean_r) + "; sign test " +
             std::to_string(t.wins) + "/" + std::to_string(t.losses) + " p " +
             fmt("%.2e", t.p_value) + "; simulation " + fmt("%.1f", secs) + " s");
}

void feedback_criterion(const testing::TempDir& dir, const DataBundle& data,
                        const ncd::NcdModel& model) {
  ::unsetenv("EDULOOP_LLM_TOKEN");
  bool ok = true;
  std::string detail;

  // CLI, offline.
  const auto model_path = dir / "model.json";
  ncd::save_model(model, model_path);
  std::vector<std::string> args{"feedback", "--model", model_path.string(), "--data",
                                (dir / "data").string(), "--out", (dir / "fb").string()};
  for (int s = 0; s < 5; ++s) {
    args.push_back("--student");
    args.push_back(data.maps.students.raw(s));
  }
  const int rc = quiet_cli(args);
  int cli_ok = 0;
  if (rc == 0) {
    const auto doc = json::parse(testing::read_text(dir / "fb" / "feedback_report.json"));
    for (const auto& d : doc) {
      auto sections = d.at("sections");
      sections["provider"] = d.at("provider");
      if (d.at("provider") == "fallback" && well_formed(feedback::report_from_json(sections))) {
        ++cli_ok;
      }
    }
  }
  ok = ok && cli_ok == 5;
  detail += "cmd_feedback offline " + std::to_string(cli_ok) + "/5 fallback";

  // Session service, offline.
  service::ServiceConfig sc;
  sc.sessions_dir = dir / "fb_sessions";
  auto shared = std::make_shared<const ncd::NcdModel>(model);
  service::SessionService svc(shared, data, sc);
  int svc_ok = 0;
  for (int s = 0; s < 5; ++s) {
    const std::string id =
        svc.create_session({{"student_id", data.maps.students.raw(s)}, {"budget", 3}}).at("session_id");
    for (int t = 0; t < 3; ++t) {
      const std::string item = svc.next_item(id).at("item_id");
      svc.submit_response(id, {{"item_id", item}, {"correct", t % 2}});
    }
    svc.get_feedback(id);
    const auto& fb = svc.load(id).feedback;
    if (fb && fb->provider == feedback::Provider::fallback && well_formed(*fb)) ++svc_ok;
  }
  ok = ok && svc_ok == 5;
  detail += "; get_feedback offline " + std::to_string(svc_ok) + "/5 fallback";

  // Mock provider.
  const std::vector<double> mastery(static_cast<std::size_t>(data.dataset.n_knowledge), 0.4);
  const std::vector<int> items{0, 1, 2};
  const auto bundle = feedback::build_prompt(mastery, data.maps, items, data.q_matrix);
  const auto fallback = feedback::fallback_feedback(mastery, data.maps, items, data.q_matrix);
  ::setenv("EDULOOP_ACCEPTANCE_TOKEN", "token", 1);
  feedback::ProviderConfig pc;
  pc.token_env = "EDULOOP_ACCEPTANCE_TOKEN";
  pc.timeout_seconds = 5;
  {
    testing::MockLlm good([](const std::string&) { return testing::MockLlm::wrap(testing::kGoodFeedback); });
    pc.endpoint = good.endpoint();
    const auto r = feedback::generate_feedback(bundle, pc, fallback);
    const bool pass = r.provider == feedback::Provider::llm && well_formed(r) && good.requests() == 1;
    ok = ok && pass;
    detail += std::string("; mock well-formed -> ") + feedback::to_string(r.provider);
  }
  {
    testing::MockLlm bad([](const std::string&) {
      return testing::MockLlm::wrap("Sure! Here is some feedback without any structure.");
    });
    pc.endpoint = bad.endpoint();
    const auto r = feedback::generate_feedback(bundle, pc, fallback);
    const bool pass = r.provider == feedback::Provider::fallback && well_formed(r) && bad.requests() == 2;
    ok = ok && pass;
    detail += std::string("; mock malformed -> ") + feedback::to_string(r.provider) + " after " +
              std::to_string(bad.requests()) + " requests";
  }
  ::unsetenv("EDULOOP_ACCEPTANCE_TOKEN");
  report("feedback totality", ok, detail);
}

void replay_criterion(const testing::TempDir& dir, const DataBundle& data,
                      const ncd::NcdModel& model) {
  auto shared = std::make_shared<const ncd::NcdModel>(model);
  service::ServiceConfig sc;
  sc.sessions_dir = dir / "replay_sessions";
  Rng rng(5150);
  int same = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int budget = 4 + static_cast<int>(uniform_below(rng, 9));
    const int cut = 1 + static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(budget - 1)));
    const std::string student = trial % 4 == 0
                                    ? "fresh"
                                    : data.maps.students.raw(static_cast<int>(
                                          uniform_below(rng, static_cast<std::uint64_t>(model.n_students))));
    const json request{{"student_id", student},
                       {"budget", budget},
                       {"lambda_mix", uniform01(rng)},
                       {"seed", rng() >> 12}};
    std::vector<int> answers;
    for (int t = 0; t < budget; ++t) answers.push_back(static_cast<int>(uniform_below(rng, 2)));

    auto drive = [&](service::SessionService& svc, const std::string& id, int from, int to) {
      std::vector<std::string> seq;
      for (int t = from; t < to; ++t) {
        const std::string item = svc.next_item(id).at("item_id");
        seq.push_back(item);
        svc.submit_response(id, {{"item_id", item}, {"correct", answers[static_cast<std::size_t>(t)]}});
      }
      return seq;
    };

    std::string interrupted, straight;
    std::vector<std::string> before_restart;
    {
      service::SessionService first(shared, data, sc);
      interrupted = first.create_session(request).at("session_id");
      straight = first.create_session(request).at("session_id");
      before_restart = drive(first, interrupted, 0, cut);
    }
    // New process state: a fresh service over the same sessions directory.
    service::SessionService second(shared, data, sc);
    auto seq = before_restart;
    const auto after = drive(second, interrupted, cut, budget);
    seq.insert(seq.end(), after.begin(), after.end());
    if (seq == drive(second, straight, 0, budget)) ++same;
  }
  report("replay determinism", same == 20, std::to_string(same) + "/20 reloaded sessions match");
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::err);
  testing::TempDir dir;
  const auto data = prepare_data(dir);
  std::cout << "responses " << data.dataset.records.size() << ", students "
            << data.dataset.n_students << ", items " << data.dataset.n_items
            << ", knowledge points " << data.dataset.n_knowledge << std::endl;

  ncd::NcdModel trained;
  training_criteria(data, trained);
  gradient_criterion(data);
  monotonicity_criterion(data, trained);
  emc_criterion(data, trained);
  selection_math_criterion(data, trained);
  efficiency_criterion(data);
  feedback_criterion(dir, data, trained);
  replay_criterion(dir, data, trained);

  std::cout << (failures == 0 ? "all primary criteria pass" : std::to_string(failures) + " failing")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
