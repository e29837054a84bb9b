#include "eduloop/cli.hpp"

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <ostream>

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "eduloop/becat.hpp"
#include "eduloop/csv.hpp"
#include "eduloop/data_ingest.hpp"
#include "eduloop/feedback.hpp"
#include "eduloop/manifest.hpp"
#include "eduloop/ncd.hpp"
#include "eduloop/session_service.hpp"
#include "eduloop/simulation.hpp"
#include "eduloop/synthetic.hpp"
#include "httplib.h"

namespace eduloop::cli {
namespace fs = std::filesystem;
using json = nlohmann::json;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage:
      return kExitUsage;
    case ErrorKind::data:
    case ErrorKind::not_found:
      return kExitData;
    case ErrorKind::numeric:
      return kExitNumeric;
    default:
      return kExitFailure;
  }
}

namespace {

// Effective configuration: defaults, then --config file, then flags.
struct Settings {
  std::uint64_t seed = 0;
  double test_fraction = 0.2;
  ncd::TrainConfig train;
  becat::SelectionConfig selection;
  becat::SimulationConfig simulation;
  feedback::ProviderConfig provider;

  json to_json() const {
    json policies = json::array();
    for (auto p : simulation.policies) policies.push_back(becat::to_string(p));
    return {{"seed", seed},
            {"test_fraction", test_fraction},
            {"train", ncd::to_json(train)},
            {"selection",
             {{"budget", selection.budget},
              {"lambda_mix", selection.lambda_mix},
              {"n_samples", selection.n_samples},
              {"threshold", selection.threshold},
              {"learning_rate", selection.learning_rate},
              {"max_pool", selection.max_pool}}},
            {"simulation",
             {{"n_students", simulation.n_students},
              {"budget", simulation.budget},
              {"policies", policies},
              {"pool", simulation.pool == becat::PoolScope::all ? "all" : "held_out"},
              {"min_held_out", simulation.min_held_out}}},
            {"provider", feedback::to_json(provider)}};
  }
};

void apply_file(Settings& s, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::usage, "cannot read config file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
    s.seed = doc.value("seed", s.seed);
    s.test_fraction = doc.value("test_fraction", s.test_fraction);
    if (doc.contains("train")) s.train = ncd::train_config_from_json(doc.at("train"), s.train);
    if (doc.contains("selection")) {
      const auto& j = doc.at("selection");
      s.selection.budget = j.value("budget", s.selection.budget);
      s.selection.lambda_mix = j.value("lambda_mix", s.selection.lambda_mix);
      s.selection.n_samples = j.value("n_samples", s.selection.n_samples);
      s.selection.threshold = j.value("threshold", s.selection.threshold);
      s.selection.learning_rate = j.value("learning_rate", s.selection.learning_rate);
      s.selection.max_pool = j.value("max_pool", s.selection.max_pool);
    }
    if (doc.contains("simulation")) {
      const auto& j = doc.at("simulation");
      s.simulation.n_students = j.value("n_students", s.simulation.n_students);
      s.simulation.budget = j.value("budget", s.simulation.budget);
      s.simulation.min_held_out = j.value("min_held_out", s.simulation.min_held_out);
      if (j.contains("policies")) {
        s.simulation.policies.clear();
        for (const auto& p : j.at("policies")) {
          s.simulation.policies.push_back(becat::policy_from_string(p.get<std::string>()));
        }
      }
      if (j.contains("pool")) {
        const auto pool = j.at("pool").get<std::string>();
        if (pool != "held_out" && pool != "all") {
          throw Error(ErrorKind::usage, "simulation pool must be held_out or all");
        }
        s.simulation.pool = pool == "all" ? becat::PoolScope::all : becat::PoolScope::held_out;
      }
    }
    if (doc.contains("provider")) s.provider = feedback::provider_config_from_json(doc.at("provider"));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::usage, "bad config file " + path.string() + ": " + e.what());
  }
}

std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void write_json(const fs::path& path, const json& doc) {
  write_file_atomic(path, doc.dump(2) + "\n");
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::data, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::data, "bad JSON in " + path.string() + ": " + e.what());
  }
}

std::vector<fs::path> canonical_files(const fs::path& dir) {
  return {dir / kResponsesFile, dir / kQMatrixFile, dir / kKnowledgeGraphFile,
          dir / kKnowledgeNamesFile, dir / kItemTextsFile};
}

// The model file plus the split it was trained with.
struct LoadedModel {
  ncd::NcdModel model;
  double test_fraction = 0.2;
  std::uint64_t split_seed = 0;
  bool has_split = false;
};

LoadedModel load_model_file(const fs::path& path) {
  const auto doc = read_json(path);
  LoadedModel m;
  m.model = ncd::model_from_json(doc);
  if (doc.contains("split")) {
    m.test_fraction = doc.at("split").value("test_fraction", 0.2);
    m.split_seed = doc.at("split").value("seed", std::uint64_t{0});
    m.has_split = true;
  }
  return m;
}

void check_model_fits(const ncd::NcdModel& model, const DataBundle& data) {
  if (model.n_students != data.maps.students.size() ||
      model.n_items != static_cast<int>(data.q_matrix.rows.size()) ||
      model.n_knowledge != data.q_matrix.n_knowledge) {
    throw Error(ErrorKind::data, "model dimensions do not match the data directory");
  }
}

std::vector<double> mastery_row(const ncd::NcdModel& model, int student) {
  const auto theta = model.theta_row(student);
  std::vector<double> m(theta.size());
  for (std::size_t k = 0; k < m.size(); ++k) m[k] = sigmoid(theta[k]);
  return m;
}

// student raw id -> mastery row, from a long-format mastery.csv.
std::map<std::string, std::vector<double>> read_mastery_csv(const fs::path& path,
                                                            const DataBundle& data) {
  const auto table = csv::read_file(path);
  const auto c_s = table.require_column("student_id", path);
  const auto c_k = table.require_column("skill_id", path);
  const auto c_m = table.require_column("mastery", path);
  std::map<std::string, std::vector<double>> rows;
  for (const auto& r : table.rows) {
    const int k = data.maps.knowledge.find(r.at(c_k));
    if (k < 0) throw Error(ErrorKind::data, "unknown skill in " + path.string() + ": " + r.at(c_k));
    auto& row = rows[r.at(c_s)];
    if (row.empty()) row.assign(static_cast<std::size_t>(data.q_matrix.n_knowledge), -1.0);
    try {
      row[static_cast<std::size_t>(k)] = std::stod(r.at(c_m));
    } catch (const std::exception&) {
      throw Error(ErrorKind::data, "bad mastery value in " + path.string());
    }
  }
  for (const auto& [student, row] : rows) {
    for (double v : row) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw Error(ErrorKind::data, "incomplete or out-of-range mastery for student " + student);
      }
    }
  }
  return rows;
}

// Greedy BECAT picks from the filtered pool at the student's current ability,
// without observing answers.
std::vector<int> recommend(const ncd::NcdModel& model, const DataBundle& data,
                           std::vector<double> theta, const becat::SelectionConfig& cfg) {
  if (cfg.budget == 0) return {};
  std::vector<double> mastery(theta.size());
  for (std::size_t k = 0; k < theta.size(); ++k) mastery[k] = sigmoid(theta[k]);
  std::vector<int> all(static_cast<std::size_t>(model.n_items));
  std::iota(all.begin(), all.end(), 0);
  const auto pool =
      becat::filter_candidates(data.q_matrix, data.graph, mastery, cfg.threshold, all);
  auto state = becat::start_selection(model, data.q_matrix, std::move(theta), pool, cfg);
  while (!state.exhausted()) becat::select_next(model, data.q_matrix, state);
  return state.selected;
}

httplib::Server* g_server = nullptr;
void on_signal(int) {
  if (g_server) g_server->stop();
}

void setup_logging(bool verbose) {
  auto logger = spdlog::get("eduloop");
  if (!logger) {
    logger = spdlog::stderr_logger_mt("eduloop");
    spdlog::set_default_logger(logger);
  }
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"EduLoop: diagnosis, adaptive item selection and feedback"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::string config_file;
  std::uint64_t seed = 0;
  bool verbose = false;
  auto* seed_opt = app.add_option("--seed", seed, "Seed for every random stream");
  app.add_option("--config", config_file, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic ASSISTments-style export");
  std::string synth_out;
  synthetic::Config synth_cfg;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--students", synth_cfg.n_students, "Number of students");
  synth->add_option("--interactions", synth_cfg.target_interactions, "Target response count");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Normalize a raw export into canonical files");
  std::string log_file, qmap_file, graph_file, texts_file, ingest_out;
  LogSchema schema;
  ingest->add_option("--log", log_file, "Raw response export (CSV)")->required();
  ingest->add_option("--q-matrix", qmap_file, "problem_id,skill_id mapping (default: log skills)");
  ingest->add_option("--graph", graph_file, "src_skill_id,dst_skill_id,relation rows");
  ingest->add_option("--item-texts", texts_file, "problem_id,text rows");
  ingest->add_option("--out", ingest_out, "Output data directory")->required();
  ingest->add_option("--user-col", schema.user);
  ingest->add_option("--item-col", schema.item);
  ingest->add_option("--correct-col", schema.correct);
  ingest->add_option("--skill-col", schema.skill);
  ingest->add_option("--order-col", schema.order, "Empty string: use row order");
  ingest->add_option("--skill-name-col", schema.skill_name);

  // train
  auto* train = app.add_subcommand("train", "Fit the diagnosis model");
  std::string train_data, train_out;
  bool emit_plot = false;
  ncd::TrainConfig flag_train;
  std::string optimizer;
  double flag_fraction = 0.2;
  train->add_option("--data", train_data, "Canonical data directory")->required();
  train->add_option("--out", train_out, "Output directory")->required();
  auto* o_epochs = train->add_option("--epochs", flag_train.epochs);
  auto* o_lr = train->add_option("--lr", flag_train.learning_rate);
  auto* o_batch = train->add_option("--batch-size", flag_train.batch_size);
  auto* o_hidden = train->add_option("--hidden", flag_train.hidden_sizes, "Hidden layer sizes");
  auto* o_opt = train->add_option("--optimizer", optimizer)->check(CLI::IsMember({"adam", "sgd"}));
  auto* o_tf = train->add_option("--test-fraction", flag_fraction);
  train->add_flag("--emit-plot-data", emit_plot, "Also write per-metric CSV files");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Score a model on the held-out split");
  std::string eval_data, eval_model, eval_out;
  double eval_fraction = 0.2;
  evaluate->add_option("--data", eval_data)->required();
  evaluate->add_option("--model", eval_model)->required();
  auto* o_eval_tf = evaluate->add_option("--test-fraction", eval_fraction,
                                         "Default: the fraction stored in the model");
  evaluate->add_option("--out", eval_out, "Write the metrics JSON here");

  // simulate
  auto* simulate = app.add_subcommand("simulate", "Replay adaptive sessions offline");
  std::string sim_data, sim_model, sim_out, sim_pool;
  std::vector<std::string> sim_policies;
  int sim_students = 100, sim_budget = 10, sim_min_held = 0, sim_samples = 16;
  double sim_lambda = 0.5, sim_lr = 0.1, sim_fraction = 0.2;
  simulate->add_option("--data", sim_data)->required();
  simulate->add_option("--model", sim_model)->required();
  simulate->add_option("--out", sim_out, "Report path")->required();
  auto* o_pol = simulate->add_option("--policy", sim_policies, "becat, random, emc, gain")
                    ->check(CLI::IsMember({"becat", "random", "emc", "gain"}));
  auto* o_ns = simulate->add_option("--n-students", sim_students);
  auto* o_sb = simulate->add_option("--budget", sim_budget);
  auto* o_sl = simulate->add_option("--lambda", sim_lambda);
  auto* o_slr = simulate->add_option("--ability-lr", sim_lr);
  auto* o_ss = simulate->add_option("--n-samples", sim_samples);
  auto* o_pool = simulate->add_option("--pool", sim_pool)->check(CLI::IsMember({"held_out", "all"}));
  auto* o_mh = simulate->add_option("--min-held-out", sim_min_held);
  auto* o_sim_tf = simulate->add_option("--test-fraction", sim_fraction,
                                        "Default: the fraction stored in the model");

  // serve
  auto* serve = app.add_subcommand("serve", "Run the HTTP session service");
  std::string serve_model, serve_data, sessions_dir = "sessions", host = "127.0.0.1",
                                       cors = "*";
  int port = 8080;
  serve->add_option("--model", serve_model, "Model file (without it, session calls return 503)");
  serve->add_option("--data-dir", serve_data)->required();
  serve->add_option("--sessions-dir", sessions_dir);
  serve->add_option("--port", port);
  serve->add_option("--host", host);
  serve->add_option("--cors-origin", cors);

  // feedback
  auto* fb = app.add_subcommand("feedback", "Generate feedback reports for students");
  std::string fb_model, fb_data, fb_mastery, fb_out, endpoint, llm_model, token_env;
  std::vector<std::string> fb_students;
  int fb_budget = 5;
  double timeout = 30.0;
  fb->add_option("--model", fb_model)->required();
  fb->add_option("--data", fb_data)->required();
  fb->add_option("--student", fb_students, "Raw student id (repeatable)")->required();
  fb->add_option("--mastery", fb_mastery, "mastery.csv to use instead of the model's");
  fb->add_option("--budget", fb_budget, "Number of recommended items");
  fb->add_option("--out", fb_out, "Output directory")->required();
  auto* o_ep = fb->add_option("--endpoint", endpoint, "Chat-completion URL");
  auto* o_lm = fb->add_option("--llm-model", llm_model);
  auto* o_te = fb->add_option("--token-env", token_env, "Environment variable holding the token");
  auto* o_to = fb->add_option("--timeout", timeout, "Seconds");

  std::vector<std::string> argv_store{"eduloop"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  setup_logging(verbose);

  try {
    Settings settings;
    if (!config_file.empty()) apply_file(settings, config_file);
    if (seed_opt->count()) settings.seed = seed;
    settings.train.seed = settings.seed;
    settings.selection.seed = settings.seed;
    settings.simulation.seed = settings.seed;

    if (*synth) {
      synth_cfg.seed = settings.seed;
      const auto files = synthetic::write_export(synth_out, synth_cfg);
      RunManifest{"synth",
                  {{"seed", synth_cfg.seed},
                   {"students", synth_cfg.n_students},
                   {"interactions", synth_cfg.target_interactions}},
                  {},
                  {files.log, files.graph, files.item_texts}}
          .write(fs::path(synth_out) / "manifest.json");
      out << "wrote " << files.log.string() << "\n";
      return kExitOk;
    }

    if (*ingest) {
      auto parsed = parse_logs(log_file, schema);
      DataBundle data;
      data.dataset = std::move(parsed.dataset);
      data.maps = std::move(parsed.maps);
      data.q_matrix = qmap_file.empty() ? std::move(parsed.q_matrix)
                                        : build_q_matrix(qmap_file, data.maps);
      if (!graph_file.empty()) data.graph = read_knowledge_graph(graph_file, data.maps.knowledge);
      const fs::path texts = texts_file;
      attach_item_texts(data.maps, data.q_matrix, texts_file.empty() ? nullptr : &texts);
      validate(data.dataset);
      fs::create_directories(ingest_out);
      write_canonical(ingest_out, data);
      const fs::path report_path = fs::path(ingest_out) / kIngestReportFile;
      write_json(report_path, to_json(parsed.report, data));
      std::vector<fs::path> inputs{log_file};
      for (const auto& p : {qmap_file, graph_file, texts_file}) {
        if (!p.empty()) inputs.emplace_back(p);
      }
      auto outputs = canonical_files(ingest_out);
      outputs.push_back(report_path);
      json cfg = {{"schema",
                   {{"user", schema.user},
                    {"item", schema.item},
                    {"correct", schema.correct},
                    {"skill", schema.skill},
                    {"order", schema.order},
                    {"skill_name", schema.skill_name}}}};
      RunManifest{"ingest", cfg, inputs, outputs}.write(fs::path(ingest_out) / "manifest.json");
      out << "ingested " << data.dataset.records.size() << " responses, "
          << data.maps.students.size() << " students, " << data.maps.items.size() << " items, "
          << data.q_matrix.n_knowledge << " knowledge points (" << parsed.report.dropped()
          << " rows dropped)\n";
      return kExitOk;
    }

    if (*train) {
      if (o_epochs->count()) settings.train.epochs = flag_train.epochs;
      if (o_lr->count()) settings.train.learning_rate = flag_train.learning_rate;
      if (o_batch->count()) settings.train.batch_size = flag_train.batch_size;
      if (o_hidden->count()) settings.train.hidden_sizes = flag_train.hidden_sizes;
      if (o_opt->count()) {
        settings.train.optimizer = optimizer == "sgd" ? ncd::Optimizer::sgd : ncd::Optimizer::adam;
      }
      if (o_tf->count()) settings.test_fraction = flag_fraction;
      settings.train.validate();

      const auto data = load_canonical(train_data);
      const auto split = split_dataset(data.dataset, settings.test_fraction, settings.seed);
      auto result = ncd::fit(split.train, split.test, data.q_matrix, settings.train,
                             [](const ncd::EpochRecord& r) {
                               spdlog::info("epoch {:2d}  train loss {:.4f}  valid auc {:.4f}  "
                                            "acc {:.4f}  ({:.1f}s)",
                                            r.epoch, r.train_loss, r.valid.auc, r.valid.acc,
                                            r.seconds);
                             });
      const fs::path dir = train_out;
      fs::create_directories(dir);
      auto doc = ncd::to_json(result.model);
      doc["split"] = {{"test_fraction", settings.test_fraction}, {"seed", settings.seed}};
      write_file_atomic(dir / "model.json", doc.dump() + "\n");

      std::string mastery = "student_id,skill_id,mastery\n";
      const auto table = ncd::mastery_table(result.model);
      for (std::size_t s = 0; s < table.rows; ++s) {
        for (std::size_t k = 0; k < table.cols; ++k) {
          mastery += csv::escape(data.maps.students.raw(static_cast<int>(s))) + "," +
                     csv::escape(data.maps.knowledge.raw(static_cast<int>(k))) + "," +
                     fixed6(table(s, k)) + "\n";
        }
      }
      write_file_atomic(dir / "mastery.csv", mastery);
      write_json(dir / "history.json", ncd::to_json(result.history));

      std::vector<fs::path> outputs{dir / "model.json", dir / "mastery.csv", dir / "history.json"};
      if (emit_plot) {
        const fs::path plot = dir / "plot";
        fs::create_directories(plot);
        std::map<std::string, std::string> files{
            {"loss.csv", "epoch,train_loss,valid_loss\n"}, {"auc.csv", "epoch,auc\n"},
            {"acc.csv", "epoch,acc\n"}, {"rmse.csv", "epoch,rmse\n"}, {"mse.csv", "epoch,mse\n"}};
        auto num = [](double v) {
          char buf[32];
          std::snprintf(buf, sizeof buf, "%.10g", v);
          return std::string(buf);
        };
        for (const auto& r : result.history) {
          const auto e = std::to_string(r.epoch) + ",";
          files["loss.csv"] += e + num(r.train_loss) + "," + num(r.valid.loss) + "\n";
          files["auc.csv"] += e + num(r.valid.auc) + "\n";
          files["acc.csv"] += e + num(r.valid.acc) + "\n";
          files["rmse.csv"] += e + num(r.valid.rmse) + "\n";
          files["mse.csv"] += e + num(r.valid.mse) + "\n";
        }
        for (const auto& [name, text] : files) {
          write_file_atomic(plot / name, text);
          outputs.push_back(plot / name);
        }
      }
      RunManifest{"train", settings.to_json(), canonical_files(train_data), outputs}.write(
          dir / "manifest.json");
      const auto& last = result.history.back().valid;
      out << "trained " << result.history.size() << " epochs: valid AUC " << fixed6(last.auc)
          << ", ACC " << fixed6(last.acc) << ", RMSE " << fixed6(last.rmse) << "\n";
      return kExitOk;
    }

    if (*evaluate) {
      const auto data = load_canonical(eval_data);
      const auto loaded = load_model_file(eval_model);
      check_model_fits(loaded.model, data);
      const double tf = o_eval_tf->count() || !loaded.has_split ? eval_fraction : loaded.test_fraction;
      const auto split_seed = loaded.has_split ? loaded.split_seed : settings.seed;
      const auto split = split_dataset(data.dataset, tf, split_seed);
      json doc = {{"test_fraction", tf},
                  {"split_seed", split_seed},
                  {"train", ncd::to_json(ncd::evaluate(loaded.model, split.train, data.q_matrix))},
                  {"test", ncd::to_json(ncd::evaluate(loaded.model, split.test, data.q_matrix))}};
      if (!eval_out.empty()) {
        write_json(eval_out, doc);
        auto inputs = canonical_files(eval_data);
        inputs.emplace_back(eval_model);
        RunManifest{"evaluate", settings.to_json(), inputs, {eval_out}}.write(
            fs::path(eval_out).string() + ".manifest.json");
      }
      out << doc.dump(2) << "\n";
      return kExitOk;
    }

    if (*simulate) {
      auto& sim = settings.simulation;
      sim.selection = settings.selection;
      if (o_pol->count()) {
        sim.policies.clear();
        for (const auto& p : sim_policies) sim.policies.push_back(becat::policy_from_string(p));
      }
      if (o_ns->count()) sim.n_students = sim_students;
      if (o_sb->count()) sim.budget = sim_budget;
      if (o_sl->count()) sim.selection.lambda_mix = sim_lambda;
      if (o_slr->count()) sim.selection.learning_rate = sim_lr;
      if (o_ss->count()) sim.selection.n_samples = sim_samples;
      if (o_pool->count()) {
        sim.pool = sim_pool == "all" ? becat::PoolScope::all : becat::PoolScope::held_out;
      }
      if (o_mh->count()) sim.min_held_out = sim_min_held;
      settings.selection = sim.selection;

      const auto data = load_canonical(sim_data);
      const auto loaded = load_model_file(sim_model);
      check_model_fits(loaded.model, data);
      const double tf = o_sim_tf->count() || !loaded.has_split ? sim_fraction : loaded.test_fraction;
      const auto split_seed = loaded.has_split ? loaded.split_seed : settings.seed;
      settings.test_fraction = tf;
      const auto split = split_dataset(data.dataset, tf, split_seed);
      const auto report = becat::simulate(loaded.model, data, split.test, sim);
      auto doc = becat::to_json(report, sim, data.maps);
      doc["test_fraction"] = tf;
      write_json(sim_out, doc);
      auto inputs = canonical_files(sim_data);
      inputs.emplace_back(sim_model);
      RunManifest{"simulate", settings.to_json(), inputs, {sim_out}}.write(
          fs::path(sim_out).string() + ".manifest.json");
      out << "simulated " << report.students.size() << " students, budget " << sim.budget << "\n";
      for (const auto& [name, p] : doc.at("policies").items()) {
        out << "  " << name << ": final mean error " << fixed6(p.at("final_mean_error").get<double>())
            << "\n";
      }
      for (const auto& [name, c] : doc.at("comparisons").items()) {
        out << "  " << name << ": " << c.at("wins") << " wins, " << c.at("losses")
            << " losses, sign-test p " << c.at("p_value").get<double>() << "\n";
      }
      return kExitOk;
    }

    if (*serve) {
      auto data = load_canonical(serve_data);
      std::shared_ptr<const ncd::NcdModel> model;
      if (!serve_model.empty()) {
        auto loaded = load_model_file(serve_model);
        check_model_fits(loaded.model, data);
        model = std::make_shared<const ncd::NcdModel>(std::move(loaded.model));
      } else {
        spdlog::warn("no --model given; session calls will return 503");
      }
      service::ServiceConfig cfg;
      cfg.sessions_dir = sessions_dir;
      cfg.selection = settings.selection;
      cfg.provider = settings.provider;
      cfg.cors_origin = cors;
      service::SessionService svc(model, std::move(data), cfg);
      auto inputs = canonical_files(serve_data);
      if (!serve_model.empty()) inputs.emplace_back(serve_model);
      auto manifest_cfg = settings.to_json();
      manifest_cfg["serve"] = {{"host", host}, {"port", port}, {"cors_origin", cors}};
      RunManifest{"serve", manifest_cfg, inputs, {}}.write(fs::path(sessions_dir) /
                                                           "serve_manifest.json");
      httplib::Server server;
      service::mount_routes(server, svc);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      spdlog::info("listening on http://{}:{}", host, port);
      const bool ok = server.listen(host, port);
      g_server = nullptr;
      if (!ok) {
        err << "error: cannot listen on " << host << ":" << port << "\n";
        return kExitFailure;
      }
      return kExitOk;
    }

    if (*fb) {
      if (o_ep->count()) settings.provider.endpoint = endpoint;
      if (o_lm->count()) settings.provider.model = llm_model;
      if (o_te->count()) settings.provider.token_env = token_env;
      if (o_to->count()) settings.provider.timeout_seconds = timeout;
      settings.provider.validate();
      auto sel = settings.selection;
      sel.budget = fb_budget;
      sel.validate();
      settings.selection = sel;

      const auto data = load_canonical(fb_data);
      const auto loaded = load_model_file(fb_model);
      check_model_fits(loaded.model, data);
      std::map<std::string, std::vector<double>> mastery_file;
      if (!fb_mastery.empty()) mastery_file = read_mastery_csv(fb_mastery, data);

      json reports = json::array();
      const auto created = utc_timestamp();
      for (const auto& sid : fb_students) {
        const int s = data.maps.students.find(sid);
        if (s < 0) throw Error(ErrorKind::not_found, "unknown student: " + sid);
        std::vector<double> mastery;
        std::vector<double> theta(loaded.model.theta_row(s).begin(), loaded.model.theta_row(s).end());
        if (!fb_mastery.empty()) {
          auto it = mastery_file.find(sid);
          if (it == mastery_file.end()) {
            throw Error(ErrorKind::not_found, "student " + sid + " missing from " + fb_mastery);
          }
          mastery = it->second;
        } else {
          mastery = mastery_row(loaded.model, s);
        }
        const auto items = recommend(loaded.model, data, theta, sel);
        auto fallback = feedback::fallback_feedback(mastery, data.maps, items, data.q_matrix,
                                                    sel.threshold);
        const auto bundle = feedback::build_prompt(mastery, data.maps, items, data.q_matrix);
        const auto report = feedback::generate_feedback(bundle, settings.provider, fallback);
        reports.push_back(feedback::report_document(report, sid, items, data.maps, created));

        out << "# Student " << sid << " (provider: " << feedback::to_string(report.provider);
        if (!report.note.empty()) out << "; " << report.note;
        out << ")\n" << feedback::to_text(report) << "\n";
      }
      const fs::path dir = fb_out;
      fs::create_directories(dir);
      write_json(dir / "feedback_report.json", reports.size() == 1 ? reports[0] : reports);
      auto inputs = canonical_files(fb_data);
      inputs.emplace_back(fb_model);
      if (!fb_mastery.empty()) inputs.emplace_back(fb_mastery);
      RunManifest{"feedback", settings.to_json(), inputs, {dir / "feedback_report.json"}}.write(
          dir / "manifest.json");
      return kExitOk;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace eduloop::cli
