#include "eduloop/session_service.hpp"

#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "eduloop/common.hpp"
#include "httplib.h"

namespace eduloop::service {
namespace {

using json = nlohmann::json;

bool valid_id(const std::string& id) {
  if (id.size() != 32) return false;
  for (char c : id) {
    if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
  }
  return true;
}

std::string new_session_id() {
  static std::mutex mu;
  static std::random_device rd;
  std::lock_guard lock(mu);
  char buf[33];
  const std::uint64_t a = (static_cast<std::uint64_t>(rd()) << 32) | rd();
  const std::uint64_t b = (static_cast<std::uint64_t>(rd()) << 32) | rd();
  std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(a),
                static_cast<unsigned long long>(b));
  return buf;
}

std::vector<double> mastery_of(const std::vector<double>& theta) {
  std::vector<double> m(theta.size());
  for (std::size_t k = 0; k < theta.size(); ++k) m[k] = sigmoid(theta[k]);
  return m;
}

template <typename T>
T field(const json& body, const char* key, T fallback) {
  if (!body.contains(key) || body.at(key).is_null()) return fallback;
  try {
    return body.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorKind::usage, std::string("field '") + key + "' has the wrong type");
  }
}

}  // namespace

const char* to_string(Status status) {
  return status == Status::active ? "active" : "finished";
}

Status Session::status() const {
  if (closed) return Status::finished;
  if (outstanding) return Status::active;
  return selection.exhausted() ? Status::finished : Status::active;
}

json to_json(const Session& s) {
  json doc = {{"session_id", s.id},
              {"student_ref", s.student_ref},
              {"student", s.student},
              {"seed", s.seed},
              {"threshold", s.threshold},
              {"selection", becat::to_json(s.selection)},
              {"outstanding", s.outstanding ? json(*s.outstanding) : json(nullptr)},
              {"closed", s.closed},
              {"created_at", s.created_at},
              {"updated_at", s.updated_at},
              {"feedback", s.feedback ? feedback::to_json(*s.feedback) : json(nullptr)}};
  json trace = json::array();
  for (const auto& t : s.trace) trace.push_back(becat::to_json(t));
  doc["trace"] = trace;
  return doc;
}

Session session_from_json(const json& doc) {
  Session s;
  try {
    s.id = doc.at("session_id").get<std::string>();
    s.student_ref = doc.at("student_ref").get<std::string>();
    s.student = doc.at("student").get<int>();
    s.seed = doc.at("seed").get<std::uint64_t>();
    s.threshold = doc.at("threshold").get<double>();
    s.selection = becat::selection_from_json(doc.at("selection"));
    if (!doc.at("outstanding").is_null()) s.outstanding = doc.at("outstanding").get<int>();
    s.closed = doc.at("closed").get<bool>();
    s.created_at = doc.at("created_at").get<std::string>();
    s.updated_at = doc.at("updated_at").get<std::string>();
    if (!doc.at("feedback").is_null()) s.feedback = feedback::report_from_json(doc.at("feedback"));
    for (const auto& t : doc.value("trace", json::array())) {
      s.trace.push_back(becat::trace_step_from_json(t));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::data, std::string("corrupt session file: ") + e.what());
  }
  return s;
}

SessionService::SessionService(std::shared_ptr<const ncd::NcdModel> model, DataBundle data,
                               ServiceConfig config)
    : model_(std::move(model)), data_(std::move(data)), config_(std::move(config)) {
  config_.selection.validate();
  std::filesystem::create_directories(config_.sessions_dir);
  if (model_) {
    if (model_->n_items != static_cast<int>(data_.q_matrix.rows.size()) ||
        model_->n_knowledge != data_.q_matrix.n_knowledge) {
      throw Error(ErrorKind::data, "model dimensions do not match the data directory");
    }
  }
}

const ncd::NcdModel& SessionService::require_model() const {
  if (!model_) throw Error(ErrorKind::unavailable, "no model loaded");
  return *model_;
}

std::shared_ptr<std::mutex> SessionService::lock_for(const std::string& id) {
  std::lock_guard lock(locks_mu_);
  auto& slot = locks_[id];
  if (!slot) slot = std::make_shared<std::mutex>();
  return slot;
}

std::filesystem::path SessionService::path_for(const std::string& id) const {
  return config_.sessions_dir / (id + ".json");
}

Session SessionService::load(const std::string& id) const {
  if (!valid_id(id)) throw Error(ErrorKind::not_found, "unknown session: " + id);
  std::ifstream in(path_for(id));
  if (!in) throw Error(ErrorKind::not_found, "unknown session: " + id);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::data, "corrupt session file " + id + ": " + e.what());
  }
  return session_from_json(doc);
}

void SessionService::save(Session& session) const {
  session.updated_at = utc_timestamp();
  const auto path = path_for(session.id);
  std::ostringstream tag;
  tag << ".tmp." << std::this_thread::get_id();
  auto tmp = path;
  tmp += tag.str();
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(ErrorKind::data, "cannot write " + tmp.string());
    out << to_json(session).dump();
    out.flush();
    if (!out) throw Error(ErrorKind::data, "cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);

  auto trace_path = config_.sessions_dir / (session.id + ".trace.jsonl");
  auto trace_tmp = trace_path;
  trace_tmp += tag.str();
  {
    std::ofstream out(trace_tmp, std::ios::trunc);
    out << becat::to_jsonl(session.trace, &data_.maps.items);
    if (!out) throw Error(ErrorKind::data, "cannot write " + trace_tmp.string());
  }
  std::filesystem::rename(trace_tmp, trace_path);
}

json SessionService::mastery_list(const std::vector<double>& theta) const {
  json out = json::array();
  const auto m = mastery_of(theta);
  for (std::size_t k = 0; k < m.size(); ++k) {
    out.push_back({{"knowledge_id", data_.maps.knowledge.raw(static_cast<int>(k))},
                   {"name", data_.maps.knowledge_names[k]},
                   {"mastery", m[k]}});
  }
  return out;
}

json SessionService::item_payload(int item) const {
  json knowledge = json::array();
  for (int k : data_.q_matrix.row(item)) {
    knowledge.push_back({{"knowledge_id", data_.maps.knowledge.raw(k)},
                         {"name", data_.maps.knowledge_names[static_cast<std::size_t>(k)]}});
  }
  return {{"item_id", data_.maps.items.raw(item)},
          {"text", data_.maps.item_texts[static_cast<std::size_t>(item)]},
          {"knowledge", knowledge}};
}

json SessionService::summary(const Session& s) const {
  return {{"session_id", s.id},
          {"student_id", s.student_ref},
          {"status", to_string(s.status())},
          {"budget", s.selection.budget},
          {"lambda_mix", s.selection.lambda_mix},
          {"threshold", s.threshold},
          {"seed", s.seed},
          {"steps_taken", s.steps_taken()},
          {"steps_remaining", std::max(0, s.selection.budget - s.steps_taken())},
          {"candidate_count", s.selection.candidate_ids.size()},
          {"outstanding_item",
           s.outstanding ? json(data_.maps.items.raw(*s.outstanding)) : json(nullptr)},
          {"responses", [&] {
             json r = json::array();
             for (const auto& [item, correct] : s.selection.responses) {
               r.push_back({{"item_id", data_.maps.items.raw(item)}, {"correct", correct}});
             }
             return r;
           }()},
          {"mastery", mastery_list(s.selection.theta)},
          {"created_at", s.created_at},
          {"updated_at", s.updated_at}};
}

json SessionService::create_session(const json& request) {
  const auto& model = require_model();
  if (!request.is_object()) throw Error(ErrorKind::usage, "request body must be a JSON object");

  Session s;
  s.student_ref = field<std::string>(request, "student_id", "fresh");
  if (s.student_ref.empty()) s.student_ref = "fresh";
  std::vector<double> theta(static_cast<std::size_t>(model.dim()), 0.0);
  if (s.student_ref != "fresh") {
    s.student = data_.maps.students.find(s.student_ref);
    if (s.student < 0 || s.student >= model.n_students) {
      throw Error(ErrorKind::not_found, "unknown student: " + s.student_ref);
    }
    const auto row = model.theta_row(s.student);
    theta.assign(row.begin(), row.end());
  }

  becat::SelectionConfig cfg = config_.selection;
  cfg.budget = field<int>(request, "budget", cfg.budget);
  cfg.lambda_mix = field<double>(request, "lambda_mix", cfg.lambda_mix);
  cfg.threshold = field<double>(request, "threshold", cfg.threshold);
  cfg.seed = field<std::uint64_t>(request, "seed", cfg.seed);
  cfg.validate();
  s.seed = cfg.seed;
  s.threshold = cfg.threshold;

  std::vector<int> all(static_cast<std::size_t>(model.n_items));
  std::iota(all.begin(), all.end(), 0);
  const auto pool = becat::filter_candidates(data_.q_matrix, data_.graph, mastery_of(theta),
                                             cfg.threshold, all);
  s.selection = becat::start_selection(model, data_.q_matrix, std::move(theta), pool, cfg);
  s.id = new_session_id();
  s.created_at = utc_timestamp();
  auto lock = lock_for(s.id);
  std::lock_guard guard(*lock);
  save(s);
  spdlog::info("session {} created for {} (budget {}, pool {})", s.id, s.student_ref,
               cfg.budget, s.selection.candidate_ids.size());
  return summary(s);
}

json SessionService::get_session(const std::string& id) {
  auto lock = lock_for(id);
  std::lock_guard guard(*lock);
  return summary(load(id));
}

json SessionService::next_item(const std::string& id) {
  const auto& model = require_model();
  auto lock = lock_for(id);
  std::lock_guard guard(*lock);
  Session s = load(id);
  if (s.status() == Status::finished) throw Error(ErrorKind::finished, "session is finished");
  if (s.outstanding) {
    throw Error(ErrorKind::conflict, "item " + data_.maps.items.raw(*s.outstanding) +
                                         " is still awaiting a response");
  }
  const auto step = becat::select_next(model, data_.q_matrix, s.selection);
  s.outstanding = step.item;
  becat::TraceStep t;
  t.step = static_cast<int>(s.selection.selected.size());
  t.item = step.item;
  t.emc = step.emc;
  t.gain = step.gain;
  t.score = step.score;
  t.predicted_p = step.predicted_p;
  s.trace.push_back(t);
  save(s);
  json out = item_payload(step.item);
  out["step"] = s.selection.selected.size();
  out["budget"] = s.selection.budget;
  out["predicted_p"] = step.predicted_p;
  out["emc"] = step.emc;
  out["gain"] = step.gain;
  out["score"] = step.score;
  return out;
}

json SessionService::submit_response(const std::string& id, const json& body) {
  const auto& model = require_model();
  if (!body.is_object()) throw Error(ErrorKind::usage, "request body must be a JSON object");
  if (!body.contains("item_id")) throw Error(ErrorKind::usage, "missing item_id");
  if (!body.contains("correct")) throw Error(ErrorKind::usage, "missing correct");
  std::string item_raw;
  if (body.at("item_id").is_string()) {
    item_raw = body.at("item_id").get<std::string>();
  } else if (body.at("item_id").is_number_integer()) {
    item_raw = std::to_string(body.at("item_id").get<long long>());
  } else {
    throw Error(ErrorKind::usage, "item_id must be a string or integer");
  }
  int correct = -1;
  const auto& c = body.at("correct");
  if (c.is_boolean()) {
    correct = c.get<bool>() ? 1 : 0;
  } else if (c.is_number_integer()) {
    correct = c.get<int>();
  }
  if (correct != 0 && correct != 1) {
    throw Error(ErrorKind::usage, "correct must be 0, 1, true or false");
  }

  auto lock = lock_for(id);
  std::lock_guard guard(*lock);
  Session s = load(id);
  if (s.status() == Status::finished) throw Error(ErrorKind::finished, "session is finished");
  if (!s.outstanding) throw Error(ErrorKind::conflict, "no item is awaiting a response");
  const int item = *s.outstanding;
  if (data_.maps.items.raw(item) != item_raw) {
    throw Error(ErrorKind::conflict, "response is for item " + item_raw +
                                         " but the outstanding item is " +
                                         data_.maps.items.raw(item));
  }

  const auto before = mastery_of(s.selection.theta);
  const auto update = becat::update_ability(model, data_.q_matrix, s.selection, item, correct);
  s.outstanding.reset();
  s.feedback.reset();
  if (!s.trace.empty() && s.trace.back().item == item) {
    s.trace.back().observed = correct;
    s.trace.back().theta_norm_change = update.step_norm;
  }
  save(s);

  const auto after = mastery_of(s.selection.theta);
  json deltas = json::array();
  for (int k : data_.q_matrix.row(item)) {
    const auto ku = static_cast<std::size_t>(k);
    deltas.push_back({{"knowledge_id", data_.maps.knowledge.raw(k)},
                      {"name", data_.maps.knowledge_names[ku]},
                      {"before", before[ku]},
                      {"after", after[ku]},
                      {"delta", after[ku] - before[ku]}});
  }
  return {{"session_id", s.id},
          {"item_id", item_raw},
          {"correct", correct},
          {"step_norm", update.step_norm},
          {"mastery_deltas", deltas},
          {"mastery", mastery_list(s.selection.theta)},
          {"steps_taken", s.steps_taken()},
          {"steps_remaining", std::max(0, s.selection.budget - s.steps_taken())},
          {"status", to_string(s.status())}};
}

json SessionService::mastery(const std::string& id) {
  auto lock = lock_for(id);
  std::lock_guard guard(*lock);
  const Session s = load(id);
  return {{"session_id", s.id},
          {"student_id", s.student_ref},
          {"status", to_string(s.status())},
          {"mastery", mastery_list(s.selection.theta)}};
}

json SessionService::get_feedback(const std::string& id) {
  auto lock = lock_for(id);
  std::lock_guard guard(*lock);
  Session s = load(id);
  const auto& selected = s.selection.selected;
  if (!s.feedback) {
    const auto m = mastery_of(s.selection.theta);
    auto fallback =
        feedback::fallback_feedback(m, data_.maps, selected, data_.q_matrix, s.threshold);
    const auto bundle = feedback::build_prompt(m, data_.maps, selected, data_.q_matrix);
    s.feedback = feedback::generate_feedback(bundle, config_.provider, std::move(fallback));
    save(s);
  }
  auto doc = feedback::report_document(*s.feedback, s.student_ref, selected, data_.maps,
                                       s.updated_at);
  doc["session_id"] = s.id;
  return doc;
}

json SessionService::close_session(const std::string& id) {
  auto lock = lock_for(id);
  std::lock_guard guard(*lock);
  Session s = load(id);
  if (!s.closed) {
    s.closed = true;
    s.outstanding.reset();
    save(s);
  }
  return summary(s);
}

json SessionService::item(const std::string& raw_item_id) const {
  const int item = data_.maps.items.find(raw_item_id);
  if (item < 0 || item >= static_cast<int>(data_.q_matrix.rows.size())) {
    throw Error(ErrorKind::not_found, "unknown item: " + raw_item_id);
  }
  return item_payload(item);
}

int http_status(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage:
    case ErrorKind::data:
      return 400;
    case ErrorKind::not_found:
      return 404;
    case ErrorKind::conflict:
    case ErrorKind::finished:
      return 409;
    case ErrorKind::unavailable:
      return 503;
    case ErrorKind::numeric:
      return 500;
  }
  return 500;
}

void mount_routes(httplib::Server& server, SessionService& service) {
  const std::string origin = service.config().cors_origin;
  server.set_default_headers({{"Access-Control-Allow-Origin", origin},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.status = 204;
  });

  using Handler = std::function<json(const httplib::Request&)>;
  auto wrap = [](Handler h, int ok_status = 200) {
    return [h = std::move(h), ok_status](const httplib::Request& req, httplib::Response& res) {
      json body;
      int status = ok_status;
      try {
        body = h(req);
      } catch (const Error& e) {
        status = http_status(e.kind());
        body = {{"code", to_string(e.kind())}, {"message", e.what()}};
      } catch (const std::exception& e) {
        status = 500;
        body = {{"code", "internal"}, {"message", e.what()}};
      }
      res.status = status;
      res.set_content(body.dump(), "application/json");
    };
  };
  auto parse_body = [](const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    try {
      return json::parse(req.body);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::usage, std::string("request body is not JSON: ") + e.what());
    }
  };

  server.Post("/api/sessions", wrap([&service, parse_body](const httplib::Request& req) {
                return service.create_session(parse_body(req));
              }, 201));
  server.Get(R"(/api/sessions/([^/]+))", wrap([&service](const httplib::Request& req) {
               return service.get_session(req.matches[1]);
             }));
  server.Post(R"(/api/sessions/([^/]+)/next)", wrap([&service](const httplib::Request& req) {
                return service.next_item(req.matches[1]);
              }));
  server.Post(R"(/api/sessions/([^/]+)/responses)",
              wrap([&service, parse_body](const httplib::Request& req) {
                return service.submit_response(req.matches[1], parse_body(req));
              }));
  server.Get(R"(/api/sessions/([^/]+)/mastery)", wrap([&service](const httplib::Request& req) {
               return service.mastery(req.matches[1]);
             }));
  server.Post(R"(/api/sessions/([^/]+)/feedback)",
              wrap([&service](const httplib::Request& req) {
                return service.get_feedback(req.matches[1]);
              }));
  server.Get(R"(/api/items/([^/]+))", wrap([&service](const httplib::Request& req) {
               return service.item(req.matches[1]);
             }));
}

}  // namespace eduloop::service
