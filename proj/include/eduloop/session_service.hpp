#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "eduloop/becat.hpp"
#include "eduloop/data_ingest.hpp"
#include "eduloop/feedback.hpp"
#include "eduloop/ncd.hpp"
#include "json.hpp"

namespace httplib {
class Server;
}

namespace eduloop::service {

enum class Status { active, finished };
const char* to_string(Status status);

struct Session {
  std::string id;
  std::string student_ref;  // raw student id or "fresh"
  int student = -1;         // dense index, -1 for fresh
  std::uint64_t seed = 0;
  double threshold = 0.6;
  becat::SelectionState selection;
  std::optional<int> outstanding;
  bool closed = false;
  std::string created_at;
  std::string updated_at;
  std::optional<feedback::FeedbackReport> feedback;
  std::vector<becat::TraceStep> trace;  // also written as <id>.trace.jsonl

  Status status() const;
  int steps_taken() const { return static_cast<int>(selection.responses.size()); }
};

nlohmann::json to_json(const Session& session);
Session session_from_json(const nlohmann::json& doc);

struct ServiceConfig {
  std::filesystem::path sessions_dir = "sessions";
  becat::SelectionConfig selection;  // per-session defaults
  feedback::ProviderConfig provider;
  std::string cors_origin = "*";
};

// Live adaptive sessions over an immutable model. Every call reads the
// session file and writes it back (atomic rename), so a restarted service
// resumes where the old one stopped. Calls on one session are serialized;
// different sessions run concurrently.
class SessionService {
 public:
  // `model` may be null; session calls then fail with ErrorKind::unavailable.
  SessionService(std::shared_ptr<const ncd::NcdModel> model, DataBundle data,
                 ServiceConfig config);

  // Request: {"student_id": raw id or "fresh" (default), "budget",
  // "lambda_mix", "threshold", "seed"}.
  nlohmann::json create_session(const nlohmann::json& request);
  nlohmann::json get_session(const std::string& id);
  nlohmann::json next_item(const std::string& id);
  // Body: {"item_id": raw id, "correct": 0 | 1}.
  nlohmann::json submit_response(const std::string& id, const nlohmann::json& body);
  nlohmann::json mastery(const std::string& id);
  nlohmann::json get_feedback(const std::string& id);
  nlohmann::json close_session(const std::string& id);
  nlohmann::json item(const std::string& raw_item_id) const;

  Session load(const std::string& id) const;
  const ServiceConfig& config() const { return config_; }
  const DataBundle& data() const { return data_; }

 private:
  const ncd::NcdModel& require_model() const;
  std::shared_ptr<std::mutex> lock_for(const std::string& id);
  std::filesystem::path path_for(const std::string& id) const;
  void save(Session& session) const;
  nlohmann::json summary(const Session& session) const;
  nlohmann::json mastery_list(const std::vector<double>& theta) const;
  nlohmann::json item_payload(int item) const;

  std::shared_ptr<const ncd::NcdModel> model_;
  DataBundle data_;
  ServiceConfig config_;
  std::mutex locks_mu_;
  std::map<std::string, std::shared_ptr<std::mutex>> locks_;
};

// HTTP status for an error kind: 400, 404, 409, 503 or 500.
int http_status(ErrorKind kind);

// Registers the /api routes on `server`, with CORS headers for
// service.config().cors_origin. Errors become {"code", "message"} bodies.
void mount_routes(httplib::Server& server, SessionService& service);

}  // namespace eduloop::service
