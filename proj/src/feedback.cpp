#include "eduloop/feedback.hpp"

#include <algorithm>
#include <cctype>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "eduloop/common.hpp"
#include "httplib.h"

namespace eduloop::feedback {
namespace {

using json = nlohmann::json;

const char* const kFixedPart =
    "You are an educational assessment expert and teaching assistant. You "
    "receive a student's mastery of each knowledge point, estimated by a "
    "cognitive diagnosis model on a 0 to 1 scale, and the items an adaptive "
    "selection strategy recommends next.\n"
    "\n"
    "Tasks:\n"
    "1. Analyse the student's mastery: name the strong and the weak knowledge "
    "points using the values given.\n"
    "2. Evaluate the recommended items: say whether they target the weak "
    "knowledge points.\n"
    "3. Give personalised, actionable learning suggestions.\n"
    "\n"
    "Output rules:\n"
    "- Answer in exactly three sections in this order, each opened by its "
    "heading on a line of its own:\n"
    "## Mastery Analysis\n"
    "## Recommendation Evaluation\n"
    "## Learning Suggestions\n"
    "- Write the learning suggestions as lines starting with \"- \", at most "
    "500 characters each.\n"
    "- Use only the knowledge points, mastery values and items given below; "
    "do not invent scores or items.\n"
    "- Keep the whole answer under 400 words.";

const char* const kTruncatedTag = " [truncated]";
const char* const kOmittedTag = "[text omitted]";

std::string two_decimals(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// Longest prefix of `s` within `n` bytes that does not split a UTF-8
// sequence.
std::string utf8_prefix(const std::string& s, std::size_t n) {
  if (n >= s.size()) return s;
  while (n > 0 && (static_cast<unsigned char>(s[n]) & 0xC0) == 0x80) --n;
  return s.substr(0, n);
}

std::string clip_bullet(std::string s) {
  if (s.size() <= kMaxBulletChars) return s;
  return utf8_prefix(s, kMaxBulletChars - 3) + "...";
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string strip(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

void check_inputs(std::span<const double> mastery, const IdMaps& maps,
                  std::span<const int> recommended, const QMatrix& q) {
  if (mastery.size() != maps.knowledge_names.size()) {
    throw Error(ErrorKind::data,
                "missing knowledge name: mastery has " + std::to_string(mastery.size()) +
                    " entries, names " + std::to_string(maps.knowledge_names.size()));
  }
  for (std::size_t k = 0; k < maps.knowledge_names.size(); ++k) {
    if (maps.knowledge_names[k].empty()) {
      throw Error(ErrorKind::data, "missing knowledge name for knowledge index " +
                                       std::to_string(k));
    }
  }
  for (int item : recommended) {
    if (item < 0 || item >= static_cast<int>(q.rows.size()) ||
        item >= static_cast<int>(maps.item_texts.size()) ||
        maps.item_texts[static_cast<std::size_t>(item)].empty()) {
      throw Error(ErrorKind::data, "missing item text for item index " + std::to_string(item));
    }
  }
}

std::string item_label(const IdMaps& maps, int item) {
  return item < maps.items.size() ? maps.items.raw(item) : std::to_string(item);
}

std::string knowledge_list(const IdMaps& maps, const QMatrix& q, int item) {
  std::vector<std::string> names;
  for (int k : q.row(item)) names.push_back(maps.knowledge_names[static_cast<std::size_t>(k)]);
  return join(names, ", ");
}

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

std::optional<Endpoint> split_endpoint(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) return std::nullopt;
  const std::string scheme = lower(url.substr(0, scheme_end));
  if (scheme != "http" && scheme != "https") return std::nullopt;
  const auto slash = url.find('/', scheme_end + 3);
  Endpoint ep;
  ep.origin = url.substr(0, slash);
  ep.path = slash == std::string::npos ? "/" : url.substr(slash);
  if (ep.origin.size() <= scheme_end + 3) return std::nullopt;
  return ep;
}

// Caps concurrent requests per endpoint.
class InFlight {
 public:
  void acquire(int limit) {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return active_ < limit; });
    ++active_;
  }
  void release() {
    {
      std::lock_guard lock(mu_);
      --active_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  int active_ = 0;
};

std::shared_ptr<InFlight> limiter_for(const std::string& endpoint) {
  static std::mutex mu;
  static std::map<std::string, std::shared_ptr<InFlight>> limiters;
  std::lock_guard lock(mu);
  auto& slot = limiters[endpoint];
  if (!slot) slot = std::make_shared<InFlight>();
  return slot;
}

class InFlightGuard {
 public:
  InFlightGuard(std::shared_ptr<InFlight> limiter, int limit)
      : limiter_(std::move(limiter)) {
    limiter_->acquire(limit);
  }
  ~InFlightGuard() { limiter_->release(); }
  InFlightGuard(const InFlightGuard&) = delete;
  InFlightGuard& operator=(const InFlightGuard&) = delete;

 private:
  std::shared_ptr<InFlight> limiter_;
};

// One request; on failure returns nullopt with the cause in `cause`.
std::optional<FeedbackReport> attempt(const Endpoint& ep, const json& body,
                                      const std::string& token,
                                      const ProviderConfig& config,
                                      std::string& cause) {
  httplib::Client client(ep.origin);
  const auto secs = static_cast<time_t>(config.timeout_seconds);
  const auto usecs = static_cast<time_t>((config.timeout_seconds - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  httplib::Headers headers{{"Authorization", "Bearer " + token}};
  auto res = client.Post(ep.path, headers, body.dump(), "application/json");
  if (!res) {
    cause = "transport error: " + httplib::to_string(res.error());
    return std::nullopt;
  }
  if (res->status != 200) {
    cause = "provider returned HTTP " + std::to_string(res->status);
    return std::nullopt;
  }
  std::string content;
  try {
    const auto doc = json::parse(res->body);
    const auto& choice = doc.at("choices").at(0);
    if (choice.contains("message")) {
      content = choice.at("message").at("content").get<std::string>();
    } else {
      content = choice.at("text").get<std::string>();
    }
  } catch (const std::exception& e) {
    cause = std::string("unreadable provider body: ") + e.what();
    return std::nullopt;
  }
  std::string why;
  auto report = parse_feedback(content, &why);
  if (!report) {
    cause = "malformed feedback: " + why;
    return std::nullopt;
  }
  report->provider = Provider::llm;
  report->raw_response = content;
  return report;
}

}  // namespace

PromptBundle build_prompt(std::span<const double> mastery, const IdMaps& maps,
                          std::span<const int> recommended, const QMatrix& q,
                          std::size_t cap) {
  check_inputs(mastery, maps, recommended, q);

  std::string head = "Student mastery (knowledge point: mastery):\n";
  for (std::size_t k = 0; k < mastery.size(); ++k) {
    head += maps.knowledge_names[k] + ": " + two_decimals(mastery[k]) + "\n";
  }
  head += "\n";

  std::vector<std::string> texts;
  for (int item : recommended) texts.push_back(maps.item_texts[static_cast<std::size_t>(item)]);

  PromptBundle bundle;
  bundle.fixed_part = kFixedPart;
  auto render = [&] {
    std::string dyn = head;
    if (recommended.empty()) {
      dyn +=
          "Recommended items: none.\n"
          "No items recommended: in the Recommendation Evaluation section, "
          "state that no items were recommended.\n";
    } else {
      dyn += "Recommended items:\n";
      for (std::size_t i = 0; i < recommended.size(); ++i) {
        const int item = recommended[i];
        dyn += std::to_string(i + 1) + ". Item " + item_label(maps, item) + ": " +
               texts[i] + "\n   Knowledge points: " + knowledge_list(maps, q, item) + "\n";
      }
    }
    bundle.dynamic_part = dyn;
    bundle.rendered = bundle.fixed_part + "\n\n" + bundle.dynamic_part;
  };
  render();
  if (bundle.rendered.size() <= cap) return bundle;

  // Least relevant first: highest weakest-mastery, then later position.
  std::vector<std::size_t> order(recommended.size());
  std::iota(order.begin(), order.end(), 0);
  auto weakest = [&](std::size_t i) {
    double m = 1.0;
    for (int k : q.row(recommended[i])) m = std::min(m, mastery[static_cast<std::size_t>(k)]);
    return m;
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double wa = weakest(a), wb = weakest(b);
    if (wa != wb) return wa > wb;
    return a > b;
  });
  const std::string truncated_tag = kTruncatedTag;
  for (std::size_t i : order) {
    if (bundle.rendered.size() <= cap) break;
    const std::size_t excess = bundle.rendered.size() - cap;
    const std::size_t len = texts[i].size();
    if (len > excess + truncated_tag.size()) {
      texts[i] = utf8_prefix(texts[i], len - excess - truncated_tag.size()) + truncated_tag;
    } else {
      texts[i] = kOmittedTag;
    }
    bundle.truncated_items.push_back(recommended[i]);
    render();
  }
  if (bundle.rendered.size() > cap) {
    throw Error(ErrorKind::usage, "prompt cap " + std::to_string(cap) +
                                      " is too small for the mastery lines (" +
                                      std::to_string(bundle.rendered.size()) + " chars)");
  }
  std::sort(bundle.truncated_items.begin(), bundle.truncated_items.end());
  return bundle;
}

const char* to_string(Provider provider) {
  return provider == Provider::llm ? "llm" : "fallback";
}

std::string to_text(const FeedbackReport& report) {
  std::string out;
  out += std::string(kMasteryMarker) + "\n" + report.mastery_analysis + "\n\n";
  out += std::string(kRecommendationMarker) + "\n" + report.recommendation_evaluation + "\n\n";
  out += std::string(kSuggestionsMarker) + "\n";
  for (const auto& b : report.learning_suggestions) out += "- " + b + "\n";
  return out;
}

std::optional<FeedbackReport> parse_feedback(std::string_view text, std::string* why) {
  auto fail = [&](std::string reason) -> std::optional<FeedbackReport> {
    if (why) *why = std::move(reason);
    return std::nullopt;
  };
  static const char* const names[3] = {"mastery analysis", "recommendation evaluation",
                                       "learning suggestions"};

  std::vector<std::string> lines;
  {
    std::string line;
    std::istringstream in{std::string(text)};
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
  }

  int next = 0;
  std::vector<std::string> bodies[3];
  int current = -1;
  for (const auto& raw : lines) {
    const std::string t = strip(raw);
    const bool bold = t.size() > 4 && t.rfind("**", 0) == 0 &&
                      (t.back() == '*' || (t.back() == ':' && t[t.size() - 2] == '*'));
    if (!t.empty() && (t[0] == '#' || bold)) {
      std::string h = t.substr(t.find_first_not_of('#') == std::string::npos
                                   ? t.size()
                                   : t.find_first_not_of('#'));
      h = strip(h);
      while (!h.empty() && (h.back() == ':' || h.back() == '*')) h.pop_back();
      while (!h.empty() && h.front() == '*') h.erase(h.begin());
      h = lower(strip(h));
      int which = -1;
      for (int s = 0; s < 3; ++s) {
        if (h == names[s]) which = s;
      }
      if (which >= 0) {
        if (which != next) {
          return fail(which < next ? std::string("repeated section: ") + names[which]
                                   : std::string("section out of order: ") + names[which]);
        }
        current = which;
        ++next;
        continue;
      }
    }
    if (current >= 0) bodies[current].push_back(raw);
  }
  if (next < 3) return fail(std::string("missing section: ") + names[next]);

  FeedbackReport report;
  report.mastery_analysis = strip(join(bodies[0], "\n"));
  report.recommendation_evaluation = strip(join(bodies[1], "\n"));
  if (report.mastery_analysis.empty()) return fail("empty section: mastery analysis");
  if (report.recommendation_evaluation.empty()) {
    return fail("empty section: recommendation evaluation");
  }

  std::vector<std::string> bullets;
  bool open = false;
  for (const auto& raw : bodies[2]) {
    std::string t = strip(raw);
    if (t.empty()) {
      open = false;
      continue;
    }
    std::size_t skip = 0;
    if (t.rfind("- ", 0) == 0 || t.rfind("* ", 0) == 0) {
      skip = 2;
    } else if (t.rfind("\xE2\x80\xA2", 0) == 0) {
      skip = 3;
    } else {
      std::size_t d = 0;
      while (d < t.size() && std::isdigit(static_cast<unsigned char>(t[d]))) ++d;
      if (d > 0 && d + 1 < t.size() && (t[d] == '.' || t[d] == ')') && t[d + 1] == ' ') {
        skip = d + 2;
      }
    }
    if (skip > 0) {
      bullets.push_back(strip(t.substr(skip)));
      open = true;
    } else if (open && !bullets.empty()) {
      bullets.back() += " " + t;
    } else {
      bullets.push_back(t);
      open = true;
    }
  }
  for (auto& b : bullets) {
    if (!b.empty()) report.learning_suggestions.push_back(clip_bullet(b));
  }
  if (report.learning_suggestions.empty()) return fail("empty section: learning suggestions");
  report.raw_response = std::string(text);
  return report;
}

FeedbackReport fallback_feedback(std::span<const double> mastery, const IdMaps& maps,
                                 std::span<const int> recommended, const QMatrix& q,
                                 double threshold) {
  check_inputs(mastery, maps, recommended, q);
  const std::string th = two_decimals(threshold);
  auto name = [&](int k) { return maps.knowledge_names[static_cast<std::size_t>(k)]; };

  std::vector<int> ids(mastery.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
    return mastery[static_cast<std::size_t>(a)] < mastery[static_cast<std::size_t>(b)];
  });
  std::vector<int> weak;
  for (int k : ids) {
    if (weak.size() == 3) break;
    if (mastery[static_cast<std::size_t>(k)] < threshold) weak.push_back(k);
  }
  const auto n_below = std::count_if(mastery.begin(), mastery.end(),
                                     [&](double m) { return m < threshold; });

  FeedbackReport report;
  report.provider = Provider::fallback;

  if (weak.empty()) {
    report.mastery_analysis = "No weak points: every knowledge point is at or above the " + th +
                              " mastery threshold.";
    if (!ids.empty()) {
      report.mastery_analysis += " Lowest: " + name(ids.front()) + " (" +
                                 two_decimals(mastery[static_cast<std::size_t>(ids.front())]) +
                                 ").";
    }
  } else {
    std::vector<std::string> parts;
    for (int k : weak) parts.push_back(name(k) + " (" + two_decimals(mastery[static_cast<std::size_t>(k)]) + ")");
    report.mastery_analysis = "Weakest knowledge points: " + join(parts, ", ") + ". " +
                              std::to_string(n_below) + " of " +
                              std::to_string(mastery.size()) +
                              " knowledge points are below the " + th + " mastery threshold.";
  }

  // Recommended items per knowledge point, in recommendation order.
  std::map<int, std::vector<std::string>> covering;
  for (int item : recommended) {
    for (int k : q.row(item)) covering[k].push_back(item_label(maps, item));
  }

  if (recommended.empty()) {
    report.recommendation_evaluation = "No items were recommended.";
  } else {
    std::vector<std::string> labels;
    for (int item : recommended) labels.push_back(item_label(maps, item));
    std::string text = std::to_string(recommended.size()) + " recommended item" +
                       (recommended.size() == 1 ? "" : "s") + " (" + join(labels, ", ") + ").";
    if (weak.empty()) {
      std::set<int> ks;
      for (int item : recommended) ks.insert(q.row(item).begin(), q.row(item).end());
      std::vector<std::string> names;
      for (int k : ks) names.push_back(name(k));
      text += " They consolidate: " + join(names, ", ") + ".";
    } else {
      std::vector<std::string> covered, missed;
      for (int k : weak) {
        auto it = covering.find(k);
        if (it == covering.end()) {
          missed.push_back(name(k));
        } else {
          covered.push_back(name(k) + " (items " + join(it->second, ", ") + ")");
        }
      }
      if (!covered.empty()) text += " Weak points covered: " + join(covered, "; ") + ".";
      if (!missed.empty()) text += " Weak points not covered: " + join(missed, ", ") + ".";
    }
    report.recommendation_evaluation = text;
  }

  if (weak.empty()) {
    report.learning_suggestions.push_back(
        "Consolidate: keep practising mixed items to maintain the current mastery.");
  } else {
    for (int k : weak) {
      std::string b = "Review " + name(k) + " (mastery " +
                      two_decimals(mastery[static_cast<std::size_t>(k)]) + ")";
      auto it = covering.find(k);
      if (it != covering.end()) {
        b += ": work through items " + join(it->second, ", ") + " and check each step.";
      } else {
        b += " and its prerequisites before attempting new items.";
      }
      report.learning_suggestions.push_back(clip_bullet(b));
    }
  }
  report.raw_response = to_text(report);
  return report;
}

void ProviderConfig::validate() const {
  if (!split_endpoint(endpoint)) {
    throw Error(ErrorKind::usage, "provider endpoint must be an http(s) URL: " + endpoint);
  }
  if (model.empty()) throw Error(ErrorKind::usage, "provider model must be set");
  if (token_env.empty()) throw Error(ErrorKind::usage, "provider token_env must be set");
  if (!(timeout_seconds > 0)) throw Error(ErrorKind::usage, "provider timeout must be > 0");
  if (!(temperature >= 0)) throw Error(ErrorKind::usage, "temperature must be >= 0");
  if (max_tokens <= 0) throw Error(ErrorKind::usage, "max_tokens must be > 0");
  if (retries < 0) throw Error(ErrorKind::usage, "retries must be >= 0");
  if (max_in_flight <= 0) throw Error(ErrorKind::usage, "max_in_flight must be > 0");
}

json to_json(const ProviderConfig& c) {
  return {{"endpoint", c.endpoint},       {"model", c.model},
          {"token_env", c.token_env},     {"timeout_seconds", c.timeout_seconds},
          {"temperature", c.temperature}, {"max_tokens", c.max_tokens},
          {"retries", c.retries},         {"max_in_flight", c.max_in_flight}};
}

ProviderConfig provider_config_from_json(const json& doc) {
  ProviderConfig c;
  try {
    c.endpoint = doc.value("endpoint", c.endpoint);
    c.model = doc.value("model", c.model);
    c.token_env = doc.value("token_env", c.token_env);
    c.timeout_seconds = doc.value("timeout_seconds", c.timeout_seconds);
    c.temperature = doc.value("temperature", c.temperature);
    c.max_tokens = doc.value("max_tokens", c.max_tokens);
    c.retries = doc.value("retries", c.retries);
    c.max_in_flight = doc.value("max_in_flight", c.max_in_flight);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::usage, std::string("bad provider config: ") + e.what());
  }
  c.validate();
  return c;
}

json chat_request(const PromptBundle& bundle, const ProviderConfig& config) {
  return {{"model", config.model},
          {"messages", json::array({{{"role", "system"}, {"content", bundle.fixed_part}},
                                    {{"role", "user"}, {"content", bundle.dynamic_part}}})},
          {"temperature", config.temperature},
          {"max_tokens", config.max_tokens}};
}

FeedbackReport generate_feedback(const PromptBundle& bundle, const ProviderConfig& config,
                                 FeedbackReport fallback) {
  fallback.provider = Provider::fallback;
  auto degrade = [&](std::string cause) {
    spdlog::warn("feedback: using fallback report ({})", cause);
    fallback.note = std::move(cause);
    return fallback;
  };

  const auto ep = split_endpoint(config.endpoint);
  if (!ep) return degrade("invalid endpoint " + config.endpoint);
  const char* token = std::getenv(config.token_env.c_str());
  if (!token || !*token) return degrade("no token in $" + config.token_env);

  const json body = chat_request(bundle, config);
  InFlightGuard guard(limiter_for(config.endpoint), std::max(1, config.max_in_flight));
  std::string cause;
  for (int i = 0; i <= std::max(0, config.retries); ++i) {
    if (auto report = attempt(*ep, body, token, config, cause)) return *report;
    spdlog::info("feedback: attempt {} failed: {}", i + 1, cause);
  }
  return degrade(cause);
}

json to_json(const FeedbackReport& r) {
  return {{"mastery_analysis", r.mastery_analysis},
          {"recommendation_evaluation", r.recommendation_evaluation},
          {"learning_suggestions", r.learning_suggestions},
          {"provider", to_string(r.provider)},
          {"raw_response", r.raw_response},
          {"note", r.note}};
}

FeedbackReport report_from_json(const json& doc) {
  FeedbackReport r;
  try {
    r.mastery_analysis = doc.at("mastery_analysis").get<std::string>();
    r.recommendation_evaluation = doc.at("recommendation_evaluation").get<std::string>();
    r.learning_suggestions = doc.at("learning_suggestions").get<std::vector<std::string>>();
    const auto provider = doc.at("provider").get<std::string>();
    if (provider != "llm" && provider != "fallback") {
      throw Error(ErrorKind::data, "unknown feedback provider: " + provider);
    }
    r.provider = provider == "llm" ? Provider::llm : Provider::fallback;
    r.raw_response = doc.value("raw_response", "");
    r.note = doc.value("note", "");
  } catch (const json::exception& e) {
    throw Error(ErrorKind::data, std::string("bad feedback report: ") + e.what());
  }
  return r;
}

json report_document(const FeedbackReport& report, const std::string& student_id,
                     std::span<const int> recommended, const IdMaps& maps,
                     const std::string& created_at) {
  json items = json::array();
  for (int item : recommended) items.push_back(item_label(maps, item));
  json doc = {{"student_id", student_id},
              {"provider", to_string(report.provider)},
              {"sections",
               {{"mastery_analysis", report.mastery_analysis},
                {"recommendation_evaluation", report.recommendation_evaluation},
                {"learning_suggestions", report.learning_suggestions}}},
              {"recommended_items", items},
              {"created_at", created_at}};
  if (!report.note.empty()) doc["note"] = report.note;
  return doc;
}

}  // namespace eduloop::feedback
