#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eduloop/data_ingest.hpp"
#include "json.hpp"

namespace eduloop::feedback {

inline constexpr const char* kMasteryMarker = "## Mastery Analysis";
inline constexpr const char* kRecommendationMarker = "## Recommendation Evaluation";
inline constexpr const char* kSuggestionsMarker = "## Learning Suggestions";
inline constexpr std::size_t kMaxBulletChars = 500;
inline constexpr std::size_t kDefaultPromptCap = 8000;

struct PromptBundle {
  std::string fixed_part;
  std::string dynamic_part;
  std::string rendered;
  std::vector<int> truncated_items;  // items whose text was cut to fit the cap
};

// Mastery is printed as "Name: 0.32", one line per knowledge point. When the
// rendered prompt exceeds `cap`, item texts are shortened starting from the
// least relevant item (the one whose weakest knowledge point has the highest
// mastery; later list position breaks ties). Mastery lines are never cut.
PromptBundle build_prompt(std::span<const double> mastery, const IdMaps& maps,
                          std::span<const int> recommended, const QMatrix& q,
                          std::size_t cap = kDefaultPromptCap);

enum class Provider { llm, fallback };
const char* to_string(Provider provider);

struct FeedbackReport {
  std::string mastery_analysis;
  std::string recommendation_evaluation;
  std::vector<std::string> learning_suggestions;
  Provider provider = Provider::fallback;
  std::string raw_response;
  std::string note;  // fallback cause, empty for llm reports

  bool operator==(const FeedbackReport&) const = default;
};

// Renders the three sections under their markers, suggestions as "- " bullets.
std::string to_text(const FeedbackReport& report);

// Finds the three markers (any heading level, case-insensitive) in order and
// splits the suggestions on line-leading "-", "*", "•" or "1." markers.
// Returns nullopt when a section is missing, empty, repeated or out of order;
// `why` receives the reason.
std::optional<FeedbackReport> parse_feedback(std::string_view text,
                                             std::string* why = nullptr);

// Rule-based report over the weakest three knowledge points below
// `threshold`. Deterministic in its inputs.
FeedbackReport fallback_feedback(std::span<const double> mastery,
                                 const IdMaps& maps,
                                 std::span<const int> recommended,
                                 const QMatrix& q, double threshold = 0.6);

struct ProviderConfig {
  std::string endpoint = "http://127.0.0.1:11434/v1/chat/completions";
  std::string model = "gpt-4o-mini";
  std::string token_env = "EDULOOP_LLM_TOKEN";
  double timeout_seconds = 30.0;
  double temperature = 0.2;
  int max_tokens = 700;
  int retries = 1;
  int max_in_flight = 2;

  void validate() const;
};

nlohmann::json to_json(const ProviderConfig& config);
ProviderConfig provider_config_from_json(const nlohmann::json& doc);

nlohmann::json chat_request(const PromptBundle& bundle, const ProviderConfig& config);

// Posts the prompt and parses the reply. A transport error, non-200 status,
// unreadable body or parse failure is retried `config.retries` times; after
// that, or when the token variable is unset, `fallback` is returned with the
// cause in `note`. Never throws for provider failures.
FeedbackReport generate_feedback(const PromptBundle& bundle,
                                 const ProviderConfig& config,
                                 FeedbackReport fallback);

nlohmann::json to_json(const FeedbackReport& report);
FeedbackReport report_from_json(const nlohmann::json& doc);

// feedback_report.json payload.
nlohmann::json report_document(const FeedbackReport& report,
                               const std::string& student_id,
                               std::span<const int> recommended,
                               const IdMaps& maps,
                               const std::string& created_at);

}  // namespace eduloop::feedback
