#include <cstdlib>
#include <thread>

#include "doctest.h"
#include "eduloop/feedback.hpp"
#include "mock_llm.hpp"
#include "support.hpp"

using namespace eduloop;
using namespace eduloop::feedback;

namespace {

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

struct EnvToken {
  explicit EnvToken(const char* name, const char* value) : name_(name) {
    ::setenv(name, value, 1);
  }
  ~EnvToken() { ::unsetenv(name_); }
  const char* name_;
};

ProviderConfig mock_config(const std::string& endpoint) {
  ProviderConfig c;
  c.endpoint = endpoint;
  c.token_env = "EDULOOP_TEST_TOKEN";
  c.timeout_seconds = 5;
  return c;
}

const std::vector<double> kMastery{0.32, 0.75, 0.55, 0.91};

}  // namespace

TEST_CASE("prompt lists every mastery line once and every item text") {
  const auto b = testing::tiny_bundle();
  const std::vector<int> rec{0, 3};
  const auto p = build_prompt(kMastery, b.maps, rec, b.q_matrix);
  CHECK(p.rendered == p.fixed_part + "\n\n" + p.dynamic_part);
  CHECK(count_of(p.rendered, "Fractions: 0.32") == 1);
  CHECK(count_of(p.rendered, "Decimals: 0.75") == 1);
  CHECK(count_of(p.rendered, "Percents: 0.55") == 1);
  CHECK(count_of(p.rendered, "Geometry: 0.91") == 1);
  CHECK(p.rendered.find(b.maps.item_texts[0]) != std::string::npos);
  CHECK(p.rendered.find(b.maps.item_texts[3]) != std::string::npos);
  CHECK(p.fixed_part.find("educational assessment expert and teaching assistant") != std::string::npos);
  for (const char* m : {kMasteryMarker, kRecommendationMarker, kSuggestionsMarker}) {
    CHECK(p.fixed_part.find(m) != std::string::npos);
  }
  CHECK(p.truncated_items.empty());
}

TEST_CASE("prompt with no recommended items says so") {
  const auto b = testing::tiny_bundle();
  const auto p = build_prompt(kMastery, b.maps, std::vector<int>{}, b.q_matrix);
  CHECK(p.rendered.find("No items recommended") != std::string::npos);
}

TEST_CASE("oversized item texts are truncated, mastery lines are kept") {
  auto b = testing::tiny_bundle();
  for (auto& t : b.maps.item_texts) t = std::string(3000, 'x');
  const std::vector<int> rec{0, 2, 6};
  const auto p = build_prompt(kMastery, b.maps, rec, b.q_matrix, 8000);
  CHECK(p.rendered.size() <= 8000);
  // Item 6 covers only the strongest point, so it is cut first.
  CHECK(p.truncated_items == std::vector<int>{6});
  CHECK(count_of(p.rendered, "Fractions: 0.32") == 1);
  CHECK(count_of(p.rendered, "Geometry: 0.91") == 1);
  const auto tight = build_prompt(kMastery, b.maps, rec, b.q_matrix, 3000);
  CHECK(tight.rendered.size() <= 3000);
  CHECK(tight.truncated_items.size() == 3);
  CHECK(count_of(tight.rendered, "Percents: 0.55") == 1);
  CHECK_THROWS_AS(build_prompt(kMastery, b.maps, rec, b.q_matrix, 100), Error);
}

TEST_CASE("prompt rejects missing names and texts") {
  auto b = testing::tiny_bundle();
  b.maps.item_texts.pop_back();
  CHECK_THROWS_AS(build_prompt(kMastery, b.maps, std::vector<int>{7}, b.q_matrix), Error);
  auto c = testing::tiny_bundle();
  c.maps.knowledge_names[2] = "";
  CHECK_THROWS_AS(build_prompt(kMastery, c.maps, std::vector<int>{0}, c.q_matrix), Error);
}

TEST_CASE("parse canonical text") {
  const auto r = parse_feedback(testing::kGoodFeedback);
  REQUIRE(r);
  CHECK(r->mastery_analysis == "Fractions is weak at 0.32.");
  CHECK(r->recommendation_evaluation == "The items target fractions directly.");
  CHECK(r->learning_suggestions ==
        std::vector<std::string>{"Revisit equivalent fractions.", "Practise adding unlike denominators."});
}

TEST_CASE("parse accepts heading and bullet variants") {
  const std::string text =
      "Intro line\n"
      "### mastery analysis:\nWeak in fractions.\n"
      "**Recommendation Evaluation**\nGood fit.\n"
      "# LEARNING SUGGESTIONS\n"
      "1. First step\n  continued here\n"
      "* Second step\n"
      "• Third step\n";
  const auto r = parse_feedback(text);
  REQUIRE(r);
  CHECK(r->learning_suggestions ==
        std::vector<std::string>{"First step continued here", "Second step", "Third step"});
}

TEST_CASE("parse failures") {
  std::string why;
  CHECK_FALSE(parse_feedback("", &why));
  CHECK_FALSE(why.empty());
  CHECK_FALSE(parse_feedback("## Recommendation Evaluation\nx\n## Mastery Analysis\ny\n"
                             "## Learning Suggestions\n- z\n"));
  CHECK_FALSE(parse_feedback("## Mastery Analysis\n\n## Recommendation Evaluation\nx\n"
                             "## Learning Suggestions\n- z\n"));
  CHECK_FALSE(parse_feedback("## Mastery Analysis\na\n## Recommendation Evaluation\nx\n"
                             "## Learning Suggestions\n"));
  CHECK_FALSE(parse_feedback("## Mastery Analysis\na\n## Mastery Analysis\nb\n"
                             "## Recommendation Evaluation\nx\n## Learning Suggestions\n- z\n"));
  CHECK_FALSE(parse_feedback("just some prose"));
}

TEST_CASE("long bullets are clipped to the bullet limit") {
  const std::string text = std::string("## Mastery Analysis\na\n## Recommendation Evaluation\nb\n") +
                           "## Learning Suggestions\n- " + std::string(900, 'y') + "\n";
  const auto r = parse_feedback(text);
  REQUIRE(r);
  CHECK(r->learning_suggestions[0].size() == kMaxBulletChars);
}

TEST_CASE("fallback names weak points and item coverage") {
  auto b = testing::tiny_bundle();
  const std::vector<double> m{0.2, 0.9, 0.9, 0.9};
  const std::vector<int> rec{0};
  const auto r = fallback_feedback(m, b.maps, rec, b.q_matrix);
  CHECK(r.provider == Provider::fallback);
  CHECK(r.mastery_analysis.find("Fractions") != std::string::npos);
  CHECK(r.mastery_analysis.find("Decimals") == std::string::npos);
  CHECK(r.recommendation_evaluation.find("Fractions") != std::string::npos);
  CHECK(r.recommendation_evaluation.find("100") != std::string::npos);
  CHECK(r.learning_suggestions.size() == 1);
}

TEST_CASE("fallback with no weak points gives one consolidation bullet") {
  auto b = testing::tiny_bundle();
  const std::vector<double> m{0.95, 0.92, 0.9, 0.97};
  const auto r = fallback_feedback(m, b.maps, std::vector<int>{}, b.q_matrix);
  CHECK(r.mastery_analysis.find("No weak points") != std::string::npos);
  REQUIRE(r.learning_suggestions.size() == 1);
  CHECK(r.learning_suggestions[0].find("Consolidate") == 0);
}

TEST_CASE("fallback picks the weakest three with id tie-break") {
  auto b = testing::tiny_bundle();
  const std::vector<double> m{0.3, 0.1, 0.3, 0.3};
  const auto r = fallback_feedback(m, b.maps, std::vector<int>{}, b.q_matrix);
  REQUIRE(r.learning_suggestions.size() == 3);
  CHECK(r.learning_suggestions[0].find("Decimals") != std::string::npos);
  CHECK(r.learning_suggestions[1].find("Fractions") != std::string::npos);
  CHECK(r.learning_suggestions[2].find("Percents") != std::string::npos);
  CHECK(r.mastery_analysis.find("Geometry") == std::string::npos);
}

TEST_CASE("fallback is deterministic and re-parses to an equal report") {
  auto b = testing::tiny_bundle();
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> m;
    for (int k = 0; k < 4; ++k) m.push_back(uniform01(rng));
    std::vector<int> rec;
    for (int i = 0; i < 8; ++i) {
      if (uniform01(rng) < 0.4) rec.push_back(i);
    }
    const auto a = fallback_feedback(m, b.maps, rec, b.q_matrix);
    CHECK(a == fallback_feedback(m, b.maps, rec, b.q_matrix));
    const auto back = parse_feedback(to_text(a));
    REQUIRE(back);
    CHECK(*back == a);
    CHECK(report_from_json(to_json(a)) == a);
  }
}

TEST_CASE("fallback mentions only names and items from its inputs") {
  auto b = testing::tiny_bundle();
  const std::vector<double> m{0.1, 0.2, 0.3, 0.4};
  const std::vector<int> rec{2, 5};
  const auto r = fallback_feedback(m, b.maps, rec, b.q_matrix);
  const auto text = to_text(r);
  for (int i = 0; i < 8; ++i) {
    const bool recommended = i == 2 || i == 5;
    if (!recommended) CHECK(text.find(b.maps.items.raw(i)) == std::string::npos);
  }
  CHECK(text.find("Geometry") == std::string::npos);  // fourth weakest is not named
}

TEST_CASE("report document carries raw ids and sections") {
  auto b = testing::tiny_bundle();
  const std::vector<int> rec{1, 2};
  const auto r = fallback_feedback(kMastery, b.maps, rec, b.q_matrix);
  const auto doc = report_document(r, "s1", rec, b.maps, "2024-01-01T00:00:00Z");
  CHECK(doc.at("student_id") == "s1");
  CHECK(doc.at("provider") == "fallback");
  CHECK(doc.at("recommended_items") == nlohmann::json::array({"101", "102"}));
  CHECK(doc.at("sections").contains("learning_suggestions"));
  CHECK(doc.at("created_at") == "2024-01-01T00:00:00Z");
}

TEST_CASE("chat request layout") {
  auto b = testing::tiny_bundle();
  const auto p = build_prompt(kMastery, b.maps, std::vector<int>{0}, b.q_matrix);
  ProviderConfig c;
  const auto req = chat_request(p, c);
  CHECK(req.at("messages").at(0).at("role") == "system");
  CHECK(req.at("messages").at(0).at("content") == p.fixed_part);
  CHECK(req.at("messages").at(1).at("content") == p.dynamic_part);
  CHECK(req.at("temperature") == 0.2);
  CHECK(req.at("max_tokens") == 700);
  CHECK(provider_config_from_json(to_json(c)).endpoint == c.endpoint);
}

TEST_CASE("well-formed provider reply gives an llm report") {
  testing::MockLlm mock([](const std::string&) { return testing::MockLlm::wrap(testing::kGoodFeedback); });
  EnvToken token("EDULOOP_TEST_TOKEN", "secret");
  auto b = testing::tiny_bundle();
  const auto p = build_prompt(kMastery, b.maps, std::vector<int>{0}, b.q_matrix);
  const auto fb = fallback_feedback(kMastery, b.maps, std::vector<int>{0}, b.q_matrix);
  const auto r = generate_feedback(p, mock_config(mock.endpoint()), fb);
  CHECK(r.provider == Provider::llm);
  CHECK(r.raw_response == testing::kGoodFeedback);
  CHECK(r.learning_suggestions.size() == 2);
  CHECK(mock.requests() == 1);
  CHECK(mock.last_auth() == "Bearer secret");
  CHECK(nlohmann::json::parse(mock.last_body()).at("model") == "gpt-4o-mini");
}

TEST_CASE("garbage replies fall back after exactly one retry") {
  for (const std::string garbage : {"not json", R"({"choices":[{"message":{"content":"hello"}}]})"}) {
    testing::MockLlm mock([&](const std::string&) { return garbage; });
    EnvToken token("EDULOOP_TEST_TOKEN", "secret");
    auto b = testing::tiny_bundle();
    const auto p = build_prompt(kMastery, b.maps, std::vector<int>{0}, b.q_matrix);
    const auto fb = fallback_feedback(kMastery, b.maps, std::vector<int>{0}, b.q_matrix);
    const auto r = generate_feedback(p, mock_config(mock.endpoint()), fb);
    CHECK(r.provider == Provider::fallback);
    CHECK(mock.requests() == 2);
    CHECK_FALSE(r.note.empty());
    CHECK(r.mastery_analysis == fb.mastery_analysis);
  }
}

TEST_CASE("unreachable endpoint and missing token fall back") {
  auto b = testing::tiny_bundle();
  const auto p = build_prompt(kMastery, b.maps, std::vector<int>{0}, b.q_matrix);
  const auto fb = fallback_feedback(kMastery, b.maps, std::vector<int>{0}, b.q_matrix);
  {
    EnvToken token("EDULOOP_TEST_TOKEN", "secret");
    auto c = mock_config("http://127.0.0.1:1/v1/chat/completions");
    c.timeout_seconds = 1;
    const auto r = generate_feedback(p, c, fb);
    CHECK(r.provider == Provider::fallback);
    CHECK(r.note.find("transport") != std::string::npos);
  }
  testing::MockLlm mock([](const std::string&) { return testing::MockLlm::wrap(testing::kGoodFeedback); });
  ::unsetenv("EDULOOP_TEST_TOKEN");
  const auto r = generate_feedback(p, mock_config(mock.endpoint()), fb);
  CHECK(r.provider == Provider::fallback);
  CHECK(r.note.find("EDULOOP_TEST_TOKEN") != std::string::npos);
  CHECK(mock.requests() == 0);
}

TEST_CASE("in-flight requests per endpoint stay under the ceiling") {
  testing::MockLlm mock([](const std::string&) { return testing::MockLlm::wrap(testing::kGoodFeedback); },
                        std::chrono::milliseconds(150));
  EnvToken token("EDULOOP_TEST_TOKEN", "secret");
  auto b = testing::tiny_bundle();
  const auto p = build_prompt(kMastery, b.maps, std::vector<int>{0}, b.q_matrix);
  const auto fb = fallback_feedback(kMastery, b.maps, std::vector<int>{0}, b.q_matrix);
  auto c = mock_config(mock.endpoint());
  c.max_in_flight = 2;
  std::vector<std::thread> threads;
  std::atomic<int> llm{0};
  for (int t = 0; t < 5; ++t) {
    threads.emplace_back([&] {
      if (generate_feedback(p, c, fb).provider == Provider::llm) ++llm;
    });
  }
  for (auto& t : threads) t.join();
  CHECK(llm == 5);
  CHECK(mock.requests() == 5);
  CHECK(mock.peak() <= 2);
}

TEST_CASE("provider config validation") {
  ProviderConfig c;
  CHECK_NOTHROW(c.validate());
  c.max_in_flight = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.retries = -1;
  CHECK_THROWS_AS(c.validate(), Error);
}
