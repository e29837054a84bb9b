#pragma once

#include <cstdint>
#include <filesystem>

namespace eduloop::synthetic {

// Generator for response exports laid out like the ASSISTments skill-builder
// CSV: skill-grouped problem sets, multi-skill problems written as one row
// per skill under a shared order id, and a small share of rows with a
// missing skill or a fractional score. Responses come from a known
// knowledge-level logistic model, so predictive quality is bounded by the
// generator's noise, not by the real data's.
struct Config {
  int n_students = 2000;
  int target_interactions = 50000;
  int n_topics = 37;         // each topic has three levels -> skills
  int items_per_skill = 16;
  double multi_skill_fraction = 0.15;
  double missing_skill_rate = 0.005;
  double partial_credit_rate = 0.003;
  std::uint64_t seed = 7;
};

struct Files {
  std::filesystem::path log;         // raw response export
  std::filesystem::path graph;       // src_skill_id,dst_skill_id,relation
  std::filesystem::path item_texts;  // problem_id,text
};

Files write_export(const std::filesystem::path& dir, const Config& config);

}  // namespace eduloop::synthetic
