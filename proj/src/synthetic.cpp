#include "eduloop/synthetic.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <string>
#include <vector>

#include "eduloop/common.hpp"
#include "eduloop/csv.hpp"

namespace eduloop::synthetic {

namespace {

constexpr std::array<const char*, 40> kTopics{
    "Addition and Subtraction Integers",
    "Multiplication and Division Integers",
    "Fractions",
    "Decimals",
    "Percents",
    "Ratio and Proportion",
    "Order of Operations",
    "Exponents",
    "Square Roots",
    "Scientific Notation",
    "Equation Solving",
    "Inequalities",
    "Linear Functions",
    "Slope",
    "Systems of Equations",
    "Polynomials",
    "Factoring",
    "Quadratic Equations",
    "Area",
    "Perimeter",
    "Volume",
    "Angles",
    "Triangles",
    "Pythagorean Theorem",
    "Circles",
    "Transformations",
    "Congruence",
    "Similar Figures",
    "Probability",
    "Counting Methods",
    "Mean Median Mode",
    "Box and Whisker",
    "Scatter Plots",
    "Stem and Leaf Plot",
    "Unit Conversion",
    "Rate",
    "Absolute Value",
    "Number Line",
    "Prime Factorization",
    "Greatest Common Factor",
};

constexpr std::array<const char*, 3> kLevels{"Basic", "Intermediate", "Advanced"};

struct Item {
  std::vector<int> skills;
  double difficulty = 0.0;
  double discrimination = 1.0;
  int raw_id = 0;
};

}  // namespace

Files write_export(const std::filesystem::path& dir, const Config& config) {
  if (config.n_topics < 1 || config.n_topics > static_cast<int>(kTopics.size())) {
    throw Error(ErrorKind::usage, "synthetic: n_topics must be in [1, 40]");
  }
  if (config.n_students < 1 || config.items_per_skill < 1 ||
      config.target_interactions < config.n_students) {
    throw Error(ErrorKind::usage, "synthetic: sizes too small");
  }
  std::filesystem::create_directories(dir);
  Rng rng(config.seed);

  const int n_skills = config.n_topics * 3;
  auto skill_raw = [](int k) { return 100 + 3 * k; };
  auto skill_name = [](int k) {
    return std::string(kTopics[static_cast<std::size_t>(k / 3)]) + " " +
           kLevels[static_cast<std::size_t>(k % 3)];
  };

  // Items grouped by primary skill; some carry a second skill, usually the
  // level below.
  std::vector<Item> items;
  std::vector<std::vector<int>> items_of_skill(static_cast<std::size_t>(n_skills));
  for (int k = 0; k < n_skills; ++k) {
    for (int j = 0; j < config.items_per_skill; ++j) {
      Item it;
      it.skills.push_back(k);
      if (uniform01(rng) < config.multi_skill_fraction) {
        int other = (k % 3 > 0) ? k - 1 : static_cast<int>(uniform_below(rng, n_skills));
        if (other != k) it.skills.push_back(other);
      }
      it.difficulty = normal(rng, 0.35 * (k % 3) - 0.3, 0.9);
      it.discrimination = std::exp(normal(rng, 0.3, 0.25));
      it.raw_id = 20000 + 7 * static_cast<int>(items.size());
      items_of_skill[static_cast<std::size_t>(k)].push_back(static_cast<int>(items.size()));
      items.push_back(std::move(it));
    }
  }

  Files files{dir / "raw_log.csv", dir / "raw_knowledge_graph.csv",
              dir / "raw_item_texts.csv"};
  {
    std::ofstream out(files.item_texts, std::ios::binary | std::ios::trunc);
    out << "problem_id,text\n";
    for (const auto& it : items) {
      std::string text = "Practice problem " + std::to_string(it.raw_id) + " on " +
                         skill_name(it.skills.front());
      if (it.skills.size() > 1) text += ", using " + skill_name(it.skills[1]);
      text += ". Show your work, then enter the final answer.";
      out << it.raw_id << ',' << csv::quote(text) << '\n';
    }
  }

  std::vector<char> logged(static_cast<std::size_t>(n_skills), 0);
  std::ofstream out(files.log, std::ios::binary | std::ios::trunc);
  out << "order_id,assignment_id,user_id,problem_id,original,correct,"
         "attempt_count,skill_id,skill_name\n";
  std::int64_t order_id = 30000000;
  const double mean_len =
      static_cast<double>(config.target_interactions) / config.n_students;
  std::vector<double> mastery(static_cast<std::size_t>(n_skills));
  for (int s = 0; s < config.n_students; ++s) {
    const int user_raw = 70000 + 13 * ((s * 7919) % config.n_students);
    const double general = normal(rng);
    for (int k = 0; k < n_skills; ++k) {
      mastery[static_cast<std::size_t>(k)] =
          0.9 * general + 0.75 * normal(rng) - 0.25 * (k % 3);
    }
    // Log length: geometric-ish spread around the mean.
    const double u = std::max(1e-9, uniform01(rng));
    int remaining = std::max(2, static_cast<int>(std::lround(-std::log(u) * mean_len)));
    int assignment = 500000 + s * 31;
    while (remaining > 0) {
      // Problem sets favour lower levels early on.
      const int topic = static_cast<int>(uniform_below(rng, config.n_topics));
      const int level = static_cast<int>(uniform_below(rng, 3));
      const int k = topic * 3 + level;
      const auto& pool = items_of_skill[static_cast<std::size_t>(k)];
      const int set_len = std::min(remaining, 3 + static_cast<int>(uniform_below(rng, 8)));
      ++assignment;
      for (int t = 0; t < set_len; ++t) {
        const Item& it = items[static_cast<std::size_t>(
            pool[uniform_below(rng, pool.size())])];
        double ability = 0.0;
        for (int sk : it.skills) ability += mastery[static_cast<std::size_t>(sk)];
        ability /= static_cast<double>(it.skills.size());
        const double p = 0.08 + 0.88 * sigmoid(1.7 * it.discrimination *
                                               (ability - it.difficulty));
        const int correct = uniform01(rng) < p ? 1 : 0;
        ++order_id;
        const bool partial = uniform01(rng) < config.partial_credit_rate;
        for (int sk : it.skills) {
          const bool missing_skill = uniform01(rng) < config.missing_skill_rate;
          out << order_id << ',' << assignment << ',' << user_raw << ','
              << it.raw_id << ",1,";
          if (partial) {
            out << "0.5";
          } else {
            out << correct;
          }
          out << ',' << (correct ? 1 : 1 + uniform_below(rng, 3)) << ',';
          if (!missing_skill) {
            out << skill_raw(sk) << ',' << csv::quote(skill_name(sk));
            if (!partial) logged[static_cast<std::size_t>(sk)] = 1;
          } else {
            out << ',';
          }
          out << '\n';
        }
      }
      remaining -= set_len;
    }
  }

  // Small exports can miss skills; edges must only name skills in the log.
  std::ofstream graph(files.graph, std::ios::binary | std::ios::trunc);
  graph << "src_skill_id,dst_skill_id,relation\n";
  for (int k = 0; k < n_skills; ++k) {
    if (k % 3 > 0 && logged[static_cast<std::size_t>(k - 1)] && logged[static_cast<std::size_t>(k)]) {
      graph << skill_raw(k - 1) << ',' << skill_raw(k) << ",prerequisite\n";
    }
  }
  return files;
}

}  // namespace eduloop::synthetic
