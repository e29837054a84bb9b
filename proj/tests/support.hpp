#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "eduloop/common.hpp"
#include "eduloop/data_ingest.hpp"
#include "eduloop/ncd.hpp"

namespace testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    std::random_device rd;
    path_ = fs::temp_directory_path() /
            ("eduloop_test_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Random q-matrix with 1..3 knowledge points per item.
inline eduloop::QMatrix random_q(int n_items, int n_knowledge, eduloop::Rng& rng) {
  eduloop::QMatrix q;
  q.n_knowledge = n_knowledge;
  for (int i = 0; i < n_items; ++i) {
    std::vector<int> row;
    const int width = 1 + static_cast<int>(eduloop::uniform_below(rng, 3));
    while (static_cast<int>(row.size()) < std::min(width, n_knowledge)) {
      const int k = static_cast<int>(eduloop::uniform_below(rng, static_cast<std::uint64_t>(n_knowledge)));
      if (std::find(row.begin(), row.end(), k) == row.end()) row.push_back(k);
    }
    std::sort(row.begin(), row.end());
    q.rows.push_back(row);
  }
  return q;
}

// Model with parameters large enough that every gradient term is
// non-trivial: embeddings in +-1.5, MLP weights in (0, 1), biases in +-0.5.
inline eduloop::ncd::NcdModel random_model(int n_students, int n_items, int n_knowledge,
                                           std::uint64_t seed,
                                           std::vector<int> hidden = {6, 4}) {
  eduloop::ncd::TrainConfig cfg;
  cfg.hidden_sizes = std::move(hidden);
  cfg.seed = seed;
  auto model = eduloop::ncd::init_model(n_students, n_items, n_knowledge, cfg);
  eduloop::Rng rng(seed * 7919 + 1);
  for (auto& v : model.params.theta.data) v = eduloop::uniform(rng, -1.5, 1.5);
  for (auto& v : model.params.beta.data) v = eduloop::uniform(rng, -1.5, 1.5);
  for (auto& v : model.params.alpha_raw) v = eduloop::uniform(rng, -1.0, 1.0);
  for (auto& layer : model.params.layers) {
    for (auto& w : layer.weight.data) w = eduloop::uniform(rng, 0.0, 1.0);
    for (auto& b : layer.bias) b = eduloop::uniform(rng, -0.5, 0.5);
  }
  return model;
}

inline eduloop::ResponseDataset random_records(int n_students, int n_items, int n_knowledge,
                                               int count, eduloop::Rng& rng) {
  eduloop::ResponseDataset d;
  d.n_students = n_students;
  d.n_items = n_items;
  d.n_knowledge = n_knowledge;
  for (int r = 0; r < count; ++r) {
    eduloop::ResponseRecord rec;
    rec.student = static_cast<int>(eduloop::uniform_below(rng, static_cast<std::uint64_t>(n_students)));
    rec.item = static_cast<int>(eduloop::uniform_below(rng, static_cast<std::uint64_t>(n_items)));
    rec.correct = static_cast<int>(eduloop::uniform_below(rng, 2));
    rec.order = r;
    d.records.push_back(rec);
  }
  return d;
}

// Small canonical bundle: 4 knowledge points named A..D, 8 items, a
// prerequisite chain A -> B -> C.
inline eduloop::DataBundle tiny_bundle(int n_students = 6) {
  eduloop::DataBundle b;
  const char* names[] = {"Fractions", "Decimals", "Percents", "Geometry"};
  for (int k = 0; k < 4; ++k) {
    b.maps.knowledge.intern("k" + std::to_string(k));
    b.maps.knowledge_names.push_back(names[k]);
  }
  b.q_matrix.n_knowledge = 4;
  const std::vector<std::vector<int>> rows{{0}, {0, 1}, {1}, {1, 2}, {2}, {2, 3}, {3}, {0, 3}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    b.maps.items.intern(std::to_string(100 + i));
    b.maps.item_texts.push_back("Problem " + std::to_string(100 + i) + " statement");
    b.q_matrix.rows.push_back(rows[i]);
  }
  for (int s = 0; s < n_students; ++s) b.maps.students.intern("s" + std::to_string(s));
  b.graph.edges = {{0, 1, "prerequisite"}, {1, 2, "prerequisite"}};
  b.dataset.n_students = n_students;
  b.dataset.n_items = static_cast<int>(rows.size());
  b.dataset.n_knowledge = 4;
  eduloop::Rng rng(5);
  for (int s = 0; s < n_students; ++s) {
    for (int r = 0; r < 12; ++r) {
      b.dataset.records.push_back(
          {s, static_cast<int>(eduloop::uniform_below(rng, rows.size())),
           static_cast<int>(eduloop::uniform_below(rng, 2)), r});
    }
  }
  return b;
}

inline double rel_err(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-300});
  return std::abs(a - b) / scale;
}

}  // namespace testing
