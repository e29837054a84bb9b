#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace eduloop {

struct ResponseRecord {
  int student = 0;
  int item = 0;
  int correct = 0;
  // Position key in the student's log (the raw order id when available).
  std::int64_t order = 0;

  auto operator<=>(const ResponseRecord&) const = default;
};

struct ResponseDataset {
  std::vector<ResponseRecord> records;
  int n_students = 0;
  int n_items = 0;
  int n_knowledge = 0;

  bool operator==(const ResponseDataset&) const = default;
};

// Item-indexed knowledge sets, each sorted ascending and non-empty.
struct QMatrix {
  std::vector<std::vector<int>> rows;
  int n_knowledge = 0;

  const std::vector<int>& row(int item) const;
  bool operator==(const QMatrix&) const = default;
};

struct KnowledgeEdge {
  int src = 0;
  int dst = 0;
  std::string relation = "prerequisite";

  auto operator<=>(const KnowledgeEdge&) const = default;
};

struct KnowledgeGraph {
  std::vector<KnowledgeEdge> edges;

  // Knowledge ids with an edge into `dst`.
  std::vector<int> prerequisites_of(int dst) const;
  bool operator==(const KnowledgeGraph&) const = default;
};

// Bijection between raw string ids and dense indices assigned in
// first-appearance order.
class IdMap {
 public:
  int intern(const std::string& raw);
  // -1 when unknown.
  int find(const std::string& raw) const;
  int at(const std::string& raw) const;  // throws Error(not_found)
  const std::string& raw(int dense) const { return raw_.at(dense); }
  int size() const { return static_cast<int>(raw_.size()); }
  const std::vector<std::string>& raw_ids() const { return raw_; }

  bool operator==(const IdMap& o) const { return raw_ == o.raw_; }

 private:
  std::vector<std::string> raw_;
  std::unordered_map<std::string, int> index_;
};

struct IdMaps {
  IdMap students;
  IdMap items;
  IdMap knowledge;
  std::vector<std::string> knowledge_names;  // by knowledge index
  std::vector<std::string> item_texts;       // by item index

  bool operator==(const IdMaps&) const = default;
};

// Column names of the raw response export. Defaults follow the ASSISTments
// skill-builder layout.
struct LogSchema {
  std::string user = "user_id";
  std::string item = "problem_id";
  std::string correct = "correct";
  std::string skill = "skill_id";
  std::string order = "order_id";      // empty: use row number
  std::string skill_name = "skill_name";  // optional column
};

struct IngestReport {
  std::int64_t rows_read = 0;
  std::int64_t records_kept = 0;
  std::int64_t dropped_missing_field = 0;
  std::int64_t dropped_non_binary = 0;
  std::int64_t dropped_duplicate = 0;
  std::int64_t merged_skill_rows = 0;

  std::int64_t dropped() const {
    return dropped_missing_field + dropped_non_binary + dropped_duplicate;
  }
};

struct ParsedLog {
  ResponseDataset dataset;
  IdMaps maps;
  QMatrix q_matrix;  // skills unioned from the log's skill column
  IngestReport report;
};

// Reads a raw export. Rows missing user/item/skill/correct are dropped, as
// are rows whose correctness is not 0/1. Rows sharing (user, item, order)
// form one response whose skills are unioned.
ParsedLog parse_logs(const std::filesystem::path& raw_log,
                     const LogSchema& schema = {});

// Reads `problem_id,skill_id` pairs with raw ids resolved through `maps`.
// Every item in `maps.items` must receive at least one knowledge id.
QMatrix build_q_matrix(const std::filesystem::path& mapping_file,
                       const IdMaps& maps);

// Raw `src_skill_id,dst_skill_id,relation` rows; self-loops rejected,
// duplicates removed.
KnowledgeGraph read_knowledge_graph(const std::filesystem::path& path,
                                    const IdMap& knowledge);

// Raw `problem_id,text` rows. Items without a row get a generated
// placeholder naming their knowledge points.
void attach_item_texts(IdMaps& maps, const QMatrix& q,
                       const std::filesystem::path* texts_file);

struct DatasetSplit {
  ResponseDataset train;
  ResponseDataset test;
};

// Per student, the last ceil(fraction * count) records of the ordered log go
// to test (at most count - 1); students with fewer than two records stay in
// train.
DatasetSplit split_dataset(const ResponseDataset& dataset, double test_fraction,
                           std::uint64_t seed);

// Everything the trainer and the selector need, as read from a canonical
// data directory.
struct DataBundle {
  ResponseDataset dataset;
  IdMaps maps;
  QMatrix q_matrix;
  KnowledgeGraph graph;

  bool operator==(const DataBundle&) const = default;
};

inline constexpr const char* kResponsesFile = "responses.csv";
inline constexpr const char* kQMatrixFile = "q_matrix.csv";
inline constexpr const char* kKnowledgeGraphFile = "knowledge_graph.csv";
inline constexpr const char* kKnowledgeNamesFile = "knowledge_names.csv";
inline constexpr const char* kItemTextsFile = "item_texts.csv";
inline constexpr const char* kIngestReportFile = "ingest_report.json";

void write_canonical(const std::filesystem::path& dir, const DataBundle& data);
DataBundle load_canonical(const std::filesystem::path& dir);

nlohmann::json to_json(const IngestReport& report, const DataBundle& data);

// Checks the dataset invariants (ids in range, correct in {0,1}, no
// duplicate keys); throws Error(data).
void validate(const ResponseDataset& dataset);

}  // namespace eduloop
