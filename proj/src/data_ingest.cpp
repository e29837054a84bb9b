#include "eduloop/data_ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <tuple>

#include "eduloop/common.hpp"
#include "eduloop/csv.hpp"

namespace eduloop {

namespace {

bool is_missing(const std::string& v) {
  return v.empty() || v == "NA" || v == "NaN" || v == "nan" || v == "NULL" ||
         v == "null";
}

std::optional<std::int64_t> parse_int(const std::string& s) {
  std::int64_t out = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return out;
}

// 0 or 1 for binary correctness, nullopt for anything else (partial credit,
// text).
std::optional<int> parse_binary(const std::string& s) {
  if (s == "0" || s == "1") return s[0] - '0';
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') return std::nullopt;
  if (v == 0.0) return 0;
  if (v == 1.0) return 1;
  return std::nullopt;
}

std::string field(const std::vector<std::string>& row, std::size_t idx) {
  return idx < row.size() ? csv::trim(row[idx]) : std::string{};
}

void ensure_parent(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw Error(ErrorKind::data,
                "cannot create directory " + dir.string() + ": " + ec.message());
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::data, "cannot write " + path.string());
  return out;
}

}  // namespace

const std::vector<int>& QMatrix::row(int item) const {
  if (item < 0 || item >= static_cast<int>(rows.size())) {
    throw Error(ErrorKind::not_found, "item index out of range: " +
                                          std::to_string(item));
  }
  return rows[static_cast<std::size_t>(item)];
}

std::vector<int> KnowledgeGraph::prerequisites_of(int dst) const {
  std::vector<int> out;
  for (const auto& e : edges) {
    if (e.dst == dst) out.push_back(e.src);
  }
  return out;
}

int IdMap::intern(const std::string& raw) {
  auto [it, inserted] = index_.try_emplace(raw, static_cast<int>(raw_.size()));
  if (inserted) raw_.push_back(raw);
  return it->second;
}

int IdMap::find(const std::string& raw) const {
  auto it = index_.find(raw);
  return it == index_.end() ? -1 : it->second;
}

int IdMap::at(const std::string& raw) const {
  const int idx = find(raw);
  if (idx < 0) throw Error(ErrorKind::not_found, "unknown id '" + raw + "'");
  return idx;
}

ParsedLog parse_logs(const std::filesystem::path& raw_log,
                     const LogSchema& schema) {
  if (!std::filesystem::exists(raw_log)) {
    throw Error(ErrorKind::data, "log file not found: " + raw_log.string());
  }
  const csv::Table table = csv::read_file(raw_log);
  const auto c_user = table.require_column(schema.user, raw_log);
  const auto c_item = table.require_column(schema.item, raw_log);
  const auto c_correct = table.require_column(schema.correct, raw_log);
  const auto c_skill = table.require_column(schema.skill, raw_log);
  std::optional<std::size_t> c_order;
  if (!schema.order.empty()) c_order = table.require_column(schema.order, raw_log);
  std::optional<std::size_t> c_name;
  if (!schema.skill_name.empty()) c_name = table.column(schema.skill_name);

  ParsedLog out;
  auto& maps = out.maps;
  auto& report = out.report;
  std::vector<std::set<int>> item_skills;
  std::map<std::tuple<std::string, std::string, std::int64_t>, std::size_t> seen;
  // Per (record, skill) pairs already merged, to tell duplicates from
  // multi-skill rows.
  std::set<std::pair<std::size_t, int>> record_skills;

  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    ++report.rows_read;
    const std::string user = field(row, c_user);
    const std::string item = field(row, c_item);
    const std::string correct = field(row, c_correct);
    const std::string skill = field(row, c_skill);
    std::optional<std::int64_t> order = static_cast<std::int64_t>(r);
    if (c_order) {
      const std::string order_text = field(row, *c_order);
      order = is_missing(order_text) ? std::nullopt : parse_int(order_text);
    }
    if (is_missing(user) || is_missing(item) || is_missing(correct) ||
        is_missing(skill) || !order || *order < 0) {
      ++report.dropped_missing_field;
      continue;
    }
    const auto label = parse_binary(correct);
    if (!label) {
      ++report.dropped_non_binary;
      continue;
    }

    const auto key = std::make_tuple(user, item, *order);
    auto found = seen.find(key);
    std::size_t record_index;
    if (found == seen.end()) {
      record_index = out.dataset.records.size();
      ResponseRecord rec;
      rec.student = maps.students.intern(user);
      rec.item = maps.items.intern(item);
      rec.correct = *label;
      rec.order = *order;
      out.dataset.records.push_back(rec);
      seen.emplace(key, record_index);
    } else {
      record_index = found->second;
    }

    const int k = maps.knowledge.intern(skill);
    if (static_cast<int>(maps.knowledge_names.size()) <= k) {
      maps.knowledge_names.resize(static_cast<std::size_t>(k) + 1);
    }
    if (maps.knowledge_names[static_cast<std::size_t>(k)].empty()) {
      std::string name = c_name ? field(row, *c_name) : std::string{};
      if (is_missing(name)) name = "Skill " + skill;
      maps.knowledge_names[static_cast<std::size_t>(k)] = name;
    }
    const int item_index = out.dataset.records[record_index].item;
    if (static_cast<int>(item_skills.size()) <= item_index) {
      item_skills.resize(static_cast<std::size_t>(item_index) + 1);
    }
    item_skills[static_cast<std::size_t>(item_index)].insert(k);

    if (found != seen.end()) {
      if (record_skills.emplace(record_index, k).second) {
        ++report.merged_skill_rows;
      } else {
        ++report.dropped_duplicate;
      }
    } else {
      record_skills.emplace(record_index, k);
    }
  }

  if (out.dataset.records.empty()) {
    throw Error(ErrorKind::data,
                "no usable rows in " + raw_log.string() + " (" +
                    std::to_string(report.rows_read) + " read)");
  }
  report.records_kept = static_cast<std::int64_t>(out.dataset.records.size());
  out.dataset.n_students = maps.students.size();
  out.dataset.n_items = maps.items.size();
  out.dataset.n_knowledge = maps.knowledge.size();

  out.q_matrix.n_knowledge = out.dataset.n_knowledge;
  for (const auto& skills : item_skills) {
    out.q_matrix.rows.emplace_back(skills.begin(), skills.end());
  }
  return out;
}

QMatrix build_q_matrix(const std::filesystem::path& mapping_file,
                       const IdMaps& maps) {
  const csv::Table table = csv::read_file(mapping_file);
  const auto c_item = table.require_column("problem_id", mapping_file);
  const auto c_skill = table.require_column("skill_id", mapping_file);

  std::vector<std::set<int>> rows(static_cast<std::size_t>(maps.items.size()));
  for (const auto& row : table.rows) {
    const std::string item = field(row, c_item);
    const std::string skill = field(row, c_skill);
    const int i = maps.items.find(item);
    if (i < 0) {
      throw Error(ErrorKind::data, "q-matrix references unknown item '" +
                                       item + "'");
    }
    const int k = maps.knowledge.find(skill);
    if (k < 0) {
      throw Error(ErrorKind::data, "q-matrix references unknown skill '" +
                                       skill + "' for item '" + item + "'");
    }
    rows[static_cast<std::size_t>(i)].insert(k);
  }

  QMatrix q;
  q.n_knowledge = maps.knowledge.size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].empty()) {
      throw Error(ErrorKind::data,
                  "item '" + maps.items.raw(static_cast<int>(i)) +
                      "' has no knowledge ids in " + mapping_file.string());
    }
    q.rows.emplace_back(rows[i].begin(), rows[i].end());
  }
  return q;
}

KnowledgeGraph read_knowledge_graph(const std::filesystem::path& path,
                                    const IdMap& knowledge) {
  const csv::Table table = csv::read_file(path);
  const auto c_src = table.require_column("src_skill_id", path);
  const auto c_dst = table.require_column("dst_skill_id", path);
  const auto c_rel = table.column("relation");

  std::set<KnowledgeEdge> unique;
  KnowledgeGraph graph;
  for (const auto& row : table.rows) {
    KnowledgeEdge e;
    const std::string src = field(row, c_src);
    const std::string dst = field(row, c_dst);
    e.src = knowledge.find(src);
    e.dst = knowledge.find(dst);
    if (e.src < 0 || e.dst < 0) {
      throw Error(ErrorKind::data, "knowledge graph edge " + src + "->" + dst +
                                       " references an unknown skill");
    }
    if (e.src == e.dst) {
      throw Error(ErrorKind::data, "knowledge graph self-loop on " + src);
    }
    if (c_rel) {
      const std::string rel = field(row, *c_rel);
      if (!rel.empty() && rel != "prerequisite") {
        throw Error(ErrorKind::data, "unsupported relation '" + rel + "'");
      }
    }
    if (unique.insert(e).second) graph.edges.push_back(e);
  }
  return graph;
}

void attach_item_texts(IdMaps& maps, const QMatrix& q,
                       const std::filesystem::path* texts_file) {
  maps.item_texts.assign(static_cast<std::size_t>(maps.items.size()), {});
  if (texts_file != nullptr) {
    const csv::Table table = csv::read_file(*texts_file);
    const auto c_item = table.require_column("problem_id", *texts_file);
    const auto c_text = table.require_column("text", *texts_file);
    for (const auto& row : table.rows) {
      const int i = maps.items.find(field(row, c_item));
      if (i < 0) continue;  // item never answered; not part of the dataset
      maps.item_texts[static_cast<std::size_t>(i)] = field(row, c_text);
    }
  }
  for (int i = 0; i < maps.items.size(); ++i) {
    auto& text = maps.item_texts[static_cast<std::size_t>(i)];
    if (!text.empty()) continue;
    text = "Problem " + maps.items.raw(i) + " (";
    const auto& skills = q.row(i);
    for (std::size_t s = 0; s < skills.size(); ++s) {
      if (s) text += "; ";
      text += maps.knowledge_names[static_cast<std::size_t>(skills[s])];
    }
    text += ")";
  }
}

DatasetSplit split_dataset(const ResponseDataset& dataset, double test_fraction,
                           std::uint64_t /*seed*/) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw Error(ErrorKind::usage, "test fraction must lie in (0,1)");
  }
  std::vector<std::vector<std::size_t>> per_student(
      static_cast<std::size_t>(dataset.n_students));
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    per_student[static_cast<std::size_t>(dataset.records[i].student)].push_back(i);
  }
  std::vector<char> in_test(dataset.records.size(), 0);
  for (auto& log : per_student) {
    if (log.size() < 2) continue;
    std::stable_sort(log.begin(), log.end(), [&](std::size_t a, std::size_t b) {
      return dataset.records[a].order < dataset.records[b].order;
    });
    auto n_test = static_cast<std::size_t>(
        std::ceil(test_fraction * static_cast<double>(log.size())));
    n_test = std::min(n_test, log.size() - 1);
    for (std::size_t j = log.size() - n_test; j < log.size(); ++j) {
      in_test[log[j]] = 1;
    }
  }

  DatasetSplit split;
  for (auto* part : {&split.train, &split.test}) {
    part->n_students = dataset.n_students;
    part->n_items = dataset.n_items;
    part->n_knowledge = dataset.n_knowledge;
  }
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    (in_test[i] ? split.test : split.train).records.push_back(dataset.records[i]);
  }
  return split;
}

void validate(const ResponseDataset& dataset) {
  std::set<std::tuple<int, int, std::int64_t>> keys;
  for (const auto& r : dataset.records) {
    if (r.student < 0 || r.student >= dataset.n_students || r.item < 0 ||
        r.item >= dataset.n_items) {
      throw Error(ErrorKind::data, "record id out of range");
    }
    if (r.correct != 0 && r.correct != 1) {
      throw Error(ErrorKind::data, "record correctness not binary");
    }
    if (!keys.emplace(r.student, r.item, r.order).second) {
      throw Error(ErrorKind::data, "duplicate record (student " +
                                       std::to_string(r.student) + ", item " +
                                       std::to_string(r.item) + ")");
    }
  }
}

void write_canonical(const std::filesystem::path& dir, const DataBundle& data) {
  ensure_parent(dir);
  const auto& maps = data.maps;
  {
    auto out = open_out(dir / kResponsesFile);
    out << "user_id,problem_id,correct,order_id\n";
    for (const auto& r : data.dataset.records) {
      out << csv::escape(maps.students.raw(r.student)) << ','
          << csv::escape(maps.items.raw(r.item)) << ',' << r.correct << ','
          << r.order << '\n';
    }
  }
  {
    auto out = open_out(dir / kQMatrixFile);
    out << "problem_id,skill_id\n";
    for (std::size_t i = 0; i < data.q_matrix.rows.size(); ++i) {
      for (int k : data.q_matrix.rows[i]) {
        out << csv::escape(maps.items.raw(static_cast<int>(i))) << ','
            << csv::escape(maps.knowledge.raw(k)) << '\n';
      }
    }
  }
  {
    auto out = open_out(dir / kKnowledgeGraphFile);
    out << "src_skill_id,dst_skill_id,relation\n";
    for (const auto& e : data.graph.edges) {
      out << csv::escape(maps.knowledge.raw(e.src)) << ','
          << csv::escape(maps.knowledge.raw(e.dst)) << ',' << e.relation << '\n';
    }
  }
  {
    auto out = open_out(dir / kKnowledgeNamesFile);
    out << "skill_id,name\n";
    for (int k = 0; k < maps.knowledge.size(); ++k) {
      out << csv::escape(maps.knowledge.raw(k)) << ','
          << csv::quote(maps.knowledge_names[static_cast<std::size_t>(k)]) << '\n';
    }
  }
  {
    auto out = open_out(dir / kItemTextsFile);
    out << "problem_id,text\n";
    for (int i = 0; i < maps.items.size(); ++i) {
      out << csv::escape(maps.items.raw(i)) << ','
          << csv::quote(maps.item_texts[static_cast<std::size_t>(i)]) << '\n';
    }
  }
}

DataBundle load_canonical(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw Error(ErrorKind::data, "data directory not found: " + dir.string());
  }
  DataBundle data;
  auto& maps = data.maps;
  {
    const auto path = dir / kKnowledgeNamesFile;
    const auto table = csv::read_file(path);
    const auto c_id = table.require_column("skill_id", path);
    const auto c_name = table.require_column("name", path);
    for (const auto& row : table.rows) {
      const int k = maps.knowledge.intern(field(row, c_id));
      if (k != static_cast<int>(maps.knowledge_names.size())) {
        throw Error(ErrorKind::data, "duplicate skill id in " + path.string());
      }
      maps.knowledge_names.push_back(field(row, c_name));
    }
  }
  {
    const auto path = dir / kItemTextsFile;
    const auto table = csv::read_file(path);
    const auto c_id = table.require_column("problem_id", path);
    const auto c_text = table.require_column("text", path);
    for (const auto& row : table.rows) {
      const int i = maps.items.intern(field(row, c_id));
      if (i != static_cast<int>(maps.item_texts.size())) {
        throw Error(ErrorKind::data, "duplicate item id in " + path.string());
      }
      maps.item_texts.push_back(field(row, c_text));
    }
  }
  {
    const auto path = dir / kResponsesFile;
    const auto table = csv::read_file(path);
    const auto c_user = table.require_column("user_id", path);
    const auto c_item = table.require_column("problem_id", path);
    const auto c_correct = table.require_column("correct", path);
    const auto c_order = table.require_column("order_id", path);
    for (const auto& row : table.rows) {
      ResponseRecord r;
      const std::string item = field(row, c_item);
      r.item = maps.items.find(item);
      if (r.item < 0) {
        throw Error(ErrorKind::data, "response references item '" + item +
                                         "' missing from " + kItemTextsFile);
      }
      r.student = maps.students.intern(field(row, c_user));
      const auto label = parse_binary(field(row, c_correct));
      const auto order = parse_int(field(row, c_order));
      if (!label || !order) {
        throw Error(ErrorKind::data, "malformed row in " + path.string());
      }
      r.correct = *label;
      r.order = *order;
      data.dataset.records.push_back(r);
    }
  }
  data.dataset.n_students = maps.students.size();
  data.dataset.n_items = maps.items.size();
  data.dataset.n_knowledge = maps.knowledge.size();
  validate(data.dataset);
  data.q_matrix = build_q_matrix(dir / kQMatrixFile, maps);
  const auto kg_path = dir / kKnowledgeGraphFile;
  if (std::filesystem::exists(kg_path)) {
    data.graph = read_knowledge_graph(kg_path, maps.knowledge);
  }
  return data;
}

nlohmann::json to_json(const IngestReport& report, const DataBundle& data) {
  return {
      {"rows_read", report.rows_read},
      {"records_kept", report.records_kept},
      {"dropped",
       {{"total", report.dropped()},
        {"missing_field", report.dropped_missing_field},
        {"non_binary_correct", report.dropped_non_binary},
        {"duplicate", report.dropped_duplicate}}},
      {"merged_multi_skill_rows", report.merged_skill_rows},
      {"n_students", data.dataset.n_students},
      {"n_items", data.dataset.n_items},
      {"n_knowledge", data.dataset.n_knowledge},
      {"n_knowledge_edges", data.graph.edges.size()},
  };
}

}  // namespace eduloop
