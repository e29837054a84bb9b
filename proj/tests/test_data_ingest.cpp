#include <algorithm>
#include <functional>

#include "doctest.h"
#include "eduloop/common.hpp"
#include "eduloop/data_ingest.hpp"
#include "support.hpp"

using namespace eduloop;
using testing::TempDir;
using testing::write_text;

namespace {

ParsedLog parse_text(const TempDir& dir, const std::string& text, const LogSchema& schema = {}) {
  write_text(dir / "log.csv", text);
  return parse_logs(dir / "log.csv", schema);
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("rows missing a skill are dropped and counted") {
  TempDir dir;
  const auto p = parse_text(dir,
                            "order_id,user_id,problem_id,correct,skill_id\n"
                            "1,70,5,1,10\n"
                            "2,70,6,0,\n"
                            "3,12,5,0,10\n");
  CHECK(p.dataset.records.size() == 2);
  CHECK(p.report.dropped() == 1);
  CHECK(p.report.dropped_missing_field == 1);
  CHECK(p.report.rows_read == 3);
}

TEST_CASE("ids are densified in first-appearance order") {
  TempDir dir;
  const auto p = parse_text(dir,
                            "order_id,user_id,problem_id,correct,skill_id\n"
                            "1,70,5,1,10\n"
                            "2,12,5,0,10\n"
                            "3,70,6,1,11\n");
  CHECK(p.maps.students.find("70") == 0);
  CHECK(p.maps.students.find("12") == 1);
  CHECK(p.dataset.n_students == 2);
  for (int i = 0; i < p.maps.students.size(); ++i) {
    CHECK(p.maps.students.find(p.maps.students.raw(i)) == i);
  }
  CHECK(p.dataset.n_items == 2);
  CHECK(p.dataset.n_knowledge == 2);
}

TEST_CASE("partial credit and text correctness are dropped as non-binary") {
  TempDir dir;
  const auto p = parse_text(dir,
                            "order_id,user_id,problem_id,correct,skill_id\n"
                            "1,1,5,0.5,10\n"
                            "2,1,5,yes,10\n"
                            "3,1,5,1.0,10\n");
  CHECK(p.dataset.records.size() == 1);
  CHECK(p.dataset.records[0].correct == 1);
  CHECK(p.report.dropped_non_binary == 2);
}

TEST_CASE("multi-skill rows merge into one response with unioned skills") {
  TempDir dir;
  const auto p = parse_text(dir,
                            "order_id,user_id,problem_id,correct,skill_id,skill_name\n"
                            "1,1,5,1,10,Fractions\n"
                            "1,1,5,1,11,Decimals\n"
                            "1,1,5,1,11,Decimals\n"
                            "2,2,5,0,10,Fractions\n");
  CHECK(p.dataset.records.size() == 2);
  CHECK(p.report.merged_skill_rows == 1);
  CHECK(p.report.dropped_duplicate == 1);
  CHECK(p.q_matrix.row(0) == std::vector<int>{0, 1});
  CHECK(p.maps.knowledge_names == std::vector<std::string>{"Fractions", "Decimals"});
}

TEST_CASE("missing column and empty logs are data errors") {
  TempDir dir;
  write_text(dir / "log.csv", "order_id,user_id,problem_id,correct\n1,1,5,1\n");
  const auto msg = error_of([&] { parse_logs(dir / "log.csv"); });
  CHECK(msg.find("skill_id") != std::string::npos);
  CHECK_THROWS_AS(parse_text(dir, "order_id,user_id,problem_id,correct,skill_id\n1,1,5,0.5,10\n"),
                  Error);
  CHECK_THROWS_AS(parse_logs(dir / "nope.csv"), Error);
}

TEST_CASE("row order is used when the schema has no order column") {
  TempDir dir;
  LogSchema schema;
  schema.order = "";
  const auto p = parse_text(dir, "user_id,problem_id,correct,skill_id\n1,5,1,10\n1,5,0,10\n", schema);
  REQUIRE(p.dataset.records.size() == 2);
  CHECK(p.dataset.records[0].order == 0);
  CHECK(p.dataset.records[1].order == 1);
}

TEST_CASE("build_q_matrix groups pairs with set semantics") {
  TempDir dir;
  auto p = parse_text(dir,
                      "order_id,user_id,problem_id,correct,skill_id\n"
                      "1,1,A,1,k1\n2,1,B,0,k2\n");
  write_text(dir / "map.csv", "problem_id,skill_id\nA,k1\nA,k2\nA,k1\nB,k1\n");
  const auto q = build_q_matrix(dir / "map.csv", p.maps);
  const int k1 = p.maps.knowledge.at("k1"), k2 = p.maps.knowledge.at("k2");
  CHECK(q.row(p.maps.items.at("A")) == std::vector<int>{std::min(k1, k2), std::max(k1, k2)});
  CHECK(q.row(p.maps.items.at("B")) == std::vector<int>{k1});
}

TEST_CASE("build_q_matrix rejects an item missing from the mapping, naming it") {
  TempDir dir;
  auto p = parse_text(dir,
                      "order_id,user_id,problem_id,correct,skill_id\n"
                      "1,1,A,1,k1\n2,1,itemC,0,k1\n");
  write_text(dir / "map.csv", "problem_id,skill_id\nA,k1\n");
  CHECK(error_of([&] { build_q_matrix(dir / "map.csv", p.maps); }).find("itemC") !=
        std::string::npos);
  write_text(dir / "map2.csv", "problem_id,skill_id\nA,k1\nitemC,k1\nZ,k1\n");
  CHECK(error_of([&] { build_q_matrix(dir / "map2.csv", p.maps); }).find("'Z'") !=
        std::string::npos);
}

TEST_CASE("knowledge graph rejects self-loops and unknown ids, dedupes edges") {
  TempDir dir;
  auto p = parse_text(dir,
                      "order_id,user_id,problem_id,correct,skill_id\n"
                      "1,1,A,1,k1\n2,1,B,0,k2\n3,1,C,0,k3\n");
  write_text(dir / "g.csv",
             "src_skill_id,dst_skill_id,relation\nk1,k2,prerequisite\nk1,k2,prerequisite\nk2,k3,\n");
  const auto g = read_knowledge_graph(dir / "g.csv", p.maps.knowledge);
  CHECK(g.edges.size() == 2);
  CHECK(g.prerequisites_of(p.maps.knowledge.at("k2")) == std::vector<int>{p.maps.knowledge.at("k1")});
  write_text(dir / "loop.csv", "src_skill_id,dst_skill_id,relation\nk1,k1,prerequisite\n");
  CHECK_THROWS_AS(read_knowledge_graph(dir / "loop.csv", p.maps.knowledge), Error);
  write_text(dir / "unk.csv", "src_skill_id,dst_skill_id,relation\nk1,k9,prerequisite\n");
  CHECK_THROWS_AS(read_knowledge_graph(dir / "unk.csv", p.maps.knowledge), Error);
  write_text(dir / "rel.csv", "src_skill_id,dst_skill_id,relation\nk1,k2,similar\n");
  CHECK_THROWS_AS(read_knowledge_graph(dir / "rel.csv", p.maps.knowledge), Error);
}

TEST_CASE("item texts fall back to a placeholder naming the knowledge points") {
  TempDir dir;
  auto p = parse_text(dir,
                      "order_id,user_id,problem_id,correct,skill_id,skill_name\n"
                      "1,1,A,1,k1,Fractions\n2,1,B,0,k2,Decimals\n");
  write_text(dir / "t.csv", "problem_id,text\nA,\"What is 1/2 + 1/4?\"\nQ,unused\n");
  const std::filesystem::path texts = dir / "t.csv";
  attach_item_texts(p.maps, p.q_matrix, &texts);
  CHECK(p.maps.item_texts[0] == "What is 1/2 + 1/4?");
  CHECK(p.maps.item_texts[1] == "Problem B (Decimals)");
}

TEST_CASE("split takes the last ceil(f*n) records per student") {
  ResponseDataset d;
  d.n_students = 2;
  d.n_items = 10;
  d.n_knowledge = 1;
  for (int r = 0; r < 10; ++r) d.records.push_back({0, r, r % 2, 9 - r});  // reversed order ids
  d.records.push_back({1, 0, 1, 0});
  const auto s = split_dataset(d, 0.2, 1);
  REQUIRE(s.test.records.size() == 2);
  for (const auto& r : s.test.records) {
    CHECK(r.student == 0);
    CHECK(r.order >= 8);
  }
  CHECK(std::count_if(s.train.records.begin(), s.train.records.end(),
                      [](const ResponseRecord& r) { return r.student == 1; }) == 1);

  const auto again = split_dataset(d, 0.2, 1);
  CHECK(again.train == s.train);
  CHECK(again.test == s.test);

  std::vector<ResponseRecord> all = s.train.records;
  all.insert(all.end(), s.test.records.begin(), s.test.records.end());
  std::sort(all.begin(), all.end());
  auto expect = d.records;
  std::sort(expect.begin(), expect.end());
  CHECK(all == expect);

  CHECK_THROWS_AS(split_dataset(d, 0.0, 1), Error);
  CHECK_THROWS_AS(split_dataset(d, 1.0, 1), Error);
}

TEST_CASE("split keeps at least one training record per student") {
  ResponseDataset d;
  d.n_students = 1;
  d.n_items = 3;
  d.n_knowledge = 1;
  for (int r = 0; r < 3; ++r) d.records.push_back({0, r, 1, r});
  const auto s = split_dataset(d, 0.9, 0);
  CHECK(s.train.records.size() == 1);
  CHECK(s.test.records.size() == 2);
}

TEST_CASE("canonical files round-trip to an equal bundle") {
  TempDir dir;
  auto p = parse_text(dir,
                      "order_id,user_id,problem_id,correct,skill_id,skill_name\n"
                      "1,u1,A,1,k1,\"Fractions, basic\"\n"
                      "1,u1,A,1,k2,Decimals\n"
                      "2,u2,B,0,k2,Decimals\n"
                      "3,u2,C,1,k3,Percents\n");
  DataBundle b{p.dataset, p.maps, p.q_matrix, {}};
  b.graph.edges = {{0, 1, "prerequisite"}};
  attach_item_texts(b.maps, b.q_matrix, nullptr);
  b.maps.item_texts[0] = "Line one\nline two, with \"quotes\"";
  write_canonical(dir / "data", b);
  const auto back = load_canonical(dir / "data");
  CHECK(back.dataset == b.dataset);
  CHECK(back.q_matrix == b.q_matrix);
  CHECK(back.maps == b.maps);
  CHECK(back.graph == b.graph);
  CHECK_NOTHROW(validate(back.dataset));
}

TEST_CASE("validate flags out-of-range ids and duplicate keys") {
  ResponseDataset d;
  d.n_students = 1;
  d.n_items = 1;
  d.n_knowledge = 1;
  d.records = {{0, 0, 1, 0}, {0, 0, 0, 0}};
  CHECK_THROWS_AS(validate(d), Error);
  d.records = {{0, 1, 1, 0}};
  CHECK_THROWS_AS(validate(d), Error);
  d.records = {{0, 0, 2, 0}};
  CHECK_THROWS_AS(validate(d), Error);
}
