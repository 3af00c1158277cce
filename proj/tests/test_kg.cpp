#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "cqa/kg.hpp"
#include "support/test_util.hpp"

using namespace cqa;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "cqa_kg_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p);
  out << content;
}

}  // namespace

TEST_CASE("load_triples reads ids back directly") {
  auto p = temp_file("basic.txt");
  write_file(p, "0 0 1\n1 1 2\n");
  KnowledgeGraph g = load_triples(p);
  CHECK(g.num_entities() == 3);
  CHECK(g.num_relations() == 2);
  CHECK(g.triples().size() == 2);
}

TEST_CASE("load_triples: empty file with explicit counts") {
  auto p = temp_file("empty.txt");
  write_file(p, "");
  KnowledgeGraph g = load_triples(p, {{5, 2}});
  CHECK(g.num_entities() == 5);
  CHECK(g.num_relations() == 2);
  CHECK(g.triples().empty());
}

TEST_CASE("load_triples deduplicates repeated lines") {
  auto p = temp_file("dup.txt");
  write_file(p, "0 0 1\n0 0 1\n");
  KnowledgeGraph g = load_triples(p);
  // Set-semantics oracle: inserting into a set gives the expected count.
  std::set<std::tuple<int, int, int>> expected{{0, 0, 1}};
  CHECK(g.triples().size() == expected.size());
}

TEST_CASE("load_triples: tabs and comments accepted") {
  auto p = temp_file("tabs.txt");
  write_file(p, "# header\n0\t1\t2\n\n3 0 4\n");
  KnowledgeGraph g = load_triples(p);
  CHECK(g.triples().size() == 2);
}

TEST_CASE("load_triples: malformed line reports its number") {
  auto p = temp_file("bad.txt");
  write_file(p, "0 0 1\nnope\n");
  CHECK_THROWS_WITH_AS(load_triples(p), doctest::Contains(":2"), ParseError);
}

TEST_CASE("load_triples: id beyond declared count is a validation error") {
  auto p = temp_file("range.txt");
  write_file(p, "0 0 9\n");
  CHECK_THROWS_AS(load_triples(p, {{5, 2}}), ValidationError);
}

TEST_CASE("neighbors matches the direct index") {
  KnowledgeGraph g(3, 1, {{0, 0, 1}, {0, 0, 2}});
  CHECK(neighbors(g, 0, 0) == std::vector<int32_t>{1, 2});
  CHECK(neighbors(g, 1, 0).empty());
  CHECK_THROWS_AS(neighbors(g, 7, 0), ValidationError);
  CHECK_THROWS_AS(neighbors(g, 0, 3), ValidationError);
}

TEST_CASE("neighbors equals a brute-force scan over triples") {
  Rng rng(42);
  KnowledgeGraph g = testsupport::random_graph(60, 4, 500, rng);
  for (int probe = 0; probe < 1000; ++probe) {
    auto h = static_cast<int32_t>(rng.below(60));
    auto r = static_cast<int32_t>(rng.below(4));
    std::vector<int32_t> expected;
    for (const Triple& t : g.triples()) {
      if (t.head == h && t.relation == r) expected.push_back(t.tail);
    }
    std::sort(expected.begin(), expected.end());
    CHECK(neighbors(g, h, r) == expected);
  }
}

TEST_CASE("index round-trip reproduces the triple set") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    auto n = static_cast<int32_t>(20 + rng.below(200));
    KnowledgeGraph g = testsupport::random_graph(
        n, 5, static_cast<int32_t>(1 + rng.below(10000)), rng);
    std::vector<Triple> from_out, from_in;
    for (int32_t h = 0; h < n; ++h) {
      for (int32_t r = 0; r < 5; ++r) {
        for (int32_t t : g.neighbors(h, r)) from_out.push_back({h, r, t});
        for (int32_t s : g.inverse_neighbors(h, r)) from_in.push_back({s, r, h});
      }
    }
    std::sort(from_out.begin(), from_out.end());
    std::sort(from_in.begin(), from_in.end());
    CHECK(from_out == g.triples());
    CHECK(from_in == g.triples());
  }
}

namespace {

bool subset(const KnowledgeGraph& a, const KnowledgeGraph& b) {
  for (const Triple& t : a.triples()) {
    if (!b.contains(t)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("generate_synthetic_kg: zero holdout collapses the split") {
  GraphSplit s = generate_synthetic_kg(100, 5, 200, 0.0, 7);
  CHECK(s.train.triples() == s.test.triples());
  CHECK(s.valid.triples() == s.test.triples());
}

TEST_CASE("generate_synthetic_kg is deterministic in the seed") {
  GraphSplit a = generate_synthetic_kg(100, 5, 200, 0.2, 7);
  GraphSplit b = generate_synthetic_kg(100, 5, 200, 0.2, 7);
  CHECK(a.train.triples() == b.train.triples());
  CHECK(a.valid.triples() == b.valid.triples());
  CHECK(a.test.triples() == b.test.triples());
  GraphSplit c = generate_synthetic_kg(100, 5, 200, 0.2, 8);
  CHECK(a.test.triples() != c.test.triples());
}

TEST_CASE("generate_synthetic_kg holds out the requested fraction") {
  GraphSplit s = generate_synthetic_kg(100, 5, 200, 0.2, 7);
  auto total = static_cast<double>(s.test.triples().size());
  auto held = total - static_cast<double>(s.train.triples().size());
  // Per-relation rounding keeps the overall fraction within one edge per
  // relation.
  CHECK(held / total == doctest::Approx(0.2).epsilon(5.0 * 1.0 / 200.0));
}

TEST_CASE("generate_synthetic_kg nesting holds across seeds") {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    GraphSplit s = generate_synthetic_kg(40, 3, 60, 0.3, seed);
    CHECK(subset(s.train, s.valid));
    CHECK(subset(s.valid, s.test));
    CHECK(s.train.num_entities() == s.test.num_entities());
    CHECK(s.train.num_relations() == s.test.num_relations());
  }
}

TEST_CASE("split directory round-trip") {
  GraphSplit s = generate_synthetic_kg(50, 3, 80, 0.25, 11);
  auto dir = std::filesystem::temp_directory_path() / "cqa_kg_tests" / "split";
  save_split(dir, s);
  GraphSplit loaded = load_split(dir);
  CHECK(loaded.train.triples() == s.train.triples());
  CHECK(loaded.valid.triples() == s.valid.triples());
  CHECK(loaded.test.triples() == s.test.triples());
  CHECK(loaded.test.num_entities() == 50);
}

TEST_CASE("load_split rejects broken nesting") {
  auto dir = std::filesystem::temp_directory_path() / "cqa_kg_tests" / "broken";
  std::filesystem::create_directories(dir);
  write_file(dir / "meta.json", R"({"num_entities": 5, "num_relations": 1})");
  write_file(dir / "train.txt", "0 0 1\n");
  write_file(dir / "valid.txt", "0 0 2\n");
  write_file(dir / "test.txt", "0 0 1\n0 0 2\n");
  CHECK_THROWS_AS(load_split(dir), ValidationError);
}
