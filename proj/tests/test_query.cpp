#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "cqa/oracle.hpp"
#include "cqa/query.hpp"
#include "support/brute_oracle.hpp"
#include "support/test_util.hpp"

using namespace cqa;

TEST_CASE("parse_template: 2p structure") {
  QueryTemplate t = parse_template("(p,r1,(p,r0,e0))", "2p");
  REQUIRE(t.tree.kind == NodeKind::Projection);
  CHECK(t.tree.symbol == 1);
  CHECK(t.tree.placeholder);
  REQUIRE(t.tree.children[0].kind == NodeKind::Projection);
  CHECK(t.tree.children[0].symbol == 0);
  CHECK(t.tree.children[0].children[0].kind == NodeKind::Anchor);
  CHECK(t.anchor_count == 1);
  CHECK(t.relation_count == 2);
}

TEST_CASE("parse_template: 2in matches oracle semantics on a small graph") {
  QueryTemplate t = parse_template("(i,(p,r0,e0),(n,(p,r1,e1)))", "2in");
  // 5 entities: answers = r0-image of 0 minus r1-image of 1.
  KnowledgeGraph g(5, 2, {{0, 0, 1}, {0, 0, 2}, {0, 0, 3}, {1, 1, 2}});
  QueryNode q = ground_template(t, {0, 1}, {0, 1});
  std::vector<int32_t> expected{1, 3};
  CHECK(evaluate(q, g) == expected);
  CHECK(testsupport::brute_force_answers(q, g) == expected);
}

TEST_CASE("parse errors carry a position; structural violations are rejected") {
  CHECK_THROWS_AS(parse_query("(p,r0"), ParseError);
  CHECK_THROWS_WITH_AS(parse_query("(p,r0,x)"), doctest::Contains("position"),
                       ParseError);
  CHECK_THROWS_AS(parse_query("(n,(p,r0,e0))"), ValidationError);  // negation root
  CHECK_THROWS_AS(parse_query("e0"), ValidationError);             // anchor root
  CHECK_THROWS_AS(parse_query("(i,(p,r0,e0))"), ParseError);  // arity 1
  CHECK_THROWS_AS(validate_query_tree(intersection({projection(0, anchor(0))})),
                  ValidationError);
  // Negation must sit under an intersection.
  CHECK_THROWS_AS(parse_query("(p,r1,(n,(p,r0,e0)))"), ValidationError);
  CHECK_THROWS_AS(parse_template("(p,r0,(p,r0,e0))"), ValidationError);  // dup slot
  CHECK_THROWS_AS(parse_template("(p,r1,e0)"), ValidationError);  // gap in indices
  CHECK_THROWS_AS(parse_template("(p,3,e0)"), ValidationError);   // bound id
}

TEST_CASE("builtin templates: count, named shapes, slot arities") {
  const auto& all = builtin_templates();
  CHECK(all.size() == 17);

  const QueryTemplate& p1 = builtin_template("1p");
  CHECK(p1.tree.kind == NodeKind::Projection);
  CHECK(p1.tree.children[0].kind == NodeKind::Anchor);

  const QueryTemplate& p6 = builtin_template("6p");
  const QueryNode* n = &p6.tree;
  int hops = 0;
  while (n->kind == NodeKind::Projection) {
    ++hops;
    n = &n->children[0];
  }
  CHECK(hops == 6);
  CHECK(n->kind == NodeKind::Anchor);

  std::map<std::string, std::pair<int, int>> expected_counts{
      {"1p", {1, 1}},  {"2p", {1, 2}},  {"3p", {1, 3}}, {"4p", {1, 4}},
      {"5p", {1, 5}},  {"6p", {1, 6}},  {"2i", {2, 2}}, {"3i", {3, 3}},
      {"ip", {2, 3}},  {"pi", {2, 3}},  {"2u", {2, 2}}, {"up", {2, 3}},
      {"2in", {2, 2}}, {"3in", {3, 3}}, {"inp", {2, 3}}, {"pin", {2, 3}},
      {"pni", {2, 3}}};
  for (const QueryTemplate& t : all) {
    auto [anchors, relations] = expected_counts.at(t.name);
    CHECK(t.anchor_count == anchors);
    CHECK(t.relation_count == relations);
  }
}

TEST_CASE("pni semantics: negated two-hop intersected with a one-hop") {
  // Hand-built graph; answers must equal (E \ r1(r0(e0))) intersect r2(e1).
  KnowledgeGraph g(5, 3,
                   {{0, 0, 1}, {1, 1, 2}, {1, 1, 3}, {4, 2, 2}, {4, 2, 4}});
  QueryNode q = ground_template(builtin_template("pni"), {0, 4}, {0, 1, 2});
  // r0(0) = {1}; r1({1}) = {2,3}; complement = {0,1,4}; r2(4) = {2,4}.
  std::vector<int32_t> expected{4};
  CHECK(evaluate(q, g) == expected);
  CHECK(testsupport::brute_force_answers(q, g) == expected);
}

TEST_CASE("parse-serialize identity on every builtin template") {
  for (const QueryTemplate& t : builtin_templates()) {
    std::string text = serialize(t.tree);
    QueryTemplate again = parse_template(text, t.name);
    CHECK(again.tree == t.tree);
  }
}

TEST_CASE("enumerate_projection_sites: 2p") {
  auto sites = enumerate_projection_sites(builtin_template("2p").tree);
  REQUIRE(sites.size() == 2);
  CHECK(sites[0].path.empty());
  CHECK(sites[0].input == InputKind::Projection);
  CHECK(sites[0].output == OutputKind::Answer);
  CHECK(sites[0].root_distance == 1);
  CHECK(sites[0].leaf_distance == 2);
  CHECK(sites[1].path == std::vector<int>{0});
  CHECK(sites[1].input == InputKind::Entity);
  CHECK(sites[1].output == OutputKind::Projection);
  CHECK(sites[1].root_distance == 2);
  CHECK(sites[1].leaf_distance == 1);
}

TEST_CASE("enumerate_projection_sites: 3i is three entity-input sites") {
  auto sites = enumerate_projection_sites(builtin_template("3i").tree);
  REQUIRE(sites.size() == 3);
  for (const OperatorSite& s : sites) {
    CHECK(s.input == InputKind::Entity);
    CHECK(s.output == OutputKind::Intersection);
    CHECK(s.root_distance == 2);
    CHECK(s.leaf_distance == 1);
  }
}

TEST_CASE("nested tree: three projections into a negated intersection, then a hop") {
  // Final projection over an intersection of a one-hop branch and a negated
  // two-hop branch; input kinds must stay within the closed set and the
  // input categorization must yield exactly three distinct categories.
  QueryNode tree = parse_query("(p,r3,(i,(p,r0,e0),(n,(p,r2,(p,r1,e1)))))");
  auto sites = enumerate_projection_sites(tree);
  REQUIRE(sites.size() == 4);
  std::multiset<InputKind> inputs;
  for (const OperatorSite& s : sites) inputs.insert(s.input);
  CHECK(inputs == std::multiset<InputKind>{InputKind::Entity, InputKind::Entity,
                                           InputKind::Projection,
                                           InputKind::Intersection});
  std::set<OperatorTypeKey> cats;
  for (const OperatorSite& s : sites) cats.insert(categorize(s, Scheme::I, 3));
  CHECK(cats.size() == 3);
}

TEST_CASE("categorize: scheme I subcategories on 2p") {
  auto sites = enumerate_projection_sites(builtin_template("2p").tree);
  CHECK(categorize(sites[1], Scheme::I, 3).category == cat::kInputEntity);
  CHECK(categorize(sites[0], Scheme::I, 3).category == cat::kInputProjection);
}

TEST_CASE("categorize: 6p deepest site clamps to the cap") {
  auto sites = enumerate_projection_sites(builtin_template("6p").tree);
  REQUIRE(sites.size() == 6);
  CHECK(sites[5].root_distance == 6);
  CHECK(categorize(sites[5], Scheme::R, 3).category == 3);
  CHECK(categorize(sites[5], Scheme::R, 10).category == 6);
}

TEST_CASE("categorize: pni site feeding the negation") {
  auto sites = enumerate_projection_sites(builtin_template("pni").tree);
  REQUIRE(sites.size() == 3);
  // Pre-order: the negated branch's outer hop comes first.
  CHECK(sites[0].output == OutputKind::Negation);
  CHECK(categorize(sites[0], Scheme::O, 3).category == cat::kOutputNegation);
  CHECK(categorize(sites[0], Scheme::BO, 3).category == cat::kBinaryNonAnswer);
}

TEST_CASE("categorize is total and deterministic over builtins x schemes") {
  for (const QueryTemplate& t : builtin_templates()) {
    auto sites = enumerate_projection_sites(t.tree);
    CHECK(!sites.empty());
    for (const OperatorSite& s : sites) {
      for (Scheme scheme : {Scheme::R, Scheme::L, Scheme::I, Scheme::O,
                            Scheme::BI, Scheme::BO}) {
        OperatorTypeKey a = categorize(s, scheme, 3);
        OperatorTypeKey b = categorize(s, scheme, 3);
        CHECK(a == b);
        // Closed category sets.
        auto domain = scheme_categories(scheme, 3);
        CHECK(std::find(domain.begin(), domain.end(), a) != domain.end());
      }
    }
  }
}

TEST_CASE("type keys round-trip through their string form") {
  for (Scheme scheme : {Scheme::R, Scheme::L, Scheme::I, Scheme::O, Scheme::BI,
                        Scheme::BO}) {
    for (const OperatorTypeKey& key : scheme_categories(scheme, 3)) {
      CHECK(parse_type_key(to_string(key)) == key);
    }
  }
}

TEST_CASE("dnf_decompose: 2u splits into two one-hop branches") {
  QueryNode q = ground_template(builtin_template("2u"), {3, 4}, {0, 1});
  auto branches = dnf_decompose(q);
  REQUIRE(branches.size() == 2);
  CHECK(branches[0] == projection(0, anchor(3)));
  CHECK(branches[1] == projection(1, anchor(4)));
}

TEST_CASE("dnf_decompose: up distributes the outer hop") {
  QueryNode q = ground_template(builtin_template("up"), {3, 4}, {0, 1, 2});
  auto branches = dnf_decompose(q);
  REQUIRE(branches.size() == 2);
  CHECK(branches[0] == projection(2, projection(0, anchor(3))));
  CHECK(branches[1] == projection(2, projection(1, anchor(4))));
}

TEST_CASE("dnf_decompose: union-free input is returned unchanged") {
  QueryNode q = ground_template(builtin_template("3i"), {0, 1, 2}, {0, 1, 2});
  auto branches = dnf_decompose(q);
  REQUIRE(branches.size() == 1);
  CHECK(branches[0] == q);
}

TEST_CASE("dnf_decompose rejects union under negation") {
  QueryNode bad = intersection(
      {projection(0, anchor(0)),
       negation(unions({projection(1, anchor(1)), projection(2, anchor(2))}))});
  CHECK_THROWS_AS(dnf_decompose(bad), ValidationError);
}

TEST_CASE("dnf_decompose preserves answer sets on random groundings") {
  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    KnowledgeGraph g = testsupport::random_graph(50, 4, 300, rng);
    const QueryTemplate& tmpl =
        builtin_template(trial % 2 == 0 ? "2u" : "up");
    QueryNode q = testsupport::random_grounding(tmpl, g, rng);
    std::set<int32_t> whole;
    for (int32_t v : evaluate(q, g)) whole.insert(v);
    std::set<int32_t> parts;
    for (const QueryNode& b : dnf_decompose(q)) {
      for (int32_t v : evaluate(b, g)) parts.insert(v);
    }
    CHECK(whole == parts);
  }
}

TEST_CASE("template registry dumps as JSON with all names") {
  std::string dump = dump_template_registry();
  for (const QueryTemplate& t : builtin_templates()) {
    CHECK(dump.find('"' + t.name + '"') != std::string::npos);
  }
}
