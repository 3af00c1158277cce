#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cqa/common.hpp"

namespace cqa {

// Tree-shaped set expression. Leaves are anchors; the root denotes the free
// variable of the query. `symbol` is an entity id for Anchor nodes and a
// relation id for Projection nodes; when `placeholder` is set it is a
// template slot index instead of a bound id.
enum class NodeKind { Anchor, Projection, Intersection, Union, Negation };

struct QueryNode {
  NodeKind kind = NodeKind::Anchor;
  int32_t symbol = -1;
  bool placeholder = false;
  std::vector<QueryNode> children;

  friend bool operator==(const QueryNode&, const QueryNode&) = default;
};

using QueryTree = QueryNode;

QueryNode anchor(int32_t entity);
QueryNode anchor_slot(int32_t index);
QueryNode projection(int32_t relation, QueryNode child);
QueryNode projection_slot(int32_t index, QueryNode child);
QueryNode intersection(std::vector<QueryNode> children);
QueryNode unions(std::vector<QueryNode> children);
QueryNode negation(QueryNode child);

bool is_grounded(const QueryNode& tree);
bool contains_union(const QueryNode& tree);
bool contains_negation(const QueryNode& tree);

// Structural invariants for benchmark-shaped trees: the root is neither an
// Anchor nor a Negation, Intersection/Union have arity >= 2, every leaf is an
// Anchor, and a Negation sits directly under an Intersection with a
// Projection below it. Throws ValidationError on violation.
void validate_query_tree(const QueryNode& tree);

struct QueryTemplate {
  std::string name;
  QueryNode tree;
  int32_t anchor_count = 0;    // anchor placeholders e0..e{n-1}
  int32_t relation_count = 0;  // relation placeholders r0..r{m-1}
};

// Grammar: `e<k>` anchor placeholder, bare integer a bound entity id,
// `(p,<rel>,EXPR)` with <rel> = `r<k>` or a bound relation id,
// `(i,EXPR,EXPR[,EXPR...])`, `(u,EXPR,EXPR)`, `(n,EXPR)`.
QueryNode parse_query(const std::string& text);
// parse_query + structural validation + the template discipline: every
// anchor/relation slot is a placeholder and indices are distinct and
// contiguous from 0.
QueryTemplate parse_template(const std::string& text, std::string name = "");

std::string serialize(const QueryNode& tree);

// The named templates used throughout: 1p..6p chains, 2i/3i, ip/pi, 2u/up
// and the negation shapes 2in/3in/inp/pin/pni.
const std::vector<QueryTemplate>& builtin_templates();
const QueryTemplate& builtin_template(const std::string& name);
bool is_builtin_template(const std::string& name);
// Registry as JSON {name: template-string}.
std::string dump_template_registry();

// Bind placeholders; vectors are indexed by placeholder id.
QueryNode ground_template(const QueryTemplate& tmpl,
                          const std::vector<int32_t>& anchors,
                          const std::vector<int32_t>& relations);

enum class InputKind { Entity, Projection, Intersection };
enum class OutputKind { Projection, Intersection, Negation, Answer };

// One projection occurrence. `branch` indexes the DNF branch the site lives
// in (0 for union-free trees) and `path` is the child-index sequence from the
// branch root. Distances count operator nodes: root_distance is 1 plus the
// number of operator ancestors, leaf_distance the minimum number of operator
// nodes on a downward path to an anchor, both including the site itself.
struct OperatorSite {
  int branch = 0;
  std::vector<int> path;
  InputKind input = InputKind::Entity;
  OutputKind output = OutputKind::Answer;
  int root_distance = 1;
  int leaf_distance = 1;
};

enum class OperatorKind { Projection };

// The six categorization schemes: distance to root, distance to nearest
// leaf, input node type, output node type, and their binary variants.
enum class Scheme { R, L, I, O, BI, BO };

struct OperatorTypeKey {
  OperatorKind op = OperatorKind::Projection;
  Scheme scheme = Scheme::I;
  int32_t category = 0;

  friend auto operator<=>(const OperatorTypeKey&, const OperatorTypeKey&) = default;
};

// Category encodings inside OperatorTypeKey::category.
namespace cat {
// Scheme I
inline constexpr int32_t kInputEntity = 0;
inline constexpr int32_t kInputProjection = 1;
inline constexpr int32_t kInputIntersection = 2;
// Scheme O
inline constexpr int32_t kOutputProjection = 0;
inline constexpr int32_t kOutputIntersection = 1;
inline constexpr int32_t kOutputNegation = 2;
inline constexpr int32_t kOutputAnswer = 3;
// Scheme BI
inline constexpr int32_t kBinaryEntity = 0;
inline constexpr int32_t kBinaryNonEntity = 1;
// Scheme BO
inline constexpr int32_t kBinaryAnswer = 0;
inline constexpr int32_t kBinaryNonAnswer = 1;
}  // namespace cat

std::string to_string(Scheme scheme);
std::optional<Scheme> parse_scheme(const std::string& text);
// "R:2", "I:Entity", "O:Answer", "BI:NonEntity", ...
std::string to_string(const OperatorTypeKey& key);
OperatorTypeKey parse_type_key(const std::string& text);

// All categories a scheme can produce under the given depth cap.
std::vector<OperatorTypeKey> scheme_categories(Scheme scheme, int depth_cap);

// One site per Projection node, deterministic pre-order. Trees containing
// Union are decomposed first and sites are reported per conjunctive branch.
std::vector<OperatorSite> enumerate_projection_sites(const QueryNode& tree);

OperatorTypeKey categorize(const OperatorSite& site, Scheme scheme,
                           int depth_cap);

// Union-free conjunctive trees whose answer-set union equals the input's
// answer set. Union-free input comes back as a singleton, unchanged.
// Union nested under Negation is outside the supported grammar.
std::vector<QueryNode> dnf_decompose(const QueryNode& tree);

}  // namespace cqa
