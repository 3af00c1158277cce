#include "cqa/query.hpp"

#include <algorithm>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

namespace cqa {

QueryNode anchor(int32_t entity) { return {NodeKind::Anchor, entity, false, {}}; }
QueryNode anchor_slot(int32_t index) { return {NodeKind::Anchor, index, true, {}}; }

QueryNode projection(int32_t relation, QueryNode child) {
  QueryNode n{NodeKind::Projection, relation, false, {}};
  n.children.push_back(std::move(child));
  return n;
}

QueryNode projection_slot(int32_t index, QueryNode child) {
  QueryNode n{NodeKind::Projection, index, true, {}};
  n.children.push_back(std::move(child));
  return n;
}

QueryNode intersection(std::vector<QueryNode> children) {
  return {NodeKind::Intersection, -1, false, std::move(children)};
}

QueryNode unions(std::vector<QueryNode> children) {
  return {NodeKind::Union, -1, false, std::move(children)};
}

QueryNode negation(QueryNode child) {
  QueryNode n{NodeKind::Negation, -1, false, {}};
  n.children.push_back(std::move(child));
  return n;
}

bool is_grounded(const QueryNode& tree) {
  if (tree.placeholder) return false;
  for (const QueryNode& c : tree.children) {
    if (!is_grounded(c)) return false;
  }
  return true;
}

bool contains_union(const QueryNode& tree) {
  if (tree.kind == NodeKind::Union) return true;
  for (const QueryNode& c : tree.children) {
    if (contains_union(c)) return true;
  }
  return false;
}

bool contains_negation(const QueryNode& tree) {
  if (tree.kind == NodeKind::Negation) return true;
  for (const QueryNode& c : tree.children) {
    if (contains_negation(c)) return true;
  }
  return false;
}

namespace {

void validate_node(const QueryNode& n, const QueryNode* parent) {
  switch (n.kind) {
    case NodeKind::Anchor:
      if (!n.children.empty()) throw ValidationError("anchor with children");
      if (parent == nullptr) throw ValidationError("anchor at query root");
      break;
    case NodeKind::Projection:
      if (n.children.size() != 1) throw ValidationError("projection arity must be 1");
      break;
    case NodeKind::Intersection:
    case NodeKind::Union:
      if (n.children.size() < 2) {
        throw ValidationError("intersection/union arity must be >= 2");
      }
      break;
    case NodeKind::Negation:
      if (n.children.size() != 1) throw ValidationError("negation arity must be 1");
      if (parent == nullptr) throw ValidationError("negation at query root");
      if (parent->kind != NodeKind::Intersection) {
        throw ValidationError("negation must sit directly under an intersection");
      }
      if (n.children[0].kind != NodeKind::Projection) {
        throw ValidationError("negation must apply to a projection");
      }
      break;
  }
  for (const QueryNode& c : n.children) validate_node(c, &n);
}

}  // namespace

void validate_query_tree(const QueryNode& tree) { validate_node(tree, nullptr); }

namespace {

struct Parser {
  const std::string& text;
  size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError("template parse error at position " + std::to_string(pos) +
                     ": " + what);
  }

  char peek() const { return pos < text.size() ? text[pos] : '\0'; }

  void skip_ws() {
    while (pos < text.size() && (text[pos] == ' ' || text[pos] == '\t')) ++pos;
  }

  void expect(char c) {
    skip_ws();
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos;
  }

  int32_t integer() {
    skip_ws();
    size_t start = pos;
    while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
    if (pos == start) fail("expected an integer");
    long long v = 0;
    for (size_t i = start; i < pos; ++i) {
      v = v * 10 + (text[i] - '0');
      if (v > INT32_MAX) fail("integer out of range");
    }
    return static_cast<int32_t>(v);
  }

  QueryNode expr() {
    skip_ws();
    char c = peek();
    if (c == 'e') {
      ++pos;
      return anchor_slot(integer());
    }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      return anchor(integer());
    }
    if (c != '(') fail("expected '(', 'e<k>' or an entity id");
    ++pos;
    skip_ws();
    char op = peek();
    ++pos;
    QueryNode node;
    switch (op) {
      case 'p': {
        expect(',');
        skip_ws();
        bool slot = false;
        if (peek() == 'r') {
          slot = true;
          ++pos;
        }
        int32_t rel = integer();
        expect(',');
        QueryNode child = expr();
        node = slot ? projection_slot(rel, std::move(child))
                    : projection(rel, std::move(child));
        break;
      }
      case 'i':
      case 'u': {
        std::vector<QueryNode> children;
        expect(',');
        children.push_back(expr());
        expect(',');
        children.push_back(expr());
        skip_ws();
        while (peek() == ',') {
          ++pos;
          children.push_back(expr());
          skip_ws();
        }
        if (op == 'u' && children.size() != 2) fail("union takes exactly two operands");
        node = op == 'i' ? intersection(std::move(children))
                         : unions(std::move(children));
        break;
      }
      case 'n': {
        expect(',');
        node = negation(expr());
        break;
      }
      default:
        fail("unknown operator (expected p, i, u or n)");
    }
    expect(')');
    return node;
  }
};

void collect_slots(const QueryNode& n, std::vector<int32_t>& anchors,
                   std::vector<int32_t>& relations, bool& all_slots) {
  if (n.kind == NodeKind::Anchor) {
    if (n.placeholder) anchors.push_back(n.symbol);
    else all_slots = false;
  } else if (n.kind == NodeKind::Projection) {
    if (n.placeholder) relations.push_back(n.symbol);
    else all_slots = false;
  }
  for (const QueryNode& c : n.children) collect_slots(c, anchors, relations, all_slots);
}

void check_contiguous(std::vector<int32_t> slots, const char* what) {
  std::sort(slots.begin(), slots.end());
  for (size_t i = 0; i < slots.size(); ++i) {
    if (slots[i] != static_cast<int32_t>(i)) {
      throw ValidationError(std::string(what) +
                            " placeholders must be distinct and contiguous from 0");
    }
  }
}

}  // namespace

QueryNode parse_query(const std::string& text) {
  Parser p{text};
  QueryNode tree = p.expr();
  p.skip_ws();
  if (p.pos != text.size()) p.fail("trailing content");
  validate_query_tree(tree);
  return tree;
}

QueryTemplate parse_template(const std::string& text, std::string name) {
  QueryNode tree = parse_query(text);
  std::vector<int32_t> anchors, relations;
  bool all_slots = true;
  collect_slots(tree, anchors, relations, all_slots);
  if (!all_slots) {
    throw ValidationError("template has bound ids; every slot must be a placeholder");
  }
  check_contiguous(anchors, "anchor");
  check_contiguous(relations, "relation");
  return QueryTemplate{std::move(name), std::move(tree),
                       static_cast<int32_t>(anchors.size()),
                       static_cast<int32_t>(relations.size())};
}

namespace {

void serialize_node(const QueryNode& n, std::string& out) {
  switch (n.kind) {
    case NodeKind::Anchor:
      if (n.placeholder) out += 'e';
      out += std::to_string(n.symbol);
      break;
    case NodeKind::Projection:
      out += "(p,";
      if (n.placeholder) out += 'r';
      out += std::to_string(n.symbol);
      out += ',';
      serialize_node(n.children[0], out);
      out += ')';
      break;
    case NodeKind::Intersection:
    case NodeKind::Union:
      out += n.kind == NodeKind::Intersection ? "(i" : "(u";
      for (const QueryNode& c : n.children) {
        out += ',';
        serialize_node(c, out);
      }
      out += ')';
      break;
    case NodeKind::Negation:
      out += "(n,";
      serialize_node(n.children[0], out);
      out += ')';
      break;
  }
}

const std::vector<std::pair<const char*, const char*>> kBuiltinSpecs = {
    {"1p", "(p,r0,e0)"},
    {"2p", "(p,r1,(p,r0,e0))"},
    {"3p", "(p,r2,(p,r1,(p,r0,e0)))"},
    {"4p", "(p,r3,(p,r2,(p,r1,(p,r0,e0))))"},
    {"5p", "(p,r4,(p,r3,(p,r2,(p,r1,(p,r0,e0)))))"},
    {"6p", "(p,r5,(p,r4,(p,r3,(p,r2,(p,r1,(p,r0,e0))))))"},
    {"2i", "(i,(p,r0,e0),(p,r1,e1))"},
    {"3i", "(i,(p,r0,e0),(p,r1,e1),(p,r2,e2))"},
    {"ip", "(p,r2,(i,(p,r0,e0),(p,r1,e1)))"},
    {"pi", "(i,(p,r1,(p,r0,e0)),(p,r2,e1))"},
    {"2u", "(u,(p,r0,e0),(p,r1,e1))"},
    {"up", "(p,r2,(u,(p,r0,e0),(p,r1,e1)))"},
    {"2in", "(i,(p,r0,e0),(n,(p,r1,e1)))"},
    {"3in", "(i,(p,r0,e0),(p,r1,e1),(n,(p,r2,e2)))"},
    {"inp", "(p,r2,(i,(p,r0,e0),(n,(p,r1,e1))))"},
    {"pin", "(i,(p,r1,(p,r0,e0)),(n,(p,r2,e1)))"},
    {"pni", "(i,(n,(p,r1,(p,r0,e0))),(p,r2,e1))"},
};

}  // namespace

std::string serialize(const QueryNode& tree) {
  std::string out;
  serialize_node(tree, out);
  return out;
}

const std::vector<QueryTemplate>& builtin_templates() {
  static const std::vector<QueryTemplate> templates = [] {
    std::vector<QueryTemplate> out;
    out.reserve(kBuiltinSpecs.size());
    for (const auto& [name, text] : kBuiltinSpecs) {
      out.push_back(parse_template(text, name));
    }
    return out;
  }();
  return templates;
}

const QueryTemplate& builtin_template(const std::string& name) {
  for (const QueryTemplate& t : builtin_templates()) {
    if (t.name == name) return t;
  }
  throw ValidationError("unknown template: " + name);
}

bool is_builtin_template(const std::string& name) {
  for (const QueryTemplate& t : builtin_templates()) {
    if (t.name == name) return true;
  }
  return false;
}

std::string dump_template_registry() {
  nlohmann::json j = nlohmann::json::object();
  for (const QueryTemplate& t : builtin_templates()) j[t.name] = serialize(t.tree);
  return j.dump(2);
}

QueryNode ground_template(const QueryTemplate& tmpl,
                          const std::vector<int32_t>& anchors,
                          const std::vector<int32_t>& relations) {
  if (anchors.size() != static_cast<size_t>(tmpl.anchor_count) ||
      relations.size() != static_cast<size_t>(tmpl.relation_count)) {
    throw ValidationError("binding arity mismatch for template " + tmpl.name);
  }
  struct Binder {
    const std::vector<int32_t>& anchors;
    const std::vector<int32_t>& relations;
    QueryNode bind(const QueryNode& n) const {
      QueryNode out = n;
      if (n.placeholder) {
        out.placeholder = false;
        out.symbol = n.kind == NodeKind::Anchor ? anchors[n.symbol] : relations[n.symbol];
      }
      out.children.clear();
      for (const QueryNode& c : n.children) out.children.push_back(bind(c));
      return out;
    }
  };
  return Binder{anchors, relations}.bind(tmpl.tree);
}

std::string to_string(Scheme scheme) {
  switch (scheme) {
    case Scheme::R: return "R";
    case Scheme::L: return "L";
    case Scheme::I: return "I";
    case Scheme::O: return "O";
    case Scheme::BI: return "BI";
    case Scheme::BO: return "BO";
  }
  return "?";
}

std::optional<Scheme> parse_scheme(const std::string& text) {
  if (text == "R") return Scheme::R;
  if (text == "L") return Scheme::L;
  if (text == "I") return Scheme::I;
  if (text == "O") return Scheme::O;
  if (text == "BI") return Scheme::BI;
  if (text == "BO") return Scheme::BO;
  return std::nullopt;
}

namespace {

std::string category_name(Scheme scheme, int32_t category) {
  switch (scheme) {
    case Scheme::R:
    case Scheme::L:
      return std::to_string(category);
    case Scheme::I:
      switch (category) {
        case cat::kInputEntity: return "Entity";
        case cat::kInputProjection: return "Projection";
        case cat::kInputIntersection: return "Intersection";
      }
      break;
    case Scheme::O:
      switch (category) {
        case cat::kOutputProjection: return "Projection";
        case cat::kOutputIntersection: return "Intersection";
        case cat::kOutputNegation: return "Negation";
        case cat::kOutputAnswer: return "Answer";
      }
      break;
    case Scheme::BI:
      return category == cat::kBinaryEntity ? "Entity" : "NonEntity";
    case Scheme::BO:
      return category == cat::kBinaryAnswer ? "Answer" : "NonAnswer";
  }
  return std::to_string(category);
}

int32_t category_value(Scheme scheme, const std::string& name) {
  switch (scheme) {
    case Scheme::R:
    case Scheme::L:
      return static_cast<int32_t>(std::stol(name));
    case Scheme::I:
      if (name == "Entity") return cat::kInputEntity;
      if (name == "Projection") return cat::kInputProjection;
      if (name == "Intersection") return cat::kInputIntersection;
      break;
    case Scheme::O:
      if (name == "Projection") return cat::kOutputProjection;
      if (name == "Intersection") return cat::kOutputIntersection;
      if (name == "Negation") return cat::kOutputNegation;
      if (name == "Answer") return cat::kOutputAnswer;
      break;
    case Scheme::BI:
      if (name == "Entity") return cat::kBinaryEntity;
      if (name == "NonEntity") return cat::kBinaryNonEntity;
      break;
    case Scheme::BO:
      if (name == "Answer") return cat::kBinaryAnswer;
      if (name == "NonAnswer") return cat::kBinaryNonAnswer;
      break;
  }
  throw ValidationError("unknown category '" + name + "' for scheme " +
                        to_string(scheme));
}

}  // namespace

std::string to_string(const OperatorTypeKey& key) {
  return to_string(key.scheme) + ":" + category_name(key.scheme, key.category);
}

OperatorTypeKey parse_type_key(const std::string& text) {
  size_t colon = text.find(':');
  if (colon == std::string::npos) throw ValidationError("bad type key: " + text);
  auto scheme = parse_scheme(text.substr(0, colon));
  if (!scheme) throw ValidationError("bad scheme in type key: " + text);
  return OperatorTypeKey{OperatorKind::Projection, *scheme,
                         category_value(*scheme, text.substr(colon + 1))};
}

std::vector<OperatorTypeKey> scheme_categories(Scheme scheme, int depth_cap) {
  std::vector<OperatorTypeKey> out;
  auto add = [&](int32_t c) {
    out.push_back({OperatorKind::Projection, scheme, c});
  };
  switch (scheme) {
    case Scheme::R:
    case Scheme::L:
      for (int32_t c = 1; c <= depth_cap; ++c) add(c);
      break;
    case Scheme::I:
      add(cat::kInputEntity);
      add(cat::kInputProjection);
      add(cat::kInputIntersection);
      break;
    case Scheme::O:
      add(cat::kOutputProjection);
      add(cat::kOutputIntersection);
      add(cat::kOutputNegation);
      add(cat::kOutputAnswer);
      break;
    case Scheme::BI:
      add(cat::kBinaryEntity);
      add(cat::kBinaryNonEntity);
      break;
    case Scheme::BO:
      add(cat::kBinaryAnswer);
      add(cat::kBinaryNonAnswer);
      break;
  }
  return out;
}

namespace {

// Minimum count of operator nodes on a downward path to an anchor,
// counting the node itself. Anchors count zero.
int leaf_depth(const QueryNode& n) {
  if (n.kind == NodeKind::Anchor) return 0;
  int best = INT32_MAX;
  for (const QueryNode& c : n.children) best = std::min(best, leaf_depth(c));
  return best + 1;
}

InputKind input_kind_of(const QueryNode& child) {
  switch (child.kind) {
    case NodeKind::Anchor: return InputKind::Entity;
    case NodeKind::Projection: return InputKind::Projection;
    case NodeKind::Intersection: return InputKind::Intersection;
    default:
      throw ValidationError("projection input must be an anchor, projection or intersection");
  }
}

void enumerate_branch(const QueryNode& n, const QueryNode* parent, int depth,
                      int branch, std::vector<int>& path,
                      std::vector<OperatorSite>& out) {
  if (n.kind == NodeKind::Projection) {
    OperatorSite site;
    site.branch = branch;
    site.path = path;
    site.input = input_kind_of(n.children[0]);
    if (parent == nullptr) {
      site.output = OutputKind::Answer;
    } else {
      switch (parent->kind) {
        case NodeKind::Projection: site.output = OutputKind::Projection; break;
        case NodeKind::Intersection: site.output = OutputKind::Intersection; break;
        case NodeKind::Negation: site.output = OutputKind::Negation; break;
        default:
          throw ValidationError("unexpected projection parent");
      }
    }
    site.root_distance = depth + 1;
    site.leaf_distance = leaf_depth(n);
    out.push_back(std::move(site));
  }
  for (size_t i = 0; i < n.children.size(); ++i) {
    path.push_back(static_cast<int>(i));
    enumerate_branch(n.children[i], &n, depth + 1, branch, path, out);
    path.pop_back();
  }
}

}  // namespace

std::vector<OperatorSite> enumerate_projection_sites(const QueryNode& tree) {
  validate_query_tree(tree);
  std::vector<OperatorSite> out;
  std::vector<int> path;
  if (contains_union(tree)) {
    std::vector<QueryNode> branches = dnf_decompose(tree);
    for (size_t b = 0; b < branches.size(); ++b) {
      enumerate_branch(branches[b], nullptr, 0, static_cast<int>(b), path, out);
    }
  } else {
    enumerate_branch(tree, nullptr, 0, 0, path, out);
  }
  return out;
}

OperatorTypeKey categorize(const OperatorSite& site, Scheme scheme,
                           int depth_cap) {
  if (depth_cap < 1) throw ValidationError("depth_cap must be >= 1");
  OperatorTypeKey key{OperatorKind::Projection, scheme, 0};
  switch (scheme) {
    case Scheme::R:
      key.category = std::min(site.root_distance, depth_cap);
      break;
    case Scheme::L:
      key.category = std::min(site.leaf_distance, depth_cap);
      break;
    case Scheme::I:
      key.category = site.input == InputKind::Entity ? cat::kInputEntity
                     : site.input == InputKind::Projection
                         ? cat::kInputProjection
                         : cat::kInputIntersection;
      break;
    case Scheme::O:
      switch (site.output) {
        case OutputKind::Projection: key.category = cat::kOutputProjection; break;
        case OutputKind::Intersection: key.category = cat::kOutputIntersection; break;
        case OutputKind::Negation: key.category = cat::kOutputNegation; break;
        case OutputKind::Answer: key.category = cat::kOutputAnswer; break;
      }
      break;
    case Scheme::BI:
      key.category = site.input == InputKind::Entity ? cat::kBinaryEntity
                                                     : cat::kBinaryNonEntity;
      break;
    case Scheme::BO:
      key.category = site.output == OutputKind::Answer ? cat::kBinaryAnswer
                                                       : cat::kBinaryNonAnswer;
      break;
  }
  return key;
}

namespace {

std::vector<QueryNode> decompose(const QueryNode& n) {
  switch (n.kind) {
    case NodeKind::Anchor:
      return {n};
    case NodeKind::Projection: {
      std::vector<QueryNode> out;
      for (QueryNode& b : decompose(n.children[0])) {
        QueryNode p = n;
        p.children = {std::move(b)};
        out.push_back(std::move(p));
      }
      return out;
    }
    case NodeKind::Union: {
      std::vector<QueryNode> out;
      for (const QueryNode& c : n.children) {
        for (QueryNode& b : decompose(c)) out.push_back(std::move(b));
      }
      return out;
    }
    case NodeKind::Intersection: {
      // Distribute: cartesian product of child branch lists.
      std::vector<std::vector<QueryNode>> combos{{}};
      for (const QueryNode& c : n.children) {
        std::vector<QueryNode> branches = decompose(c);
        std::vector<std::vector<QueryNode>> next;
        for (const auto& combo : combos) {
          for (const QueryNode& b : branches) {
            auto copy = combo;
            copy.push_back(b);
            next.push_back(std::move(copy));
          }
        }
        combos = std::move(next);
      }
      std::vector<QueryNode> out;
      for (auto& combo : combos) out.push_back(intersection(std::move(combo)));
      return out;
    }
    case NodeKind::Negation: {
      std::vector<QueryNode> branches = decompose(n.children[0]);
      if (branches.size() != 1) {
        throw ValidationError("unsupported structure: union nested under negation");
      }
      return {negation(std::move(branches[0]))};
    }
  }
  return {};
}

}  // namespace

std::vector<QueryNode> dnf_decompose(const QueryNode& tree) {
  if (!contains_union(tree)) return {tree};
  return decompose(tree);
}

}  // namespace cqa
