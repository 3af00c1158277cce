#include "cqa/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace cqa {

namespace {

// Fixed-universe bitset for exact set algebra.
class EntitySet {
 public:
  explicit EntitySet(int32_t universe)
      : universe_(universe), words_((universe + 63) / 64, 0) {}

  void insert(int32_t e) { words_[e >> 6] |= 1ull << (e & 63); }

  void intersect_with(const EntitySet& o) {
    for (size_t i = 0; i < words_.size(); ++i) words_[i] &= o.words_[i];
  }

  void union_with(const EntitySet& o) {
    for (size_t i = 0; i < words_.size(); ++i) words_[i] |= o.words_[i];
  }

  void complement() {
    for (auto& w : words_) w = ~w;
    int tail = universe_ & 63;
    if (tail != 0) words_.back() &= (1ull << tail) - 1;
  }

  int32_t count() const {
    int32_t n = 0;
    for (auto w : words_) n += static_cast<int32_t>(__builtin_popcountll(w));
    return n;
  }

  template <class Fn>
  void for_each(Fn&& fn) const {
    for (size_t i = 0; i < words_.size(); ++i) {
      uint64_t w = words_[i];
      while (w != 0) {
        int bit = __builtin_ctzll(w);
        fn(static_cast<int32_t>(i * 64 + bit));
        w &= w - 1;
      }
    }
  }

  std::vector<int32_t> to_vector() const {
    std::vector<int32_t> out;
    out.reserve(count());
    for_each([&](int32_t e) { out.push_back(e); });
    return out;
  }

 private:
  int32_t universe_;
  std::vector<uint64_t> words_;
};

EntitySet evaluate_set(const QueryNode& n, const KnowledgeGraph& g) {
  switch (n.kind) {
    case NodeKind::Anchor: {
      g.check_entity(n.symbol);
      EntitySet s(g.num_entities());
      s.insert(n.symbol);
      return s;
    }
    case NodeKind::Projection: {
      g.check_relation(n.symbol);
      EntitySet child = evaluate_set(n.children[0], g);
      EntitySet out(g.num_entities());
      child.for_each([&](int32_t a) {
        for (int32_t b : g.neighbors(a, n.symbol)) out.insert(b);
      });
      return out;
    }
    case NodeKind::Intersection: {
      EntitySet acc = evaluate_set(n.children[0], g);
      for (size_t i = 1; i < n.children.size(); ++i) {
        acc.intersect_with(evaluate_set(n.children[i], g));
      }
      return acc;
    }
    case NodeKind::Union: {
      EntitySet acc = evaluate_set(n.children[0], g);
      for (size_t i = 1; i < n.children.size(); ++i) {
        acc.union_with(evaluate_set(n.children[i], g));
      }
      return acc;
    }
    case NodeKind::Negation: {
      EntitySet s = evaluate_set(n.children[0], g);
      s.complement();
      return s;
    }
  }
  throw ContractViolation("unreachable node kind");
}

}  // namespace

std::vector<int32_t> evaluate(const QueryNode& tree, const KnowledgeGraph& graph) {
  if (!is_grounded(tree)) {
    throw ValidationError("evaluate requires a fully grounded tree");
  }
  return evaluate_set(tree, graph).to_vector();
}

void check_grounded_query(const GroundedQuery& q, const KnowledgeGraph& test) {
  std::vector<int32_t> both;
  std::set_intersection(q.easy_answers.begin(), q.easy_answers.end(),
                        q.hard_answers.begin(), q.hard_answers.end(),
                        std::back_inserter(both));
  if (!both.empty()) {
    throw ValidationError("easy and hard answer sets overlap for " + q.template_name);
  }
  std::vector<int32_t> all;
  std::set_union(q.easy_answers.begin(), q.easy_answers.end(),
                 q.hard_answers.begin(), q.hard_answers.end(),
                 std::back_inserter(all));
  if (all != evaluate(q.tree, test)) {
    throw ValidationError("easy+hard does not reproduce the full answer set for " +
                          q.template_name);
  }
}

namespace {

struct WalkBindings {
  std::vector<int32_t> anchors;
  std::vector<int32_t> relations;
};

// Backward walk: assign `target` to this node's output and choose
// relations/anchors consistent with it. Negated children restart the walk
// from a fresh uniformly sampled entity. Returns false on a dead end.
bool walk(const QueryNode& n, const KnowledgeGraph& g, int32_t target,
          Rng& rng, WalkBindings& b) {
  switch (n.kind) {
    case NodeKind::Anchor:
      b.anchors[n.symbol] = target;
      return true;
    case NodeKind::Projection: {
      // Pick a uniform in-edge (a, r, target) over all relations.
      int32_t total = 0;
      for (int32_t r = 0; r < g.num_relations(); ++r) {
        total += static_cast<int32_t>(g.inverse_neighbors(target, r).size());
      }
      if (total == 0) return false;
      int32_t pick = static_cast<int32_t>(rng.below(static_cast<uint32_t>(total)));
      for (int32_t r = 0; r < g.num_relations(); ++r) {
        const auto& heads = g.inverse_neighbors(target, r);
        if (pick < static_cast<int32_t>(heads.size())) {
          b.relations[n.symbol] = r;
          return walk(n.children[0], g, heads[pick], rng, b);
        }
        pick -= static_cast<int32_t>(heads.size());
      }
      return false;
    }
    case NodeKind::Intersection: {
      for (const QueryNode& c : n.children) {
        if (c.kind == NodeKind::Negation) {
          int32_t fresh = static_cast<int32_t>(
              rng.below(static_cast<uint32_t>(g.num_entities())));
          if (!walk(c.children[0], g, fresh, rng, b)) return false;
        } else {
          if (!walk(c, g, target, rng, b)) return false;
        }
      }
      return true;
    }
    case NodeKind::Union: {
      // Every branch is walked so all slots get bound; the target is routed
      // through one uniformly chosen branch, the rest restart fresh.
      size_t chosen = rng.below(static_cast<uint32_t>(n.children.size()));
      for (size_t i = 0; i < n.children.size(); ++i) {
        int32_t t = target;
        if (i != chosen) {
          t = static_cast<int32_t>(
              rng.below(static_cast<uint32_t>(g.num_entities())));
        }
        if (!walk(n.children[i], g, t, rng, b)) return false;
      }
      return true;
    }
    case NodeKind::Negation:
      // Reached only when Negation is a query root, which validation forbids.
      throw ContractViolation("negation outside an intersection during walk");
  }
  return false;
}

constexpr int kMaxAttempts = 1000;

std::optional<QueryNode> try_ground_tree(const QueryTemplate& tmpl,
                                         const KnowledgeGraph& walk_graph,
                                         Rng& rng) {
  WalkBindings b;
  b.anchors.resize(tmpl.anchor_count);
  b.relations.resize(tmpl.relation_count);
  int32_t target = static_cast<int32_t>(
      rng.below(static_cast<uint32_t>(walk_graph.num_entities())));
  if (!walk(tmpl.tree, walk_graph, target, rng, b)) return std::nullopt;
  return ground_template(tmpl, b.anchors, b.relations);
}

bool degenerate(const std::vector<int32_t>& answers, int32_t num_entities) {
  return answers.empty() ||
         static_cast<int64_t>(answers.size()) * 2 > num_entities;
}

}  // namespace

GroundedQuery ground_on_graph(const QueryTemplate& tmpl,
                              const KnowledgeGraph& graph, Rng& rng) {
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    auto tree = try_ground_tree(tmpl, graph, rng);
    if (!tree) continue;
    std::vector<int32_t> answers = evaluate(*tree, graph);
    if (degenerate(answers, graph.num_entities())) continue;
    return GroundedQuery{tmpl.name, std::move(*tree), std::move(answers), {}};
  }
  throw SamplingExhausted("grounding exhausted after 1000 attempts for template " +
                          tmpl.name);
}

std::optional<GroundedQuery> ground(const QueryTemplate& tmpl,
                                    const GraphSplit& split, Rng& rng,
                                    bool require_hard) {
  const KnowledgeGraph& test = split.test;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    auto tree = try_ground_tree(tmpl, test, rng);
    if (!tree) continue;
    std::vector<int32_t> test_answers = evaluate(*tree, test);
    if (degenerate(test_answers, test.num_entities())) continue;

    // Easy answers: derivable on the train graph and still correct on the
    // full graph. The intersection matters for negation queries, whose
    // train-graph answer set is not monotone in the edge set.
    std::vector<int32_t> train_answers = evaluate(*tree, split.train);
    std::vector<int32_t> easy;
    std::set_intersection(train_answers.begin(), train_answers.end(),
                          test_answers.begin(), test_answers.end(),
                          std::back_inserter(easy));
    std::vector<int32_t> hard;
    std::set_difference(test_answers.begin(), test_answers.end(),
                        easy.begin(), easy.end(), std::back_inserter(hard));
    if (require_hard && hard.empty()) return std::nullopt;

    GroundedQuery q{tmpl.name, std::move(*tree), std::move(easy), std::move(hard)};
    check_grounded_query(q, test);
    return q;
  }
  throw SamplingExhausted("grounding exhausted after 1000 attempts for template " +
                          tmpl.name);
}

std::string to_string(Setting s) {
  switch (s) {
    case Setting::MultiHop: return "multihop";
    case Setting::EPFO: return "epfo";
    case Setting::EFO1: return "efo1";
  }
  return "?";
}

std::optional<Setting> parse_setting(const std::string& text) {
  if (text == "multihop") return Setting::MultiHop;
  if (text == "epfo") return Setting::EPFO;
  if (text == "efo1") return Setting::EFO1;
  return std::nullopt;
}

const std::vector<std::string>& train_templates(Setting s) {
  static const std::vector<std::string> multihop = {"1p", "2p", "3p"};
  static const std::vector<std::string> epfo = {"1p", "2p", "3p", "2i", "3i"};
  static const std::vector<std::string> efo1 = {
      "1p", "2p", "3p", "2i", "3i", "2in", "3in", "inp", "pin", "pni"};
  switch (s) {
    case Setting::MultiHop: return multihop;
    case Setting::EPFO: return epfo;
    case Setting::EFO1: return efo1;
  }
  throw ContractViolation("unreachable setting");
}

const std::vector<std::string>& eval_templates(Setting s) {
  static const std::vector<std::string> multihop = {"1p", "2p", "3p",
                                                    "4p", "5p", "6p"};
  static const std::vector<std::string> epfo = {"1p", "2p", "3p", "2i", "3i",
                                                "ip", "pi", "2u", "up"};
  static const std::vector<std::string> efo1 = {"1p",  "2p",  "3p",  "2i", "3i",
                                                "ip",  "pi",  "2in", "3in",
                                                "inp", "pin", "pni", "2u", "up"};
  switch (s) {
    case Setting::MultiHop: return multihop;
    case Setting::EPFO: return epfo;
    case Setting::EFO1: return efo1;
  }
  throw ContractViolation("unreachable setting");
}

FewShotDataset build_fewshot_dataset(const GraphSplit& split, Setting setting,
                                     int pool_size_per_type, double ratio,
                                     uint64_t seed, int eval_size_per_type) {
  if (pool_size_per_type < 1) throw ValidationError("pool size must be >= 1");
  if (ratio <= 0.0 || ratio > 1.0) throw ValidationError("ratio must be in (0, 1]");
  if (eval_size_per_type < 1) throw ValidationError("eval size must be >= 1");

  FewShotDataset ds;
  ds.setting = setting;
  ds.retention_ratio = ratio;

  for (const std::string& name : train_templates(setting)) {
    const QueryTemplate& tmpl = builtin_template(name);
    std::vector<GroundedQuery> queries;
    if (name == "1p") {
      // Retained in full: one query per distinct (head, relation) pair.
      std::map<std::pair<int32_t, int32_t>, std::vector<int32_t>> by_pair;
      for (const Triple& t : split.train.triples()) {
        by_pair[{t.head, t.relation}].push_back(t.tail);
      }
      for (auto& [pair, tails] : by_pair) {
        QueryNode tree = ground_template(tmpl, {pair.first}, {pair.second});
        queries.push_back({name, std::move(tree), std::move(tails), {}});
      }
    } else {
      Rng rng = substream(seed, "train-pool", tag64(name));
      std::vector<GroundedQuery> pool;
      pool.reserve(pool_size_per_type);
      for (int i = 0; i < pool_size_per_type; ++i) {
        pool.push_back(ground_on_graph(tmpl, split.train, rng));
      }
      int keep = static_cast<int>(
          std::min(static_cast<double>(pool.size()), std::ceil(ratio * pool.size())));
      // Uniform retention without replacement.
      Rng pick = substream(seed, "train-retain", tag64(name));
      std::vector<int> idx(pool.size());
      for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
      for (size_t i = idx.size() - 1; i > 0; --i) {
        std::swap(idx[i], idx[pick.below(static_cast<uint32_t>(i + 1))]);
      }
      idx.resize(keep);
      std::sort(idx.begin(), idx.end());
      for (int i : idx) queries.push_back(std::move(pool[i]));
    }
    ds.train_queries[name] = std::move(queries);
  }

  for (const std::string& name : eval_templates(setting)) {
    const QueryTemplate& tmpl = builtin_template(name);
    Rng rng = substream(seed, "eval-pool", tag64(name));
    std::vector<GroundedQuery> queries;
    int consecutive_misses = 0;
    while (static_cast<int>(queries.size()) < eval_size_per_type) {
      auto q = ground(tmpl, split, rng, /*require_hard=*/true);
      if (!q) {
        if (++consecutive_misses >= kMaxAttempts) {
          throw SamplingExhausted(
              "no grounding with hard answers after 1000 attempts for template " +
              name);
        }
        continue;
      }
      consecutive_misses = 0;
      queries.push_back(std::move(*q));
    }
    ds.eval_queries[name] = std::move(queries);
  }
  return ds;
}

namespace {

void save_role(const std::filesystem::path& dir, const std::string& role,
               const std::map<std::string, std::vector<GroundedQuery>>& queries) {
  for (const auto& [name, list] : queries) {
    std::ofstream out(dir / (role + "_" + name + ".jsonl"));
    if (!out) throw DataError("cannot write dataset file in " + dir.string());
    for (const GroundedQuery& q : list) {
      nlohmann::json line{{"tree", serialize(q.tree)},
                          {"easy", q.easy_answers},
                          {"hard", q.hard_answers}};
      out << line.dump() << '\n';
    }
  }
}

void load_role(const std::filesystem::path& dir, const std::string& role,
               const std::vector<std::string>& names,
               std::map<std::string, std::vector<GroundedQuery>>& out) {
  for (const std::string& name : names) {
    auto path = dir / (role + "_" + name + ".jsonl");
    std::ifstream in(path);
    if (!in) throw DataError("missing dataset file: " + path.string());
    std::vector<GroundedQuery> list;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " +
                         e.what());
      }
      GroundedQuery q;
      q.template_name = name;
      q.tree = parse_query(j.at("tree").get<std::string>());
      q.easy_answers = j.at("easy").get<std::vector<int32_t>>();
      q.hard_answers = j.at("hard").get<std::vector<int32_t>>();
      if (!is_grounded(q.tree)) {
        throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                              ": query tree has unbound placeholders");
      }
      std::vector<int32_t> both;
      std::set_intersection(q.easy_answers.begin(), q.easy_answers.end(),
                            q.hard_answers.begin(), q.hard_answers.end(),
                            std::back_inserter(both));
      if (!both.empty()) {
        throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                              ": easy and hard answer sets overlap");
      }
      list.push_back(std::move(q));
    }
    out[name] = std::move(list);
  }
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const FewShotDataset& ds) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta{{"setting", to_string(ds.setting)},
                      {"retention_ratio", ds.retention_ratio}};
  std::ofstream meta_out(dir / "dataset.json");
  meta_out << meta.dump(2) << '\n';
  save_role(dir, "train", ds.train_queries);
  save_role(dir, "eval", ds.eval_queries);
}

FewShotDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "dataset.json");
  if (!meta_in) throw DataError("missing dataset.json in " + dir.string());
  nlohmann::json meta = nlohmann::json::parse(meta_in);
  FewShotDataset ds;
  auto setting = parse_setting(meta.at("setting").get<std::string>());
  if (!setting) throw DataError("bad setting in dataset.json");
  ds.setting = *setting;
  ds.retention_ratio = meta.at("retention_ratio").get<double>();
  load_role(dir, "train", train_templates(ds.setting), ds.train_queries);
  load_role(dir, "eval", eval_templates(ds.setting), ds.eval_queries);
  return ds;
}

}  // namespace cqa
