#include "cqa/kg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace cqa {

namespace {

uint64_t pair_key(int32_t a, int32_t b) {
  return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) |
         static_cast<uint32_t>(b);
}

const std::vector<int32_t> kEmpty;

}  // namespace

KnowledgeGraph::KnowledgeGraph(int32_t num_entities, int32_t num_relations,
                               std::vector<Triple> triples)
    : num_entities_(num_entities),
      num_relations_(num_relations),
      triples_(std::move(triples)) {
  if (num_entities_ < 0 || num_relations_ < 0) {
    throw ValidationError("negative entity or relation count");
  }
  std::sort(triples_.begin(), triples_.end());
  triples_.erase(std::unique(triples_.begin(), triples_.end()),
                 triples_.end());
  for (const Triple& t : triples_) {
    if (t.head < 0 || t.head >= num_entities_ || t.tail < 0 ||
        t.tail >= num_entities_) {
      throw ValidationError("entity id " +
                            std::to_string(std::max(t.head, t.tail)) +
                            " out of range (count " +
                            std::to_string(num_entities_) + ")");
    }
    if (t.relation < 0 || t.relation >= num_relations_) {
      throw ValidationError("relation id " + std::to_string(t.relation) +
                            " out of range (count " +
                            std::to_string(num_relations_) + ")");
    }
    out_[pair_key(t.head, t.relation)].push_back(t.tail);
    in_[pair_key(t.tail, t.relation)].push_back(t.head);
  }
  // triples_ is sorted by (head, relation, tail), so out-lists arrive sorted;
  // in-lists need a sort.
  for (auto& [k, v] : in_) std::sort(v.begin(), v.end());
}

void KnowledgeGraph::check_entity(int32_t id) const {
  if (id < 0 || id >= num_entities_) {
    throw ValidationError("entity id " + std::to_string(id) +
                          " out of range (count " +
                          std::to_string(num_entities_) + ")");
  }
}

void KnowledgeGraph::check_relation(int32_t id) const {
  if (id < 0 || id >= num_relations_) {
    throw ValidationError("relation id " + std::to_string(id) +
                          " out of range (count " +
                          std::to_string(num_relations_) + ")");
  }
}

const std::vector<int32_t>& KnowledgeGraph::neighbors(int32_t head,
                                                      int32_t relation) const {
  check_entity(head);
  check_relation(relation);
  auto it = out_.find(pair_key(head, relation));
  return it == out_.end() ? kEmpty : it->second;
}

const std::vector<int32_t>& KnowledgeGraph::inverse_neighbors(
    int32_t tail, int32_t relation) const {
  check_entity(tail);
  check_relation(relation);
  auto it = in_.find(pair_key(tail, relation));
  return it == in_.end() ? kEmpty : it->second;
}

bool KnowledgeGraph::contains(const Triple& t) const {
  return std::binary_search(triples_.begin(), triples_.end(), t);
}

KnowledgeGraph load_triples(
    const std::filesystem::path& path,
    std::optional<std::pair<int32_t, int32_t>> counts) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open triple file: " + path.string());

  std::vector<Triple> triples;
  std::string line;
  int line_no = 0;
  int32_t max_entity = -1;
  int32_t max_relation = -1;
  while (std::getline(in, line)) {
    ++line_no;
    size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    std::istringstream ls(line);
    long long h, r, t;
    if (!(ls >> h >> r >> t) || h < 0 || r < 0 || t < 0) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                       ": expected three non-negative integer ids");
    }
    std::string rest;
    if (ls >> rest && !rest.empty() && rest[0] != '#') {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                       ": trailing content after triple");
    }
    Triple triple{static_cast<int32_t>(h), static_cast<int32_t>(r),
                  static_cast<int32_t>(t)};
    max_entity = std::max({max_entity, triple.head, triple.tail});
    max_relation = std::max(max_relation, triple.relation);
    triples.push_back(triple);
  }

  int32_t ne = counts ? counts->first : max_entity + 1;
  int32_t nr = counts ? counts->second : max_relation + 1;
  return KnowledgeGraph(ne, nr, std::move(triples));
}

void save_triples(const std::filesystem::path& path, const KnowledgeGraph& g) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write triple file: " + path.string());
  for (const Triple& t : g.triples()) {
    out << t.head << '\t' << t.relation << '\t' << t.tail << '\n';
  }
}

GraphSplit load_split(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "meta.json");
  if (!meta_in) throw DataError("missing meta.json in " + dir.string());
  nlohmann::json meta = nlohmann::json::parse(meta_in, nullptr, true, true);
  auto counts = std::make_pair(meta.at("num_entities").get<int32_t>(),
                               meta.at("num_relations").get<int32_t>());

  GraphSplit split;
  split.train = load_triples(dir / "train.txt", counts);
  split.valid = load_triples(dir / "valid.txt", counts);
  split.test = load_triples(dir / "test.txt", counts);

  for (const Triple& t : split.train.triples()) {
    if (!split.valid.contains(t)) {
      throw ValidationError("split nesting violated: train edge missing from valid");
    }
  }
  for (const Triple& t : split.valid.triples()) {
    if (!split.test.contains(t)) {
      throw ValidationError("split nesting violated: valid edge missing from test");
    }
  }
  return split;
}

void save_split(const std::filesystem::path& dir, const GraphSplit& split) {
  std::filesystem::create_directories(dir);
  save_triples(dir / "train.txt", split.train);
  save_triples(dir / "valid.txt", split.valid);
  save_triples(dir / "test.txt", split.test);
  nlohmann::json meta{{"num_entities", split.test.num_entities()},
                      {"num_relations", split.test.num_relations()}};
  std::ofstream out(dir / "meta.json");
  out << meta.dump(2) << '\n';
}

GraphSplit generate_synthetic_kg(int32_t num_entities, int32_t num_relations,
                                 int32_t edges_per_relation,
                                 double holdout_fraction, uint64_t seed) {
  if (num_entities < 2) throw ValidationError("need at least 2 entities");
  if (num_relations < 1) throw ValidationError("need at least 1 relation");
  if (edges_per_relation < 1) throw ValidationError("need at least 1 edge per relation");
  if (holdout_fraction < 0.0 || holdout_fraction > 1.0) {
    throw ValidationError("holdout_fraction must be in [0, 1]");
  }

  Rng rng(mix64(seed, tag64("synthetic-kg")));

  // Zipf(1.0) head weights over entity ids.
  std::vector<double> head_cdf(num_entities);
  double acc = 0.0;
  for (int32_t e = 0; e < num_entities; ++e) {
    acc += 1.0 / (e + 1.0);
    head_cdf[e] = acc;
  }
  auto sample_head = [&]() {
    double u = rng.uniform() * acc;
    return static_cast<int32_t>(
        std::lower_bound(head_cdf.begin(), head_cdf.end(), u) -
        head_cdf.begin());
  };

  // Entity blocks; each relation maps block g -> perm[g]. Tails are drawn
  // from a small head-keyed window inside the target block, so held-out
  // edges stay predictable from observed ones.
  const int32_t block_count = std::max<int32_t>(2, num_entities / 12);
  auto block_of = [&](int32_t e) { return e % block_count; };
  std::vector<std::vector<int32_t>> block_members(block_count);
  for (int32_t e = 0; e < num_entities; ++e) {
    block_members[block_of(e)].push_back(e);
  }
  constexpr double kNoise = 0.02;
  constexpr int32_t kTailWindow = 6;

  std::vector<std::vector<Triple>> per_relation(num_relations);
  for (int32_t r = 0; r < num_relations; ++r) {
    std::vector<int32_t> perm(block_count);
    for (int32_t g = 0; g < block_count; ++g) perm[g] = g;
    for (int32_t g = block_count - 1; g > 0; --g) {
      std::swap(perm[g], perm[rng.below(static_cast<uint32_t>(g + 1))]);
    }

    std::set<std::pair<int32_t, int32_t>> seen;
    const int64_t max_attempts = 100ll * edges_per_relation;
    int64_t attempts = 0;
    while (static_cast<int32_t>(seen.size()) < edges_per_relation &&
           attempts++ < max_attempts) {
      int32_t h = sample_head();
      int32_t t;
      if (rng.uniform() < kNoise) {
        t = static_cast<int32_t>(rng.below(static_cast<uint32_t>(num_entities)));
      } else {
        const auto& members = block_members[perm[block_of(h)]];
        const auto n = static_cast<uint32_t>(members.size());
        uint32_t base = static_cast<uint32_t>(
            mix64(static_cast<uint64_t>(h) * num_relations + r, seed) % n);
        uint32_t window = std::min<uint32_t>(kTailWindow, n);
        t = members[(base + rng.below(window)) % n];
      }
      if (seen.insert({h, t}).second) per_relation[r].push_back({h, r, t});
    }
  }

  // Per-relation holdout keeps the removed fraction within one edge of the
  // requested ratio for every relation.
  std::vector<Triple> train, valid, test;
  for (int32_t r = 0; r < num_relations; ++r) {
    auto& edges = per_relation[r];
    const auto n = static_cast<int32_t>(edges.size());
    const auto k = static_cast<int32_t>(std::llround(holdout_fraction * n));
    for (int32_t i = n - 1; i > 0; --i) {
      std::swap(edges[i], edges[rng.below(static_cast<uint32_t>(i + 1))]);
    }
    for (int32_t i = 0; i < n; ++i) {
      test.push_back(edges[i]);
      if (i >= k) {
        train.push_back(edges[i]);
        valid.push_back(edges[i]);
      } else if (i < (k + 1) / 2) {
        valid.push_back(edges[i]);
      }
    }
  }

  GraphSplit split;
  split.train = KnowledgeGraph(num_entities, num_relations, std::move(train));
  split.valid = KnowledgeGraph(num_entities, num_relations, std::move(valid));
  split.test = KnowledgeGraph(num_entities, num_relations, std::move(test));
  return split;
}

}  // namespace cqa
