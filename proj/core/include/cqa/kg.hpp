#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cqa/common.hpp"

namespace cqa {

struct Triple {
  int32_t head = 0;
  int32_t relation = 0;
  int32_t tail = 0;

  friend auto operator<=>(const Triple&, const Triple&) = default;
};

// Immutable triple store with (head, relation) -> tails and
// (tail, relation) -> heads adjacency indexes. Safe for concurrent reads.
class KnowledgeGraph {
 public:
  KnowledgeGraph() = default;
  KnowledgeGraph(int32_t num_entities, int32_t num_relations,
                 std::vector<Triple> triples);

  int32_t num_entities() const { return num_entities_; }
  int32_t num_relations() const { return num_relations_; }
  const std::vector<Triple>& triples() const { return triples_; }

  // Sorted tails t with (head, relation, t) present; empty when none.
  const std::vector<int32_t>& neighbors(int32_t head, int32_t relation) const;
  // Sorted heads h with (h, relation, tail) present; empty when none.
  const std::vector<int32_t>& inverse_neighbors(int32_t tail,
                                                int32_t relation) const;

  bool contains(const Triple& t) const;

  void check_entity(int32_t id) const;
  void check_relation(int32_t id) const;

 private:
  int32_t num_entities_ = 0;
  int32_t num_relations_ = 0;
  std::vector<Triple> triples_;  // sorted, unique
  std::unordered_map<uint64_t, std::vector<int32_t>> out_;
  std::unordered_map<uint64_t, std::vector<int32_t>> in_;
};

// Open-world split. Edge sets are nested: train <= valid <= test.
struct GraphSplit {
  KnowledgeGraph train;
  KnowledgeGraph valid;
  KnowledgeGraph test;
};

// Free-function spelling used throughout; forwards to the index.
inline const std::vector<int32_t>& neighbors(const KnowledgeGraph& g,
                                             int32_t head, int32_t relation) {
  return g.neighbors(head, relation);
}

// Reads one triple per line ("head relation tail", tab- or space-separated
// integer ids; '#' starts a comment line). Counts are inferred as max id + 1
// when absent; when given, any id >= count is a validation error.
KnowledgeGraph load_triples(
    const std::filesystem::path& path,
    std::optional<std::pair<int32_t, int32_t>> counts = std::nullopt);

void save_triples(const std::filesystem::path& path, const KnowledgeGraph& g);

// Directory layout: train.txt / valid.txt / test.txt + meta.json with the
// shared entity/relation counts. Load validates the nesting invariant.
GraphSplit load_split(const std::filesystem::path& dir);
void save_split(const std::filesystem::path& dir, const GraphSplit& split);

// Deterministic synthetic benchmark graph. Heads follow a Zipf(1.0) weight
// over entity ids; tails are drawn from a per-relation cluster map (entities
// are partitioned into blocks and each relation permutes blocks), with a
// small uniform-noise fraction. The block structure is what makes held-out
// edges predictable from observed ones and keeps multi-hop answer sets
// non-degenerate at small entity counts.
//
// train = test minus a per-relation uniform holdout of ~holdout_fraction of
// edges; valid = train plus half of the holdout.
GraphSplit generate_synthetic_kg(int32_t num_entities, int32_t num_relations,
                                 int32_t edges_per_relation,
                                 double holdout_fraction, uint64_t seed);

}  // namespace cqa
