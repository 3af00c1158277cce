#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cqa/common.hpp"
#include "cqa/kg.hpp"
#include "cqa/query.hpp"

namespace cqa {

// Exact bottom-up set evaluation: Anchor -> {e}; Projection(r, c) -> image of
// eval(c) through r; Intersection/Union -> set intersection/union;
// Negation -> complement against the entity universe. Returns a sorted id
// vector. The tree must be fully grounded with ids in range.
std::vector<int32_t> evaluate(const QueryNode& tree, const KnowledgeGraph& graph);

struct GroundedQuery {
  std::string template_name;
  QueryNode tree;
  // Answers derivable on the train graph (and still correct on the full
  // graph); the positives used by the training loss.
  std::vector<int32_t> easy_answers;
  // Answers on the test graph that are not easy.
  std::vector<int32_t> hard_answers;
};

// easy/hard disjointness and easy+hard == test-graph answers.
void check_grounded_query(const GroundedQuery& q, const KnowledgeGraph& test);

// Grounds a template by a backward walk from a sampled answer entity on the
// given graph, so the answer set is nonempty; answers are evaluated on the
// same graph (hard set stays empty). Used for training queries. Negated
// branches are walked as positive patterns from an independently sampled
// entity. Groundings whose answer set covers more than half the universe are
// rejected as degenerate. Throws SamplingExhausted after 1000 failed
// attempts.
GroundedQuery ground_on_graph(const QueryTemplate& tmpl,
                              const KnowledgeGraph& graph, Rng& rng);

// Evaluation-grade grounding: walks on the test graph, computes easy answers
// from the train graph and hard answers as the remainder on the test graph.
// With require_hard set, returns nullopt when the hard set is empty.
std::optional<GroundedQuery> ground(const QueryTemplate& tmpl,
                                    const GraphSplit& split, Rng& rng,
                                    bool require_hard);

enum class Setting { MultiHop, EPFO, EFO1 };

std::string to_string(Setting s);
std::optional<Setting> parse_setting(const std::string& text);

const std::vector<std::string>& train_templates(Setting s);
const std::vector<std::string>& eval_templates(Setting s);

struct FewShotDataset {
  Setting setting = Setting::MultiHop;
  double retention_ratio = 0.001;
  std::map<std::string, std::vector<GroundedQuery>> train_queries;
  std::map<std::string, std::vector<GroundedQuery>> eval_queries;
};

// Builds the few-shot dataset for a setting: per training type, samples
// pool_size_per_type groundings on the train graph and keeps
// ceil(ratio * pool) of them, except 1p which is retained in full (one query
// per distinct (head, relation) pair of the train graph). Evaluation queries
// are grounded against the split with require_hard. Deterministic in seed.
FewShotDataset build_fewshot_dataset(const GraphSplit& split, Setting setting,
                                     int pool_size_per_type, double ratio,
                                     uint64_t seed, int eval_size_per_type);

// One JSON-lines file per (role, template):
// {"tree": "...", "easy": [...], "hard": [...]}.
void save_dataset(const std::filesystem::path& dir, const FewShotDataset& ds);
FewShotDataset load_dataset(const std::filesystem::path& dir);

}  // namespace cqa
