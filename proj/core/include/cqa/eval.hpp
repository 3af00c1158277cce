#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cqa/backbone.hpp"
#include "cqa/oracle.hpp"

namespace cqa {

// Filtered ranks of a query's hard answers, one per answer. Other correct
// answers (easy and remaining hard) are excluded from the ranking; ties with
// eligible entities break pessimistically (a tied competitor counts as ranked
// above).
struct RankRecord {
  std::vector<int32_t> ranks;

  double reciprocal_sum() const {
    double s = 0.0;
    for (int32_t r : ranks) s += 1.0 / r;
    return s;
  }
};

// Pure ranking core: scores indexed by entity id.
std::vector<int32_t> ranks_from_scores(const std::vector<double>& scores,
                                       const std::vector<int32_t>& easy,
                                       const std::vector<int32_t>& hard);

// Scores every entity against the query embedding (max over DNF branches)
// and ranks the hard answers. Overlays frozen in the store are routed when a
// scheme is given.
RankRecord filtered_ranks(const GroundedQuery& query,
                          const ParameterStore& store,
                          std::optional<Scheme> scheme);

// MRR(%) over all hard answers of all queries (per-answer convention).
double template_mrr(const std::vector<GroundedQuery>& queries,
                    const ParameterStore& store, std::optional<Scheme> scheme);

struct ResultTable {
  std::string setting;
  std::vector<std::string> columns;  // template names; AVG is implicit
  struct Row {
    std::string label;
    std::vector<double> mrr;  // percent, one per column
    double avg = 0.0;
  };
  std::vector<Row> rows;
};

struct LabeledStore {
  std::string label;
  const ParameterStore* store = nullptr;
  std::optional<Scheme> scheme;
  // When set (MAML evaluation), supplies a per-template store instead.
  std::function<const ParameterStore&(const std::string&)> provider;
};

ResultTable mrr_table(const FewShotDataset& dataset,
                      const std::vector<LabeledStore>& stores);

// Percentages with two decimals, one row per algorithm, matching columns
// plus a trailing AVG.
void write_csv(std::ostream& out, const ResultTable& table);
void write_text(std::ostream& out, const ResultTable& table);

}  // namespace cqa
