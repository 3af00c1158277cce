#include "cqa/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>

#include "kernels.hpp"

namespace cqa {

std::vector<int32_t> ranks_from_scores(const std::vector<double>& scores,
                                       const std::vector<int32_t>& easy,
                                       const std::vector<int32_t>& hard) {
  if (hard.empty()) {
    throw ContractViolation("filtered ranking requires a nonempty hard set");
  }
  std::vector<char> filtered(scores.size(), 0);
  for (int32_t e : easy) filtered[e] = 1;
  for (int32_t h : hard) filtered[h] = 1;

  std::vector<int32_t> ranks;
  ranks.reserve(hard.size());
  for (int32_t a : hard) {
    const double sa = scores[a];
    int32_t above = 0;
    for (size_t e = 0; e < scores.size(); ++e) {
      if (filtered[e] || static_cast<int32_t>(e) == a) continue;
      if (scores[e] >= sa) ++above;  // ties rank above
    }
    ranks.push_back(1 + above);
  }
  return ranks;
}

namespace {

std::vector<double> squashed_entity_table(const ParameterStore& store) {
  std::vector<double> out(store.entity_table.size());
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = detail::sigmoid(store.entity_table[i]);
  }
  return out;
}

// Max-over-branches score for every entity.
std::vector<double> all_entity_scores(const GroundedQuery& query,
                                      const ParameterStore& store,
                                      std::optional<Scheme> scheme,
                                      const std::vector<double>& squashed) {
  const int dim = store.dims.dim;
  std::vector<double> scores(store.dims.num_entities,
                             -std::numeric_limits<double>::infinity());
  for (const QueryNode& branch : dnf_decompose(query.tree)) {
    BoundedVector emb = forward(branch, store, scheme);
    for (int32_t e = 0; e < store.dims.num_entities; ++e) {
      const double* row = squashed.data() + static_cast<int64_t>(e) * dim;
      double s = 0.0;
      for (int j = 0; j < dim; ++j) s -= std::fabs(emb.values[j] - row[j]);
      scores[e] = std::max(scores[e], s);
    }
  }
  return scores;
}

}  // namespace

RankRecord filtered_ranks(const GroundedQuery& query,
                          const ParameterStore& store,
                          std::optional<Scheme> scheme) {
  std::vector<double> squashed = squashed_entity_table(store);
  std::vector<double> scores = all_entity_scores(query, store, scheme, squashed);
  return RankRecord{ranks_from_scores(scores, query.easy_answers,
                                      query.hard_answers)};
}

double template_mrr(const std::vector<GroundedQuery>& queries,
                    const ParameterStore& store,
                    std::optional<Scheme> scheme) {
  std::vector<double> squashed = squashed_entity_table(store);
  double reciprocal = 0.0;
  int64_t answers = 0;
  for (const GroundedQuery& q : queries) {
    std::vector<double> scores = all_entity_scores(q, store, scheme, squashed);
    for (int32_t r : ranks_from_scores(scores, q.easy_answers, q.hard_answers)) {
      reciprocal += 1.0 / r;
      ++answers;
    }
  }
  if (answers == 0) throw ContractViolation("no hard answers to rank");
  return 100.0 * reciprocal / static_cast<double>(answers);
}

ResultTable mrr_table(const FewShotDataset& dataset,
                      const std::vector<LabeledStore>& stores) {
  ResultTable table;
  table.setting = to_string(dataset.setting);
  table.columns = eval_templates(dataset.setting);
  for (const LabeledStore& ls : stores) {
    ResultTable::Row row;
    row.label = ls.label;
    double sum = 0.0;
    for (const std::string& name : table.columns) {
      const ParameterStore& store =
          ls.provider ? ls.provider(name) : *ls.store;
      double mrr = template_mrr(dataset.eval_queries.at(name), store, ls.scheme);
      row.mrr.push_back(mrr);
      sum += mrr;
    }
    row.avg = sum / static_cast<double>(table.columns.size());
    table.rows.push_back(std::move(row));
  }
  return table;
}

void write_csv(std::ostream& out, const ResultTable& table) {
  out << "algorithm";
  for (const std::string& c : table.columns) out << ',' << c;
  out << ",AVG\n";
  out << std::fixed << std::setprecision(2);
  for (const auto& row : table.rows) {
    out << row.label;
    for (double v : row.mrr) out << ',' << v;
    out << ',' << row.avg << '\n';
  }
  out.unsetf(std::ios_base::floatfield);
}

void write_text(std::ostream& out, const ResultTable& table) {
  size_t label_width = 9;
  for (const auto& row : table.rows) {
    label_width = std::max(label_width, row.label.size());
  }
  out << "setting: " << table.setting << '\n';
  out << std::left << std::setw(static_cast<int>(label_width) + 2)
      << "algorithm" << std::right;
  for (const std::string& c : table.columns) out << std::setw(8) << c;
  out << std::setw(8) << "AVG" << '\n';
  out << std::fixed << std::setprecision(2);
  for (const auto& row : table.rows) {
    out << std::left << std::setw(static_cast<int>(label_width) + 2)
        << row.label << std::right;
    for (double v : row.mrr) out << std::setw(8) << v;
    out << std::setw(8) << row.avg << '\n';
  }
  out.unsetf(std::ios_base::floatfield);
}

}  // namespace cqa
