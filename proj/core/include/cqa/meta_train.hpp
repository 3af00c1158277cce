#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cqa/backbone.hpp"
#include "cqa/common.hpp"
#include "cqa/oracle.hpp"
#include "cqa/query.hpp"

namespace cqa {

enum class Algorithm { Vanilla, MAML, MAMO };

std::string to_string(Algorithm a);
std::optional<Algorithm> parse_algorithm(const std::string& text);

struct TrainConfig {
  Algorithm algorithm = Algorithm::Vanilla;
  std::optional<Scheme> scheme;  // required for MAMO
  int support_batch = 32;
  int target_batch = 256;
  double adaptation_lr = 0.016;
  double outer_lr = 0.01;
  double entity_lr = 0.05;
  bool second_order = false;
  int64_t steps = 2000;
  uint64_t seed = 0;
  int inference_support = 10;
  int inference_steps = 5;
  double inference_lr = 0.0;  // <= 0 means adaptation_lr / 4
  int negatives_per_query = 32;
  double margin = 3.0;

  double inference_lr_effective() const {
    return inference_lr > 0.0 ? inference_lr : adaptation_lr / 4.0;
  }

  double entity_lr_effective() const {
    return entity_lr > 0.0 ? entity_lr : outer_lr;
  }

  void validate() const;
};

// Adam moments, shape-congruent with projection weights and entity table.
struct AdamState {
  std::vector<double> m_proj, v_proj, m_ent, v_ent;
  int64_t t = 0;

  static AdamState init(const ModelDims& dims);
};

// Training-side view of a dataset: flattened query list, per-template lists,
// per-category lists (queries containing at least one site of the category)
// and cached evaluation plans. Scheme-specific when a scheme is given.
class TrainData {
 public:
  TrainData(const FewShotDataset& dataset, const ModelDims& dims,
            std::optional<Scheme> scheme);

  const FewShotDataset& dataset() const { return *dataset_; }
  std::optional<Scheme> scheme() const { return scheme_; }
  const QueryBatch& flat() const { return flat_; }
  const std::vector<std::string>& template_names() const { return names_; }
  const QueryBatch& of_template(const std::string& name) const;
  // Empty batch for categories no training query contains.
  const QueryBatch& of_category(const OperatorTypeKey& key) const;
  std::vector<OperatorTypeKey> categories_present() const;

 private:
  const FewShotDataset* dataset_;
  std::optional<Scheme> scheme_;
  QueryBatch flat_;
  std::vector<std::string> names_;
  std::map<std::string, QueryBatch> by_template_;
  std::map<OperatorTypeKey, QueryBatch> by_category_;
};

struct StepResult {
  double loss = 0.0;
  // Per-category inner gradient norms (MAMO) for the training log.
  std::map<OperatorTypeKey, double> inner_grad_norms;
};

// Optional instrumentation of one MAMO step.
struct MamoDebug {
  QueryBatch support;
  Contrast support_contrast;
  std::map<OperatorTypeKey, std::vector<double>> inner_grads;
  QueryBatch target;
  Contrast target_contrast;
  // Outer meta-gradients as fed to the optimizer.
  std::vector<double> outer_grad_theta;
  std::vector<double> outer_grad_entities;
};

// One Adam step on the sampled target batch with shared weights everywhere.
StepResult vanilla_step(const TrainData& data, ParameterStore& store,
                        AdamState& adam, const TrainConfig& config,
                        int64_t step);

// One-step type adaptation: returns theta - alpha * g where g is the
// gradient of the support loss w.r.t. the overlay slot for `key`, evaluated
// with every site at the shared weights. The store is not modified; an empty
// support set yields theta unchanged. `normalizer` overrides the loss
// normalization (a meta step normalizes category subsets by the full support
// batch size).
std::vector<double> adapt_operator(const ParameterStore& store,
                                   const QueryBatch& support,
                                   const Contrast& contrast,
                                   const OperatorTypeKey& key, double alpha,
                                   double margin, int normalizer = 0);

// Support batch -> per-category overlays via adapt_operator -> outer loss on
// an independent target batch with overlays routed per site -> Adam update of
// the shared weights and entity table. Overlays are recomputed every step and
// cleared afterwards. First-order by default; with config.second_order the
// update differentiates through the inner gradient (exact, via
// forward-over-reverse).
StepResult mamo_step(const TrainData& data, ParameterStore& store,
                     AdamState& adam, const TrainConfig& config, int64_t step,
                     MamoDebug* debug = nullptr);

// Optional instrumentation of one MAML step.
struct MamlDebug {
  std::string task;
  QueryBatch support;
  Contrast support_contrast;
  QueryBatch target;
  Contrast target_contrast;
  std::vector<double> outer_grad_theta;
  std::vector<double> outer_grad_entities;
};

// Query-type-level baseline: sample one template as the task, adapt all
// parameters by one gradient step on its support batch, update the originals
// from the target loss at the adapted parameters.
StepResult maml_step(const TrainData& data, ParameterStore& store,
                     AdamState& adam, const TrainConfig& config, int64_t step,
                     MamlDebug* debug = nullptr);

// Test-time adaptation for MAMO: per category, inference_steps plain gradient
// steps on the overlay alone (shared weights frozen) over inference_support
// training queries containing the category; the resulting overlays are
// installed in the store for evaluation. Categories without support fall back
// to the shared weights (logged). Per-step gradient norms are exposed for
// diagnostics when requested.
void inference_adapt(ParameterStore& store, const TrainData& data,
                     const TrainConfig& config,
                     std::vector<std::string>* log = nullptr,
                     std::map<OperatorTypeKey, std::vector<double>>*
                         step_grad_norms = nullptr);

// Test-time adaptation for MAML: all parameters fine-tuned on support drawn
// from the nearest training template for the given evaluation template.
ParameterStore maml_adapt_for_template(const ParameterStore& store,
                                       const TrainData& data,
                                       const TrainConfig& config,
                                       const std::string& eval_template,
                                       std::vector<std::string>* log = nullptr);
// The support-template mapping used above.
std::string maml_support_template(const TrainData& data,
                                  const std::string& eval_template);

struct Checkpoint {
  ParameterStore store;
  Algorithm algorithm = Algorithm::Vanilla;
  std::optional<Scheme> scheme;
  int64_t step = 0;
  AdamState adam;
  uint64_t run_seed = 0;
};

// Single binary file: format version, dimensions, seeds, weights, optimizer
// state and any adapted overlays.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cqa
