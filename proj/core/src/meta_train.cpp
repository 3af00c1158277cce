#include "cqa/meta_train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "kernels.hpp"

namespace cqa {

using detail::Dual;
using detail::GradBank;
using detail::ParamBank;
using detail::QueryPlans;

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::Vanilla: return "vanilla";
    case Algorithm::MAML: return "maml";
    case Algorithm::MAMO: return "mamo";
  }
  return "?";
}

std::optional<Algorithm> parse_algorithm(const std::string& text) {
  if (text == "vanilla") return Algorithm::Vanilla;
  if (text == "maml") return Algorithm::MAML;
  if (text == "mamo") return Algorithm::MAMO;
  return std::nullopt;
}

void TrainConfig::validate() const {
  if (algorithm == Algorithm::MAMO && !scheme) {
    throw ConfigError("mamo requires a categorization scheme");
  }
  // Zero is allowed: it degenerates the meta algorithms to shared-parameter
  // training, which the reduction tests rely on.
  if ((algorithm == Algorithm::MAML || algorithm == Algorithm::MAMO) &&
      adaptation_lr < 0.0) {
    throw ConfigError("adaptation learning rate must be non-negative for maml/mamo");
  }
  if (support_batch < 1 || target_batch < 1) {
    throw ConfigError("batch sizes must be >= 1");
  }
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (negatives_per_query < 1) throw ConfigError("negatives_per_query must be >= 1");
  if (inference_support < 1 || inference_steps < 0) {
    throw ConfigError("inference support/steps out of range");
  }
  if (outer_lr < 0.0) throw ConfigError("outer learning rate must be >= 0");
}

AdamState AdamState::init(const ModelDims& dims) {
  AdamState s;
  s.m_proj.assign(dims.proj_total(), 0.0);
  s.v_proj.assign(dims.proj_total(), 0.0);
  s.m_ent.assign(dims.entity_total(), 0.0);
  s.v_ent.assign(dims.entity_total(), 0.0);
  return s;
}

TrainData::TrainData(const FewShotDataset& dataset, const ModelDims& dims,
                     std::optional<Scheme> scheme)
    : dataset_(&dataset), scheme_(scheme) {
  for (const auto& [name, queries] : dataset.train_queries) {
    QueryBatch list;
    list.reserve(queries.size());
    for (const GroundedQuery& q : queries) list.push_back(&q);
    if (!list.empty()) names_.push_back(name);
    flat_.insert(flat_.end(), list.begin(), list.end());
    by_template_[name] = std::move(list);
  }
  if (scheme_) {
    for (const GroundedQuery* q : flat_) {
      std::vector<OperatorTypeKey> seen;
      for (const OperatorSite& site : enumerate_projection_sites(q->tree)) {
        OperatorTypeKey key = categorize(site, *scheme_, dims.depth_cap);
        if (std::find(seen.begin(), seen.end(), key) == seen.end()) {
          seen.push_back(key);
          by_category_[key].push_back(q);
        }
      }
    }
  }
}

const QueryBatch& TrainData::of_template(const std::string& name) const {
  static const QueryBatch empty;
  auto it = by_template_.find(name);
  return it == by_template_.end() ? empty : it->second;
}

const QueryBatch& TrainData::of_category(const OperatorTypeKey& key) const {
  static const QueryBatch empty;
  auto it = by_category_.find(key);
  return it == by_category_.end() ? empty : it->second;
}

std::vector<OperatorTypeKey> TrainData::categories_present() const {
  std::vector<OperatorTypeKey> keys;
  keys.reserve(by_category_.size());
  for (const auto& [key, list] : by_category_) keys.push_back(key);
  return keys;
}

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void adam_update(std::vector<double>& param, const std::vector<double>& grad,
                 std::vector<double>& m, std::vector<double>& v, int64_t t,
                 double lr) {
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
  for (size_t i = 0; i < param.size(); ++i) {
    m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * grad[i];
    v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
    param[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + kAdamEps);
  }
}

QueryBatch sample_batch(const QueryBatch& from, int n, Rng& rng) {
  if (from.empty()) throw DataError("cannot sample from an empty query pool");
  QueryBatch batch;
  batch.reserve(n);
  for (int i = 0; i < n; ++i) {
    batch.push_back(from[rng.below(static_cast<uint32_t>(from.size()))]);
  }
  return batch;
}

// Training batches are type-balanced: template first, then a query within
// it. Uniform sampling over the flattened list would be dominated by the
// fully retained 1p pool and starve the few-shot types.
QueryBatch sample_train_batch(const TrainData& data, int n, Rng& rng) {
  const auto& names = data.template_names();
  if (names.empty()) throw DataError("empty training data");
  if (names.size() == 1) return sample_batch(data.of_template(names[0]), n, rng);
  QueryBatch batch;
  batch.reserve(n);
  for (int i = 0; i < n; ++i) {
    const QueryBatch& pool =
        data.of_template(names[rng.below(static_cast<uint32_t>(names.size()))]);
    batch.push_back(pool[rng.below(static_cast<uint32_t>(pool.size()))]);
  }
  return batch;
}

std::vector<QueryPlans> build_plans(const QueryBatch& batch,
                                    std::optional<Scheme> scheme,
                                    const ModelDims& dims) {
  std::vector<QueryPlans> plans;
  plans.reserve(batch.size());
  for (const GroundedQuery* q : batch) {
    plans.push_back(detail::build_query_plans(q->tree, scheme, dims));
  }
  return plans;
}

std::vector<const QueryPlans*> plan_ptrs(const std::vector<QueryPlans>& plans) {
  std::vector<const QueryPlans*> ptrs;
  ptrs.reserve(plans.size());
  for (const QueryPlans& p : plans) ptrs.push_back(&p);
  return ptrs;
}

double l2_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

void check_finite(double loss) {
  if (!std::isfinite(loss)) throw NumericError("non-finite training loss");
}

bool plans_contain_category(const QueryPlans& plans, const OperatorTypeKey& key) {
  for (const auto& branch : plans.branches) {
    for (const auto& k : branch.site_keys) {
      if (k && *k == key) return true;
    }
  }
  return false;
}

// Gradient of the support loss w.r.t. the overlay slot for `key`. Sites of
// the category read their weights from `overlay_values` when given (multi-step
// fine-tuning) and from the shared weights otherwise (the one-step adaptation,
// which differentiates at overlay = theta).
std::vector<double> overlay_grad(const ParameterStore& store,
                                 const QueryBatch& support,
                                 const Contrast& contrast,
                                 const OperatorTypeKey& key,
                                 const std::vector<double>* overlay_values,
                                 double margin, int normalizer) {
  auto plans = build_plans(support, key.scheme, store.dims);
  ParamBank<double> pb;
  pb.theta = store.projection.data();
  pb.entities = store.entity_table.data();
  if (overlay_values != nullptr) pb.overlays[key] = overlay_values->data();

  std::vector<double> grad(store.projection.size(), 0.0);
  GradBank<double> gb;
  gb.overlays[key] = grad.data();

  double loss = detail::batch_loss<double>(plan_ptrs(plans), contrast, pb, &gb,
                                           store.dims, margin, normalizer);
  check_finite(loss);
  return grad;
}

// Hessian-vector product of a shared-weights support loss: tangent of the
// (theta, entity) gradient when the parameters routed to `seed_key` (or all
// shared weights, when seed_key is empty) are perturbed along the seed
// direction. Exact forward-over-reverse.
struct HvpResult {
  std::vector<double> theta;
  std::vector<double> entities;
};

HvpResult hessian_vector(const ParameterStore& store, const QueryBatch& support,
                         const Contrast& contrast,
                         const std::optional<OperatorTypeKey>& seed_key,
                         const std::vector<double>& seed_theta,
                         const std::vector<double>* seed_entities, double margin,
                         int normalizer) {
  const ModelDims& dims = store.dims;
  std::optional<Scheme> scheme =
      seed_key ? std::optional<Scheme>(seed_key->scheme) : std::nullopt;
  auto plans = build_plans(support, scheme, dims);

  std::vector<Dual> theta(store.projection.size());
  for (size_t i = 0; i < theta.size(); ++i) {
    theta[i] = {store.projection[i],
                seed_key ? 0.0 : seed_theta[i]};
  }
  std::vector<Dual> entities(store.entity_table.size());
  for (size_t i = 0; i < entities.size(); ++i) {
    entities[i] = {store.entity_table[i],
                   seed_entities ? (*seed_entities)[i] : 0.0};
  }
  std::vector<Dual> seeded;
  ParamBank<Dual> pb;
  pb.theta = theta.data();
  pb.entities = entities.data();
  if (seed_key) {
    seeded.resize(store.projection.size());
    for (size_t i = 0; i < seeded.size(); ++i) {
      seeded[i] = {store.projection[i], seed_theta[i]};
    }
    pb.overlays[*seed_key] = seeded.data();
  }

  std::vector<Dual> g_theta(store.projection.size());
  std::vector<Dual> g_ent(store.entity_table.size());
  GradBank<Dual> gb;
  gb.theta = g_theta.data();
  gb.entities = g_ent.data();
  gb.fold_unrouted_into_theta = true;

  detail::batch_loss<Dual>(plan_ptrs(plans), contrast, pb, &gb, dims, margin,
                           normalizer);

  HvpResult out;
  out.theta.resize(g_theta.size());
  for (size_t i = 0; i < g_theta.size(); ++i) out.theta[i] = g_theta[i].t;
  out.entities.resize(g_ent.size());
  for (size_t i = 0; i < g_ent.size(); ++i) out.entities[i] = g_ent[i].t;
  return out;
}

}  // namespace

StepResult vanilla_step(const TrainData& data, ParameterStore& store,
                        AdamState& adam, const TrainConfig& config,
                        int64_t step) {
  if (data.flat().empty()) throw DataError("empty training data");
  Rng rng = substream(config.seed, "step-target", static_cast<uint64_t>(step));
  QueryBatch batch = sample_train_batch(data, config.target_batch, rng);
  Contrast contrast = sample_contrast(batch, config.negatives_per_query,
                                      store.dims.num_entities, rng);

  auto plans = build_plans(batch, std::nullopt, store.dims);
  ParamBank<double> pb = detail::bank_from_store(store);
  std::vector<double> g_theta(store.projection.size(), 0.0);
  std::vector<double> g_ent(store.entity_table.size(), 0.0);
  GradBank<double> gb;
  gb.theta = g_theta.data();
  gb.entities = g_ent.data();

  double loss = detail::batch_loss<double>(plan_ptrs(plans), contrast, pb, &gb,
                                           store.dims, config.margin,
                                           static_cast<int>(batch.size()));
  check_finite(loss);

  adam.t += 1;
  adam_update(store.projection, g_theta, adam.m_proj, adam.v_proj, adam.t,
              config.outer_lr);
  adam_update(store.entity_table, g_ent, adam.m_ent, adam.v_ent, adam.t,
              config.entity_lr_effective());
  return StepResult{loss, {}};
}

std::vector<double> adapt_operator(const ParameterStore& store,
                                   const QueryBatch& support,
                                   const Contrast& contrast,
                                   const OperatorTypeKey& key, double alpha,
                                   double margin, int normalizer) {
  if (support.empty()) return store.projection;  // skip signal
  for (const GroundedQuery* q : support) {
    auto plans = detail::build_query_plans(q->tree, key.scheme, store.dims);
    if (!plans_contain_category(plans, key)) {
      throw ContractViolation("support query lacks a site of category " +
                              to_string(key));
    }
  }
  int norm = normalizer > 0 ? normalizer : static_cast<int>(support.size());
  std::vector<double> grad = overlay_grad(store, support, contrast, key,
                                          nullptr, margin, norm);
  std::vector<double> overlay = store.projection;
  for (size_t i = 0; i < overlay.size(); ++i) overlay[i] -= alpha * grad[i];
  return overlay;
}

StepResult mamo_step(const TrainData& data, ParameterStore& store,
                     AdamState& adam, const TrainConfig& config, int64_t step,
                     MamoDebug* debug) {
  config.validate();
  if (config.algorithm != Algorithm::MAMO || !config.scheme) {
    throw ConfigError("mamo_step requires algorithm = mamo with a scheme");
  }
  if (data.flat().empty()) throw DataError("empty training data");
  const ModelDims& dims = store.dims;
  const Scheme scheme = *config.scheme;

  // Inner stage: adapt an overlay per category present in the support batch.
  Rng rng_s = substream(config.seed, "step-support", static_cast<uint64_t>(step));
  QueryBatch support = sample_train_batch(data, config.support_batch, rng_s);
  Contrast s_contrast = sample_contrast(support, config.negatives_per_query,
                                        dims.num_entities, rng_s);
  auto s_plans = build_plans(support, scheme, dims);

  std::map<OperatorTypeKey, std::vector<size_t>> members;
  for (size_t i = 0; i < s_plans.size(); ++i) {
    for (const auto& branch : s_plans[i].branches) {
      for (const auto& key : branch.site_keys) {
        auto& list = members[*key];
        if (list.empty() || list.back() != i) list.push_back(i);
      }
    }
  }

  StepResult result;
  std::map<OperatorTypeKey, std::vector<double>> inner_grads;
  for (const auto& [key, idxs] : members) {
    QueryBatch subset;
    Contrast sub;
    for (size_t i : idxs) {
      subset.push_back(support[i]);
      sub.positives.push_back(s_contrast.positives[i]);
      sub.negatives.push_back(s_contrast.negatives[i]);
    }
    // Subset losses are normalized by the full support batch size so the
    // per-category gradients sum to the shared gradient of the support loss.
    std::vector<double> grad =
        overlay_grad(store, subset, sub, key, nullptr, config.margin,
                     static_cast<int>(support.size()));
    result.inner_grad_norms[key] = l2_norm(grad);

    std::vector<double> overlay = store.projection;
    for (size_t i = 0; i < overlay.size(); ++i) {
      overlay[i] -= config.adaptation_lr * grad[i];
    }
    store.adapted[key] = std::move(overlay);
    inner_grads[key] = std::move(grad);
  }
  if (debug != nullptr) {
    debug->support = support;
    debug->support_contrast = s_contrast;
    debug->inner_grads = inner_grads;
  }

  // Outer stage: target loss with all overlays routed, then update the
  // originals.
  Rng rng_t = substream(config.seed, "step-target", static_cast<uint64_t>(step));
  QueryBatch target = sample_train_batch(data, config.target_batch, rng_t);
  Contrast t_contrast = sample_contrast(target, config.negatives_per_query,
                                        dims.num_entities, rng_t);
  auto t_plans = build_plans(target, scheme, dims);

  ParamBank<double> pb = detail::bank_from_store(store);
  std::vector<double> g_theta(store.projection.size(), 0.0);
  std::vector<double> g_ent(store.entity_table.size(), 0.0);
  std::map<OperatorTypeKey, std::vector<double>> overlay_buckets;
  GradBank<double> gb;
  gb.theta = g_theta.data();
  gb.entities = g_ent.data();
  for (const auto& [key, overlay] : store.adapted) {
    auto [it, ok] = overlay_buckets.try_emplace(key, store.projection.size(), 0.0);
    gb.overlays[key] = it->second.data();
  }

  double outer_loss = detail::batch_loss<double>(
      plan_ptrs(t_plans), t_contrast, pb, &gb, dims, config.margin,
      static_cast<int>(target.size()));
  check_finite(outer_loss);

  // First order: an overlay is theta minus a constant step, so its gradient
  // passes through unchanged. Second order additionally differentiates
  // through the inner gradient.
  for (const auto& [key, bucket] : overlay_buckets) {
    for (size_t i = 0; i < g_theta.size(); ++i) g_theta[i] += bucket[i];
  }
  if (config.second_order) {
    for (const auto& [key, bucket] : overlay_buckets) {
      if (l2_norm(bucket) == 0.0) continue;
      const auto& idxs = members.at(key);
      QueryBatch subset;
      Contrast sub;
      for (size_t i : idxs) {
        subset.push_back(support[i]);
        sub.positives.push_back(s_contrast.positives[i]);
        sub.negatives.push_back(s_contrast.negatives[i]);
      }
      HvpResult hvp = hessian_vector(store, subset, sub, key, bucket, nullptr,
                                     config.margin,
                                     static_cast<int>(support.size()));
      for (size_t i = 0; i < g_theta.size(); ++i) {
        g_theta[i] -= config.adaptation_lr * hvp.theta[i];
      }
      for (size_t i = 0; i < g_ent.size(); ++i) {
        g_ent[i] -= config.adaptation_lr * hvp.entities[i];
      }
    }
  }

  if (debug != nullptr) {
    debug->target = target;
    debug->target_contrast = t_contrast;
    debug->outer_grad_theta = g_theta;
    debug->outer_grad_entities = g_ent;
  }

  adam.t += 1;
  adam_update(store.projection, g_theta, adam.m_proj, adam.v_proj, adam.t,
              config.outer_lr);
  adam_update(store.entity_table, g_ent, adam.m_ent, adam.v_ent, adam.t,
              config.entity_lr_effective());
  store.adapted.clear();  // recomputed each step and at inference

  result.loss = outer_loss;
  return result;
}

StepResult maml_step(const TrainData& data, ParameterStore& store,
                     AdamState& adam, const TrainConfig& config, int64_t step,
                     MamlDebug* debug) {
  config.validate();
  if (config.algorithm != Algorithm::MAML) {
    throw ConfigError("maml_step requires algorithm = maml");
  }
  if (data.flat().empty()) throw DataError("empty training data");
  const ModelDims& dims = store.dims;

  // The task is a query type; support and target are sampled within it.
  Rng rng_task = substream(config.seed, "step-task", static_cast<uint64_t>(step));
  const auto& names = data.template_names();
  const std::string& task =
      names[rng_task.below(static_cast<uint32_t>(names.size()))];
  const QueryBatch& pool = data.of_template(task);

  Rng rng_s = substream(config.seed, "step-support", static_cast<uint64_t>(step));
  QueryBatch support = sample_batch(pool, config.support_batch, rng_s);
  Contrast s_contrast = sample_contrast(support, config.negatives_per_query,
                                        dims.num_entities, rng_s);
  auto s_plans = build_plans(support, std::nullopt, dims);

  ParamBank<double> pb = detail::bank_from_store(store);
  std::vector<double> ig_theta(store.projection.size(), 0.0);
  std::vector<double> ig_ent(store.entity_table.size(), 0.0);
  GradBank<double> gb;
  gb.theta = ig_theta.data();
  gb.entities = ig_ent.data();
  double inner_loss = detail::batch_loss<double>(
      plan_ptrs(s_plans), s_contrast, pb, &gb, dims, config.margin,
      static_cast<int>(support.size()));
  check_finite(inner_loss);

  // Adapt every parameter by one gradient step.
  ParameterStore adapted = store;
  for (size_t i = 0; i < adapted.projection.size(); ++i) {
    adapted.projection[i] -= config.adaptation_lr * ig_theta[i];
  }
  for (size_t i = 0; i < adapted.entity_table.size(); ++i) {
    adapted.entity_table[i] -= config.adaptation_lr * ig_ent[i];
  }

  Rng rng_t = substream(config.seed, "step-target", static_cast<uint64_t>(step));
  QueryBatch target = sample_batch(pool, config.target_batch, rng_t);
  Contrast t_contrast = sample_contrast(target, config.negatives_per_query,
                                        dims.num_entities, rng_t);
  auto t_plans = build_plans(target, std::nullopt, dims);

  ParamBank<double> pb_adapted = detail::bank_from_store(adapted);
  std::vector<double> g_theta(store.projection.size(), 0.0);
  std::vector<double> g_ent(store.entity_table.size(), 0.0);
  GradBank<double> gb_outer;
  gb_outer.theta = g_theta.data();
  gb_outer.entities = g_ent.data();
  double outer_loss = detail::batch_loss<double>(
      plan_ptrs(t_plans), t_contrast, pb_adapted, &gb_outer, dims,
      config.margin, static_cast<int>(target.size()));
  check_finite(outer_loss);

  if (config.second_order) {
    HvpResult hvp = hessian_vector(store, support, s_contrast, std::nullopt,
                                   g_theta, &g_ent, config.margin,
                                   static_cast<int>(support.size()));
    for (size_t i = 0; i < g_theta.size(); ++i) {
      g_theta[i] -= config.adaptation_lr * hvp.theta[i];
    }
    for (size_t i = 0; i < g_ent.size(); ++i) {
      g_ent[i] -= config.adaptation_lr * hvp.entities[i];
    }
  }

  if (debug != nullptr) {
    debug->task = task;
    debug->support = support;
    debug->support_contrast = s_contrast;
    debug->target = target;
    debug->target_contrast = t_contrast;
    debug->outer_grad_theta = g_theta;
    debug->outer_grad_entities = g_ent;
  }

  adam.t += 1;
  adam_update(store.projection, g_theta, adam.m_proj, adam.v_proj, adam.t,
              config.outer_lr);
  adam_update(store.entity_table, g_ent, adam.m_ent, adam.v_ent, adam.t,
              config.entity_lr_effective());
  return StepResult{outer_loss, {}};
}

void inference_adapt(ParameterStore& store, const TrainData& data,
                     const TrainConfig& config, std::vector<std::string>* log,
                     std::map<OperatorTypeKey, std::vector<double>>*
                         step_grad_norms) {
  if (!config.scheme) {
    throw ConfigError("inference adaptation requires a scheme");
  }
  const double lr = config.inference_lr_effective();
  store.adapted.clear();
  for (const OperatorTypeKey& key :
       scheme_categories(*config.scheme, store.dims.depth_cap)) {
    const QueryBatch& pool = data.of_category(key);
    if (pool.empty()) {
      store.adapted[key] = store.projection;
      if (log != nullptr) {
        log->push_back("category " + to_string(key) +
                       ": no support queries, overlay left at shared weights");
      }
      continue;
    }
    Rng rng = substream(config.seed, "inference-adapt", tag64(to_string(key)));
    QueryBatch support = sample_batch(pool, config.inference_support, rng);
    std::vector<double> overlay = store.projection;
    for (int s = 0; s < config.inference_steps; ++s) {
      Contrast contrast = sample_contrast(support, config.negatives_per_query,
                                          store.dims.num_entities, rng);
      std::vector<double> grad =
          overlay_grad(store, support, contrast, key, &overlay, config.margin,
                       static_cast<int>(support.size()));
      if (step_grad_norms != nullptr) {
        (*step_grad_norms)[key].push_back(l2_norm(grad));
      }
      for (size_t i = 0; i < overlay.size(); ++i) overlay[i] -= lr * grad[i];
    }
    store.adapted[key] = std::move(overlay);
  }
}

std::string maml_support_template(const TrainData& data,
                                  const std::string& eval_template) {
  if (!data.of_template(eval_template).empty()) return eval_template;
  static const std::map<std::string, std::string> nearest = {
      {"4p", "3p"}, {"5p", "3p"}, {"6p", "3p"}, {"ip", "2i"},
      {"pi", "2i"}, {"2u", "1p"}, {"up", "2p"},
  };
  auto it = nearest.find(eval_template);
  if (it != nearest.end() && !data.of_template(it->second).empty()) {
    return it->second;
  }
  return data.template_names().front();
}

ParameterStore maml_adapt_for_template(const ParameterStore& store,
                                       const TrainData& data,
                                       const TrainConfig& config,
                                       const std::string& eval_template,
                                       std::vector<std::string>* log) {
  std::string source = maml_support_template(data, eval_template);
  if (log != nullptr && source != eval_template) {
    log->push_back("template " + eval_template + ": fine-tuning on support from " +
                   source);
  }
  const QueryBatch& pool = data.of_template(source);
  Rng rng = substream(config.seed, "maml-inference", tag64(eval_template));
  QueryBatch support = sample_batch(pool, config.inference_support, rng);
  const double lr = config.inference_lr_effective();

  ParameterStore adapted = store;
  for (int s = 0; s < config.inference_steps; ++s) {
    Contrast contrast = sample_contrast(support, config.negatives_per_query,
                                        adapted.dims.num_entities, rng);
    auto plans = build_plans(support, std::nullopt, adapted.dims);
    ParamBank<double> pb = detail::bank_from_store(adapted);
    std::vector<double> g_theta(adapted.projection.size(), 0.0);
    std::vector<double> g_ent(adapted.entity_table.size(), 0.0);
    GradBank<double> gb;
    gb.theta = g_theta.data();
    gb.entities = g_ent.data();
    double loss = detail::batch_loss<double>(
        plan_ptrs(plans), contrast, pb, &gb, adapted.dims, config.margin,
        static_cast<int>(support.size()));
    check_finite(loss);
    for (size_t i = 0; i < adapted.projection.size(); ++i) {
      adapted.projection[i] -= lr * g_theta[i];
    }
    for (size_t i = 0; i < adapted.entity_table.size(); ++i) {
      adapted.entity_table[i] -= lr * g_ent[i];
    }
  }
  return adapted;
}

namespace {

constexpr uint32_t kCheckpointMagic = 0x4351434b;  // "KCQC" little-endian
constexpr uint32_t kCheckpointVersion = 1;

template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw DataError("truncated checkpoint");
  return v;
}

void write_vec(std::ostream& out, const std::vector<double>& v) {
  write_pod<uint64_t>(out, v.size());
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> read_vec(std::istream& in) {
  auto n = read_pod<uint64_t>(in);
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw DataError("truncated checkpoint");
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  auto n = read_pod<uint32_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw DataError("truncated checkpoint");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path.string());
  write_pod(out, kCheckpointMagic);
  write_pod(out, kCheckpointVersion);
  const ModelDims& d = ck.store.dims;
  write_pod(out, d.dim);
  write_pod(out, d.hidden);
  write_pod(out, d.num_entities);
  write_pod(out, d.num_relations);
  write_pod(out, d.depth_cap);
  write_pod<int32_t>(out, static_cast<int32_t>(ck.algorithm));
  write_pod<int32_t>(out, ck.scheme ? static_cast<int32_t>(*ck.scheme) : -1);
  write_pod<uint64_t>(out, ck.run_seed);
  write_pod<uint64_t>(out, ck.store.seed);
  write_pod<int64_t>(out, ck.step);
  write_vec(out, ck.store.projection);
  write_vec(out, ck.store.entity_table);
  write_vec(out, ck.adam.m_proj);
  write_vec(out, ck.adam.v_proj);
  write_vec(out, ck.adam.m_ent);
  write_vec(out, ck.adam.v_ent);
  write_pod<int64_t>(out, ck.adam.t);
  write_pod<uint32_t>(out, static_cast<uint32_t>(ck.store.adapted.size()));
  for (const auto& [key, overlay] : ck.store.adapted) {
    write_string(out, to_string(key));
    write_vec(out, overlay);
  }
  if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint: " + path.string());
  if (read_pod<uint32_t>(in) != kCheckpointMagic) {
    throw DataError("not a checkpoint file: " + path.string());
  }
  if (read_pod<uint32_t>(in) != kCheckpointVersion) {
    throw DataError("unsupported checkpoint format version in " + path.string());
  }
  Checkpoint ck;
  ModelDims d;
  d.dim = read_pod<int32_t>(in);
  d.hidden = read_pod<int32_t>(in);
  d.num_entities = read_pod<int32_t>(in);
  d.num_relations = read_pod<int32_t>(in);
  d.depth_cap = read_pod<int32_t>(in);
  ck.store.dims = d;
  ck.algorithm = static_cast<Algorithm>(read_pod<int32_t>(in));
  int32_t scheme = read_pod<int32_t>(in);
  if (scheme >= 0) ck.scheme = static_cast<Scheme>(scheme);
  ck.run_seed = read_pod<uint64_t>(in);
  ck.store.seed = read_pod<uint64_t>(in);
  ck.step = read_pod<int64_t>(in);
  ck.store.projection = read_vec(in);
  ck.store.entity_table = read_vec(in);
  ck.adam.m_proj = read_vec(in);
  ck.adam.v_proj = read_vec(in);
  ck.adam.m_ent = read_vec(in);
  ck.adam.v_ent = read_vec(in);
  ck.adam.t = read_pod<int64_t>(in);
  auto overlays = read_pod<uint32_t>(in);
  for (uint32_t i = 0; i < overlays; ++i) {
    OperatorTypeKey key = parse_type_key(read_string(in));
    ck.store.adapted[key] = read_vec(in);
  }
  if (ck.store.projection.size() != static_cast<size_t>(d.proj_total()) ||
      ck.store.entity_table.size() != static_cast<size_t>(d.entity_total())) {
    throw DataError("checkpoint weight shapes do not match dimensions");
  }
  return ck;
}

}  // namespace cqa
