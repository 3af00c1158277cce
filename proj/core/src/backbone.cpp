#include "cqa/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "kernels.hpp"

namespace cqa {

using detail::Activations;
using detail::GradBank;
using detail::ParamBank;
using detail::QueryPlans;
using detail::TreePlan;

ParameterStore ParameterStore::init(const ModelDims& dims, uint64_t seed) {
  if (dims.dim < 1 || dims.hidden < 1 || dims.num_entities < 1 ||
      dims.num_relations < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  ParameterStore store;
  store.dims = dims;
  store.seed = seed;
  Rng rng = substream(seed, "init-params");
  store.entity_table.resize(dims.entity_total());
  for (double& x : store.entity_table) x = rng.uniform(-0.5, 0.5);
  store.projection.resize(dims.proj_total());
  for (double& x : store.projection) x = rng.uniform(-0.5, 0.5);
  return store;
}

namespace detail {

namespace {

void flatten(const QueryNode& n, const ModelDims& dims, TreePlan& plan,
             int& next_site, std::vector<int>& order_stack) {
  // Pre-order site numbering matches enumerate_projection_sites.
  int my_site = -1;
  if (n.kind == NodeKind::Projection) {
    if (n.symbol < 0 || n.symbol >= dims.num_relations) {
      throw ValidationError("relation id out of range in query tree");
    }
    my_site = next_site++;
  } else if (n.kind == NodeKind::Anchor) {
    if (n.symbol < 0 || n.symbol >= dims.num_entities) {
      throw ValidationError("entity id out of range in query tree");
    }
  } else if (n.kind == NodeKind::Union) {
    throw ContractViolation("union node reached the embedding pipeline");
  }

  std::vector<int> child_nodes;
  child_nodes.reserve(n.children.size());
  for (const QueryNode& c : n.children) {
    flatten(c, dims, plan, next_site, order_stack);
    child_nodes.push_back(order_stack.back());
    order_stack.pop_back();
  }

  TreePlan::Node node;
  node.kind = n.kind;
  node.symbol = n.symbol;
  node.child_begin = static_cast<int>(plan.child_ids.size());
  node.child_count = static_cast<int>(child_nodes.size());
  node.site = my_site;
  for (int c : child_nodes) plan.child_ids.push_back(c);
  plan.nodes.push_back(node);
  order_stack.push_back(static_cast<int>(plan.nodes.size()) - 1);
}

}  // namespace

TreePlan build_tree_plan(const QueryNode& tree, std::optional<Scheme> scheme,
                         const ModelDims& dims) {
  if (!is_grounded(tree)) {
    throw ValidationError("embedding pipeline requires a fully grounded tree");
  }
  TreePlan plan;
  int next_site = 0;
  std::vector<int> stack;
  flatten(tree, dims, plan, next_site, stack);
  plan.site_keys.assign(next_site, std::nullopt);
  if (scheme) {
    auto sites = enumerate_projection_sites(tree);
    for (size_t i = 0; i < sites.size(); ++i) {
      plan.site_keys[i] = categorize(sites[i], *scheme, dims.depth_cap);
    }
  }
  return plan;
}

QueryPlans build_query_plans(const QueryNode& tree, std::optional<Scheme> scheme,
                             const ModelDims& dims) {
  QueryPlans plans;
  for (const QueryNode& branch : dnf_decompose(tree)) {
    plans.branches.push_back(build_tree_plan(branch, scheme, dims));
  }
  return plans;
}

ParamBank<double> bank_from_store(const ParameterStore& store) {
  ParamBank<double> pb;
  pb.theta = store.projection.data();
  pb.entities = store.entity_table.data();
  for (const auto& [key, overlay] : store.adapted) {
    if (overlay.size() != store.projection.size()) {
      throw ValidationError("overlay shape mismatch for " + to_string(key));
    }
    pb.overlays[key] = overlay.data();
  }
  return pb;
}

}  // namespace detail

BoundedVector forward(const QueryNode& tree, const ParameterStore& store,
                      std::optional<Scheme> scheme) {
  TreePlan plan = detail::build_tree_plan(tree, scheme, store.dims);
  ParamBank<double> pb = detail::bank_from_store(store);
  Activations<double> act;
  detail::forward_tree(plan, pb, store.dims, act);
  const double* root = act.out.data() + plan.root() * store.dims.dim;
  return BoundedVector{std::vector<double>(root, root + store.dims.dim)};
}

double score(const BoundedVector& query_emb, int32_t entity,
             const ParameterStore& store) {
  if (static_cast<int32_t>(query_emb.values.size()) != store.dims.dim) {
    throw ValidationError("query embedding dimension mismatch");
  }
  if (entity < 0 || entity >= store.dims.num_entities) {
    throw ValidationError("entity id out of range");
  }
  ParamBank<double> pb = detail::bank_from_store(store);
  return detail::embedding_score(query_emb.values.data(), entity, pb, store.dims);
}

Contrast sample_contrast(const QueryBatch& batch, int negatives_per_query,
                         int32_t num_entities, Rng& rng) {
  if (negatives_per_query < 1) {
    throw ConfigError("negatives_per_query must be >= 1");
  }
  Contrast c;
  c.positives.reserve(batch.size());
  c.negatives.reserve(batch.size());
  for (const GroundedQuery* q : batch) {
    if (q->easy_answers.empty()) {
      throw ContractViolation("query without positive answers in training batch");
    }
    c.positives.push_back(q->easy_answers[rng.below(
        static_cast<uint32_t>(q->easy_answers.size()))]);
    std::vector<int32_t> negs(negatives_per_query);
    for (int32_t& n : negs) {
      n = static_cast<int32_t>(rng.below(static_cast<uint32_t>(num_entities)));
    }
    c.negatives.push_back(std::move(negs));
  }
  return c;
}

namespace {

std::vector<QueryPlans> plans_for_batch(const QueryBatch& batch,
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

}  // namespace

double loss(const QueryBatch& batch, const ParameterStore& store,
            std::optional<Scheme> scheme, const Contrast& contrast,
            double margin) {
  if (batch.empty()) throw ContractViolation("empty batch");
  if (contrast.positives.size() != batch.size()) {
    throw ContractViolation("contrast does not match batch");
  }
  auto plans = plans_for_batch(batch, scheme, store.dims);
  ParamBank<double> pb = detail::bank_from_store(store);
  return detail::batch_loss<double>(plan_ptrs(plans), contrast, pb, nullptr,
                                    store.dims, margin,
                                    static_cast<int>(batch.size()));
}

double loss(const QueryBatch& batch, const ParameterStore& store,
            std::optional<Scheme> scheme, int negatives_per_query,
            double margin, Rng& rng) {
  Contrast c = sample_contrast(batch, negatives_per_query,
                               store.dims.num_entities, rng);
  return loss(batch, store, scheme, c, margin);
}

std::pair<double, GradientMap> loss_grad(const QueryBatch& batch,
                                         const ParameterStore& store,
                                         std::optional<Scheme> scheme,
                                         const Contrast& contrast,
                                         double margin,
                                         const GradSelector& selector) {
  if (batch.empty()) throw ContractViolation("empty batch");
  if (contrast.positives.size() != batch.size()) {
    throw ContractViolation("contrast does not match batch");
  }
  auto plans = plans_for_batch(batch, scheme, store.dims);
  ParamBank<double> pb = detail::bank_from_store(store);

  GradientMap grads;
  GradBank<double> gb;
  if (selector.theta) {
    grads.projection.emplace(store.projection.size(), 0.0);
    gb.theta = grads.projection->data();
  }
  if (selector.entities) {
    grads.entity_table.emplace(store.entity_table.size(), 0.0);
    gb.entities = grads.entity_table->data();
  }
  auto add_overlay_bucket = [&](const OperatorTypeKey& key) {
    auto [it, fresh] =
        grads.overlays.try_emplace(key, store.projection.size(), 0.0);
    if (fresh) gb.overlays[key] = it->second.data();
  };
  if (selector.overlays_in_store) {
    for (const auto& [key, overlay] : store.adapted) add_overlay_bucket(key);
  }
  for (const OperatorTypeKey& key : selector.extra_overlays) {
    add_overlay_bucket(key);
  }

  double value = detail::batch_loss<double>(plan_ptrs(plans), contrast, pb, &gb,
                                            store.dims, margin,
                                            static_cast<int>(batch.size()));
  return {value, std::move(grads)};
}

}  // namespace cqa
