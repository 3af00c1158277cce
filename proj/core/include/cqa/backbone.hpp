#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "cqa/common.hpp"
#include "cqa/oracle.hpp"
#include "cqa/query.hpp"

namespace cqa {

struct ModelDims {
  int32_t dim = 32;            // embedding width d
  int32_t hidden = 32;         // transform hidden width (= dim)
  int32_t num_entities = 0;
  int32_t num_relations = 0;
  int32_t depth_cap = 3;       // clamp for R/L categories

  // Per-relation transform block: W1 (hidden x dim), b1, W2 (dim x hidden), b2.
  int64_t proj_block() const {
    return static_cast<int64_t>(dim) * hidden + hidden +
           static_cast<int64_t>(hidden) * dim + dim;
  }
  int64_t proj_total() const { return proj_block() * num_relations; }
  int64_t entity_total() const { return static_cast<int64_t>(num_entities) * dim; }

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

// Query/entity embedding; every component lies in [0, 1] by construction
// (all raw parameters pass through a logistic squash).
struct BoundedVector {
  std::vector<double> values;
};

// Model parameters. `projection` holds the shared per-relation transform
// weights (the meta parameters); `entity_table` holds raw entity rows (the
// remaining learnable parameters). `adapted` maps an operator-type key to a
// full-shape overlay of the projection weights; when empty, every site uses
// the shared weights.
struct ParameterStore {
  ModelDims dims;
  uint64_t seed = 0;
  std::vector<double> entity_table;
  std::vector<double> projection;
  std::map<OperatorTypeKey, std::vector<double>> adapted;

  static ParameterStore init(const ModelDims& dims, uint64_t seed);

  double* relation_block(int32_t relation) {
    return projection.data() + relation * dims.proj_block();
  }
  const double* relation_block(int32_t relation) const {
    return projection.data() + relation * dims.proj_block();
  }
};

// Partial derivatives, shape-congruent with the store slices they cover.
// Slices not requested by the selector are absent; requested-but-unused
// slices are present and zero.
struct GradientMap {
  std::optional<std::vector<double>> projection;
  std::optional<std::vector<double>> entity_table;
  std::map<OperatorTypeKey, std::vector<double>> overlays;
};

struct GradSelector {
  bool theta = true;
  bool entities = true;
  // Materialize buckets for every overlay in store.adapted.
  bool overlays_in_store = true;
  // Extra overlay keys to materialize (zero when unused).
  std::set<OperatorTypeKey> extra_overlays;
};

// Bottom-up embedding of a grounded, union-free tree. When `scheme` is given,
// each projection site routes through the overlay stored for its category, if
// any; otherwise the shared weights apply.
BoundedVector forward(const QueryNode& tree, const ParameterStore& store,
                      std::optional<Scheme> scheme = std::nullopt);

// -L1 distance between the query embedding and the squashed entity row.
double score(const BoundedVector& query_emb, int32_t entity,
             const ParameterStore& store);

// Sampled positive answer + uniform negatives per batch query. Sampling is
// split out from the loss so the loss is a deterministic function of the
// parameters (finite-difference checks and inner/outer passes reuse one
// sample).
struct Contrast {
  std::vector<int32_t> positives;
  std::vector<std::vector<int32_t>> negatives;
};

using QueryBatch = std::vector<const GroundedQuery*>;

Contrast sample_contrast(const QueryBatch& batch, int negatives_per_query,
                         int32_t num_entities, Rng& rng);

// Negative-sampling loss, mean over the batch:
//   -log sig(margin + score(q, a)) - (1/k) sum_i log sig(-score(q, n_i) - margin).
// Union queries score each candidate as the max over DNF branches.
double loss(const QueryBatch& batch, const ParameterStore& store,
            std::optional<Scheme> scheme, const Contrast& contrast,
            double margin);
// Convenience overload that samples the contrast internally.
double loss(const QueryBatch& batch, const ParameterStore& store,
            std::optional<Scheme> scheme, int negatives_per_query,
            double margin, Rng& rng);

// Loss value plus exact reverse-mode derivatives for the selected slices.
std::pair<double, GradientMap> loss_grad(const QueryBatch& batch,
                                         const ParameterStore& store,
                                         std::optional<Scheme> scheme,
                                         const Contrast& contrast,
                                         double margin,
                                         const GradSelector& selector = {});

}  // namespace cqa
