#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cqa/backbone.hpp"
#include "cqa/oracle.hpp"
#include "support/test_util.hpp"

using namespace cqa;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

ModelDims small_dims(int32_t entities = 12, int32_t relations = 3,
                     int32_t dim = 4) {
  return ModelDims{dim, dim, entities, relations, 3};
}

// Hand re-implementation of the per-relation transform for routing checks.
std::vector<double> manual_projection(const std::vector<double>& x,
                                      const double* block, int dim) {
  const double* w1 = block;
  const double* b1 = w1 + dim * dim;
  const double* w2 = b1 + dim;
  const double* b2 = w2 + dim * dim;
  std::vector<double> z(dim), y(dim);
  for (int j = 0; j < dim; ++j) {
    double s = b1[j];
    for (int k = 0; k < dim; ++k) s += w1[j * dim + k] * x[k];
    z[j] = std::tanh(s);
  }
  for (int i = 0; i < dim; ++i) {
    double s = b2[i];
    for (int j = 0; j < dim; ++j) s += w2[i * dim + j] * z[j];
    y[i] = sigmoid(s);
  }
  return y;
}

GroundedQuery make_query(const std::string& name, QueryNode tree,
                         std::vector<int32_t> positives) {
  return GroundedQuery{name, std::move(tree), std::move(positives), {}};
}

}  // namespace

TEST_CASE("forward: double negation is the identity, exactly") {
  ParameterStore store = ParameterStore::init(small_dims(), 1);
  QueryNode x = projection(0, anchor(3));
  BoundedVector direct = forward(x, store);
  BoundedVector doubled = forward(negation(negation(x)), store);
  for (int j = 0; j < store.dims.dim; ++j) {
    CHECK(doubled.values[j] == direct.values[j]);
  }
}

TEST_CASE("forward: intersection is idempotent, exactly") {
  ParameterStore store = ParameterStore::init(small_dims(), 2);
  QueryNode x = projection(1, anchor(5));
  BoundedVector direct = forward(x, store);
  BoundedVector doubled = forward(intersection({x, x}), store);
  CHECK(doubled.values == direct.values);
}

TEST_CASE("forward: intersection is commutative and associative, exactly") {
  ParameterStore store = ParameterStore::init(small_dims(), 9);
  QueryNode x = projection(0, anchor(1));
  QueryNode y = projection(1, anchor(4));
  QueryNode z = projection(2, anchor(7));
  BoundedVector xy = forward(intersection({x, y}), store);
  BoundedVector yx = forward(intersection({y, x}), store);
  CHECK(xy.values == yx.values);
  BoundedVector flat = forward(intersection({x, y, z}), store);
  BoundedVector left = forward(intersection({intersection({x, y}), z}), store);
  BoundedVector right = forward(intersection({x, intersection({y, z})}), store);
  CHECK(flat.values == left.values);
  CHECK(flat.values == right.values);
}

TEST_CASE("forward rejects unions and ungrounded trees") {
  ParameterStore store = ParameterStore::init(small_dims(), 3);
  QueryNode u = unions({projection(0, anchor(0)), projection(1, anchor(1))});
  CHECK_THROWS_AS(forward(u, store), ContractViolation);
  CHECK_THROWS_AS(forward(projection_slot(0, anchor(0)), store),
                  ValidationError);
}

TEST_CASE("forward output stays in the unit cube") {
  Rng rng(404);
  KnowledgeGraph shape(20, 4, {});
  for (int trial = 0; trial < 10000; ++trial) {
    ParameterStore store = ParameterStore::init(small_dims(20, 4, 3),
                                                rng.next());
    // Stretch parameters well beyond the init range.
    for (double& v : store.projection) v *= 10.0;
    for (double& v : store.entity_table) v *= 10.0;
    QueryNode tree = testsupport::random_tree(3, shape, rng);
    if (tree.kind == NodeKind::Anchor || tree.kind == NodeKind::Negation) {
      tree = projection(0, std::move(tree));
    }
    BoundedVector out = forward(tree, store);
    for (double v : out.values) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("forward routes each site through its category overlay") {
  ModelDims dims = small_dims(8, 2, 4);
  ParameterStore store = ParameterStore::init(dims, 7);
  std::vector<double> overlay_e = store.projection;
  std::vector<double> overlay_p = store.projection;
  Rng rng(8);
  for (double& v : overlay_e) v += rng.uniform(-0.3, 0.3);
  for (double& v : overlay_p) v += rng.uniform(-0.3, 0.3);
  OperatorTypeKey key_e{OperatorKind::Projection, Scheme::I, cat::kInputEntity};
  OperatorTypeKey key_p{OperatorKind::Projection, Scheme::I,
                        cat::kInputProjection};
  store.adapted[key_e] = overlay_e;
  store.adapted[key_p] = overlay_p;

  QueryNode two_hop = projection(1, projection(0, anchor(2)));

  // Manual composition: inner hop with the entity-input overlay, outer hop
  // with the projection-input overlay.
  std::vector<double> x(dims.dim);
  for (int j = 0; j < dims.dim; ++j) {
    x[j] = sigmoid(store.entity_table[2 * dims.dim + j]);
  }
  auto block = [&](const std::vector<double>& weights, int rel) {
    return weights.data() + rel * dims.proj_block();
  };
  std::vector<double> inner = manual_projection(x, block(overlay_e, 0), dims.dim);
  std::vector<double> expected =
      manual_projection(inner, block(overlay_p, 1), dims.dim);

  BoundedVector routed = forward(two_hop, store, Scheme::I);
  for (int j = 0; j < dims.dim; ++j) {
    CHECK(routed.values[j] == doctest::Approx(expected[j]).epsilon(1e-12));
  }

  // Without a scheme (or with no overlays) both hops use the shared weights.
  BoundedVector shared = forward(two_hop, store);
  std::vector<double> inner_s =
      manual_projection(x, block(store.projection, 0), dims.dim);
  std::vector<double> expected_s =
      manual_projection(inner_s, block(store.projection, 1), dims.dim);
  for (int j = 0; j < dims.dim; ++j) {
    CHECK(shared.values[j] == doctest::Approx(expected_s[j]).epsilon(1e-12));
  }
  ParameterStore cleared = store;
  cleared.adapted.clear();
  CHECK(forward(two_hop, cleared, Scheme::I).values == shared.values);
}

TEST_CASE("score: zero at the entity's own embedding, hand L1 otherwise") {
  ModelDims dims = small_dims(4, 1, 2);
  ParameterStore store = ParameterStore::init(dims, 5);
  std::vector<double> own(2);
  for (int j = 0; j < 2; ++j) own[j] = sigmoid(store.entity_table[3 * 2 + j]);
  CHECK(score(BoundedVector{own}, 3, store) == 0.0);

  store.entity_table[0] = -40.0;  // squashes to ~0
  store.entity_table[1] = 40.0;   // squashes to ~1
  double s = score(BoundedVector{{0.5, 0.5}}, 0, store);
  CHECK(s == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("ranking by score equals ranking by ascending L1 distance") {
  ModelDims dims = small_dims(30, 2, 6);
  ParameterStore store = ParameterStore::init(dims, 6);
  BoundedVector q = forward(projection(0, anchor(1)), store);

  std::vector<int32_t> by_score(30), by_distance(30);
  std::iota(by_score.begin(), by_score.end(), 0);
  std::iota(by_distance.begin(), by_distance.end(), 0);
  std::vector<double> s(30), d(30);
  for (int32_t e = 0; e < 30; ++e) {
    s[e] = score(q, e, store);
    d[e] = 0.0;
    for (int j = 0; j < 6; ++j) {
      d[e] += std::fabs(q.values[j] - sigmoid(store.entity_table[e * 6 + j]));
    }
  }
  std::stable_sort(by_score.begin(), by_score.end(),
                   [&](int a, int b) { return s[a] > s[b]; });
  std::stable_sort(by_distance.begin(), by_distance.end(),
                   [&](int a, int b) { return d[a] < d[b]; });
  CHECK(by_score == by_distance);
}

TEST_CASE("loss: a fitted store beats ten random stores on its batch") {
  ModelDims dims = small_dims(6, 1, 3);
  // Fitted by construction: zero transform weights except the output bias,
  // which reproduces the answer's raw embedding; the answer row is far from
  // every other row.
  ParameterStore fitted = ParameterStore::init(dims, 11);
  for (int32_t e = 0; e < 6; ++e) {
    for (int j = 0; j < 3; ++j) {
      fitted.entity_table[e * 3 + j] = e == 2 ? 3.0 : -3.0;
    }
  }
  std::fill(fitted.projection.begin(), fitted.projection.end(), 0.0);
  double* b2 = fitted.relation_block(0) + dims.dim * dims.hidden + dims.hidden +
               dims.hidden * dims.dim;
  for (int j = 0; j < 3; ++j) b2[j] = 3.0;

  GroundedQuery q = make_query("1p", projection(0, anchor(2)), {2});
  QueryBatch batch{&q};
  Contrast contrast{{2}, {{4, 5}}};

  double fitted_loss = loss(batch, fitted, std::nullopt, contrast, 2.0);
  for (uint64_t seed = 100; seed < 110; ++seed) {
    ParameterStore random_store = ParameterStore::init(dims, seed);
    CHECK(fitted_loss <
          loss(batch, random_store, std::nullopt, contrast, 2.0));
  }
}

TEST_CASE("loss: duplicating the batch leaves the mean unchanged") {
  ModelDims dims = small_dims(10, 2, 4);
  ParameterStore store = ParameterStore::init(dims, 12);
  GroundedQuery q = make_query("2p", projection(1, projection(0, anchor(3))),
                               {1, 4});
  QueryBatch once{&q};
  Contrast c1{{1}, {{5, 6, 7}}};
  QueryBatch twice{&q, &q};
  Contrast c2{{1, 1}, {{5, 6, 7}, {5, 6, 7}}};
  double a = loss(once, store, std::nullopt, c1, 2.0);
  double b = loss(twice, store, std::nullopt, c2, 2.0);
  CHECK(a == doctest::Approx(b).epsilon(1e-15));
}

namespace {

// Central-difference oracle over a chosen coordinate accessor.
double finite_difference(const QueryBatch& batch, ParameterStore& store,
                         std::optional<Scheme> scheme, const Contrast& contrast,
                         double margin, double* coord) {
  const double h = 1e-5;
  const double saved = *coord;
  *coord = saved + h;
  double up = loss(batch, store, scheme, contrast, margin);
  *coord = saved - h;
  double down = loss(batch, store, scheme, contrast, margin);
  *coord = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace

TEST_CASE("gradients match central finite differences") {
  ModelDims dims = small_dims(14, 3, 5);
  ParameterStore store = ParameterStore::init(dims, 13);
  OperatorTypeKey key_p{OperatorKind::Projection, Scheme::I,
                        cat::kInputProjection};
  std::vector<double> overlay = store.projection;
  Rng jitter(14);
  for (double& v : overlay) v += jitter.uniform(-0.2, 0.2);
  store.adapted[key_p] = overlay;

  GroundedQuery q1 = make_query("2p", projection(1, projection(0, anchor(3))),
                                {1});
  GroundedQuery q2 = make_query(
      "2in",
      intersection({projection(2, anchor(5)),
                    negation(projection(0, anchor(6)))}),
      {2});
  QueryBatch batch{&q1, &q2};
  Contrast contrast{{1, 2}, {{4, 7, 9}, {8, 10, 11}}};

  auto [value, grads] =
      loss_grad(batch, store, Scheme::I, contrast, 2.0, GradSelector{});
  REQUIRE(grads.projection.has_value());
  REQUIRE(grads.entity_table.has_value());
  REQUIRE(grads.overlays.count(key_p) == 1);

  Rng rng(15);
  int checked = 0;
  while (checked < 12) {
    size_t i = rng.below(static_cast<uint32_t>(store.projection.size()));
    if (std::fabs((*grads.projection)[i]) < 1e-8) continue;
    double fd = finite_difference(batch, store, Scheme::I, contrast, 2.0,
                                  &store.projection[i]);
    CHECK(std::fabs(fd - (*grads.projection)[i]) /
              std::max(std::fabs(fd), std::fabs((*grads.projection)[i])) <
          1e-4);
    ++checked;
  }
  checked = 0;
  while (checked < 12) {
    size_t i = rng.below(static_cast<uint32_t>(store.entity_table.size()));
    if (std::fabs((*grads.entity_table)[i]) < 1e-8) continue;
    double fd = finite_difference(batch, store, Scheme::I, contrast, 2.0,
                                  &store.entity_table[i]);
    CHECK(std::fabs(fd - (*grads.entity_table)[i]) /
              std::max(std::fabs(fd), std::fabs((*grads.entity_table)[i])) <
          1e-4);
    ++checked;
  }
  checked = 0;
  const auto& og = grads.overlays.at(key_p);
  while (checked < 12) {
    size_t i = rng.below(static_cast<uint32_t>(og.size()));
    if (std::fabs(og[i]) < 1e-8) continue;
    double fd = finite_difference(batch, store, Scheme::I, contrast, 2.0,
                                  &store.adapted.at(key_p)[i]);
    CHECK(std::fabs(fd - og[i]) /
              std::max(std::fabs(fd), std::fabs(og[i])) < 1e-4);
    ++checked;
  }
}

TEST_CASE("grad selector: unused overlay slices come back zero") {
  ModelDims dims = small_dims(10, 2, 4);
  ParameterStore store = ParameterStore::init(dims, 16);
  // A 1p batch has only entity-input sites.
  GroundedQuery q = make_query("1p", projection(0, anchor(1)), {2});
  QueryBatch batch{&q};
  Contrast contrast{{2}, {{3, 4}}};

  GradSelector sel;
  OperatorTypeKey key_p{OperatorKind::Projection, Scheme::I,
                        cat::kInputProjection};
  sel.extra_overlays.insert(key_p);
  auto [value, grads] = loss_grad(batch, store, Scheme::I, contrast, 2.0, sel);
  REQUIRE(grads.overlays.count(key_p) == 1);
  for (double g : grads.overlays.at(key_p)) CHECK(g == 0.0);
  // The entity-input sites routed to the shared bucket instead.
  double total = 0.0;
  for (double g : *grads.projection) total += std::fabs(g);
  CHECK(total > 0.0);
}

TEST_CASE("per-category overlay gradients at theta sum to the shared gradient") {
  ModelDims dims = small_dims(16, 3, 5);
  ParameterStore store = ParameterStore::init(dims, 17);
  GroundedQuery q1 = make_query("3p",
      projection(2, projection(1, projection(0, anchor(3)))), {1});
  GroundedQuery q2 = make_query("2i",
      intersection({projection(0, anchor(4)), projection(1, anchor(5))}), {2});
  QueryBatch batch{&q1, &q2};
  Contrast contrast{{1, 2}, {{6, 7}, {8, 9}}};

  for (Scheme scheme : {Scheme::R, Scheme::L, Scheme::I, Scheme::O, Scheme::BI,
                        Scheme::BO}) {
    auto [shared_value, shared] = loss_grad(batch, store, std::nullopt,
                                            contrast, 2.0, GradSelector{});
    GradSelector sel;
    for (const OperatorTypeKey& key : scheme_categories(scheme, dims.depth_cap)) {
      sel.extra_overlays.insert(key);
    }
    auto [split_value, split] = loss_grad(batch, store, scheme, contrast, 2.0,
                                          sel);
    CHECK(shared_value == doctest::Approx(split_value).epsilon(1e-14));
    std::vector<double> sum(store.projection.size(), 0.0);
    for (const auto& [key, g] : split.overlays) {
      for (size_t i = 0; i < sum.size(); ++i) sum[i] += g[i];
    }
    for (size_t i = 0; i < sum.size(); ++i) {
      double a = (*shared.projection)[i];
      double rel = std::fabs(sum[i] - a) /
                   std::max({std::fabs(sum[i]), std::fabs(a), 1e-300});
      if (a == 0.0 && sum[i] == 0.0) rel = 0.0;
      CHECK(rel < 1e-6);
    }
  }
}
