#pragma once

// Differentiation kernels behind the backbone and the training loops.
// Reverse-mode gradients are hand-written per operator. Everything is
// templated on the scalar type: double for ordinary passes, Dual for
// forward-over-reverse Hessian-vector products in the second-order path.

#include <cmath>
#include <map>
#include <optional>
#include <vector>

#include "cqa/backbone.hpp"
#include "cqa/query.hpp"

namespace cqa::detail {

struct Dual {
  double v = 0.0;  // value
  double t = 0.0;  // tangent

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: implicit by design
  Dual(double value, double tangent) : v(value), t(tangent) {}

  Dual& operator+=(const Dual& o) { v += o.v; t += o.t; return *this; }
  Dual& operator-=(const Dual& o) { v -= o.v; t -= o.t; return *this; }
};

inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.t + b.t}; }
inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.t - b.t}; }
inline Dual operator-(Dual a) { return {-a.v, -a.t}; }
inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.t * b.v + a.v * b.t}; }
inline Dual operator/(Dual a, Dual b) {
  double inv = 1.0 / b.v;
  return {a.v * inv, (a.t - a.v * b.t * inv) * inv};
}
inline bool operator<(Dual a, Dual b) { return a.v < b.v; }
inline bool operator>(Dual a, Dual b) { return a.v > b.v; }

inline double value(double x) { return x; }
inline double value(Dual x) { return x.v; }

inline Dual exp(Dual a) {
  double e = std::exp(a.v);
  return {e, a.t * e};
}
inline Dual log1p(Dual a) { return {std::log1p(a.v), a.t / (1.0 + a.v)}; }
inline Dual tanh(Dual a) {
  double th = std::tanh(a.v);
  return {th, a.t * (1.0 - th * th)};
}

template <class Real>
Real sigmoid(Real x) {
  using std::exp;
  if (value(x) >= 0.0) {
    Real e = exp(-x);
    return Real(1.0) / (Real(1.0) + e);
  }
  Real e = exp(x);
  return e / (Real(1.0) + e);
}

template <class Real>
Real log_sigmoid(Real x) {
  using std::exp;
  using std::log1p;
  if (value(x) >= 0.0) return -log1p(exp(-x));
  return x - log1p(exp(x));
}

// Flattened evaluation plan for one union-free grounded tree. Nodes are in
// post-order (children before parents, root last); projection sites carry
// their pre-order site index and, when a scheme is active, the category key
// that routes parameter lookup.
struct TreePlan {
  struct Node {
    NodeKind kind;
    int32_t symbol;  // entity id (Anchor) / relation id (Projection)
    int child_begin = 0;
    int child_count = 0;
    int site = -1;
  };
  std::vector<Node> nodes;
  std::vector<int> child_ids;
  std::vector<std::optional<OperatorTypeKey>> site_keys;

  int root() const { return static_cast<int>(nodes.size()) - 1; }
};

TreePlan build_tree_plan(const QueryNode& tree, std::optional<Scheme> scheme,
                         const ModelDims& dims);

// One plan per DNF branch.
struct QueryPlans {
  std::vector<TreePlan> branches;
};

QueryPlans build_query_plans(const QueryNode& tree, std::optional<Scheme> scheme,
                             const ModelDims& dims);

// Parameter sources for a pass. Overlay entries shadow the shared weights
// for sites whose category matches.
template <class Real>
struct ParamBank {
  const Real* theta = nullptr;
  const Real* entities = nullptr;
  std::map<OperatorTypeKey, const Real*> overlays;

  const Real* site_block(const std::optional<OperatorTypeKey>& key,
                         int32_t relation, const ModelDims& d) const {
    const Real* base = theta;
    if (key) {
      auto it = overlays.find(*key);
      if (it != overlays.end()) base = it->second;
    }
    return base + relation * d.proj_block();
  }

  bool has_overlay(const OperatorTypeKey& key) const {
    return overlays.count(key) != 0;
  }
};

// Gradient sinks. A site's weight gradient goes to the bucket registered for
// its category when one exists; otherwise to the shared bucket, unless the
// site drew its values from an overlay whose bucket was not requested (those
// contributions are dropped, or folded into the shared bucket when
// fold_unrouted_into_theta is set, which is what a Hessian-vector pass over
// the shared gradient wants).
template <class Real>
struct GradBank {
  Real* theta = nullptr;
  Real* entities = nullptr;
  std::map<OperatorTypeKey, Real*> overlays;
  bool fold_unrouted_into_theta = false;

  template <class VReal>
  Real* site_bucket(const std::optional<OperatorTypeKey>& key,
                    const ParamBank<VReal>& values) const {
    if (key) {
      auto it = overlays.find(*key);
      if (it != overlays.end()) return it->second;
      if (values.has_overlay(*key) && !fold_unrouted_into_theta) return nullptr;
    }
    return theta;
  }
};

template <class Real>
struct Activations {
  std::vector<Real> out;     // nodes x dim
  std::vector<Real> hidden;  // nodes x hidden, projection rows only
};

template <class Real>
void forward_tree(const TreePlan& plan, const ParamBank<Real>& pb,
                  const ModelDims& d, Activations<Real>& act) {
  const int dim = d.dim;
  const int hid = d.hidden;
  act.out.assign(plan.nodes.size() * dim, Real(0.0));
  act.hidden.assign(plan.nodes.size() * hid, Real(0.0));

  for (size_t ni = 0; ni < plan.nodes.size(); ++ni) {
    const auto& node = plan.nodes[ni];
    Real* out = act.out.data() + ni * dim;
    switch (node.kind) {
      case NodeKind::Anchor: {
        const Real* row = pb.entities + static_cast<int64_t>(node.symbol) * dim;
        for (int j = 0; j < dim; ++j) out[j] = sigmoid(row[j]);
        break;
      }
      case NodeKind::Projection: {
        const Real* x = act.out.data() + plan.child_ids[node.child_begin] * dim;
        const Real* block =
            pb.site_block(plan.site_keys[node.site], node.symbol, d);
        const Real* w1 = block;
        const Real* b1 = w1 + hid * dim;
        const Real* w2 = b1 + hid;
        const Real* b2 = w2 + dim * hid;
        Real* z = act.hidden.data() + ni * hid;
        using std::tanh;
        for (int j = 0; j < hid; ++j) {
          Real s = b1[j];
          const Real* w1r = w1 + j * dim;
          for (int k = 0; k < dim; ++k) s += w1r[k] * x[k];
          z[j] = tanh(s);
        }
        for (int i = 0; i < dim; ++i) {
          Real s = b2[i];
          const Real* w2r = w2 + i * hid;
          for (int j = 0; j < hid; ++j) s += w2r[j] * z[j];
          out[i] = sigmoid(s);
        }
        break;
      }
      case NodeKind::Intersection: {
        const Real* first = act.out.data() + plan.child_ids[node.child_begin] * dim;
        for (int j = 0; j < dim; ++j) out[j] = first[j];
        for (int c = 1; c < node.child_count; ++c) {
          const Real* other =
              act.out.data() + plan.child_ids[node.child_begin + c] * dim;
          for (int j = 0; j < dim; ++j) {
            if (value(other[j]) < value(out[j])) out[j] = other[j];
          }
        }
        break;
      }
      case NodeKind::Negation: {
        const Real* x = act.out.data() + plan.child_ids[node.child_begin] * dim;
        for (int j = 0; j < dim; ++j) out[j] = Real(1.0) - x[j];
        break;
      }
      case NodeKind::Union:
        throw ContractViolation("union node reached the embedding pipeline");
    }
  }
}

// Accumulates parameter gradients for seeds d_out (same shape as act.out);
// d_out is consumed.
template <class Real>
void backward_tree(const TreePlan& plan, const ParamBank<Real>& pb,
                   const GradBank<Real>& gb, const ModelDims& d,
                   const Activations<Real>& act, std::vector<Real>& d_out) {
  const int dim = d.dim;
  const int hid = d.hidden;
  std::vector<Real> ds2(dim), dz(hid), ds1(hid);

  for (int ni = static_cast<int>(plan.nodes.size()) - 1; ni >= 0; --ni) {
    const auto& node = plan.nodes[ni];
    const Real* out = act.out.data() + ni * dim;
    Real* dy = d_out.data() + static_cast<size_t>(ni) * dim;
    switch (node.kind) {
      case NodeKind::Anchor: {
        if (gb.entities == nullptr) break;
        Real* grow = gb.entities + static_cast<int64_t>(node.symbol) * dim;
        for (int j = 0; j < dim; ++j) {
          grow[j] += dy[j] * out[j] * (Real(1.0) - out[j]);
        }
        break;
      }
      case NodeKind::Projection: {
        int child = plan.child_ids[node.child_begin];
        const Real* x = act.out.data() + child * dim;
        const Real* z = act.hidden.data() + static_cast<size_t>(ni) * hid;
        const auto& key = plan.site_keys[node.site];
        const Real* block = pb.site_block(key, node.symbol, d);
        const Real* w1 = block;
        const Real* w2 = block + hid * dim + hid;
        Real* bucket = gb.site_bucket(key, pb);
        Real* gw1 = nullptr;
        Real* gb1 = nullptr;
        Real* gw2 = nullptr;
        Real* gb2 = nullptr;
        if (bucket != nullptr) {
          Real* base = bucket + node.symbol * d.proj_block();
          gw1 = base;
          gb1 = gw1 + hid * dim;
          gw2 = gb1 + hid;
          gb2 = gw2 + dim * hid;
        }
        for (int i = 0; i < dim; ++i) {
          ds2[i] = dy[i] * out[i] * (Real(1.0) - out[i]);
        }
        for (int j = 0; j < hid; ++j) dz[j] = Real(0.0);
        for (int i = 0; i < dim; ++i) {
          const Real* w2r = w2 + i * hid;
          if (gw2 != nullptr) {
            Real* gw2r = gw2 + i * hid;
            for (int j = 0; j < hid; ++j) {
              gw2r[j] += ds2[i] * z[j];
              dz[j] += w2r[j] * ds2[i];
            }
            gb2[i] += ds2[i];
          } else {
            for (int j = 0; j < hid; ++j) dz[j] += w2r[j] * ds2[i];
          }
        }
        for (int j = 0; j < hid; ++j) {
          ds1[j] = dz[j] * (Real(1.0) - z[j] * z[j]);
        }
        Real* dx = d_out.data() + static_cast<size_t>(child) * dim;
        for (int j = 0; j < hid; ++j) {
          const Real* w1r = w1 + j * dim;
          if (gw1 != nullptr) {
            Real* gw1r = gw1 + j * dim;
            for (int k = 0; k < dim; ++k) {
              gw1r[k] += ds1[j] * x[k];
              dx[k] += w1r[k] * ds1[j];
            }
            gb1[j] += ds1[j];
          } else {
            for (int k = 0; k < dim; ++k) dx[k] += w1r[k] * ds1[j];
          }
        }
        break;
      }
      case NodeKind::Intersection: {
        // Route each component's gradient to the first child attaining the min.
        for (int j = 0; j < dim; ++j) {
          int best = plan.child_ids[node.child_begin];
          for (int c = 1; c < node.child_count; ++c) {
            int cand = plan.child_ids[node.child_begin + c];
            if (value(act.out[cand * dim + j]) <
                value(act.out[best * dim + j])) {
              best = cand;
            }
          }
          d_out[static_cast<size_t>(best) * dim + j] += dy[j];
        }
        break;
      }
      case NodeKind::Negation: {
        int child = plan.child_ids[node.child_begin];
        Real* dx = d_out.data() + static_cast<size_t>(child) * dim;
        for (int j = 0; j < dim; ++j) dx[j] -= dy[j];
        break;
      }
      case NodeKind::Union:
        throw ContractViolation("union node reached the embedding pipeline");
    }
  }
}

// -L1 distance between a query embedding and the squashed entity row.
template <class Real>
Real embedding_score(const Real* q, int32_t entity, const ParamBank<Real>& pb,
                     const ModelDims& d) {
  const Real* row = pb.entities + static_cast<int64_t>(entity) * d.dim;
  Real s(0.0);
  for (int j = 0; j < d.dim; ++j) {
    Real diff = q[j] - sigmoid(row[j]);
    s -= value(diff) >= 0.0 ? diff : -diff;
  }
  return s;
}

// Seeds ds of a score into the query-embedding gradient dq and (optionally)
// the entity-row gradient.
template <class Real>
void backward_score(const Real* q, int32_t entity, const ParamBank<Real>& pb,
                    const GradBank<Real>& gb, const ModelDims& d, Real ds,
                    Real* dq) {
  const Real* row = pb.entities + static_cast<int64_t>(entity) * d.dim;
  Real* grow = gb.entities == nullptr
                   ? nullptr
                   : gb.entities + static_cast<int64_t>(entity) * d.dim;
  for (int j = 0; j < d.dim; ++j) {
    Real se = sigmoid(row[j]);
    double sign = value(q[j]) - value(se) > 0.0
                      ? 1.0
                      : (value(q[j]) - value(se) < 0.0 ? -1.0 : 0.0);
    if (sign == 0.0) continue;
    dq[j] += Real(-sign) * ds;
    if (grow != nullptr) {
      grow[j] += Real(sign) * se * (Real(1.0) - se) * ds;
    }
  }
}

// Negative-sampling loss over a batch, mean-normalized by `normalizer`
// (usually the batch size; the inner stage of a meta step normalizes a
// category subset by the full support batch size so that per-category
// gradients sum to the shared one). Scores take the max across DNF branches.
// When gb is non-null, parameter gradients accumulate into its buckets.
template <class Real>
Real batch_loss(const std::vector<const QueryPlans*>& plans,
                const Contrast& contrast, const ParamBank<Real>& pb,
                const GradBank<Real>* gb, const ModelDims& d, double margin,
                int normalizer) {
  const int dim = d.dim;
  const double w = 1.0 / normalizer;
  Real total(0.0);

  std::vector<Activations<Real>> acts;
  std::vector<std::vector<Real>> d_outs;

  for (size_t qi = 0; qi < plans.size(); ++qi) {
    const QueryPlans& qp = *plans[qi];
    const size_t nb = qp.branches.size();
    acts.resize(nb);
    for (size_t b = 0; b < nb; ++b) forward_tree(qp.branches[b], pb, d, acts[b]);

    auto branch_emb = [&](size_t b) {
      return acts[b].out.data() + qp.branches[b].root() * dim;
    };

    // Max-over-branches score; remembers the winning branch.
    auto max_score = [&](int32_t entity, size_t& arg) {
      Real best = embedding_score(branch_emb(0), entity, pb, d);
      arg = 0;
      for (size_t b = 1; b < nb; ++b) {
        Real s = embedding_score(branch_emb(b), entity, pb, d);
        if (value(s) > value(best)) {
          best = s;
          arg = b;
        }
      }
      return best;
    };

    const int32_t pos = contrast.positives[qi];
    const auto& negs = contrast.negatives[qi];
    const double inv_k = negs.empty() ? 0.0 : 1.0 / negs.size();

    size_t pos_branch = 0;
    Real s_pos = max_score(pos, pos_branch);
    Real q_loss = -log_sigmoid(Real(margin) + s_pos);

    std::vector<size_t> neg_branch(negs.size());
    std::vector<Real> s_neg(negs.size());
    for (size_t i = 0; i < negs.size(); ++i) {
      s_neg[i] = max_score(negs[i], neg_branch[i]);
      q_loss -= Real(inv_k) * log_sigmoid(-s_neg[i] - Real(margin));
    }
    total += Real(w) * q_loss;

    if (gb == nullptr) continue;

    d_outs.resize(nb);
    for (size_t b = 0; b < nb; ++b) {
      d_outs[b].assign(acts[b].out.size(), Real(0.0));
    }
    // d q_loss / d s_pos = -(1 - sig(margin + s_pos))
    Real seed_pos = -(Real(1.0) - sigmoid(Real(margin) + s_pos)) * Real(w);
    backward_score(branch_emb(pos_branch), pos, pb, *gb, d, seed_pos,
                   d_outs[pos_branch].data() + qp.branches[pos_branch].root() * dim);
    for (size_t i = 0; i < negs.size(); ++i) {
      // d q_loss / d s_neg = +(1 - sig(-s_neg - margin)) / k
      Real seed = (Real(1.0) - sigmoid(-s_neg[i] - Real(margin))) *
                  Real(w * inv_k);
      backward_score(branch_emb(neg_branch[i]), negs[i], pb, *gb, d, seed,
                     d_outs[neg_branch[i]].data() +
                         qp.branches[neg_branch[i]].root() * dim);
    }
    for (size_t b = 0; b < nb; ++b) {
      backward_tree(qp.branches[b], pb, *gb, d, acts[b], d_outs[b]);
    }
  }
  return total;
}

// Shared-parameter bank over a store (overlays included).
ParamBank<double> bank_from_store(const ParameterStore& store);

}  // namespace cqa::detail
