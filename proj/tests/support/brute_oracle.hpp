#pragma once

#include <vector>

#include "cqa/kg.hpp"
#include "cqa/query.hpp"

namespace cqa::testsupport {

// Test-side reference oracle: top-down quantifier enumeration (memoized)
// over raw triple membership. Shares no code path with the production
// evaluator: no adjacency index, no set algebra.
std::vector<int32_t> brute_force_answers(const QueryNode& tree,
                                         const KnowledgeGraph& graph);

}  // namespace cqa::testsupport
