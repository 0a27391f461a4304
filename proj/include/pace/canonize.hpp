#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pace/dag.hpp"

namespace pace {

// Unique representative of a labeled dag's isomorphism class. Canonical
// indices 0..n-1 are a topological order of canon_edges, and the certificate
// is a deterministic byte serialization of (n, canon_labels, canon_edges), so
// two dags are isomorphic iff their certificates are byte-identical.
struct CanonicalForm {
  int n = 0;
  std::vector<int> perm;                        // original index -> canonical index
  std::vector<std::pair<int, int>> canon_edges;  // sorted
  std::vector<int> canon_labels;
  std::vector<uint8_t> certificate;
};

// Individualization-refinement canonization. Initial colors are
// (label, in-degree, out-degree); refinement folds in sorted predecessor and
// successor color multisets until stable; non-discrete colorings branch on
// the smallest non-singleton class and keep the lexicographically smallest
// certificate. Final node emission is the unique topological order that picks
// the smallest refined color among available nodes.
CanonicalForm canonical_form(const LabeledDag& dag);

bool is_isomorphic(const LabeledDag& a, const LabeledDag& b);

std::string certificate_hex(const CanonicalForm& cf);

}  // namespace pace
