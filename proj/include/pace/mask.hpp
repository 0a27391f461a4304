#pragma once

#include <cstdint>
#include <vector>

#include "pace/canonize.hpp"
#include "pace/dag.hpp"

namespace pace {

// Bit-packed N x N attention mask. Entry (key i, query j) is False ("masked(i,j)
// == false") when i may participate in updating j: i.e. when a directed path
// i -> j exists, or i == j, or the padding policy allows it. At application
// time, query row q of a score matrix keeps key k iff masked(k, q) is false.
class MaskMatrix {
 public:
  MaskMatrix() = default;
  MaskMatrix(int n_total, int n_real, bool initially_masked = true)
      : n_(n_total), n_real_(n_real),
        bits_((static_cast<size_t>(n_total) * n_total + 63) / 64,
              initially_masked ? ~0ull : 0ull) {}

  int size() const { return n_; }
  int n_real() const { return n_real_; }

  bool masked(int key, int query) const {
    const size_t idx = static_cast<size_t>(key) * n_ + query;
    return (bits_[idx >> 6] >> (idx & 63)) & 1u;
  }

  void set(int key, int query, bool masked) {
    const size_t idx = static_cast<size_t>(key) * n_ + query;
    if (masked)
      bits_[idx >> 6] |= (1ull << (idx & 63));
    else
      bits_[idx >> 6] &= ~(1ull << (idx & 63));
  }

  bool operator==(const MaskMatrix& other) const {
    if (n_ != other.n_ || n_real_ != other.n_real_) return false;
    for (int i = 0; i < n_; ++i)
      for (int j = 0; j < n_; ++j)
        if (masked(i, j) != other.masked(i, j)) return false;
    return true;
  }

 private:
  int n_ = 0, n_real_ = 0;
  std::vector<uint64_t> bits_;
};

// Reachability masks over the canonical graph, padded to N total slots.
// All builders apply the same overrides after the closure: real diagonals are
// unmasked, real queries never attend padding keys, and padding queries attend
// every real key plus themselves.
MaskMatrix mask_dfs(const CanonicalForm& cf, int n_total);
MaskMatrix mask_floyd(const CanonicalForm& cf, int n_total);

// O(n) variant for rooted trees given in DFS order with parent->child edges.
// depths[v] is v's depth with the root at 0.
MaskMatrix mask_tree_backtracking(const LabeledDag& tree, const std::vector<int>& depths,
                                  int n_total);

// Prefix mask for decoder self-attention: query t attends keys s <= t.
MaskMatrix causal_mask(int len);

}  // namespace pace
