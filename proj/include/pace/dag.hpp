#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pace/errors.hpp"

namespace pace {

// Operation vocabulary. User-defined ops come first; the reserved symbols are
// appended after them in a fixed order so user indices stay stable.
class OperationDictionary {
 public:
  static constexpr const char* kOutputName = "__output__";
  static constexpr const char* kMaskName = "__mask__";
  static constexpr const char* kEndName = "__end__";
  static constexpr const char* kStartName = "__start__";

  static OperationDictionary from_ops(std::vector<std::string> ops);
  // Convenience: op0, op1, ..., op{k-1}.
  static OperationDictionary numbered(int n_ops);

  int n_user() const { return n_user_; }
  // Valid node labels: user ops plus the virtual OUTPUT symbol.
  int n_labels() const { return n_user_ + 1; }
  // All embedding rows: user ops plus every reserved symbol.
  int n_symbols() const { return static_cast<int>(names_.size()); }

  int output_index() const { return n_user_; }
  int mask_index() const { return n_user_ + 1; }
  int end_index() const { return n_user_ + 2; }
  int start_index() const { return n_user_ + 3; }

  const std::string& name(int idx) const { return names_.at(idx); }
  std::optional<int> find(const std::string& name) const;

 private:
  std::vector<std::string> names_;
  int n_user_ = 0;
};

// G = (V, E, o): dense node ids 0..n-1, directed edges, per-node op index.
struct LabeledDag {
  int n = 0;
  std::vector<std::pair<int, int>> edges;
  std::vector<int> labels;
};

struct DagSample {
  LabeledDag dag;
  std::optional<double> target;
};

// Throws SelfLoop / DuplicateEdge / BadLabel / CycleDetected / ValidationError.
void validate(const LabeledDag& dag, const OperationDictionary& dict);
// Same checks without the dictionary bound on labels (labels must be >= 0).
void validate_structure(const LabeledDag& dag);

bool is_acyclic(const LabeledDag& dag);

// Kahn order, smallest node id first. Throws CycleDetected.
std::vector<int> topological_order(const LabeledDag& dag);

std::vector<std::vector<int>> successor_lists(const LabeledDag& dag);
std::vector<std::vector<int>> predecessor_lists(const LabeledDag& dag);
std::vector<int> out_degrees(const LabeledDag& dag);
std::vector<int> in_degrees(const LabeledDag& dag);
std::vector<int> sink_nodes(const LabeledDag& dag);

// If the dag already has exactly one sink it is returned unchanged; otherwise
// a node labeled with the reserved OUTPUT op is appended and every former sink
// gets an edge into it. Idempotent.
LabeledDag add_virtual_output(const LabeledDag& dag, const OperationDictionary& dict);

// Newline-delimited records: {"n":..,"labels":[names],"edges":[[u,v],..],"target":..}.
std::vector<DagSample> read_dag_file(const std::string& path, const OperationDictionary& dict);
void write_dag_file(const std::vector<DagSample>& samples, const OperationDictionary& dict,
                    const std::string& path);

}  // namespace pace
