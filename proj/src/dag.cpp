#include "pace/dag.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_set>

#include "json.hpp"

namespace pace {

OperationDictionary OperationDictionary::from_ops(std::vector<std::string> ops) {
  OperationDictionary d;
  d.n_user_ = static_cast<int>(ops.size());
  std::unordered_set<std::string> seen;
  for (const auto& op : ops) {
    if (op.empty()) throw ValidationError("empty operation name");
    if (!seen.insert(op).second) throw ValidationError("duplicate operation name: " + op);
    if (op == kOutputName || op == kMaskName || op == kEndName || op == kStartName)
      throw ValidationError("operation name collides with reserved symbol: " + op);
  }
  d.names_ = std::move(ops);
  d.names_.push_back(kOutputName);
  d.names_.push_back(kMaskName);
  d.names_.push_back(kEndName);
  d.names_.push_back(kStartName);
  return d;
}

OperationDictionary OperationDictionary::numbered(int n_ops) {
  std::vector<std::string> ops;
  ops.reserve(n_ops);
  for (int i = 0; i < n_ops; ++i) ops.push_back("op" + std::to_string(i));
  return from_ops(std::move(ops));
}

std::optional<int> OperationDictionary::find(const std::string& name) const {
  for (size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<int>(i);
  return std::nullopt;
}

namespace {

void check_basic(const LabeledDag& dag) {
  if (dag.n < 0) throw ValidationError("negative node count");
  if (static_cast<int>(dag.labels.size()) != dag.n)
    throw ValidationError("label count " + std::to_string(dag.labels.size()) +
                          " does not match node count " + std::to_string(dag.n));
  std::set<std::pair<int, int>> seen;
  for (const auto& [u, v] : dag.edges) {
    if (u < 0 || u >= dag.n || v < 0 || v >= dag.n)
      throw ValidationError("edge endpoint out of range: (" + std::to_string(u) + "," +
                            std::to_string(v) + ")");
    if (u == v) throw SelfLoop("self loop at node " + std::to_string(u));
    if (!seen.insert({u, v}).second)
      throw DuplicateEdge("duplicate edge (" + std::to_string(u) + "," + std::to_string(v) + ")");
  }
}

}  // namespace

void validate_structure(const LabeledDag& dag) {
  check_basic(dag);
  for (int lbl : dag.labels)
    if (lbl < 0) throw BadLabel("negative label index " + std::to_string(lbl));
  if (!is_acyclic(dag)) throw CycleDetected("edge set contains a directed cycle");
}

void validate(const LabeledDag& dag, const OperationDictionary& dict) {
  check_basic(dag);
  // corrupted graphs legitimately carry reserved symbols such as MASK, so the
  // bound is the full symbol table
  for (int lbl : dag.labels)
    if (lbl < 0 || lbl >= dict.n_symbols())
      throw BadLabel("label index " + std::to_string(lbl) + " outside dictionary");
  if (!is_acyclic(dag)) throw CycleDetected("edge set contains a directed cycle");
}

bool is_acyclic(const LabeledDag& dag) {
  auto indeg = in_degrees(dag);
  auto succ = successor_lists(dag);
  std::vector<int> ready;
  for (int v = 0; v < dag.n; ++v)
    if (indeg[v] == 0) ready.push_back(v);
  int emitted = 0;
  while (!ready.empty()) {
    const int v = ready.back();
    ready.pop_back();
    ++emitted;
    for (int w : succ[v])
      if (--indeg[w] == 0) ready.push_back(w);
  }
  return emitted == dag.n;
}

std::vector<int> topological_order(const LabeledDag& dag) {
  auto indeg = in_degrees(dag);
  auto succ = successor_lists(dag);
  std::vector<int> order;
  order.reserve(dag.n);
  // min-id first keeps the order deterministic
  std::set<int> ready;
  for (int v = 0; v < dag.n; ++v)
    if (indeg[v] == 0) ready.insert(v);
  while (!ready.empty()) {
    const int v = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(v);
    for (int w : succ[v])
      if (--indeg[w] == 0) ready.insert(w);
  }
  if (static_cast<int>(order.size()) != dag.n)
    throw CycleDetected("edge set contains a directed cycle");
  return order;
}

std::vector<std::vector<int>> successor_lists(const LabeledDag& dag) {
  std::vector<std::vector<int>> succ(dag.n);
  for (const auto& [u, v] : dag.edges) succ[u].push_back(v);
  for (auto& s : succ) std::sort(s.begin(), s.end());
  return succ;
}

std::vector<std::vector<int>> predecessor_lists(const LabeledDag& dag) {
  std::vector<std::vector<int>> pred(dag.n);
  for (const auto& [u, v] : dag.edges) pred[v].push_back(u);
  for (auto& p : pred) std::sort(p.begin(), p.end());
  return pred;
}

std::vector<int> out_degrees(const LabeledDag& dag) {
  std::vector<int> deg(dag.n, 0);
  for (const auto& e : dag.edges) ++deg[e.first];
  return deg;
}

std::vector<int> in_degrees(const LabeledDag& dag) {
  std::vector<int> deg(dag.n, 0);
  for (const auto& e : dag.edges) ++deg[e.second];
  return deg;
}

std::vector<int> sink_nodes(const LabeledDag& dag) {
  auto outdeg = out_degrees(dag);
  std::vector<int> sinks;
  for (int v = 0; v < dag.n; ++v)
    if (outdeg[v] == 0) sinks.push_back(v);
  return sinks;
}

LabeledDag add_virtual_output(const LabeledDag& dag, const OperationDictionary& dict) {
  auto sinks = sink_nodes(dag);
  if (sinks.size() == 1) return dag;
  LabeledDag out = dag;
  const int output_node = out.n;
  out.n += 1;
  out.labels.push_back(dict.output_index());
  for (int s : sinks) out.edges.emplace_back(s, output_node);
  return out;
}

namespace {

using nlohmann::json;

LabeledDag parse_record(const json& j, const OperationDictionary& dict, int line) {
  if (!j.is_object()) throw ParseError(line, "record is not an object");
  if (!j.contains("n") || !j["n"].is_number_integer())
    throw ParseError(line, "missing integer field 'n'");
  LabeledDag dag;
  dag.n = j["n"].get<int>();
  if (!j.contains("labels") || !j["labels"].is_array())
    throw ParseError(line, "missing array field 'labels'");
  for (const auto& l : j["labels"]) {
    if (!l.is_string()) throw ParseError(line, "label is not a string");
    const auto idx = dict.find(l.get<std::string>());
    if (!idx) throw BadLabel("line " + std::to_string(line) + ": unknown operation '" +
                             l.get<std::string>() + "'");
    dag.labels.push_back(*idx);
  }
  if (j.contains("edges")) {
    if (!j["edges"].is_array()) throw ParseError(line, "'edges' is not an array");
    for (const auto& e : j["edges"]) {
      if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() ||
          !e[1].is_number_integer())
        throw ParseError(line, "edge is not an integer pair");
      dag.edges.emplace_back(e[0].get<int>(), e[1].get<int>());
    }
  }
  return dag;
}

}  // namespace

std::vector<DagSample> read_dag_file(const std::string& path, const OperationDictionary& dict) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<DagSample> samples;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF &&
        static_cast<unsigned char>(line[1]) == 0xBB && static_cast<unsigned char>(line[2]) == 0xBF)
      throw ParseError(1, "byte order mark not allowed");
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(line_no, e.what());
    }
    DagSample s;
    s.dag = parse_record(j, dict, line_no);
    if (j.contains("target")) {
      if (!j["target"].is_number()) throw ParseError(line_no, "'target' is not a number");
      s.target = j["target"].get<double>();
      if (!std::isfinite(*s.target))
        throw ValidationError("line " + std::to_string(line_no) + ": target not finite");
    }
    validate(s.dag, dict);
    samples.push_back(std::move(s));
  }
  return samples;
}

void write_dag_file(const std::vector<DagSample>& samples, const OperationDictionary& dict,
                    const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& s : samples) {
    json j;
    j["n"] = s.dag.n;
    auto names = json::array();
    for (int lbl : s.dag.labels) names.push_back(dict.name(lbl));
    j["labels"] = std::move(names);
    auto edges = s.dag.edges;
    std::sort(edges.begin(), edges.end());
    auto je = json::array();
    for (const auto& [u, v] : edges) je.push_back(json::array({u, v}));
    j["edges"] = std::move(je);
    if (s.target) j["target"] = *s.target;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace pace
