#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pace/tensor.hpp"

namespace pace {

// Ordered name -> tensor map used by the PACT container.
struct NamedTensors {
  std::vector<std::pair<std::string, ad::Tensor>> items;

  void add(const std::string& name, const ad::Tensor& t);
  const ad::Tensor* find(const std::string& name) const;
  const ad::Tensor& at(const std::string& name) const;  // throws IoError if absent

  void add_scalar(const std::string& name, double v);
  double scalar_at(const std::string& name) const;
};

// PACT container: magic "PACT", u32 version, then per-tensor records of
// (u32 name length, name bytes, u32 rank, u64 extents, little-endian f64
// payload).
void write_pact(const std::string& path, const NamedTensors& tensors);
NamedTensors read_pact(const std::string& path);

}  // namespace pace
