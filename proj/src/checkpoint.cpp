#include "pace/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace pace {

namespace {

constexpr char kMagic[4] = {'P', 'A', 'C', 'T'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ofstream& out, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

void put_u64(std::ofstream& out, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

void put_f64(std::ofstream& out, double d) { put_u64(out, std::bit_cast<uint64_t>(d)); }

uint32_t get_u32(std::ifstream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError("truncated PACT file");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t get_u64(std::ifstream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw IoError("truncated PACT file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::ifstream& in) { return std::bit_cast<double>(get_u64(in)); }

}  // namespace

void NamedTensors::add(const std::string& name, const ad::Tensor& t) {
  if (!t.defined()) throw IoError("cannot store undefined tensor '" + name + "'");
  items.emplace_back(name, t);
}

const ad::Tensor* NamedTensors::find(const std::string& name) const {
  for (const auto& [n, t] : items)
    if (n == name) return &t;
  return nullptr;
}

const ad::Tensor& NamedTensors::at(const std::string& name) const {
  const ad::Tensor* t = find(name);
  if (!t) throw IoError("checkpoint is missing tensor '" + name + "'");
  return *t;
}

void NamedTensors::add_scalar(const std::string& name, double v) {
  add(name, ad::Tensor::scalar(v));
}

double NamedTensors::scalar_at(const std::string& name) const { return at(name).item(); }

void write_pact(const std::string& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<uint32_t>(tensors.items.size()));
  for (const auto& [name, t] : tensors.items) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, 2);
    put_u64(out, static_cast<uint64_t>(t.rows()));
    put_u64(out, static_cast<uint64_t>(t.cols()));
    for (int64_t i = 0; i < t.size(); ++i) put_f64(out, t.data()[i]);
  }
  if (!out) throw IoError("write failed: " + path);
}

NamedTensors read_pact(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw IoError(path + ": bad PACT magic");
  const uint32_t version = get_u32(in);
  if (version != kVersion)
    throw IoError(path + ": unsupported PACT version " + std::to_string(version));
  const uint32_t count = get_u32(in);
  NamedTensors tensors;
  tensors.items.reserve(count);
  for (uint32_t r = 0; r < count; ++r) {
    const uint32_t name_len = get_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw IoError("truncated PACT file");
    const uint32_t rank = get_u32(in);
    if (rank == 0 || rank > 2) throw IoError(path + ": unsupported tensor rank");
    uint64_t rows = 1, cols = 1;
    if (rank == 1) {
      cols = get_u64(in);
    } else {
      rows = get_u64(in);
      cols = get_u64(in);
    }
    std::vector<double> data(rows * cols);
    for (auto& d : data) d = get_f64(in);
    tensors.items.emplace_back(
        name, ad::Tensor::from_rows(static_cast<int>(rows), static_cast<int>(cols),
                                    std::move(data)));
  }
  return tensors;
}

}  // namespace pace
