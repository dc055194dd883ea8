#pragma once

// Checkpoint layout:
//
//   rewritenet-checkpoint 1
//   tensors <count>
//   <name> f64 <rank> <extent>... <byte offset>
//   ...
//   end
//   <raw little-endian float64 payload>
//
// Offsets are relative to the first payload byte. The Adam state goes to a
// sibling file "<path>.adam" with the same layout: "first/<name>",
// "second/<name>" and a one-element "step" tensor.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rewritenet/error.hpp"
#include "rewritenet/optim.hpp"
#include "rewritenet/tensor.hpp"

namespace rewritenet {

struct StoredTensor {
  Shape shape;
  std::vector<double> values;
};

namespace detail {

inline void write_f64_le(std::ostream& os, const std::vector<double>& values) {
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    unsigned char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
    os.write(reinterpret_cast<const char*>(bytes), 8);
  }
}

inline double read_f64_le(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int b = 7; b >= 0; --b) bits = (bits << 8) | bytes[b];
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

}  // namespace detail

inline void write_tensor_file(const std::filesystem::path& path,
                              const std::map<std::string, StoredTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path.string());
  os << "rewritenet-checkpoint 1\n";
  os << "tensors " << tensors.size() << "\n";
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (name.find_first_of(" \t\n") != std::string::npos) {
      throw DataError("tensor name contains whitespace: " + name);
    }
    os << name << " f64 " << t.shape.size();
    for (auto e : t.shape) os << ' ' << e;
    os << ' ' << offset << "\n";
    offset += t.values.size() * 8;
  }
  os << "end\n";
  for (const auto& [_, t] : tensors) detail::write_f64_le(os, t.values);
  if (!os) throw DataError("failed writing checkpoint: " + path.string());
}

inline std::map<std::string, StoredTensor> read_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "rewritenet-checkpoint 1") {
    throw DataError("not a rewritenet checkpoint: " + path.string());
  }
  std::size_t count = 0;
  {
    std::getline(is, line);
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> count) || tag != "tensors") throw DataError("bad checkpoint header");
  }
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(is, line)) throw DataError("truncated checkpoint header");
    std::istringstream ls(line);
    Entry e;
    std::string dtype;
    std::size_t rank = 0;
    if (!(ls >> e.name >> dtype >> rank) || dtype != "f64") {
      throw DataError("bad checkpoint entry: " + line);
    }
    e.shape.resize(rank);
    for (auto& x : e.shape) ls >> x;
    if (!(ls >> e.offset)) throw DataError("bad checkpoint entry: " + line);
    entries.push_back(std::move(e));
  }
  if (!std::getline(is, line) || line != "end") throw DataError("checkpoint header not terminated");
  std::vector<unsigned char> payload((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
  std::map<std::string, StoredTensor> out;
  for (const auto& e : entries) {
    const std::size_t n = shape_numel(e.shape);
    if (e.offset + n * 8 > payload.size()) throw DataError("checkpoint payload truncated: " + e.name);
    StoredTensor t{e.shape, std::vector<double>(n)};
    for (std::size_t i = 0; i < n; ++i) t.values[i] = detail::read_f64_le(&payload[e.offset + 8 * i]);
    out.emplace(e.name, std::move(t));
  }
  return out;
}

inline std::filesystem::path adam_state_path(const std::filesystem::path& checkpoint) {
  return checkpoint.string() + ".adam";
}

/// Writes parameters and, next to them, the Adam moments and step counter.
inline void save_checkpoint(const ParameterRegistry& registry, const std::filesystem::path& path) {
  std::map<std::string, StoredTensor> params, adam;
  for (const auto& [name, p] : registry.parameters()) {
    params[name] = {p.shape(), {p.data().begin(), p.data().end()}};
    const auto& mom = registry.moments().at(name);
    adam["first/" + name] = {p.shape(), mom.first};
    adam["second/" + name] = {p.shape(), mom.second};
  }
  adam["step"] = {{1}, {static_cast<double>(registry.step())}};
  write_tensor_file(path, params);
  write_tensor_file(adam_state_path(path), adam);
}

/// Loads values into already-registered parameters; shapes and names must
/// match exactly. Adam state is restored when the sibling file exists.
inline void load_checkpoint(ParameterRegistry& registry, const std::filesystem::path& path) {
  auto stored = read_tensor_file(path);
  for (auto& [name, p] : registry.parameters()) {
    auto it = stored.find(name);
    if (it == stored.end()) throw DataError("checkpoint is missing parameter: " + name);
    if (it->second.shape != p.shape()) {
      throw DataError("checkpoint shape mismatch for " + name + ": " +
                      shape_string(it->second.shape) + " vs " + shape_string(p.shape()));
    }
    std::copy(it->second.values.begin(), it->second.values.end(), p.mutable_data().begin());
  }
  if (stored.size() != registry.parameters().size()) {
    throw DataError("checkpoint has parameters the model does not define");
  }
  const auto adam_path = adam_state_path(path);
  if (!std::filesystem::exists(adam_path)) return;
  auto adam = read_tensor_file(adam_path);
  for (auto& [name, mom] : registry.moments()) {
    auto f = adam.find("first/" + name);
    auto s = adam.find("second/" + name);
    if (f == adam.end() || s == adam.end()) throw DataError("adam state missing for " + name);
    mom.first = f->second.values;
    mom.second = s->second.values;
  }
  if (auto st = adam.find("step"); st != adam.end() && !st->second.values.empty()) {
    registry.set_step(static_cast<std::int64_t>(st->second.values[0]));
  }
}

}  // namespace rewritenet
