#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mapbert/nn/parameters.hpp"

namespace mapbert::nn {

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// Named-tensor container. Byte layout (little-endian):
///   "MBCKPT1\0", u32 count,
///   per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 values,
///   u32 config length, UTF-8 JSON config.
struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::json config = nlohmann::json::object();

  const NamedTensor& find(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::string serialize() const;
  static Checkpoint deserialize(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

/// Snapshot of every parameter under `prefix + name`.
void capture(const ParameterStore& params, Checkpoint& into, const std::string& prefix = "");
/// Copies values back; every parameter must be present with matching shape.
void restore(ParameterStore& params, const Checkpoint& from, const std::string& prefix = "");

}  // namespace mapbert::nn
