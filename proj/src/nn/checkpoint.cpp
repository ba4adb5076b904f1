#include "mapbert/nn/checkpoint.hpp"

#include <algorithm>

#include "mapbert/byte_io.hpp"
#include "mapbert/map_core.hpp"

namespace mapbert::nn {

namespace {
constexpr std::string_view kMagic{"MBCKPT1\0", 8};
}

const NamedTensor& Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw DataError("checkpoint has no tensor '" + std::string(name) + "'");
}

bool Checkpoint::contains(std::string_view name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name == name; });
}

std::string Checkpoint::serialize() const {
  ByteWriter out;
  out.bytes(kMagic);
  out.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF || t.shape.size() > 255) throw DataError("checkpoint tensor '" + t.name + "' not encodable");
    if (t.values.size() != numel(t.shape)) throw DataError("checkpoint tensor '" + t.name + "' size mismatch");
    out.u16(static_cast<std::uint16_t>(t.name.size()));
    out.bytes(t.name);
    out.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (int d : t.shape) out.u32(static_cast<std::uint32_t>(d));
    for (float v : t.values) out.f32(v);
  }
  const std::string blob = config.dump();
  out.u32(static_cast<std::uint32_t>(blob.size()));
  out.bytes(blob);
  return out.take();
}

Checkpoint Checkpoint::deserialize(std::string_view bytes) {
  ByteReader in(bytes);
  if (in.bytes(kMagic.size()) != kMagic) ByteReader::fail_at("bad checkpoint magic", 0);
  Checkpoint ck;
  const std::uint32_t count = in.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    const std::uint16_t len = in.u16();
    t.name = std::string(in.bytes(len));
    const std::uint8_t rank = in.u8();
    std::size_t n = 1;
    for (int r = 0; r < rank; ++r) {
      const std::uint32_t d = in.u32();
      if (d > (1u << 28)) in.fail("implausible dimension " + std::to_string(d));
      t.shape.push_back(static_cast<int>(d));
      n *= d;
    }
    if (n * 4 > in.remaining()) in.fail("unexpected end of stream");
    t.values.resize(n);
    for (auto& v : t.values) v = in.f32();
    ck.tensors.push_back(std::move(t));
  }
  const std::uint32_t blob_len = in.u32();
  const std::size_t blob_at = in.offset();
  const std::string_view blob = in.bytes(blob_len);
  try {
    ck.config = nlohmann::json::parse(blob);
  } catch (const nlohmann::json::exception& e) {
    ByteReader::fail_at(std::string("bad checkpoint config: ") + e.what(), blob_at);
  }
  if (!in.done()) in.fail("trailing bytes after checkpoint config");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

void capture(const ParameterStore& params, Checkpoint& into, const std::string& prefix) {
  for (const auto& [name, t] : params.entries()) {
    into.tensors.push_back({prefix + name, t.shape(), std::vector<float>(t.values().begin(), t.values().end())});
  }
}

void restore(ParameterStore& params, const Checkpoint& from, const std::string& prefix) {
  for (const auto& [name, t] : params.entries()) {
    const auto& src = from.find(prefix + name);
    if (src.shape != t.shape()) {
      throw DataError("checkpoint tensor '" + prefix + name + "' has shape " + shape_str(src.shape) + ", expected " +
                      shape_str(t.shape()));
    }
    auto dst = t;
    std::copy(src.values.begin(), src.values.end(), dst.mutable_values().begin());
  }
}

}  // namespace mapbert::nn
