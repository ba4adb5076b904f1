#include "mapbert/map_core.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "mapbert/byte_io.hpp"
#include "mapbert/error.hpp"

namespace mapbert {

namespace {

constexpr std::string_view kDatasetMagic{"SMAPDS1\0", 8};

std::string cell_name(int row, int col) {
  return "(" + std::to_string(row) + ", " + std::to_string(col) + ")";
}

}  // namespace

// ---------------------------------------------------------------------------
// CategoryPalette

CategoryPalette::CategoryPalette(std::vector<Category> categories) : categories_(std::move(categories)) {
  if (categories_.size() < 2) throw DataError("palette needs at least free and occupied categories");
  if (categories_.size() > 255) throw DataError("palette supports at most 255 categories");
  std::set<std::string> names;
  std::set<std::array<std::uint8_t, 3>> colors;
  for (std::size_t i = 0; i < categories_.size(); ++i) {
    const auto& c = categories_[i];
    if (c.id != static_cast<int>(i)) {
      throw DataError("palette ids must be contiguous from 0; entry " + std::to_string(i) + " has id " +
                      std::to_string(c.id));
    }
    if (c.name.empty() || c.name.size() > 0xFFFF) throw DataError("palette entry " + std::to_string(i) + " has a bad name");
    if (!names.insert(c.name).second) throw DataError("duplicate palette name '" + c.name + "'");
    if (c.color == kUnobservedGray) throw DataError("palette color of '" + c.name + "' is reserved for unobserved cells");
    if (!colors.insert({c.color.r, c.color.g, c.color.b}).second) {
      throw DataError("duplicate palette color for '" + c.name + "'");
    }
  }
}

CategoryPalette CategoryPalette::indoor_default() {
  return CategoryPalette({
      {0, "free", {255, 255, 255}},
      {1, "occupied", {40, 40, 40}},
      {2, "bed", {230, 90, 70}},
      {3, "chair", {70, 160, 230}},
      {4, "table", {240, 190, 50}},
      {5, "sofa", {110, 200, 110}},
  });
}

std::optional<int> CategoryPalette::find(std::string_view name) const {
  for (const auto& c : categories_) {
    if (c.name == name) return c.id;
  }
  return std::nullopt;
}

bool operator==(const CategoryPalette& a, const CategoryPalette& b) {
  if (a.categories_.size() != b.categories_.size()) return false;
  for (std::size_t i = 0; i < a.categories_.size(); ++i) {
    const auto& x = a.categories_[i];
    const auto& y = b.categories_[i];
    if (x.id != y.id || x.name != y.name || !(x.color == y.color)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Grids

LabelGrid::LabelGrid(int height, int width, int fill)
    : height_(height), width_(width), labels_(static_cast<std::size_t>(height) * width, fill) {
  if (height < 0 || width < 0) throw DataError("negative grid size");
}

LabelGrid::LabelGrid(int height, int width, std::vector<int> labels)
    : height_(height), width_(width), labels_(std::move(labels)) {
  if (height < 0 || width < 0 || labels_.size() != static_cast<std::size_t>(height) * width) {
    throw DataError("label grid size does not match " + std::to_string(height) + "x" + std::to_string(width));
  }
}

SemanticMap::SemanticMap(int height, int width, int channels, std::vector<std::uint8_t> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
  if (height <= 0 || width <= 0 || channels <= 0) throw DataError("semantic map dimensions must be positive");
  if (data_.size() != static_cast<std::size_t>(height) * width * channels) {
    throw DataError("semantic map data length does not match H*W*C");
  }
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      int sum = 0;
      for (int c = 0; c < channels; ++c) {
        const auto v = at(i, j, c);
        if (v > 1) throw DataError("non-binary value at cell " + cell_name(i, j));
        sum += v;
      }
      if (sum != 1) throw DataError("cell " + cell_name(i, j) + " is not one-hot (channel sum " + std::to_string(sum) + ")");
    }
  }
}

int SemanticMap::label(int row, int col) const {
  const std::size_t base = static_cast<std::size_t>((row * width_ + col) * channels_);
  for (int c = 0; c < channels_; ++c) {
    if (data_[base + static_cast<std::size_t>(c)]) return c;
  }
  return 0;
}

PartialMap::PartialMap(int height, int width, int channels, std::vector<std::uint8_t> data,
                       std::vector<std::uint8_t> observed_mask)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)), observed_(std::move(observed_mask)) {
  const std::size_t cells = static_cast<std::size_t>(height) * width;
  if (height <= 0 || width <= 0 || channels <= 0) throw DataError("partial map dimensions must be positive");
  if (data_.size() != cells * channels || observed_.size() != cells) {
    throw DataError("partial map buffers do not match H*W*C");
  }
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      int sum = 0;
      for (int c = 0; c < channels; ++c) {
        if (at(i, j, c) > 1) throw DataError("non-binary value at cell " + cell_name(i, j));
        sum += at(i, j, c);
      }
      if (observed(i, j) ? sum != 1 : sum != 0) {
        throw DataError("cell " + cell_name(i, j) + (observed(i, j) ? " is observed but not one-hot" : " is unobserved but nonzero"));
      }
    }
  }
}

PartialMap::PartialMap(const SemanticMap& map)
    : height_(map.height()),
      width_(map.width()),
      channels_(map.channels()),
      data_(map.data()),
      observed_(static_cast<std::size_t>(map.height()) * map.width(), 1) {}

// ---------------------------------------------------------------------------
// MaskPlan

MaskPlan::MaskPlan(int patch_size, int grid_rows, int grid_cols, std::span<const PatchCoord> masked,
                   std::optional<int> target_category)
    : patch_size_(patch_size),
      grid_rows_(grid_rows),
      grid_cols_(grid_cols),
      mask_(static_cast<std::size_t>(std::max(0, grid_rows)) * std::max(0, grid_cols), 0),
      target_(target_category) {
  if (patch_size <= 0 || grid_rows <= 0 || grid_cols <= 0) throw DataError("mask plan geometry must be positive");
  for (const auto& p : masked) {
    if (p.row < 0 || p.row >= grid_rows || p.col < 0 || p.col >= grid_cols) {
      throw DataError("masked patch " + cell_name(p.row, p.col) + " outside the " + std::to_string(grid_rows) + "x" +
                      std::to_string(grid_cols) + " patch grid");
    }
    mask_[static_cast<std::size_t>(p.row * grid_cols + p.col)] = 1;
  }
}

std::size_t MaskPlan::masked_count() const {
  return static_cast<std::size_t>(std::count(mask_.begin(), mask_.end(), std::uint8_t{1}));
}

std::vector<PatchCoord> MaskPlan::masked_patches() const {
  std::vector<PatchCoord> out;
  for (int r = 0; r < grid_rows_; ++r) {
    for (int c = 0; c < grid_cols_; ++c) {
      if (is_masked(r, c)) out.push_back({r, c});
    }
  }
  return out;
}

std::vector<int> MaskPlan::masked_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < mask_.size(); ++i) {
    if (mask_[i]) out.push_back(static_cast<int>(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Operations

SemanticMap onehot_encode(const LabelGrid& labels, int channels) {
  if (channels <= 0) throw DataError("channel count must be positive");
  std::vector<std::uint8_t> data(static_cast<std::size_t>(labels.height()) * labels.width() * channels, 0);
  for (int i = 0; i < labels.height(); ++i) {
    for (int j = 0; j < labels.width(); ++j) {
      const int l = labels.at(i, j);
      if (l < 0 || l >= channels) {
        throw DataError("label " + std::to_string(l) + " at cell " + cell_name(i, j) + " outside [0, " +
                        std::to_string(channels - 1) + "]");
      }
      data[static_cast<std::size_t>((i * labels.width() + j) * channels + l)] = 1;
    }
  }
  return SemanticMap(labels.height(), labels.width(), channels, std::move(data));
}

SemanticMap onehot_encode(const LabelGrid& labels, const CategoryPalette& palette) {
  return onehot_encode(labels, palette.size());
}

LabelGrid onehot_decode(const SemanticMap& map) {
  LabelGrid out(map.height(), map.width());
  for (int i = 0; i < map.height(); ++i) {
    for (int j = 0; j < map.width(); ++j) out.at(i, j) = map.label(i, j);
  }
  return out;
}

void check_patch_geometry(int height, int width, int patch_size) {
  if (patch_size <= 0 || height <= 0 || width <= 0 || height % patch_size != 0 || width % patch_size != 0) {
    throw DataError("map " + std::to_string(height) + "x" + std::to_string(width) + " is not divisible by patch size " +
                    std::to_string(patch_size));
  }
}

namespace {

void check_plan(int height, int width, const MaskPlan& plan) {
  check_patch_geometry(height, width, plan.patch_size());
  if (height / plan.patch_size() != plan.grid_rows() || width / plan.patch_size() != plan.grid_cols()) {
    throw DataError("mask plan grid " + std::to_string(plan.grid_rows()) + "x" + std::to_string(plan.grid_cols()) +
                    " does not match map " + std::to_string(height) + "x" + std::to_string(width) + " with patch " +
                    std::to_string(plan.patch_size()));
  }
}

PartialMap mask_buffers(int height, int width, int channels, std::vector<std::uint8_t> data,
                        std::vector<std::uint8_t> observed, const MaskPlan& plan) {
  check_plan(height, width, plan);
  const int p = plan.patch_size();
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      if (!plan.is_masked(i / p, j / p)) continue;
      const std::size_t cell = static_cast<std::size_t>(i * width + j);
      observed[cell] = 0;
      std::fill_n(data.begin() + static_cast<std::ptrdiff_t>(cell * channels), channels, std::uint8_t{0});
    }
  }
  return PartialMap(height, width, channels, std::move(data), std::move(observed));
}

}  // namespace

PartialMap apply_mask(const SemanticMap& map, const MaskPlan& plan) {
  return mask_buffers(map.height(), map.width(), map.channels(), map.data(),
                      std::vector<std::uint8_t>(static_cast<std::size_t>(map.height()) * map.width(), 1), plan);
}

PartialMap apply_mask(const PartialMap& map, const MaskPlan& plan) {
  return mask_buffers(map.height(), map.width(), map.channels(), map.data(), map.observed_mask(), plan);
}

std::vector<PatchCoord> object_patches(const SemanticMap& map, int category, int patch_size) {
  check_patch_geometry(map.height(), map.width(), patch_size);
  if (category < 0 || category >= map.channels()) {
    throw DataError("category " + std::to_string(category) + " outside [0, " + std::to_string(map.channels() - 1) + "]");
  }
  const int rows = map.height() / patch_size;
  const int cols = map.width() / patch_size;
  std::vector<std::uint8_t> hit(static_cast<std::size_t>(rows) * cols, 0);
  for (int i = 0; i < map.height(); ++i) {
    for (int j = 0; j < map.width(); ++j) {
      if (map.at(i, j, category)) hit[static_cast<std::size_t>((i / patch_size) * cols + j / patch_size)] = 1;
    }
  }
  std::vector<PatchCoord> out;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (hit[static_cast<std::size_t>(r * cols + c)]) out.push_back({r, c});
    }
  }
  return out;
}

std::vector<int> present_objects(const SemanticMap& map) {
  std::vector<std::uint8_t> seen(static_cast<std::size_t>(map.channels()), 0);
  for (int i = 0; i < map.height(); ++i) {
    for (int j = 0; j < map.width(); ++j) seen[static_cast<std::size_t>(map.label(i, j))] = 1;
  }
  std::vector<int> out;
  for (int c = kFirstObject; c < map.channels(); ++c) {
    if (seen[static_cast<std::size_t>(c)]) out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

template <typename ColorAt>
RgbImage render_cells(int height, int width, int cell_pixels, ColorAt color_at) {
  if (cell_pixels <= 0) throw DataError("cell_pixels must be positive");
  RgbImage img;
  img.width = width * cell_pixels;
  img.height = height * cell_pixels;
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const Rgb c = color_at(y / cell_pixels, x / cell_pixels);
      const std::size_t o = (static_cast<std::size_t>(y) * img.width + x) * 3;
      img.pixels[o] = c.r;
      img.pixels[o + 1] = c.g;
      img.pixels[o + 2] = c.b;
    }
  }
  return img;
}

void check_palette(int channels, const CategoryPalette& palette) {
  if (channels != palette.size()) {
    throw DataError("map has " + std::to_string(channels) + " channels but palette has " + std::to_string(palette.size()));
  }
}

}  // namespace

RgbImage render(const SemanticMap& map, const CategoryPalette& palette, int cell_pixels) {
  check_palette(map.channels(), palette);
  return render_cells(map.height(), map.width(), cell_pixels,
                      [&](int i, int j) { return palette[map.label(i, j)].color; });
}

RgbImage render(const PartialMap& map, const CategoryPalette& palette, int cell_pixels) {
  check_palette(map.channels(), palette);
  return render_cells(map.height(), map.width(), cell_pixels, [&](int i, int j) {
    if (!map.observed(i, j)) return kUnobservedGray;
    for (int c = 0; c < map.channels(); ++c) {
      if (map.at(i, j, c)) return palette[c].color;
    }
    return kUnobservedGray;
  });
}

RgbImage hstack(std::span<const RgbImage> panels, int gap) {
  RgbImage out;
  for (const auto& p : panels) out.height = std::max(out.height, p.height);
  for (std::size_t k = 0; k < panels.size(); ++k) out.width += panels[k].width + (k ? gap : 0);
  out.pixels.assign(static_cast<std::size_t>(out.width) * out.height * 3, 255);
  int x0 = 0;
  for (const auto& p : panels) {
    for (int y = 0; y < p.height; ++y) {
      std::copy_n(p.pixels.begin() + static_cast<std::ptrdiff_t>(y) * p.width * 3, p.width * 3,
                  out.pixels.begin() + (static_cast<std::ptrdiff_t>(y) * out.width + x0) * 3);
    }
    x0 += p.width + gap;
  }
  return out;
}

std::string to_ppm(const RgbImage& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
  return out;
}

void write_ppm(const RgbImage& image, const std::filesystem::path& path) { write_file(path, to_ppm(image)); }

// ---------------------------------------------------------------------------
// Dataset files

std::string serialize_dataset(const Dataset& dataset) {
  const auto& maps = dataset.maps;
  const int channels = dataset.palette.size();
  if (maps.empty()) throw DataError("cannot write an empty dataset");
  const int h = maps.front().height();
  const int w = maps.front().width();
  for (std::size_t k = 0; k < maps.size(); ++k) {
    const auto& m = maps[k];
    if (m.height() != h || m.width() != w || m.channels() != channels) {
      throw DataError("map " + std::to_string(k) + " geometry " + std::to_string(m.height()) + "x" +
                      std::to_string(m.width()) + "x" + std::to_string(m.channels()) + " differs from " +
                      std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(channels));
    }
  }
  check_patch_geometry(h, w, dataset.patch_size);

  ByteWriter out;
  out.bytes(kDatasetMagic);
  out.u32(static_cast<std::uint32_t>(maps.size()));
  out.u32(static_cast<std::uint32_t>(h));
  out.u32(static_cast<std::uint32_t>(w));
  out.u32(static_cast<std::uint32_t>(channels));
  out.u32(static_cast<std::uint32_t>(dataset.patch_size));
  for (const auto& c : dataset.palette.categories()) {
    out.u16(static_cast<std::uint16_t>(c.name.size()));
    out.bytes(c.name);
    out.u8(c.color.r);
    out.u8(c.color.g);
    out.u8(c.color.b);
  }
  for (const auto& m : maps) {
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) out.u8(static_cast<std::uint8_t>(m.label(i, j)));
    }
  }
  return out.take();
}

Dataset deserialize_dataset(std::string_view bytes) {
  ByteReader in(bytes);
  if (in.bytes(kDatasetMagic.size()) != kDatasetMagic) ByteReader::fail_at("bad dataset magic", 0);
  const std::uint32_t count = in.u32();
  const std::size_t dims_offset = in.offset();
  const std::uint32_t h = in.u32();
  const std::uint32_t w = in.u32();
  const std::uint32_t c = in.u32();
  const std::uint32_t p = in.u32();
  if (h == 0 || w == 0 || h > 1u << 15 || w > 1u << 15) ByteReader::fail_at("bad map dimensions", dims_offset);
  if (c < 2 || c > 255) ByteReader::fail_at("bad channel count " + std::to_string(c), dims_offset + 8);
  if (p == 0 || h % p != 0 || w % p != 0) ByteReader::fail_at("bad patch size " + std::to_string(p), dims_offset + 12);

  std::vector<Category> cats;
  for (std::uint32_t k = 0; k < c; ++k) {
    const std::size_t at = in.offset();
    const std::uint16_t len = in.u16();
    std::string name(in.bytes(len));
    Rgb color{in.u8(), in.u8(), in.u8()};
    if (name.empty()) ByteReader::fail_at("empty palette name", at);
    cats.push_back({static_cast<int>(k), std::move(name), color});
  }
  Dataset out;
  try {
    out.palette = CategoryPalette(std::move(cats));
  } catch (const DataError& e) {
    ByteReader::fail_at(std::string("invalid palette: ") + e.what(), 8 + 4 * 5);
  }
  out.patch_size = static_cast<int>(p);

  const std::size_t cells = static_cast<std::size_t>(h) * w;
  if (in.remaining() != cells * count) {
    if (in.remaining() < cells * count) {
      ByteReader::fail_at("unexpected end of stream", in.offset() + in.remaining());
    }
    ByteReader::fail_at("trailing bytes after last map", in.offset() + cells * count);
  }
  out.maps.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::size_t at = in.offset();
    auto raw = in.bytes(cells);
    std::vector<std::uint8_t> data(cells * c, 0);
    for (std::size_t i = 0; i < cells; ++i) {
      const auto l = static_cast<std::uint8_t>(raw[i]);
      if (l >= c) ByteReader::fail_at("label " + std::to_string(l) + " out of range", at + i);
      data[i * c + l] = 1;
    }
    out.maps.emplace_back(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c), std::move(data));
  }
  return out;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  write_file(path, serialize_dataset(dataset));
}

Dataset read_dataset(const std::filesystem::path& path) { return deserialize_dataset(read_file(path)); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

}  // namespace mapbert
