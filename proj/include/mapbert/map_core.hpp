#pragma once

// Semantic map grids, category palettes, patch masking, dataset files and
// PPM rendering.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mapbert {

inline constexpr int kFreeSpace = 0;
inline constexpr int kOccupied = 1;
inline constexpr int kFirstObject = 2;

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Color used for unobserved cells; no palette entry may use it.
inline constexpr Rgb kUnobservedGray{128, 128, 128};

struct Category {
  int id = 0;
  std::string name;
  Rgb color;
};

/// Ordered category list. Ids are 0..C-1; 0 is free space, 1 is occupied,
/// everything after is an object category.
class CategoryPalette {
 public:
  CategoryPalette() = default;
  explicit CategoryPalette(std::vector<Category> categories);

  /// free, occupied, bed, chair, table, sofa
  static CategoryPalette indoor_default();

  int size() const { return static_cast<int>(categories_.size()); }
  int object_count() const { return size() > kFirstObject ? size() - kFirstObject : 0; }
  const Category& operator[](int id) const { return categories_.at(static_cast<std::size_t>(id)); }
  const std::vector<Category>& categories() const { return categories_; }
  std::optional<int> find(std::string_view name) const;

  friend bool operator==(const CategoryPalette& a, const CategoryPalette& b);

 private:
  std::vector<Category> categories_;
};

/// Row-major H x W grid of category labels.
class LabelGrid {
 public:
  LabelGrid() = default;
  LabelGrid(int height, int width, int fill = 0);
  LabelGrid(int height, int width, std::vector<int> labels);

  int height() const { return height_; }
  int width() const { return width_; }
  int at(int row, int col) const { return labels_[static_cast<std::size_t>(row * width_ + col)]; }
  int& at(int row, int col) { return labels_[static_cast<std::size_t>(row * width_ + col)]; }
  const std::vector<int>& labels() const { return labels_; }

  friend bool operator==(const LabelGrid&, const LabelGrid&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<int> labels_;
};

/// H x W x C one-hot grid, channel-last. Immutable once built.
class SemanticMap {
 public:
  SemanticMap() = default;
  /// Validates the one-hot invariant; throws DataError naming the first bad cell.
  SemanticMap(int height, int width, int channels, std::vector<std::uint8_t> data);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::uint8_t at(int row, int col, int channel) const {
    return data_[static_cast<std::size_t>((row * width_ + col) * channels_ + channel)];
  }
  int label(int row, int col) const;
  const std::vector<std::uint8_t>& data() const { return data_; }

  friend bool operator==(const SemanticMap&, const SemanticMap&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Map with an observation mask; unobserved cells hold all-zero channels.
class PartialMap {
 public:
  PartialMap() = default;
  PartialMap(int height, int width, int channels, std::vector<std::uint8_t> data,
             std::vector<std::uint8_t> observed);
  /// Fully observed view of `map`.
  explicit PartialMap(const SemanticMap& map);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::uint8_t at(int row, int col, int channel) const {
    return data_[static_cast<std::size_t>((row * width_ + col) * channels_ + channel)];
  }
  bool observed(int row, int col) const { return observed_[static_cast<std::size_t>(row * width_ + col)] != 0; }
  const std::vector<std::uint8_t>& data() const { return data_; }
  const std::vector<std::uint8_t>& observed_mask() const { return observed_; }

  friend bool operator==(const PartialMap&, const PartialMap&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<std::uint8_t> data_;
  std::vector<std::uint8_t> observed_;
};

struct PatchCoord {
  int row = 0;
  int col = 0;
  friend auto operator<=>(const PatchCoord&, const PatchCoord&) = default;
};

/// Masked patch positions on an h x w patch grid plus an optional target
/// category whose patches must all be masked.
class MaskPlan {
 public:
  MaskPlan() = default;
  MaskPlan(int patch_size, int grid_rows, int grid_cols, std::span<const PatchCoord> masked,
           std::optional<int> target_category = std::nullopt);

  int patch_size() const { return patch_size_; }
  int grid_rows() const { return grid_rows_; }
  int grid_cols() const { return grid_cols_; }
  std::optional<int> target_category() const { return target_; }

  bool is_masked(int row, int col) const { return mask_[static_cast<std::size_t>(row * grid_cols_ + col)] != 0; }
  bool is_masked(std::size_t flat) const { return mask_[flat] != 0; }
  std::size_t masked_count() const;
  /// Row-major order.
  std::vector<PatchCoord> masked_patches() const;
  /// Flat row-major patch indices of masked patches.
  std::vector<int> masked_indices() const;

  friend bool operator==(const MaskPlan&, const MaskPlan&) = default;

 private:
  int patch_size_ = 0;
  int grid_rows_ = 0;
  int grid_cols_ = 0;
  std::vector<std::uint8_t> mask_;
  std::optional<int> target_;
};

SemanticMap onehot_encode(const LabelGrid& labels, const CategoryPalette& palette);
SemanticMap onehot_encode(const LabelGrid& labels, int channels);
LabelGrid onehot_decode(const SemanticMap& map);

/// Throws DataError unless H and W are positive multiples of `patch_size`.
void check_patch_geometry(int height, int width, int patch_size);

PartialMap apply_mask(const SemanticMap& map, const MaskPlan& plan);
/// Masks further patches of an existing partial map; used for idempotence.
PartialMap apply_mask(const PartialMap& map, const MaskPlan& plan);

/// Patches containing at least one cell of category `category`, row-major.
std::vector<PatchCoord> object_patches(const SemanticMap& map, int category, int patch_size);

/// Object categories (ids >= 2) with at least one cell in `map`, ascending.
std::vector<int> present_objects(const SemanticMap& map);

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB triples
};

RgbImage render(const SemanticMap& map, const CategoryPalette& palette, int cell_pixels = 1);
RgbImage render(const PartialMap& map, const CategoryPalette& palette, int cell_pixels = 1);
/// Horizontal concatenation with `gap` white columns between panels.
RgbImage hstack(std::span<const RgbImage> panels, int gap = 2);
/// Binary PPM (P6) bytes.
std::string to_ppm(const RgbImage& image);
void write_ppm(const RgbImage& image, const std::filesystem::path& path);

struct Dataset {
  CategoryPalette palette;
  int patch_size = 8;
  std::vector<SemanticMap> maps;
};

/// Layout: "SMAPDS1\0", u32 LE count/H/W/C/P, C palette records
/// (u16 name length, UTF-8 name, 3 color bytes), then H*W u8 labels per map.
std::string serialize_dataset(const Dataset& dataset);
Dataset deserialize_dataset(std::string_view bytes);
void write_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace mapbert
