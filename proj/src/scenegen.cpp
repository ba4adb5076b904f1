#include "mapbert/scenegen.hpp"

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "mapbert/error.hpp"
#include "mapbert/rng.hpp"

namespace mapbert {

namespace {

struct Rect {
  int row = 0, col = 0, rows = 0, cols = 0;
  int area() const { return rows * cols; }
  bool contains(int r, int c) const { return r >= row && r < row + rows && c >= col && c < col + cols; }
};

// Each object category has one anchor inside its room, so a hidden object's
// location can be inferred from the visible walls and furniture.
enum class Placement { kNorthWall, kWestWall, kCentered, kBesideTable, kAnywhere };

Placement placement_for(const std::string& name) {
  if (name == "bed") return Placement::kNorthWall;
  if (name == "sofa") return Placement::kWestWall;
  if (name == "table") return Placement::kCentered;
  if (name == "chair") return Placement::kBesideTable;
  return Placement::kAnywhere;
}

// Furniture lists by room size rank, largest first. Every room past the
// bedroom is furnished as a dining room.
std::vector<std::string> furniture_for_rank(std::size_t rank) {
  if (rank == 0) return {"sofa", "table", "chair"};
  if (rank == 1) return {"bed", "chair"};
  return {"table", "chair", "chair"};
}

class SceneBuilder {
 public:
  explicit SceneBuilder(const SceneSpec& spec)
      : spec_(spec), rng_(spec.seed), labels_(spec.height, spec.width, kOccupied) {}

  SemanticMap build() {
    partition();
    std::vector<std::size_t> by_area(rooms_.size());
    for (std::size_t k = 0; k < by_area.size(); ++k) by_area[k] = k;
    std::stable_sort(by_area.begin(), by_area.end(),
                     [&](std::size_t a, std::size_t b) { return rooms_[a].area() > rooms_[b].area(); });
    for (std::size_t rank = 0; rank < by_area.size(); ++rank) furnish(rooms_[by_area[rank]], rank);
    return onehot_encode(labels_, spec_.palette);
  }

 private:
  void partition() {
    rooms_.push_back({1, 1, spec_.height - 2, spec_.width - 2});
    const int target = rng_.range(spec_.room_count_range.first, spec_.room_count_range.second);
    const int m = spec_.min_room_size;
    while (static_cast<int>(rooms_.size()) < target) {
      // Largest splittable room, first on ties.
      int pick = -1;
      for (int k = 0; k < static_cast<int>(rooms_.size()); ++k) {
        const auto& r = rooms_[static_cast<std::size_t>(k)];
        if (r.rows < 2 * m + 1 && r.cols < 2 * m + 1) continue;
        if (pick < 0 || r.area() > rooms_[static_cast<std::size_t>(pick)].area()) pick = k;
      }
      if (pick < 0) break;
      const Rect r = rooms_[static_cast<std::size_t>(pick)];
      const bool can_split_cols = r.cols >= 2 * m + 1;
      const bool can_split_rows = r.rows >= 2 * m + 1;
      bool split_cols = can_split_cols && (!can_split_rows || r.cols > r.rows ||
                                           (r.cols == r.rows && rng_.bernoulli(0.5)));
      Rect a = r, b = r;
      if (split_cols) {
        const int wall = rng_.range(r.col + m, r.col + r.cols - 1 - m);
        a.cols = wall - r.col;
        b.col = wall + 1;
        b.cols = r.col + r.cols - wall - 1;
        carve_wall(r.row, wall, r.rows, /*vertical=*/true);
      } else {
        const int wall = rng_.range(r.row + m, r.row + r.rows - 1 - m);
        a.rows = wall - r.row;
        b.row = wall + 1;
        b.rows = r.row + r.rows - wall - 1;
        carve_wall(wall, r.col, r.cols, /*vertical=*/false);
      }
      rooms_[static_cast<std::size_t>(pick)] = a;
      rooms_.push_back(b);
    }
    for (const auto& r : rooms_) {
      for (int i = r.row; i < r.row + r.rows; ++i) {
        for (int j = r.col; j < r.col + r.cols; ++j) labels_.at(i, j) = kFreeSpace;
      }
    }
    for (const auto& [i, j] : doors_) labels_.at(i, j) = kFreeSpace;
  }

  // Records a doorway of width 1-2 in the wall line starting at (row, col).
  void carve_wall(int row, int col, int length, bool vertical) {
    const int door = std::min(rng_.range(1, 2), length);
    const int start = rng_.range(0, length - door);
    for (int k = start; k < start + door; ++k) {
      doors_.emplace_back(vertical ? row + k : row, vertical ? col : col + k);
    }
  }

  bool free_with_margin(const Rect& room, const Rect& obj, int margin) const {
    if (obj.row < room.row || obj.col < room.col || obj.row + obj.rows > room.row + room.rows ||
        obj.col + obj.cols > room.col + room.cols) {
      return false;
    }
    for (int i = obj.row - margin; i < obj.row + obj.rows + margin; ++i) {
      for (int j = obj.col - margin; j < obj.col + obj.cols + margin; ++j) {
        if (!room.contains(i, j)) continue;
        if (labels_.at(i, j) >= kFirstObject) return false;
      }
    }
    return true;
  }

  // Leaves at least one free cell beside the blob so it stays reachable.
  bool leaves_free_space(const Rect& room, const Rect& obj) const {
    return obj.rows < room.rows || obj.cols < room.cols;
  }

  std::pair<int, int> object_dims(Placement placement) {
    const auto [lo, hi] = spec_.object_size_range;
    const int mid = (lo + hi + 1) / 2;
    switch (placement) {
      case Placement::kNorthWall:
        // Long side along the wall.
        return {rng_.range(lo, mid), rng_.range(mid, hi)};
      case Placement::kWestWall:
        return {rng_.range(mid, hi), rng_.range(lo, mid)};
      case Placement::kCentered:
        return {rng_.range(lo, mid), rng_.range(lo, mid)};
      case Placement::kBesideTable:
        return {rng_.range(lo, std::min(hi, lo + 1)), rng_.range(lo, std::min(hi, lo + 1))};
      case Placement::kAnywhere:
        break;
    }
    return {rng_.range(lo, hi), rng_.range(lo, hi)};
  }

  Rect propose(const Rect& room, Placement placement, int rows, int cols, const std::optional<Rect>& table,
               int attempt) {
    Rect obj{0, 0, rows, cols};
    const int center_row = room.row + (room.rows - rows) / 2;
    const int center_col = room.col + (room.cols - cols) / 2;
    switch (placement) {
      case Placement::kNorthWall:
        obj.row = room.row;
        obj.col = center_col + rng_.range(-1, 1);
        break;
      case Placement::kWestWall:
        obj.row = center_row + rng_.range(-1, 1);
        obj.col = room.col;
        break;
      case Placement::kCentered:
        obj.row = center_row + rng_.range(-1, 1);
        obj.col = center_col + rng_.range(-1, 1);
        break;
      case Placement::kBesideTable:
        if (!table) {
          // No table in the room: the south-east corner.
          obj.row = room.row + room.rows - rows;
          obj.col = room.col + room.cols - cols;
          break;
        }
        // East of the table with a one-cell gap, or west when east is taken.
        obj.row = table->row + (table->rows - rows) / 2 + rng_.range(-1, 1);
        obj.col = attempt % 2 == 0 ? table->col + table->cols + 1 : table->col - cols - 1;
        break;
      case Placement::kAnywhere:
        obj.row = rng_.range(room.row, room.row + room.rows - rows);
        obj.col = rng_.range(room.col, room.col + room.cols - cols);
        break;
    }
    return obj;
  }

  void place(const Rect& room, int category, std::optional<Rect>& table) {
    const Placement placement = placement_for(spec_.palette[category].name);
    const auto [rows, cols] = object_dims(placement);
    if (rows > room.rows || cols > room.cols) return;
    for (int attempt = 0; attempt < 16; ++attempt) {
      const Rect obj = propose(room, placement, rows, cols, table, attempt);
      if (!leaves_free_space(room, obj)) continue;
      // Chairs keep their own one-cell gap from the table; everything else keeps a margin.
      if (!free_with_margin(room, obj, placement == Placement::kBesideTable ? 0 : 1)) continue;
      for (int i = obj.row; i < obj.row + obj.rows; ++i) {
        for (int j = obj.col; j < obj.col + obj.cols; ++j) labels_.at(i, j) = category;
      }
      if (placement == Placement::kCentered && !table) table = obj;
      return;
    }
  }

  void furnish(const Rect& room, std::size_t rank) {
    const int count = rng_.range(spec_.objects_per_room_range.first, spec_.objects_per_room_range.second);
    const int objects = spec_.palette.object_count();
    if (objects == 0 || count == 0) return;
    std::vector<int> furniture;
    for (const auto& name : furniture_for_rank(rank)) {
      if (const auto id = spec_.palette.find(name)) furniture.push_back(*id);
    }
    std::optional<Rect> table;
    if (furniture.empty()) {
      // Palettes without the household names get uniformly drawn categories.
      for (int k = 0; k < count; ++k) {
        place(room, kFirstObject + static_cast<int>(rng_.below(static_cast<std::uint64_t>(objects))), table);
      }
      return;
    }
    // A random subset of the room's list, placed in list order so tables
    // precede their chairs. Presence is uncertain while location is not.
    std::vector<std::size_t> pick(furniture.size());
    for (std::size_t k = 0; k < pick.size(); ++k) pick[k] = k;
    const std::size_t n = std::min(static_cast<std::size_t>(count), pick.size());
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t j = k + static_cast<std::size_t>(rng_.below(static_cast<std::uint64_t>(pick.size() - k)));
      std::swap(pick[k], pick[j]);
    }
    std::sort(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(n));
    for (std::size_t k = 0; k < n; ++k) place(room, furniture[pick[k]], table);
  }

  const SceneSpec& spec_;
  CounterRng rng_;
  LabelGrid labels_;
  std::vector<Rect> rooms_;
  std::vector<std::pair<int, int>> doors_;
};

void check_range(const std::pair<int, int>& r, const char* name) {
  if (r.first < 0 || r.second < r.first) {
    throw ConfigError(std::string("[scene] ") + name + " range (" + std::to_string(r.first) + ", " +
                      std::to_string(r.second) + ") is empty or negative");
  }
}

}  // namespace

void validate(const SceneSpec& spec) {
  check_range(spec.room_count_range, "room_count");
  check_range(spec.objects_per_room_range, "objects_per_room");
  check_range(spec.object_size_range, "object_size");
  if (spec.room_count_range.first < 1) throw ConfigError("[scene] room_count must allow at least one room");
  if (spec.object_size_range.first < 1) throw ConfigError("[scene] object_size must be at least 1");
  if (spec.min_room_size < 1) throw ConfigError("[scene] min_room_size must be positive");
  if (spec.patch_size <= 0 || spec.height % spec.patch_size != 0 || spec.width % spec.patch_size != 0) {
    throw ConfigError("[scene] height/width must be divisible by patch " + std::to_string(spec.patch_size));
  }
  if (spec.height < spec.min_room_size + 2 || spec.width < spec.min_room_size + 2) {
    throw ConfigError("[scene] map too small for min_room_size");
  }
  if (spec.objects_per_room_range.second > 0 && spec.palette.object_count() > 0 &&
      spec.object_size_range.first >= spec.min_room_size) {
    throw ConfigError("[scene] infeasible: smallest object (" + std::to_string(spec.object_size_range.first) +
                      ") does not fit any room (min_room_size " + std::to_string(spec.min_room_size) + ")");
  }
}

SemanticMap generate_scene(const SceneSpec& spec) {
  validate(spec);
  return SceneBuilder(spec).build();
}

std::vector<SemanticMap> generate_dataset(const SceneSpec& spec, int count, std::uint64_t seed) {
  if (count < 1) throw ConfigError("dataset size must be at least 1");
  validate(spec);
  std::vector<SemanticMap> out;
  out.reserve(static_cast<std::size_t>(count));
  SceneSpec s = spec;
  for (int k = 0; k < count; ++k) {
    s.seed = CounterRng::derive(seed, static_cast<std::uint64_t>(k));
    out.push_back(generate_scene(s));
  }
  return out;
}

}  // namespace mapbert
