#pragma once

// Procedural indoor floorplans: binary space partition into rooms separated
// by 1-cell walls with doorways, furnished with rectangular object blobs.
// Rooms are typed by size rank and each object category has a fixed anchor
// in its room, so hidden furniture is predictable from the visible layout.

#include <cstdint>
#include <utility>
#include <vector>

#include "mapbert/map_core.hpp"

namespace mapbert {

struct SceneSpec {
  int height = 64;
  int width = 64;
  int patch_size = 8;
  CategoryPalette palette = CategoryPalette::indoor_default();
  std::pair<int, int> room_count_range{2, 4};
  /// Upper bounds per room; a room never holds more than its type's list.
  std::pair<int, int> objects_per_room_range{1, 3};
  std::pair<int, int> object_size_range{4, 10};
  /// Smallest room interior side the partition may create.
  int min_room_size = 18;
  std::uint64_t seed = 0;
};

/// Throws ConfigError for malformed ranges or geometry, and for specs whose
/// smallest object cannot fit inside the smallest room.
void validate(const SceneSpec& spec);

SemanticMap generate_scene(const SceneSpec& spec);

/// Map k is generate_scene with seed CounterRng::derive(seed, k).
std::vector<SemanticMap> generate_dataset(const SceneSpec& spec, int count, std::uint64_t seed);

}  // namespace mapbert
