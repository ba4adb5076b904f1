#include "mapbert/scenegen.hpp"

#include <gtest/gtest.h>

#include <deque>
#include <set>

#include "mapbert/error.hpp"
#include "mapbert/rng.hpp"

namespace mapbert {
namespace {

TEST(SceneGen, Deterministic) {
  SceneSpec spec;
  spec.seed = 42;
  EXPECT_EQ(generate_scene(spec).data(), generate_scene(spec).data());
}

TEST(SceneGen, NoObjectsMeansOnlyStructure) {
  SceneSpec spec;
  spec.objects_per_room_range = {0, 0};
  for (std::uint64_t s = 0; s < 20; ++s) {
    spec.seed = s;
    const auto m = generate_scene(spec);
    EXPECT_TRUE(present_objects(m).empty());
  }
}

TEST(SceneGen, SeedsGiveDistinctMaps) {
  SceneSpec spec;
  std::set<std::uint64_t> hashes;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    spec.seed = s;
    const auto m = generate_scene(spec);
    hashes.insert(fnv1a64(m.data().data(), m.data().size()));
  }
  EXPECT_GE(hashes.size(), 990u);
}

TEST(SceneGen, DatasetUsesDerivedSeeds) {
  SceneSpec spec;
  const auto one = generate_dataset(spec, 1, 99);
  SceneSpec derived = spec;
  derived.seed = CounterRng::derive(99, 0);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0], generate_scene(derived));
  EXPECT_EQ(generate_dataset(spec, 4, 5), generate_dataset(spec, 4, 5));
  EXPECT_THROW(generate_dataset(spec, 0, 5), ConfigError);
}

TEST(SceneGen, LongTailedFrequencies) {
  SceneSpec spec;
  const auto maps = generate_dataset(spec, 512, 1);
  std::vector<long> counts(static_cast<std::size_t>(spec.palette.size()), 0);
  for (const auto& m : maps) {
    for (int i = 0; i < m.height(); ++i) {
      for (int j = 0; j < m.width(); ++j) ++counts[static_cast<std::size_t>(m.label(i, j))];
    }
  }
  for (int c = kFirstObject; c < spec.palette.size(); ++c) {
    EXPECT_GT(counts[kFreeSpace], counts[static_cast<std::size_t>(c)]);
    EXPECT_GT(counts[kOccupied], counts[static_cast<std::size_t>(c)]);
    EXPECT_GT(counts[static_cast<std::size_t>(c)], 0);
  }
  EXPECT_GT(counts[kFreeSpace], counts[kOccupied]);
}

// Flood fill over non-wall cells from every free cell; objects must be reached.
TEST(SceneGen, ObjectsSitInsideRooms) {
  SceneSpec spec;
  const auto maps = generate_dataset(spec, 200, 2);
  for (const auto& m : maps) {
    const int h = m.height(), w = m.width();
    for (int j = 0; j < w; ++j) {
      EXPECT_EQ(m.label(0, j), kOccupied);
      EXPECT_EQ(m.label(h - 1, j), kOccupied);
    }
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(h * w), 0);
    std::deque<std::pair<int, int>> q;
    int free_cells = 0;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        if (m.label(i, j) == kFreeSpace) {
          ++free_cells;
          seen[static_cast<std::size_t>(i * w + j)] = 1;
          q.emplace_back(i, j);
        }
      }
    }
    ASSERT_GT(free_cells, 0);
    while (!q.empty()) {
      const auto [i, j] = q.front();
      q.pop_front();
      const int di[] = {1, -1, 0, 0}, dj[] = {0, 0, 1, -1};
      for (int k = 0; k < 4; ++k) {
        const int a = i + di[k], b = j + dj[k];
        if (a < 0 || b < 0 || a >= h || b >= w) continue;
        if (seen[static_cast<std::size_t>(a * w + b)] || m.label(a, b) < kFirstObject) continue;
        seen[static_cast<std::size_t>(a * w + b)] = 1;
        q.emplace_back(a, b);
      }
    }
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        if (m.label(i, j) >= kFirstObject) {
          EXPECT_TRUE(seen[static_cast<std::size_t>(i * w + j)]);
        }
      }
    }
  }
}

// A wall cell, or a doorway cell: free with wall at most two cells away along
// the wall line (doorways are one or two cells wide).
bool wall_or_door(const SemanticMap& m, int i, int j, bool horizontal) {
  if (m.label(i, j) == kOccupied) return true;
  if (m.label(i, j) != kFreeSpace) return false;
  for (int d = -2; d <= 2; ++d) {
    const int a = horizontal ? i : i + d, b = horizontal ? j + d : j;
    if (a >= 0 && b >= 0 && a < m.height() && b < m.width() && m.label(a, b) == kOccupied) return true;
  }
  return false;
}

// Bed blobs touch the wall above them and sofa blobs the wall to their left.
TEST(SceneGen, FurnitureFollowsRoomAnchors) {
  SceneSpec spec;
  const auto maps = generate_dataset(spec, 200, 3);
  const int bed = *spec.palette.find("bed");
  const int sofa = *spec.palette.find("sofa");
  int beds = 0, sofas = 0;
  for (const auto& m : maps) {
    for (int i = 1; i < m.height(); ++i) {
      for (int j = 1; j < m.width(); ++j) {
        const int here = m.label(i, j);
        if (here == bed && m.label(i - 1, j) != bed) {
          EXPECT_TRUE(wall_or_door(m, i - 1, j, /*horizontal=*/true));
          ++beds;
        }
        if (here == sofa && m.label(i, j - 1) != sofa) {
          EXPECT_TRUE(wall_or_door(m, i, j - 1, /*horizontal=*/false));
          ++sofas;
        }
      }
    }
  }
  EXPECT_GT(beds, 0);
  EXPECT_GT(sofas, 0);
}

// Every map has at least two rooms by default, so the living room and the
// bedroom both exist and the largest room is furnished first.
TEST(SceneGen, DefaultMapsHoldEveryCategory) {
  SceneSpec spec;
  const auto maps = generate_dataset(spec, 100, 4);
  std::vector<int> present(static_cast<std::size_t>(spec.palette.size()), 0);
  for (const auto& m : maps) {
    for (const int c : present_objects(m)) ++present[static_cast<std::size_t>(c)];
  }
  for (int c = kFirstObject; c < spec.palette.size(); ++c) EXPECT_GT(present[static_cast<std::size_t>(c)], 30) << c;
}

TEST(SceneGen, InfeasibleSpecRejected) {
  SceneSpec spec;
  spec.object_size_range = {20, 22};
  EXPECT_THROW(generate_scene(spec), ConfigError);
  spec = SceneSpec{};
  spec.room_count_range = {3, 2};
  EXPECT_THROW(generate_scene(spec), ConfigError);
  spec = SceneSpec{};
  spec.height = 60;
  EXPECT_THROW(generate_scene(spec), ConfigError);
}

TEST(Rng, ReferenceStream) {
  // SplitMix64 reference outputs for seed 0.
  CounterRng rng(0);
  EXPECT_EQ(rng.next_u64(), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(rng.next_u64(), 0x6E789E6AA1B965F4ULL);
  CounterRng a(5), b(5);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.below(17), b.below(17));
}

}  // namespace
}  // namespace mapbert
