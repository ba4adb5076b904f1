#include "mapbert/maskformer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "mapbert/error.hpp"
#include "mapbert/nn/ops.hpp"
#include "mapbert/scenegen.hpp"

namespace mapbert {
namespace {

MaskformerConfig tiny_mt() {
  MaskformerConfig c;
  c.d_model = 32;
  c.layers = 2;
  c.heads = 4;
  c.ffn_width = 64;
  c.grid_rows = 4;
  c.grid_cols = 4;
  c.codebook = 64;
  c.categories = 6;
  return c;
}

BitVaeConfig tiny_bit() {
  BitVaeConfig c;
  c.height = 32;
  c.width = 32;
  c.patch_size = 8;
  c.encoder_width = 16;
  c.decoder_width = 16;
  c.decoder_blocks = 1;
  c.upsample_width = 8;
  c.bits = 6;
  return c;
}

SceneSpec small_scene() {
  SceneSpec spec;
  spec.height = 32;
  spec.width = 32;
  spec.room_count_range = {1, 3};
  return spec;
}

TokenGrid random_grid(CounterRng& rng, int rows, int cols, int codebook) {
  TokenGrid g{rows, cols, codebook, std::vector<int>(static_cast<std::size_t>(rows * cols))};
  for (auto& t : g.tokens) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(codebook)));
  return g;
}

// ---------------------------------------------------------------------------
// Schedule

TEST(MaskRatio, PhaseTwoEndpointsAndMidpoint) {
  CounterRng rng(1);
  for (double total : {1.0, 4.0, 40.0, 100.0}) {
    EXPECT_EQ(mask_ratio(total / 4, total, rng), 0.15);
    EXPECT_EQ(mask_ratio(total, total, rng), 0.75);
    EXPECT_NEAR(mask_ratio(total / 4 + 0.5 * (0.75 * total), total, rng), 0.45, 1e-12);
  }
}

TEST(MaskRatio, MonotoneInPhaseTwoAndBoundedInPhaseOne) {
  CounterRng rng(2);
  const double total = 40;
  double prev = 0;
  for (int i = 0; i <= 1000; ++i) {
    const double t = total / 4 + (0.75 * total) * i / 1000.0;
    const double r = mask_ratio(t, total, rng);
    EXPECT_GE(r, prev);
    prev = r;
  }
  for (int i = 0; i < 1000; ++i) {
    const double r = mask_ratio(total / 4 * i / 1000.0, total, rng);
    EXPECT_GE(r, 0.15);
    EXPECT_LE(r, 0.20);
  }
  EXPECT_THROW(mask_ratio(41, 40, rng), ConfigError);
}

TEST(MaskRatio, PatchCounts) {
  EXPECT_EQ(masked_patch_count(0.5, 64), 32);
  EXPECT_EQ(masked_patch_count(0.15, 64), 10);
  EXPECT_EQ(masked_patch_count(0.75, 64), 48);
  EXPECT_EQ(masked_patch_count(1.0, 64), 64);
  EXPECT_EQ(masked_patch_count(0.001, 64), 1);
  EXPECT_THROW(masked_patch_count(0.0, 64), ConfigError);
}

// ---------------------------------------------------------------------------
// Mask plans

TEST(MaskPlans, FullRatioMasksEverything) {
  CounterRng rng(3);
  const auto m = generate_dataset(SceneSpec{}, 1, 3)[0];
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_mask_plan(m, 8, 1.0, 0.5, rng).masked_count(), 64u);
}

TEST(MaskPlans, ObjectAwarePlansCoverTheObject) {
  CounterRng rng(4);
  const auto maps = generate_dataset(SceneSpec{}, 40, 4);
  int object_plans = 0;
  for (const auto& m : maps) {
    for (int i = 0; i < 10; ++i) {
      const auto plan = sample_mask_plan(m, 8, 0.3, 0.5, rng);
      const std::size_t expected = static_cast<std::size_t>(masked_patch_count(0.3, 64));
      if (const auto c = plan.target_category()) {
        ++object_plans;
        const auto obj = object_patches(m, *c, 8);
        for (const auto& p : obj) EXPECT_TRUE(plan.is_masked(p.row, p.col));
        EXPECT_EQ(plan.masked_count(), std::max(expected, obj.size()));
        // No cell of the target category stays visible.
        const auto masked = apply_mask(m, plan);
        for (int r = 0; r < 64; ++r)
          for (int col = 0; col < 64; ++col) {
            if (masked.observed(r, col)) {
              EXPECT_EQ(masked.at(r, col, *c), 0);
            }
          }
      } else {
        EXPECT_EQ(plan.masked_count(), expected);
      }
    }
  }
  EXPECT_GT(object_plans, 0);
}

TEST(MaskPlans, ObjectAwareFractionFollowsPObj) {
  CounterRng rng(5);
  SceneSpec spec;
  spec.seed = 5;
  auto m = generate_scene(spec);
  while (present_objects(m).empty()) {
    ++spec.seed;
    m = generate_scene(spec);
  }
  int targeted = 0;
  for (int i = 0; i < 1000; ++i) targeted += sample_mask_plan(m, 8, 0.5, 0.5, rng).target_category().has_value();
  EXPECT_GE(targeted, 450);
  EXPECT_LE(targeted, 550);
}

TEST(MaskPlans, MapWithoutObjectsGetsRandomPlan) {
  SceneSpec spec;
  spec.objects_per_room_range = {0, 0};
  const auto m = generate_dataset(spec, 1, 6)[0];
  CounterRng rng(6);
  for (int i = 0; i < 50; ++i) EXPECT_FALSE(sample_mask_plan(m, 8, 0.4, 1.0, rng).target_category());
}

TEST(MaskPlans, ApplyMaskToTokens) {
  CounterRng rng(7);
  const auto g = random_grid(rng, 4, 4, 64);
  const auto plan = random_mask_plan(8, 4, 4, 5, rng);
  const auto masked = apply_mask(g, plan);
  EXPECT_EQ(masked.mask_count(), 5u);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(masked.tokens[i], plan.is_masked(i) ? 64 : g.tokens[i]);
  EXPECT_THROW(apply_mask(g, random_mask_plan(8, 3, 4, 2, rng)), DataError);
}

// ---------------------------------------------------------------------------
// Forward pass

TEST(Maskformer, OutputShapeAndValidation) {
  Maskformer model(tiny_mt(), 1);
  CounterRng rng(8);
  auto g = random_grid(rng, 4, 4, 64);
  g.tokens[3] = 64;  // MASK is a legal input
  EXPECT_EQ(model.forward(g, std::nullopt).shape(), (nn::Shape{16, 64}));
  EXPECT_EQ(model.forward(g, 3).shape(), (nn::Shape{16, 64}));
  g.tokens[3] = 65;
  EXPECT_THROW(model.forward(g, std::nullopt), DataError);
  g.tokens[3] = 0;
  EXPECT_THROW(model.forward(g, 6), DataError);
  EXPECT_THROW(model.forward(random_grid(rng, 3, 4, 64), std::nullopt), DataError);
  auto bad = tiny_mt();
  bad.heads = 5;
  EXPECT_THROW(Maskformer(bad, 0), ConfigError);
}

TEST(Maskformer, BatchedForwardMatchesSingle) {
  Maskformer model(tiny_mt(), 2);
  CounterRng rng(9);
  std::vector<TokenGrid> grids{random_grid(rng, 4, 4, 64), random_grid(rng, 4, 4, 64)};
  const std::vector<std::optional<int>> targets{std::nullopt, 2};
  const auto batched = model.forward(grids, targets);
  for (int b = 0; b < 2; ++b) {
    const auto single = model.forward(grids[static_cast<std::size_t>(b)], targets[static_cast<std::size_t>(b)]);
    for (std::size_t i = 0; i < single.size(); ++i) EXPECT_NEAR(batched[b * single.size() + i], single[i], 1e-5);
  }
}

TEST(Maskformer, TargetConditioningChangesLogits) {
  Maskformer model(tiny_mt(), 3);
  CounterRng rng(10);
  const auto g = random_grid(rng, 4, 4, 64);
  const auto a = model.forward(g, 2), b = model.forward(g, std::nullopt);
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
  EXPECT_GT(diff, 0.0);
}

TEST(Maskformer, SwappingPositionEmbeddingsSwapsMaskRows) {
  Maskformer model(tiny_mt(), 4);
  CounterRng rng(11);
  auto g = random_grid(rng, 4, 4, 64);
  const int i = 3, j = 9;
  g.tokens[i] = g.tokens[j] = 64;
  const auto before = model.forward(g, 1);
  // Grid position p uses positional row p + 1 (row 0 is the conditioning slot).
  auto pos = model.parameters().get("pos_emb");
  auto v = pos.mutable_values();
  for (int k = 0; k < 32; ++k) std::swap(v[static_cast<std::size_t>((i + 1) * 32 + k)], v[static_cast<std::size_t>((j + 1) * 32 + k)]);
  const auto after = model.forward(g, 1);
  for (int k = 0; k < 64; ++k) {
    EXPECT_NEAR(after[static_cast<std::size_t>(i * 64 + k)], before[static_cast<std::size_t>(j * 64 + k)], 1e-5);
    EXPECT_NEAR(after[static_cast<std::size_t>(j * 64 + k)], before[static_cast<std::size_t>(i * 64 + k)], 1e-5);
  }
}

TEST(Maskformer, CheckpointRoundTrip) {
  auto cfg = tiny_mt();
  cfg.decode = DecodeMode::kIterative;
  cfg.iterations = 3;
  Maskformer model(cfg, 5);
  const auto loaded = Maskformer::from_checkpoint(nn::Checkpoint::deserialize(model.checkpoint().serialize()));
  EXPECT_EQ(loaded.config().decode, DecodeMode::kIterative);
  EXPECT_EQ(loaded.config().iterations, 3);
  CounterRng rng(12);
  const auto g = random_grid(rng, 4, 4, 64);
  const auto a = model.forward(g, 2), b = loaded.forward(g, 2);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  nn::Checkpoint wrong = model.checkpoint();
  wrong.config["kind"] = "bitvae";
  EXPECT_THROW(Maskformer::from_checkpoint(wrong), DataError);
}

// ---------------------------------------------------------------------------
// Loss

TEST(MtLoss, UniformLogitsGiveLogVocabulary) {
  CounterRng rng(13);
  const std::vector<TokenGrid> truth{random_grid(rng, 4, 4, 64)};
  const std::vector<MaskPlan> plans{random_mask_plan(8, 4, 4, 7, rng)};
  const auto logits = nn::Tensorf::full({1, 16, 64}, 0.3f);
  EXPECT_NEAR(mt_loss(logits, truth, plans).item(), std::log(64.0), 1e-6);
}

TEST(MtLoss, ConfidentCorrectLogitsGiveNearZero) {
  CounterRng rng(14);
  const std::vector<TokenGrid> truth{random_grid(rng, 4, 4, 64)};
  const std::vector<MaskPlan> plans{random_mask_plan(8, 4, 4, 16, rng)};
  std::vector<float> v(16 * 64, -30.0f);
  for (int p = 0; p < 16; ++p) v[static_cast<std::size_t>(p * 64 + truth[0].tokens[static_cast<std::size_t>(p)])] = 30.0f;
  EXPECT_LT(mt_loss(nn::Tensorf({1, 16, 64}, v), truth, plans).item(), 1e-6);
}

TEST(MtLoss, MatchesPositionOracleAndIgnoresUnmaskedTargets) {
  CounterRng rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<TokenGrid> truth{random_grid(rng, 4, 4, 64), random_grid(rng, 4, 4, 64)};
    const std::vector<MaskPlan> plans{random_mask_plan(8, 4, 4, 5, rng), random_mask_plan(8, 4, 4, 11, rng)};
    std::vector<float> v(2 * 16 * 64);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-4, 4));
    const nn::Tensorf logits({2, 16, 64}, v);
    double oracle = 0;
    int count = 0;
    for (int b = 0; b < 2; ++b)
      for (int p = 0; p < 16; ++p) {
        if (!plans[static_cast<std::size_t>(b)].is_masked(static_cast<std::size_t>(p))) continue;
        const float* row = v.data() + (b * 16 + p) * 64;
        double z = 0;
        for (int k = 0; k < 64; ++k) z += std::exp(static_cast<double>(row[k]));
        oracle += std::log(z) - row[truth[static_cast<std::size_t>(b)].tokens[static_cast<std::size_t>(p)]];
        ++count;
      }
    const double loss = mt_loss(logits, truth, plans).item();
    EXPECT_NEAR(loss, oracle / count, 1e-5);
    for (int b = 0; b < 2; ++b)
      for (int p = 0; p < 16; ++p)
        if (!plans[static_cast<std::size_t>(b)].is_masked(static_cast<std::size_t>(p)))
          truth[static_cast<std::size_t>(b)].tokens[static_cast<std::size_t>(p)] = static_cast<int>(rng.below(64));
    EXPECT_EQ(mt_loss(logits, truth, plans).item(), loss);
  }
}

TEST(MtLoss, EmptyPlanIsRejected) {
  CounterRng rng(16);
  const std::vector<TokenGrid> truth{random_grid(rng, 4, 4, 64)};
  const std::vector<MaskPlan> plans{MaskPlan(8, 4, 4, {}, std::nullopt)};
  EXPECT_THROW(mt_loss(nn::Tensorf::zeros({1, 16, 64}), truth, plans), DataError);
}

// ---------------------------------------------------------------------------
// Restoration accuracy

TEST(Restoration, FrozenRandomModelIsAtChance) {
  Maskformer model(tiny_mt(), 17);
  CounterRng rng(18);
  std::vector<TokenGrid> truth;
  for (int i = 0; i < 800; ++i) truth.push_back(random_grid(rng, 4, 4, 64));
  const double acc = restoration_accuracy(model, truth, 0.5, 3);
  const double n = 800.0 * 8, p = 1.0 / 64;
  EXPECT_NEAR(acc, p, 3 * std::sqrt(p * (1 - p) / n));
}

TEST(Restoration, InvariantToMapOrder) {
  Maskformer model(tiny_mt(), 19);
  CounterRng rng(20);
  std::vector<TokenGrid> truth;
  for (int i = 0; i < 100; ++i) truth.push_back(random_grid(rng, 4, 4, 64));
  const double a = restoration_accuracy(model, truth, 0.5, 4);
  rng.shuffle(truth);
  EXPECT_EQ(a, restoration_accuracy(model, truth, 0.5, 4));
}

TEST(Restoration, EchoingModelScoresPerfectly) {
  // A grid whose masked positions all hold the model's own argmax is restored exactly.
  Maskformer model(tiny_mt(), 41);
  CounterRng rng(42);
  auto g = random_grid(rng, 4, 4, 64);
  for (int round = 0; round < 3; ++round) {
    TokenGrid all_masked = g;
    for (auto& t : all_masked.tokens) t = 64;
    const auto logits = model.forward(all_masked, std::nullopt);
    for (int p = 0; p < 16; ++p) {
      const auto row = logits.values().subspan(static_cast<std::size_t>(p * 64), 64);
      g.tokens[static_cast<std::size_t>(p)] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
  }
  const std::vector<TokenGrid> truth{g};
  EXPECT_EQ(restoration_accuracy(model, truth, 1.0, 5), 1.0);
}

// ---------------------------------------------------------------------------
// Generation

TEST(Generate, FullyObservedEqualsRoundTrip) {
  BitVae vae(tiny_bit(), 21);
  Maskformer model(tiny_mt(), 22);
  for (const auto& m : generate_dataset(small_scene(), 10, 23)) {
    const auto out = generate(vae, model, PartialMap(m), std::nullopt);
    EXPECT_EQ(out, vae.roundtrip(m));
  }
}

TEST(Generate, FillsEveryMaskAndKeepsObservedTokens) {
  BitVae vae(tiny_bit(), 24);
  Maskformer model(tiny_mt(), 25);
  CounterRng rng(26);
  for (int trial = 0; trial < 10; ++trial) {
    const auto g = random_grid(rng, 4, 4, 64);
    const auto plan = random_mask_plan(8, 4, 4, static_cast<int>(rng.range(1, 16)), rng);
    const auto masked = apply_mask(g, plan);
    for (auto mode : {DecodeMode::kSinglePass, DecodeMode::kIterative}) {
      const auto done = complete_tokens(model, masked, 2, mode, 4);
      EXPECT_EQ(done.mask_count(), 0u);
      for (std::size_t i = 0; i < 16; ++i)
        if (!plan.is_masked(i)) {
          EXPECT_EQ(done.tokens[i], g.tokens[i]);
        }
    }
  }
}

TEST(Generate, IterativeWithOneRoundEqualsSinglePass) {
  BitVae vae(tiny_bit(), 27);
  Maskformer model(tiny_mt(), 28);
  CounterRng rng(29);
  for (const auto& m : generate_dataset(small_scene(), 8, 30)) {
    const auto plan = random_mask_plan(8, 4, 4, 8, rng);
    const auto partial = apply_mask(m, plan);
    const auto single = generate(vae, model, partial, 2, {.mode = DecodeMode::kSinglePass});
    const auto iter = generate(vae, model, partial, 2, {.mode = DecodeMode::kIterative, .iterations = 1});
    EXPECT_EQ(single, iter);
  }
}

TEST(Generate, RejectsMismatchedModels) {
  BitVae vae(tiny_bit(), 31);
  auto cfg = tiny_mt();
  cfg.codebook = 32;
  Maskformer model(cfg, 32);
  const auto m = generate_dataset(small_scene(), 1, 33)[0];
  EXPECT_THROW(generate(vae, model, PartialMap(m), std::nullopt), DataError);
}

// ---------------------------------------------------------------------------
// Training

TEST(TrainMaskformer, DeterministicAndLearns) {
  BitVae vae(tiny_bit(), 34);
  const auto train = generate_dataset(small_scene(), 48, 35);
  const auto val = generate_dataset(small_scene(), 16, 36);
  MaskformerTrainConfig tc;
  tc.epochs = 6;
  tc.batch_size = 16;
  tc.lr = 2e-3;
  tc.warmup_steps = 2;
  tc.seed = 9;
  Maskformer a(tiny_mt(), 37), b(tiny_mt(), 37);
  const auto ra = train_maskformer(a, vae, train, val, tc);
  const auto rb = train_maskformer(b, vae, train, val, tc);
  ASSERT_EQ(ra.trace.size(), 6u);
  for (std::size_t e = 0; e < 6; ++e) {
    EXPECT_EQ(ra.trace[e].val_accuracy, rb.trace[e].val_accuracy);
    EXPECT_EQ(ra.trace[e].train_loss, rb.trace[e].train_loss);
  }
  EXPECT_LT(ra.final_train_loss, ra.initial_train_loss);
  EXPECT_TRUE(a.checkpoint().serialize() == b.checkpoint().serialize());
}

TEST(TrainMaskformer, StopAfterRunsAPrefix) {
  BitVae vae(tiny_bit(), 38);
  const auto train = generate_dataset(small_scene(), 16, 39);
  MaskformerTrainConfig tc;
  tc.epochs = 5;
  tc.stop_after = 1;
  tc.batch_size = 8;
  Maskformer model(tiny_mt(), 40);
  EXPECT_EQ(train_maskformer(model, vae, train, {}, tc).trace.size(), 1u);
}

}  // namespace
}  // namespace mapbert
