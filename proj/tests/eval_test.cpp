#include "mapbert/eval.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include "mapbert/error.hpp"
#include "mapbert/scenegen.hpp"

namespace mapbert {
namespace {

SemanticMap random_map(CounterRng& rng, int h, int w, int c) {
  LabelGrid labels(h, w);
  for (int r = 0; r < h; ++r)
    for (int col = 0; col < w; ++col) labels.at(r, col) = static_cast<int>(rng.below(static_cast<std::uint64_t>(c)));
  return onehot_encode(labels, c);
}

SemanticMap uniform_map(int h, int w, int c, int label) { return onehot_encode(LabelGrid(h, w, label), c); }

// Counts every (cell, channel) activation pair directly from the raw bytes.
Counts activation_oracle(const SemanticMap& pred, const SemanticMap& gt) {
  Counts k;
  for (std::size_t i = 0; i < gt.data().size(); ++i) {
    const bool p = pred.data()[i] != 0, g = gt.data()[i] != 0;
    k.tp += p && g;
    k.fp += p && !g;
    k.fn += !p && g;
  }
  return k;
}

BitVaeConfig tiny_bit() {
  BitVaeConfig c;
  c.height = 32;
  c.width = 32;
  c.encoder_width = 16;
  c.decoder_width = 16;
  c.decoder_blocks = 1;
  c.upsample_width = 8;
  c.bits = 6;
  return c;
}

MaskformerConfig tiny_mt(const Tokenizer& tok) {
  MaskformerConfig c;
  c.d_model = 32;
  c.layers = 1;
  c.heads = 2;
  c.ffn_width = 64;
  c.grid_rows = tok.geometry().grid_rows();
  c.grid_cols = tok.geometry().grid_cols();
  c.codebook = tok.codebook_size();
  c.categories = tok.geometry().channels;
  return c;
}

std::vector<SemanticMap> small_maps(int n, std::uint64_t seed) {
  SceneSpec spec;
  spec.height = 32;
  spec.width = 32;
  spec.room_count_range = {1, 3};
  return generate_dataset(spec, n, seed);
}

// ---------------------------------------------------------------------------
// Metrics

TEST(Metrics, MatchesActivationOracleOnRandomPairs) {
  CounterRng rng(11);
  for (int i = 0; i < 100; ++i) {
    const auto a = random_map(rng, 16, 16, 5), b = random_map(rng, 16, 16, 5);
    const Counts k = activation_oracle(a, b);
    const auto m = map_metrics(a, b);
    EXPECT_TRUE(m.counts == k);
    const double p = static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fp);
    const double r = static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fn);
    EXPECT_NEAR(m.precision, p, 1e-9);
    EXPECT_NEAR(m.recall, r, 1e-9);
    EXPECT_NEAR(m.iou, static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fp + k.fn), 1e-9);
    EXPECT_NEAR(m.f1, 2 * p * r / (p + r), 1e-9);
  }
}

TEST(Metrics, OneHotCellsGiveOneFalsePositiveAndOneMissPerMismatch) {
  CounterRng rng(12);
  const auto a = random_map(rng, 16, 16, 5), b = random_map(rng, 16, 16, 5);
  std::uint64_t same = 0;
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c) same += a.label(r, c) == b.label(r, c);
  const auto k = map_counts(a, b);
  EXPECT_EQ(k.tp, same);
  EXPECT_EQ(k.fp, 256 - same);
  EXPECT_EQ(k.fn, 256 - same);
}

TEST(Metrics, IdentityScoresOne) {
  CounterRng rng(13);
  const auto a = random_map(rng, 8, 8, 4);
  const auto m = map_metrics(a, a);
  EXPECT_DOUBLE_EQ(m.iou, 1.0);
  EXPECT_DOUBLE_EQ(m.recall, 1.0);
  EXPECT_DOUBLE_EQ(m.precision, 1.0);
  EXPECT_DOUBLE_EQ(m.f1, 1.0);
}

TEST(Metrics, HandCountedCase) {
  // Three cells; one label differs: TP 2, FP 1, FN 1.
  const auto gt = onehot_encode(LabelGrid(1, 3, std::vector<int>{0, 1, 2}), 3);
  const auto pred = onehot_encode(LabelGrid(1, 3, std::vector<int>{0, 1, 1}), 3);
  const auto m = map_metrics(pred, gt);
  EXPECT_TRUE((m.counts == Counts{2, 1, 1}));
  EXPECT_NEAR(m.iou, 0.5, 1e-12);
  EXPECT_NEAR(m.precision, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(m.recall, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(m.f1, 2.0 / 3.0, 1e-12);
  const auto per = channel_counts(pred, gt);
  ASSERT_EQ(per.size(), 3u);
  EXPECT_TRUE((per[1] == Counts{1, 1, 0}));
  EXPECT_TRUE((per[2] == Counts{0, 0, 1}));
}

TEST(Metrics, ZeroDenominatorRules) {
  const auto empty = metrics_from_counts({0, 0, 0});
  EXPECT_DOUBLE_EQ(empty.precision, 1.0);
  EXPECT_DOUBLE_EQ(empty.recall, 1.0);
  const auto miss = metrics_from_counts({0, 0, 5});
  EXPECT_DOUBLE_EQ(miss.precision, 0.0);
  EXPECT_DOUBLE_EQ(miss.recall, 0.0);
  EXPECT_DOUBLE_EQ(miss.f1, 0.0);
  const auto spurious = metrics_from_counts({0, 4, 0});
  EXPECT_DOUBLE_EQ(spurious.precision, 0.0);
  EXPECT_DOUBLE_EQ(spurious.recall, 0.0);
  EXPECT_DOUBLE_EQ(spurious.f1, 0.0);
}

TEST(Metrics, RatioIdentitiesHold) {
  CounterRng rng(14);
  for (int i = 0; i < 200; ++i) {
    const Counts k{rng.below(50), rng.below(50), rng.below(50)};
    const auto m = metrics_from_counts(k);
    for (double v : {m.iou, m.recall, m.precision, m.f1}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    if (k.tp + k.fp > 0 && k.tp + k.fn > 0) {
      EXPECT_LE(m.iou, std::min(m.precision, m.recall) + 1e-12);
      EXPECT_GE(m.f1 + 1e-12, m.iou);
      if (m.f1 > 0) {
        EXPECT_NEAR(m.iou, m.f1 / (2 - m.f1), 1e-12);
      }
    }
  }
}

TEST(Metrics, GeometryMismatchThrows) {
  EXPECT_THROW(map_metrics(uniform_map(4, 4, 3, 0), uniform_map(4, 5, 3, 0)), DataError);
  EXPECT_THROW(map_metrics(uniform_map(4, 4, 3, 0), uniform_map(4, 4, 4, 0)), DataError);
}

// ---------------------------------------------------------------------------
// Parallel helpers

TEST(Parallel, WorkerThreadsReadsEnvironment) {
  ::setenv("MAPBERT_THREADS", "3", 1);
  EXPECT_EQ(worker_threads(), 3);
  ::setenv("MAPBERT_THREADS", "0", 1);
  EXPECT_GE(worker_threads(), 1);
  ::setenv("MAPBERT_THREADS", "lots", 1);
  EXPECT_GE(worker_threads(), 1);
  ::unsetenv("MAPBERT_THREADS");
  EXPECT_GE(worker_threads(), 1);
}

TEST(Parallel, VisitsEveryIndexOnceAndRethrows) {
  for (int threads : {1, 4}) {
    std::vector<std::atomic<int>> hits(97);
    parallel_for(hits.size(), threads, [&](std::size_t i) { ++hits[i]; });
    for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
    EXPECT_THROW(parallel_for(10, threads,
                              [](std::size_t i) {
                                if (i == 7) throw DataError("boom");
                              }),
                 DataError);
  }
}

// ---------------------------------------------------------------------------
// sSR success rule

class ScoreTrial : public ::testing::Test {
 protected:
  // 16 x 16 map with patch size 8; the object (category 2) sits in the top-left patch.
  void SetUp() override {
    LabelGrid labels(16, 16, kFreeSpace);
    for (int r = 2; r < 5; ++r)
      for (int c = 2; c < 5; ++c) labels.at(r, c) = 2;
    gt = onehot_encode(labels, 4);
    const std::vector<PatchCoord> masked{{0, 0}, {1, 1}};
    plan = MaskPlan(8, 2, 2, masked, 2);
  }
  SemanticMap gt;
  MaskPlan plan;
};

TEST_F(ScoreTrial, ExactPredictionSucceeds) {
  const auto t = score_trial(gt, gt, plan, 2, 1);
  EXPECT_TRUE(t.success);
  EXPECT_EQ(t.overlap, 9);
  EXPECT_EQ(t.truth_cells, 9);
  EXPECT_EQ(t.predicted_cells, 9);
  EXPECT_EQ(t.masked_cells, 128);
  EXPECT_DOUBLE_EQ(t.metrics.iou, 1.0);
}

TEST_F(ScoreTrial, MissingObjectFails) {
  const auto t = score_trial(uniform_map(16, 16, 4, kFreeSpace), gt, plan, 2, 1);
  EXPECT_FALSE(t.success);
  EXPECT_EQ(t.overlap, 0);
}

TEST_F(ScoreTrial, ObjectOutsideTheMaskDoesNotCount) {
  // Prediction places the object only in the unmasked top-right patch.
  LabelGrid labels(16, 16, kFreeSpace);
  for (int r = 2; r < 5; ++r)
    for (int c = 10; c < 13; ++c) labels.at(r, c) = 2;
  const auto t = score_trial(onehot_encode(labels, 4), gt, plan, 2, 1);
  EXPECT_FALSE(t.success);
  EXPECT_EQ(t.predicted_cells, 0);
}

TEST_F(ScoreTrial, SingleOverlappingCellMeetsDefaultThreshold) {
  LabelGrid labels(16, 16, kFreeSpace);
  labels.at(4, 4) = 2;
  const auto pred = onehot_encode(labels, 4);
  EXPECT_TRUE(score_trial(pred, gt, plan, 2, 1).success);
  EXPECT_FALSE(score_trial(pred, gt, plan, 2, 2).success);
}

TEST_F(ScoreTrial, SuccessIsMonotoneInThreshold) {
  CounterRng rng(21);
  for (int i = 0; i < 50; ++i) {
    LabelGrid labels(16, 16, kFreeSpace);
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c)
        if (rng.bernoulli(0.3)) labels.at(r, c) = 2;
    const auto pred = onehot_encode(labels, 4);
    bool previous = true;
    for (int k = 1; k <= 10; ++k) {
      const bool s = score_trial(pred, gt, plan, 2, k).success;
      EXPECT_TRUE(previous || !s);
      previous = s;
    }
  }
}

TEST_F(ScoreTrial, RejectsBadCategory) { EXPECT_THROW(score_trial(gt, gt, plan, 4, 1), EvalError); }

// ---------------------------------------------------------------------------
// sSR protocol with small models

class SsrProtocol : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    tokenizer = new BitVae(tiny_bit(), 5);
    model = new Maskformer(tiny_mt(*tokenizer), 6);
    maps = new std::vector<SemanticMap>(small_maps(12, 7));
  }
  static void TearDownTestSuite() {
    delete model;
    delete tokenizer;
    delete maps;
  }
  static BitVae* tokenizer;
  static Maskformer* model;
  static std::vector<SemanticMap>* maps;
};
BitVae* SsrProtocol::tokenizer = nullptr;
Maskformer* SsrProtocol::model = nullptr;
std::vector<SemanticMap>* SsrProtocol::maps = nullptr;

TEST_F(SsrProtocol, TrialsCycleMapsAndAccountForEveryTrial) {
  SsrOptions o;
  o.trials = 30;
  o.seed = 3;
  o.threads = 2;
  const auto r = ssr(*tokenizer, *model, *maps, o);
  ASSERT_EQ(r.trials.size(), 30u);
  EXPECT_EQ(r.evaluated + r.skipped, 30);
  Counts pooled, per_channel;
  for (const auto& t : r.trials) {
    EXPECT_EQ(t.map_index, t.trial % 12);
    if (t.skipped) continue;
    pooled += t.metrics.counts;
    EXPECT_TRUE(present_objects((*maps)[static_cast<std::size_t>(t.map_index)]).size() > 0);
    EXPECT_GE(t.category, kFirstObject);
    EXPECT_EQ(t.truth_cells > 0, true);  // every target cell is masked
  }
  for (const auto& c : r.channel_counts) per_channel += c;
  EXPECT_TRUE(r.pooled.counts == pooled);
  EXPECT_TRUE(per_channel == pooled);
  EXPECT_NEAR(r.ssr, r.evaluated ? static_cast<double>(r.successes) / r.evaluated : 0.0, 1e-12);
}

TEST_F(SsrProtocol, DeterministicAcrossThreadCounts) {
  SsrOptions o;
  o.trials = 24;
  o.seed = 9;
  o.threads = 1;
  const auto a = ssr(*tokenizer, *model, *maps, o);
  o.threads = 3;
  const auto b = ssr(*tokenizer, *model, *maps, o);
  EXPECT_EQ(a.successes, b.successes);
  EXPECT_TRUE(a.pooled.counts == b.pooled.counts);
  for (std::size_t i = 0; i < a.trials.size(); ++i) EXPECT_EQ(a.trials[i].overlap, b.trials[i].overlap);
}

TEST_F(SsrProtocol, EmptyInputsRejected) {
  SsrOptions o;
  EXPECT_THROW(ssr(*tokenizer, *model, std::span<const SemanticMap>{}, o), EvalError);
  o.trials = 0;
  EXPECT_THROW(ssr(*tokenizer, *model, *maps, o), ConfigError);
}

TEST_F(SsrProtocol, MapsWithoutObjectsAreSkipped) {
  const std::vector<SemanticMap> plain{uniform_map(32, 32, 6, kFreeSpace)};
  SsrOptions o;
  o.trials = 3;
  const auto r = ssr(*tokenizer, *model, plain, o);
  EXPECT_EQ(r.skipped, 3);
  EXPECT_EQ(r.evaluated, 0);
  EXPECT_DOUBLE_EQ(r.ssr, 0.0);
}

TEST_F(SsrProtocol, RestorationNearChanceForUntrainedModel) {
  // An untrained transformer picks tokens essentially at random; with 64
  // tokens and 12 maps x 8 masked positions the count is Binomial(96, 1/64).
  const double acc = restoration_accuracy(*tokenizer, *model, *maps, 0.5, 4);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 0.12);
}

// ---------------------------------------------------------------------------
// Reports

TEST_F(SsrProtocol, ReportsCarryEveryTrialAndBoundedPercentages) {
  SsrOptions o;
  o.trials = 10;
  o.seed = 1;
  const auto r = ssr(*tokenizer, *model, *maps, o);
  const auto report = make_report("tiny", r, 0.25, "abc123", 77, 1, CategoryPalette::indoor_default());
  const std::string jsonl = report_jsonl(report);
  std::istringstream in(jsonl);
  std::string line;
  int lines = 0;
  nlohmann::json last;
  while (std::getline(in, line)) {
    last = nlohmann::json::parse(line);
    EXPECT_EQ(last["fingerprint"], "abc123");
    EXPECT_EQ(last["seed"], 77);
    ++lines;
  }
  EXPECT_EQ(lines, 11);
  EXPECT_EQ(last["type"], "summary");
  for (const char* k : {"iou", "recall", "precision", "f1"}) {
    EXPECT_GE(last["metrics"][k].get<double>(), 0.0);
    EXPECT_LE(last["metrics"][k].get<double>(), 100.0);
  }
  EXPECT_DOUBLE_EQ(last["restoration_accuracy"].get<double>(), 25.0);
  EXPECT_EQ(last["per_category"].size(), 6u);
  const std::vector<EvalReport> reports{report};
  EXPECT_NE(report_table(reports).find("tiny"), std::string::npos);
}

TEST(Reports, ComparisonPanelHasThreePanels) {
  const auto gt = uniform_map(8, 8, 6, kFreeSpace);
  const auto panel = comparison_panel(gt, PartialMap(gt), gt, CategoryPalette::indoor_default(), 2);
  EXPECT_EQ(panel.height, 16);
  EXPECT_EQ(panel.width, 3 * 16 + 2 * 4);
}

// ---------------------------------------------------------------------------
// Ablations

TEST(Ablation, DefaultGridCoversBothTokenizersAndMaskings) {
  const auto grid = default_ablation_grid();
  EXPECT_EQ(grid.size(), 12u);
  int objects = 0, bits = 0;
  for (const auto& c : grid) {
    objects += c.object_aware;
    bits += c.tokenizer == TokenizerKind::kBitVae;
  }
  EXPECT_EQ(objects, 6);
  EXPECT_EQ(bits, 6);
  EXPECT_EQ(grid[1].name(), "BitVAE b=5 O");
}

AblationSettings tiny_settings() {
  AblationSettings s;
  s.bitvae = tiny_bit();
  s.vqvae.height = 32;
  s.vqvae.width = 32;
  s.vqvae.encoder_width = 16;
  s.vqvae.decoder_width = 16;
  s.vqvae.decoder_blocks = 1;
  s.vqvae.upsample_width = 8;
  s.tokenizer_train.epochs = 1;
  s.tokenizer_train.batch_size = 4;
  s.maskformer.d_model = 32;
  s.maskformer.layers = 1;
  s.maskformer.heads = 2;
  s.maskformer.ffn_width = 64;
  s.maskformer_train.epochs = 1;
  s.maskformer_train.batch_size = 4;
  s.maskformer_train.warmup_steps = 1;
  s.ssr.trials = 8;
  s.ssr.seed = 5;
  s.seed = 42;
  s.threads = 2;
  return s;
}

TEST(Ablation, SingleCellMatchesDirectEvaluation) {
  const auto train = small_maps(8, 1), val = small_maps(4, 2), eval = small_maps(6, 3);
  const auto s = tiny_settings();
  const std::vector<AblationCell> grid{{TokenizerKind::kBitVae, 6, true}};
  const auto rows = ablation_run(grid, s, train, val, eval, CategoryPalette::indoor_default(), "fp");
  ASSERT_EQ(rows.size(), 1u);
  ASSERT_TRUE(rows[0].ok) << rows[0].error;

  const std::uint64_t tok_seed = CounterRng::derive(s.seed, 100);
  BitVae tok(s.bitvae, tok_seed);
  TrainConfig tc = s.tokenizer_train;
  tc.seed = tok_seed;
  train_bitvae(tok, train, val, tc);
  const std::uint64_t mt_seed = CounterRng::derive(s.seed, 1000);
  MaskformerConfig mc = tiny_mt(tok);
  mc.d_model = 32;
  Maskformer mt(mc, mt_seed);
  MaskformerTrainConfig mtc = s.maskformer_train;
  mtc.seed = mt_seed;
  train_maskformer(mt, tok, train, val, mtc);
  SsrOptions so = s.ssr;
  so.threads = 1;
  const auto direct = ssr(tok, mt, eval, so);
  EXPECT_EQ(rows[0].report.successes, direct.successes);
  EXPECT_TRUE(rows[0].report.metrics.counts == direct.pooled.counts);
  EXPECT_DOUBLE_EQ(rows[0].report.restoration, restoration_accuracy(tok, mt, eval, 0.5, s.ssr.seed));
}

TEST(Ablation, FailingCellIsReportedAndOthersContinue) {
  const auto train = small_maps(4, 1), val = small_maps(2, 2), eval = small_maps(2, 3);
  auto s = tiny_settings();
  s.vqvae.codebook_size = 48;  // overwritten per cell below
  const std::vector<AblationCell> grid{{TokenizerKind::kVqVae, 48, false}, {TokenizerKind::kBitVae, 5, false}};
  const auto rows = ablation_run(grid, s, train, val, eval, CategoryPalette::indoor_default(), "fp");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_FALSE(rows[0].ok);
  EXPECT_FALSE(rows[0].error.empty());
  EXPECT_TRUE(rows[1].ok) << rows[1].error;
  const std::string table = ablation_table(rows);
  EXPECT_NE(table.find("failed"), std::string::npos);
  EXPECT_NE(table.find("BitVAE b=5 R"), std::string::npos);
}

}  // namespace
}  // namespace mapbert
