#pragma once

// Evaluation: pooled map metrics, the object-aware sSR protocol, token
// restoration accuracy, JSON-lines / text reports and the ablation harness.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mapbert/map_core.hpp"
#include "mapbert/maskformer.hpp"
#include "mapbert/quantizers.hpp"

namespace mapbert {

// ---------------------------------------------------------------------------
// Metrics

struct Counts {
  std::uint64_t tp = 0, fp = 0, fn = 0;
  Counts& operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const Counts&, const Counts&) = default;
};

struct MapMetrics {
  double iou = 0, recall = 0, precision = 0, f1 = 0;
  Counts counts;
};

/// TP/FP/FN over every (cell, channel) activation. Throws DataError on a
/// geometry mismatch.
Counts map_counts(const SemanticMap& pred, const SemanticMap& gt);
/// Per channel counts, index = channel id.
std::vector<Counts> channel_counts(const SemanticMap& pred, const SemanticMap& gt);

/// Ratios from pooled counts. With no predicted positives precision is 1 when
/// there is nothing to find and 0 otherwise; recall mirrors this; f1 is 0
/// when precision + recall is 0.
MapMetrics metrics_from_counts(const Counts& c);
MapMetrics map_metrics(const SemanticMap& pred, const SemanticMap& gt);

// ---------------------------------------------------------------------------
// Parallel helpers

/// Worker count: MAPBERT_THREADS when set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
int worker_threads();

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Exceptions are
/// rethrown on the calling thread after all workers stop.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

// ---------------------------------------------------------------------------
// sSR protocol

struct SsrOptions {
  int trials = 1000;
  double mask_ratio = 0.5;
  /// A trial succeeds when at least this many masked cells are predicted as
  /// the target and also hold it in the ground truth.
  int min_overlap = 1;
  /// Condition on the null row instead of the target category.
  bool null_target = false;
  GenerateOptions generate;
  std::uint64_t seed = 0;
  int threads = 0;  // 0 = worker_threads()
};

struct SsrTrial {
  int trial = 0;
  int map_index = 0;
  int category = -1;  // -1 when skipped
  bool skipped = false;
  bool success = false;
  int overlap = 0;          // predicted-and-true target cells inside the mask
  int predicted_cells = 0;  // predicted target cells inside the mask
  int truth_cells = 0;      // true target cells inside the mask
  int masked_cells = 0;
  MapMetrics metrics;       // whole predicted map against ground truth
  std::vector<Counts> channels;
};

struct SsrResult {
  double ssr = 0;  // successes / evaluated trials
  int evaluated = 0, successes = 0, skipped = 0;
  MapMetrics pooled;  // counts pooled over evaluated trials
  std::vector<Counts> channel_counts;
  std::vector<SsrTrial> trials;
};

/// Trial i uses eval map i mod |maps|: a present object category is chosen,
/// all its patches plus random ones up to the mask ratio are hidden, and the
/// map is completed with that category as target.
SsrResult ssr(const Tokenizer& tokenizer, const Maskformer& model, std::span<const SemanticMap> maps,
              const SsrOptions& options);

/// Success rule applied to one prediction.
SsrTrial score_trial(const SemanticMap& pred, const SemanticMap& gt, const MaskPlan& plan, int category,
                     int min_overlap);

/// Top-1 restoration accuracy after tokenizing `maps` with `tokenizer`.
double restoration_accuracy(const Tokenizer& tokenizer, const Maskformer& model, std::span<const SemanticMap> maps,
                            double ratio, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
  std::string name;
  std::string fingerprint;
  std::uint64_t seed = 0;
  MapMetrics metrics;
  std::vector<MapMetrics> per_category;
  double ssr = 0;
  double restoration = 0;
  int trials = 0, successes = 0, skipped = 0;
  std::string ssr_rule;
  std::vector<SsrTrial> details;
};

EvalReport make_report(const std::string& name, const SsrResult& result, double restoration,
                       const std::string& fingerprint, std::uint64_t seed, int min_overlap,
                       const CategoryPalette& palette);

/// Summary object with percentages in [0, 100].
nlohmann::json summary_json(const EvalReport& report);
/// One JSON object per line: every trial, then the summary.
std::string report_jsonl(const EvalReport& report);
/// Plain-text table with one row per report.
std::string report_table(std::span<const EvalReport> reports);

/// Ground truth | masked input | prediction.
RgbImage comparison_panel(const SemanticMap& gt, const PartialMap& masked, const SemanticMap& pred,
                          const CategoryPalette& palette, int cell_pixels = 4);

// ---------------------------------------------------------------------------
// Ablations

enum class TokenizerKind { kBitVae, kVqVae };

struct AblationCell {
  TokenizerKind tokenizer = TokenizerKind::kBitVae;
  int size = 6;  // bits for BitVAE, codebook entries for VQ
  bool object_aware = true;
  std::string name() const;
};

/// BitVAE b in {5, 6, 7} and VQ N in {32, 64, 128}, each with random and
/// object-aware masking.
std::vector<AblationCell> default_ablation_grid();

struct AblationSettings {
  BitVaeConfig bitvae;
  VqConfig vqvae;
  TrainConfig tokenizer_train;
  MaskformerConfig maskformer;
  MaskformerTrainConfig maskformer_train;
  SsrOptions ssr;
  double restoration_ratio = 0.5;
  std::uint64_t seed = 0;
  int threads = 0;
};

struct AblationRow {
  AblationCell cell;
  bool ok = false;
  std::string error;
  EvalReport report;
};

/// Trains one tokenizer per distinct (kind, size) and one transformer per
/// cell, then evaluates each. A failing cell records its error and the run
/// continues.
std::vector<AblationRow> ablation_run(std::span<const AblationCell> grid, const AblationSettings& settings,
                                      std::span<const SemanticMap> train, std::span<const SemanticMap> val,
                                      std::span<const SemanticMap> eval_maps, const CategoryPalette& palette,
                                      const std::string& fingerprint);

/// Table with IoU / Recall / Precision / F1 / sSR per row.
std::string ablation_table(std::span<const AblationRow> rows);

}  // namespace mapbert
