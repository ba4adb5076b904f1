#include "mapbert/eval.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <map>
#include <memory>
#include <mutex>
#include <thread>

#include "mapbert/error.hpp"

namespace mapbert {

// ---------------------------------------------------------------------------
// Metrics

namespace {

void check_same_geometry(const SemanticMap& pred, const SemanticMap& gt) {
  if (pred.height() != gt.height() || pred.width() != gt.width() || pred.channels() != gt.channels())
    throw DataError(fmt::format("prediction is {}x{}x{}, ground truth is {}x{}x{}", pred.height(), pred.width(),
                                pred.channels(), gt.height(), gt.width(), gt.channels()));
}

}  // namespace

std::vector<Counts> channel_counts(const SemanticMap& pred, const SemanticMap& gt) {
  check_same_geometry(pred, gt);
  const int c = gt.channels();
  std::vector<Counts> out(static_cast<std::size_t>(c));
  const auto& p = pred.data();
  const auto& g = gt.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& k = out[i % static_cast<std::size_t>(c)];
    if (p[i] && g[i]) {
      ++k.tp;
    } else if (p[i]) {
      ++k.fp;
    } else if (g[i]) {
      ++k.fn;
    }
  }
  return out;
}

Counts map_counts(const SemanticMap& pred, const SemanticMap& gt) {
  Counts total;
  for (const auto& c : channel_counts(pred, gt)) total += c;
  return total;
}

MapMetrics metrics_from_counts(const Counts& c) {
  MapMetrics m;
  m.counts = c;
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  m.iou = c.tp + c.fp + c.fn == 0 ? 1.0 : tp / (tp + fp + fn);
  m.precision = c.tp + c.fp == 0 ? (c.tp + c.fn == 0 ? 1.0 : 0.0) : tp / (tp + fp);
  m.recall = c.tp + c.fn == 0 ? (c.tp + c.fp == 0 ? 1.0 : 0.0) : tp / (tp + fn);
  m.f1 = m.precision + m.recall == 0 ? 0.0 : 2 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

MapMetrics map_metrics(const SemanticMap& pred, const SemanticMap& gt) { return metrics_from_counts(map_counts(pred, gt)); }

// ---------------------------------------------------------------------------
// Parallel helpers

int worker_threads() {
  if (const char* env = std::getenv("MAPBERT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<int>(std::min<long>(v, 1024));
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < n && !failed; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// sSR

SsrTrial score_trial(const SemanticMap& pred, const SemanticMap& gt, const MaskPlan& plan, int category,
                     int min_overlap) {
  check_same_geometry(pred, gt);
  if (category < 0 || category >= gt.channels())
    throw EvalError(fmt::format("target category {} outside [0, {})", category, gt.channels()));
  SsrTrial t;
  t.category = category;
  const int p = plan.patch_size();
  for (int r = 0; r < gt.height(); ++r)
    for (int c = 0; c < gt.width(); ++c) {
      if (!plan.is_masked(r / p, c / p)) continue;
      ++t.masked_cells;
      const bool predicted = pred.at(r, c, category) != 0, truth = gt.at(r, c, category) != 0;
      t.predicted_cells += predicted;
      t.truth_cells += truth;
      t.overlap += predicted && truth;
    }
  t.success = t.overlap >= std::max(1, min_overlap);
  t.channels = channel_counts(pred, gt);
  Counts total;
  for (const auto& c : t.channels) total += c;
  t.metrics = metrics_from_counts(total);
  return t;
}

SsrResult ssr(const Tokenizer& tokenizer, const Maskformer& model, std::span<const SemanticMap> maps,
              const SsrOptions& options) {
  if (maps.empty()) throw EvalError("sSR needs at least one evaluation map");
  if (options.trials < 1) throw ConfigError("sSR needs at least one trial");
  const auto& geo = tokenizer.geometry();
  const int patches = geo.grid_rows() * geo.grid_cols();
  const int count = masked_patch_count(options.mask_ratio, patches);

  SsrResult result;
  result.trials.resize(static_cast<std::size_t>(options.trials));
  const int threads = options.threads > 0 ? options.threads : worker_threads();
  parallel_for(result.trials.size(), threads, [&](std::size_t i) {
    auto& out = result.trials[i];
    const std::size_t map_index = i % maps.size();
    const auto& gt = maps[map_index];
    CounterRng rng(CounterRng::derive(options.seed, i));
    const auto present = present_objects(gt);
    if (present.empty()) {
      out.trial = static_cast<int>(i);
      out.map_index = static_cast<int>(map_index);
      out.skipped = true;
      return;
    }
    const int category = present[static_cast<std::size_t>(rng.below(present.size()))];
    const MaskPlan plan = object_mask_plan(gt, geo.patch_size, category, count, rng);
    const PartialMap partial = apply_mask(gt, plan);
    const auto target = options.null_target ? std::optional<int>{} : std::optional<int>{category};
    const SemanticMap pred = generate(tokenizer, model, partial, target, options.generate);
    out = score_trial(pred, gt, plan, category, options.min_overlap);
    out.trial = static_cast<int>(i);
    out.map_index = static_cast<int>(map_index);
  });

  Counts pooled;
  result.channel_counts.assign(static_cast<std::size_t>(geo.channels), Counts{});
  for (const auto& t : result.trials) {
    if (t.skipped) {
      ++result.skipped;
      continue;
    }
    ++result.evaluated;
    result.successes += t.success;
    pooled += t.metrics.counts;
    for (std::size_t c = 0; c < t.channels.size() && c < result.channel_counts.size(); ++c)
      result.channel_counts[c] += t.channels[c];
  }
  result.pooled = metrics_from_counts(pooled);
  result.ssr = result.evaluated == 0 ? 0.0 : static_cast<double>(result.successes) / result.evaluated;
  return result;
}

double restoration_accuracy(const Tokenizer& tokenizer, const Maskformer& model, std::span<const SemanticMap> maps,
                            double ratio, std::uint64_t seed) {
  if (maps.empty()) throw EvalError("restoration accuracy needs at least one map");
  const auto grids = tokenizer.tokenize(maps);
  return restoration_accuracy(model, grids, ratio, seed);
}

// ---------------------------------------------------------------------------
// Reports

EvalReport make_report(const std::string& name, const SsrResult& result, double restoration,
                       const std::string& fingerprint, std::uint64_t seed, int min_overlap,
                       const CategoryPalette& palette) {
  EvalReport r;
  r.name = name;
  r.fingerprint = fingerprint;
  r.seed = seed;
  r.metrics = result.pooled;
  for (const auto& c : result.channel_counts) r.per_category.push_back(metrics_from_counts(c));
  (void)palette;
  r.ssr = result.ssr;
  r.restoration = restoration;
  r.trials = result.evaluated;
  r.successes = result.successes;
  r.skipped = result.skipped;
  r.ssr_rule = fmt::format("success when at least {} masked cell(s) are predicted as the target and hold it in the "
                           "ground truth",
                           std::max(1, min_overlap));
  r.details = result.trials;
  return r;
}

namespace {

double pct(double x) { return std::clamp(100.0 * x, 0.0, 100.0); }

nlohmann::json metrics_json(const MapMetrics& m) {
  return {{"iou", pct(m.iou)},
          {"recall", pct(m.recall)},
          {"precision", pct(m.precision)},
          {"f1", pct(m.f1)},
          {"tp", m.counts.tp},
          {"fp", m.counts.fp},
          {"fn", m.counts.fn}};
}

}  // namespace

nlohmann::json summary_json(const EvalReport& report) {
  nlohmann::json j = {{"type", "summary"},
                      {"name", report.name},
                      {"fingerprint", report.fingerprint},
                      {"seed", report.seed},
                      {"metrics", metrics_json(report.metrics)},
                      {"ssr", pct(report.ssr)},
                      {"restoration_accuracy", pct(report.restoration)},
                      {"trials", report.trials},
                      {"successes", report.successes},
                      {"skipped", report.skipped},
                      {"ssr_rule", report.ssr_rule}};
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t c = 0; c < report.per_category.size(); ++c) {
    auto m = metrics_json(report.per_category[c]);
    m["channel"] = c;
    per.push_back(m);
  }
  j["per_category"] = per;
  return j;
}

std::string report_jsonl(const EvalReport& report) {
  std::string out;
  for (const auto& t : report.details) {
    nlohmann::json j = {{"type", "trial"},          {"name", report.name},
                        {"fingerprint", report.fingerprint}, {"seed", report.seed},
                        {"trial", t.trial},         {"map", t.map_index},
                        {"skipped", t.skipped}};
    if (!t.skipped) {
      j["category"] = t.category;
      j["success"] = t.success;
      j["overlap"] = t.overlap;
      j["predicted_cells"] = t.predicted_cells;
      j["truth_cells"] = t.truth_cells;
      j["masked_cells"] = t.masked_cells;
      j["metrics"] = metrics_json(t.metrics);
    } else {
      j["reason"] = "map contains no object category";
    }
    out += j.dump() + "\n";
  }
  out += summary_json(report).dump() + "\n";
  return out;
}

std::string report_table(std::span<const EvalReport> reports) {
  std::string out = fmt::format("{:<28} {:>8} {:>8} {:>10} {:>8} {:>8} {:>12}\n", "Model", "IoU", "Recall",
                                "Precision", "F1", "sSR", "Restoration");
  for (const auto& r : reports)
    out += fmt::format("{:<28} {:>8.2f} {:>8.2f} {:>10.2f} {:>8.2f} {:>8.2f} {:>12.2f}\n", r.name, pct(r.metrics.iou),
                       pct(r.metrics.recall), pct(r.metrics.precision), pct(r.metrics.f1), pct(r.ssr),
                       pct(r.restoration));
  return out;
}

RgbImage comparison_panel(const SemanticMap& gt, const PartialMap& masked, const SemanticMap& pred,
                          const CategoryPalette& palette, int cell_pixels) {
  const std::vector<RgbImage> panels{render(gt, palette, cell_pixels), render(masked, palette, cell_pixels),
                                     render(pred, palette, cell_pixels)};
  return hstack(panels, 2 * cell_pixels);
}

// ---------------------------------------------------------------------------
// Ablations

std::string AblationCell::name() const {
  return fmt::format("{} {}={} {}", tokenizer == TokenizerKind::kBitVae ? "BitVAE" : "VQVAE",
                     tokenizer == TokenizerKind::kBitVae ? "b" : "N", size, object_aware ? "O" : "R");
}

std::vector<AblationCell> default_ablation_grid() {
  std::vector<AblationCell> grid;
  for (int b : {5, 6, 7})
    for (bool o : {false, true}) grid.push_back({TokenizerKind::kBitVae, b, o});
  for (int n : {32, 64, 128})
    for (bool o : {false, true}) grid.push_back({TokenizerKind::kVqVae, n, o});
  return grid;
}

std::vector<AblationRow> ablation_run(std::span<const AblationCell> grid, const AblationSettings& settings,
                                      std::span<const SemanticMap> train, std::span<const SemanticMap> val,
                                      std::span<const SemanticMap> eval_maps, const CategoryPalette& palette,
                                      const std::string& fingerprint) {
  const int threads = settings.threads > 0 ? settings.threads : worker_threads();
  // Distinct tokenizers, keyed by (kind, size), trained once each.
  std::map<std::pair<int, int>, std::size_t> key_index;
  std::vector<std::pair<TokenizerKind, int>> keys;
  for (const auto& c : grid) {
    const auto key = std::pair{static_cast<int>(c.tokenizer), c.size};
    if (key_index.emplace(key, keys.size()).second) keys.emplace_back(c.tokenizer, c.size);
  }
  std::vector<std::unique_ptr<Tokenizer>> tokenizers(keys.size());
  std::vector<std::string> tokenizer_errors(keys.size());
  parallel_for(keys.size(), threads, [&](std::size_t k) {
    const auto [kind, size] = keys[k];
    const std::uint64_t seed = CounterRng::derive(settings.seed, 100 + k);
    TrainConfig tc = settings.tokenizer_train;
    tc.seed = seed;
    try {
      if (kind == TokenizerKind::kBitVae) {
        BitVaeConfig cfg = settings.bitvae;
        cfg.bits = size;
        auto model = std::make_unique<BitVae>(cfg, seed);
        train_bitvae(*model, train, val, tc);
        tokenizers[k] = std::move(model);
      } else {
        VqConfig cfg = settings.vqvae;
        cfg.codebook_size = size;
        auto model = std::make_unique<VqVae>(cfg, seed);
        model->init_codebook_from(train, CounterRng::derive(seed, 1));
        train_vqvae(*model, train, val, tc);
        tokenizers[k] = std::move(model);
      }
    } catch (const std::exception& e) {
      tokenizer_errors[k] = std::string("tokenizer training failed: ") + e.what();
    }
  });

  std::vector<AblationRow> rows(grid.size());
  parallel_for(grid.size(), threads, [&](std::size_t i) {
    auto& row = rows[i];
    row.cell = grid[i];
    const std::size_t k = key_index.at({static_cast<int>(row.cell.tokenizer), row.cell.size});
    if (!tokenizers[k]) {
      row.error = tokenizer_errors[k];
      return;
    }
    try {
      const Tokenizer& tok = *tokenizers[k];
      MaskformerConfig mc = settings.maskformer;
      mc.grid_rows = tok.geometry().grid_rows();
      mc.grid_cols = tok.geometry().grid_cols();
      mc.codebook = tok.codebook_size();
      mc.categories = tok.geometry().channels;
      mc.p_obj = row.cell.object_aware ? settings.maskformer.p_obj : 0.0;
      const std::uint64_t seed = CounterRng::derive(settings.seed, 1000 + i);
      Maskformer model(mc, seed);
      MaskformerTrainConfig tc = settings.maskformer_train;
      tc.seed = seed;
      train_maskformer(model, tok, train, val, tc);
      SsrOptions so = settings.ssr;
      so.threads = 1;  // cells already run in parallel
      const auto result = ssr(tok, model, eval_maps, so);
      const double restoration =
          restoration_accuracy(tok, model, eval_maps, settings.restoration_ratio, settings.ssr.seed);
      row.report = make_report(row.cell.name(), result, restoration, fingerprint, settings.seed, so.min_overlap, palette);
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
  });
  return rows;
}

std::string ablation_table(std::span<const AblationRow> rows) {
  std::string out = fmt::format("{:<20} {:>8} {:>8} {:>10} {:>8} {:>8} {:>12}\n", "Method", "IoU", "Recall",
                                "Precision", "F1", "sSR", "Restoration");
  for (const auto& r : rows) {
    if (!r.ok) {
      out += fmt::format("{:<20} failed: {}\n", r.cell.name(), r.error);
      continue;
    }
    const auto& m = r.report.metrics;
    out += fmt::format("{:<20} {:>8.2f} {:>8.2f} {:>10.2f} {:>8.2f} {:>8.2f} {:>12.2f}\n", r.cell.name(), pct(m.iou),
                       pct(m.recall), pct(m.precision), pct(m.f1), pct(r.report.ssr), pct(r.report.restoration));
  }
  return out;
}

}  // namespace mapbert
