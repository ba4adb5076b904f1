#include "mapbert/maskformer.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "mapbert/error.hpp"
#include "mapbert/nn/adam.hpp"
#include "mapbert/nn/ops.hpp"

namespace mapbert {

using nn::Tensorf;

// ---------------------------------------------------------------------------
// Configuration

MaskformerConfig MaskformerConfig::vit_base(int grid_rows, int grid_cols, int codebook, int categories) {
  MaskformerConfig c;
  c.d_model = 768;
  c.layers = 12;
  c.heads = 12;
  c.ffn_width = 3072;
  c.grid_rows = grid_rows;
  c.grid_cols = grid_cols;
  c.codebook = codebook;
  c.categories = categories;
  return c;
}

MaskformerConfig MaskformerConfig::vit_large(int grid_rows, int grid_cols, int codebook, int categories) {
  MaskformerConfig c = vit_base(grid_rows, grid_cols, codebook, categories);
  c.d_model = 1024;
  c.layers = 24;
  c.heads = 16;
  c.ffn_width = 4096;
  return c;
}

void validate(const MaskformerConfig& cfg) {
  if (cfg.d_model < 1 || cfg.heads < 1 || cfg.d_model % cfg.heads != 0)
    throw ConfigError(fmt::format("d_model {} must be a positive multiple of heads {}", cfg.d_model, cfg.heads));
  if (cfg.layers < 1 || cfg.ffn_width < 1) throw ConfigError("layers and ffn_width must be >= 1");
  if (cfg.grid_rows < 1 || cfg.grid_cols < 1) throw ConfigError("token grid must be at least 1x1");
  if (cfg.codebook < 2) throw ConfigError(fmt::format("codebook must be >= 2, got {}", cfg.codebook));
  if (cfg.categories < 1) throw ConfigError("categories must be >= 1");
  if (!(cfg.p_obj >= 0.0 && cfg.p_obj <= 1.0)) throw ConfigError(fmt::format("p_obj must lie in [0, 1], got {}", cfg.p_obj));
  if (cfg.iterations < 1) throw ConfigError("iterations must be >= 1");
}

// ---------------------------------------------------------------------------
// Masking

double mask_ratio(double t, double total, CounterRng& rng) {
  if (!(total > 0) || !(t >= 0) || t > total)
    throw ConfigError(fmt::format("mask_ratio needs 0 <= t <= T with T > 0, got t={} T={}", t, total));
  const double boundary = total / 4.0;
  if (t < boundary) return rng.uniform(0.15, 0.20);
  const double u = (t - boundary) / (total - boundary);
  return 0.15 + 0.60 * (1.0 - std::cos(std::numbers::pi * u)) / 2.0;
}

int masked_patch_count(double ratio, int patches) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError(fmt::format("mask ratio must lie in (0, 1], got {}", ratio));
  // The small slack keeps exact products such as 0.5 * 64 from rounding up.
  const int n = static_cast<int>(std::ceil(ratio * patches - 1e-9));
  return std::clamp(n, 1, patches);
}

MaskPlan random_mask_plan(int patch_size, int grid_rows, int grid_cols, int count, CounterRng& rng) {
  const int total = grid_rows * grid_cols;
  if (count < 0 || count > total) throw ConfigError(fmt::format("cannot mask {} of {} patches", count, total));
  std::vector<int> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<PatchCoord> chosen;
  for (int i = 0; i < count; ++i) chosen.push_back({order[static_cast<std::size_t>(i)] / grid_cols, order[static_cast<std::size_t>(i)] % grid_cols});
  return MaskPlan(patch_size, grid_rows, grid_cols, chosen, std::nullopt);
}

MaskPlan object_mask_plan(const SemanticMap& map, int patch_size, int category, int count, CounterRng& rng) {
  check_patch_geometry(map.height(), map.width(), patch_size);
  const int rows = map.height() / patch_size, cols = map.width() / patch_size;
  std::vector<PatchCoord> chosen = object_patches(map, category, patch_size);
  std::vector<std::uint8_t> taken(static_cast<std::size_t>(rows * cols), 0);
  for (const auto& p : chosen) taken[static_cast<std::size_t>(p.row * cols + p.col)] = 1;
  std::vector<int> rest;
  for (int i = 0; i < rows * cols; ++i)
    if (!taken[static_cast<std::size_t>(i)]) rest.push_back(i);
  rng.shuffle(rest);
  for (std::size_t i = 0; i < rest.size() && static_cast<int>(chosen.size()) < count; ++i)
    chosen.push_back({rest[i] / cols, rest[i] % cols});
  return MaskPlan(patch_size, rows, cols, chosen, category);
}

MaskPlan sample_mask_plan(const SemanticMap& map, int patch_size, double ratio, double p_obj, CounterRng& rng) {
  check_patch_geometry(map.height(), map.width(), patch_size);
  const int rows = map.height() / patch_size, cols = map.width() / patch_size;
  const int count = masked_patch_count(ratio, rows * cols);
  // The strategy coin is drawn even for maps without objects, so maps with and
  // without objects consume the stream alike up to this point.
  const bool object_aware = rng.bernoulli(p_obj);
  const auto present = present_objects(map);
  if (object_aware && !present.empty()) {
    const int category = present[static_cast<std::size_t>(rng.below(present.size()))];
    return object_mask_plan(map, patch_size, category, count, rng);
  }
  return random_mask_plan(patch_size, rows, cols, count, rng);
}

TokenGrid apply_mask(const TokenGrid& tokens, const MaskPlan& plan) {
  if (plan.grid_rows() != tokens.rows || plan.grid_cols() != tokens.cols)
    throw DataError(fmt::format("mask plan grid {}x{} does not match token grid {}x{}", plan.grid_rows(),
                                plan.grid_cols(), tokens.rows, tokens.cols));
  TokenGrid out = tokens;
  for (std::size_t i = 0; i < out.tokens.size(); ++i)
    if (plan.is_masked(i)) out.tokens[i] = out.mask_token();
  return out;
}

// ---------------------------------------------------------------------------
// Model

Maskformer::Maskformer(const MaskformerConfig& cfg, std::uint64_t seed) : cfg_((validate(cfg), cfg)) {
  CounterRng rng(seed);
  const int d = cfg.d_model, f = cfg.ffn_width;
  auto normal = [&](const std::string& name, nn::Shape shape) {
    return params_.add(name, nn::truncated_normal(std::move(shape), rng, 0.02));
  };
  auto zeros = [&](const std::string& name, int n) { return params_.add(name, Tensorf::zeros({n})); };
  auto ones = [&](const std::string& name, int n) { return params_.add(name, Tensorf::full({n}, 1.0f)); };
  token_emb_ = normal("token_emb", {cfg.codebook + 1, d});
  pos_emb_ = normal("pos_emb", {cfg.sequence() + 1, d});
  target_emb_ = normal("target_emb", {cfg.categories + 1, d});
  for (int i = 0; i < cfg.layers; ++i) {
    const std::string p = fmt::format("layer{}.", i);
    Layer l;
    l.ln1_g = ones(p + "ln1.g", d);
    l.ln1_b = zeros(p + "ln1.b", d);
    l.qkv_w = normal(p + "qkv.w", {d, 3 * d});
    l.qkv_b = zeros(p + "qkv.b", 3 * d);
    l.out_w = normal(p + "out.w", {d, d});
    l.out_b = zeros(p + "out.b", d);
    l.ln2_g = ones(p + "ln2.g", d);
    l.ln2_b = zeros(p + "ln2.b", d);
    l.ff1_w = normal(p + "ff1.w", {d, f});
    l.ff1_b = zeros(p + "ff1.b", f);
    l.ff2_w = normal(p + "ff2.w", {f, d});
    l.ff2_b = zeros(p + "ff2.b", d);
    layers_.push_back(std::move(l));
  }
  ln_f_g_ = ones("ln_f.g", d);
  ln_f_b_ = zeros("ln_f.b", d);
  head_w_ = normal("head.w", {d, cfg.codebook});
  head_b_ = zeros("head.b", cfg.codebook);
}

Tensorf Maskformer::block(const Layer& l, const Tensorf& x, int batch) const {
  const int t = cfg_.sequence() + 1, d = cfg_.d_model, h = cfg_.heads, dh = d / h;
  const Tensorf qkv = nn::linear(nn::layer_norm(x, l.ln1_g, l.ln1_b), l.qkv_w, l.qkv_b);
  const Tensorf split = nn::permute(nn::reshape(qkv, {batch, t, 3, h, dh}), {2, 0, 3, 1, 4});
  auto part = [&](int i) { return nn::reshape(nn::slice(split, 0, i, 1), {batch * h, t, dh}); };
  const Tensorf q = part(0), k = part(1), v = part(2);
  const Tensorf att = nn::softmax(nn::scale(nn::batched_matmul(q, k, true), 1.0f / std::sqrt(static_cast<float>(dh))));
  const Tensorf o = nn::reshape(nn::permute(nn::reshape(nn::batched_matmul(att, v), {batch, h, t, dh}), {0, 2, 1, 3}),
                                {batch, t, d});
  const Tensorf x1 = nn::add(x, nn::linear(o, l.out_w, l.out_b));
  const Tensorf ff = nn::linear(nn::gelu(nn::linear(nn::layer_norm(x1, l.ln2_g, l.ln2_b), l.ff1_w, l.ff1_b)), l.ff2_w,
                                l.ff2_b);
  return nn::add(x1, ff);
}

Tensorf Maskformer::forward(std::span<const TokenGrid> inputs, std::span<const std::optional<int>> targets) const {
  if (inputs.empty()) throw DataError("maskformer forward needs at least one token grid");
  if (targets.size() != inputs.size())
    throw DataError(fmt::format("{} token grids but {} targets", inputs.size(), targets.size()));
  const int b = static_cast<int>(inputs.size()), l = cfg_.sequence(), d = cfg_.d_model;
  std::vector<int> ids, target_ids, pos_ids;
  ids.reserve(static_cast<std::size_t>(b * l));
  for (int i = 0; i < b; ++i) {
    const auto& g = inputs[static_cast<std::size_t>(i)];
    if (g.rows != cfg_.grid_rows || g.cols != cfg_.grid_cols || g.codebook != cfg_.codebook)
      throw DataError(fmt::format("token grid {}x{} (codebook {}) does not match model {}x{} (codebook {})", g.rows,
                                  g.cols, g.codebook, cfg_.grid_rows, cfg_.grid_cols, cfg_.codebook));
    g.validate();
    ids.insert(ids.end(), g.tokens.begin(), g.tokens.end());
    const auto& tgt = targets[static_cast<std::size_t>(i)];
    if (tgt && (*tgt < 0 || *tgt >= cfg_.categories))
      throw DataError(fmt::format("target category {} outside [0, {})", *tgt, cfg_.categories));
    target_ids.push_back(tgt ? *tgt : cfg_.null_target());
    for (int p = 0; p <= l; ++p) pos_ids.push_back(p);
  }
  const Tensorf tok = nn::reshape(nn::embedding(token_emb_, std::span<const int>(ids)), {b, l, d});
  const Tensorf tgt = nn::reshape(nn::embedding(target_emb_, std::span<const int>(target_ids)), {b, 1, d});
  const Tensorf pos = nn::reshape(nn::embedding(pos_emb_, std::span<const int>(pos_ids)), {b, l + 1, d});
  Tensorf x = nn::add(nn::concat(tgt, tok, 1), pos);
  for (const auto& layer : layers_) x = block(layer, x, b);
  x = nn::layer_norm(nn::slice(x, 1, 1, l), ln_f_g_, ln_f_b_);
  return nn::linear(x, head_w_, head_b_);
}

Tensorf Maskformer::forward(const TokenGrid& input, std::optional<int> target) const {
  const Tensorf logits = forward(std::span(&input, 1), std::span(&target, 1));
  return nn::reshape(logits, {cfg_.sequence(), cfg_.codebook});
}

nn::Checkpoint Maskformer::checkpoint() const {
  nn::Checkpoint ck;
  ck.config = {{"kind", "maskformer"},
               {"d_model", cfg_.d_model},
               {"layers", cfg_.layers},
               {"heads", cfg_.heads},
               {"ffn_width", cfg_.ffn_width},
               {"grid_rows", cfg_.grid_rows},
               {"grid_cols", cfg_.grid_cols},
               {"codebook", cfg_.codebook},
               {"categories", cfg_.categories},
               {"p_obj", cfg_.p_obj},
               {"decode", cfg_.decode == DecodeMode::kIterative ? "iterative" : "single"},
               {"iterations", cfg_.iterations}};
  nn::capture(params_, ck);
  return ck;
}

Maskformer Maskformer::from_checkpoint(const nn::Checkpoint& ck) {
  if (ck.config.value("kind", "") != "maskformer") throw DataError("checkpoint does not hold a maskformer");
  MaskformerConfig cfg;
  try {
    const auto& j = ck.config;
    cfg.d_model = j.at("d_model");
    cfg.layers = j.at("layers");
    cfg.heads = j.at("heads");
    cfg.ffn_width = j.at("ffn_width");
    cfg.grid_rows = j.at("grid_rows");
    cfg.grid_cols = j.at("grid_cols");
    cfg.codebook = j.at("codebook");
    cfg.categories = j.at("categories");
    cfg.p_obj = j.at("p_obj");
    cfg.decode = j.at("decode") == "iterative" ? DecodeMode::kIterative : DecodeMode::kSinglePass;
    cfg.iterations = j.at("iterations");
    validate(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("maskformer checkpoint config is incomplete: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("maskformer checkpoint config is invalid: ") + e.what());
  }
  Maskformer m(cfg, 0);
  nn::restore(m.params_, ck);
  return m;
}

Tensorf mt_loss(const Tensorf& logits, std::span<const TokenGrid> truth, std::span<const MaskPlan> plans) {
  if (logits.rank() != 3 || static_cast<std::size_t>(logits.dim(0)) != truth.size() || truth.size() != plans.size())
    throw ShapeError(fmt::format("mt_loss: logits {} with {} grids and {} plans", nn::shape_str(logits.shape()),
                                 truth.size(), plans.size()));
  const int b = logits.dim(0), l = logits.dim(1), k = logits.dim(2);
  std::vector<int> rows, targets;
  for (int i = 0; i < b; ++i) {
    const auto& g = truth[static_cast<std::size_t>(i)];
    const auto& p = plans[static_cast<std::size_t>(i)];
    if (static_cast<int>(g.tokens.size()) != l || p.grid_rows() * p.grid_cols() != l)
      throw ShapeError(fmt::format("mt_loss: sample {} does not have {} positions", i, l));
    for (int pos = 0; pos < l; ++pos) {
      if (!p.is_masked(static_cast<std::size_t>(pos))) continue;
      rows.push_back(i * l + pos);
      targets.push_back(g.tokens[static_cast<std::size_t>(pos)]);
    }
  }
  if (rows.empty()) throw DataError("mt_loss is undefined when no position is masked");
  const Tensorf picked = nn::gather_rows(nn::reshape(logits, {b * l, k}), std::span<const int>(rows));
  return nn::cross_entropy(picked, std::span<const int>(targets));
}

// ---------------------------------------------------------------------------
// Inference helpers

namespace {

constexpr std::size_t kEvalBatch = 64;

int argmax_row(std::span<const float> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

void check_tokenizer_match(const Tokenizer& tokenizer, const MaskformerConfig& cfg) {
  const auto& g = tokenizer.geometry();
  if (g.grid_rows() != cfg.grid_rows || g.grid_cols() != cfg.grid_cols || tokenizer.codebook_size() != cfg.codebook)
    throw DataError(fmt::format("tokenizer grid {}x{} (codebook {}) does not match maskformer {}x{} (codebook {})",
                                g.grid_rows(), g.grid_cols(), tokenizer.codebook_size(), cfg.grid_rows, cfg.grid_cols,
                                cfg.codebook));
}

}  // namespace

double restoration_accuracy(const Maskformer& model, std::span<const TokenGrid> truth, double ratio,
                            std::uint64_t seed) {
  const auto& cfg = model.config();
  const int count = masked_patch_count(ratio, cfg.sequence());
  std::size_t correct = 0, total = 0;
  nn::NoGradGuard guard;
  for (std::size_t start = 0; start < truth.size(); start += kEvalBatch) {
    const std::size_t len = std::min(kEvalBatch, truth.size() - start);
    std::vector<TokenGrid> inputs;
    std::vector<MaskPlan> plans;
    for (std::size_t i = 0; i < len; ++i) {
      // Seeding from the grid content keeps the statistic independent of map order.
      const auto& toks = truth[start + i].tokens;
      CounterRng rng(CounterRng::derive(seed, fnv1a64(toks.data(), toks.size() * sizeof(int))));
      plans.push_back(random_mask_plan(1, cfg.grid_rows, cfg.grid_cols, count, rng));
      inputs.push_back(apply_mask(truth[start + i], plans.back()));
    }
    const std::vector<std::optional<int>> targets(len);
    const Tensorf logits = model.forward(inputs, targets);
    const auto v = logits.values();
    const std::size_t k = static_cast<std::size_t>(cfg.codebook), l = static_cast<std::size_t>(cfg.sequence());
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t p = 0; p < l; ++p) {
        if (!plans[i].is_masked(p)) continue;
        ++total;
        correct += argmax_row(v.subspan((i * l + p) * k, k)) == truth[start + i].tokens[p] ? 1 : 0;
      }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

TokenGrid complete_tokens(const Maskformer& model, const TokenGrid& tokens, std::optional<int> target,
                          DecodeMode mode, int iterations) {
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  TokenGrid out = tokens;
  std::vector<int> pending;
  for (std::size_t i = 0; i < out.tokens.size(); ++i)
    if (out.tokens[i] == out.mask_token()) pending.push_back(static_cast<int>(i));
  if (pending.empty()) return out;
  nn::NoGradGuard guard;
  const int k = model.config().codebook;
  const int rounds = mode == DecodeMode::kSinglePass ? 1 : iterations;
  const double initial = static_cast<double>(pending.size());
  for (int round = 1; round <= rounds && !pending.empty(); ++round) {
    const Tensorf logits = model.forward(out, target);
    const auto v = logits.values();
    struct Guess {
      int pos, token;
      float confidence;
    };
    std::vector<Guess> guesses;
    for (int pos : pending) {
      const auto row = v.subspan(static_cast<std::size_t>(pos) * k, static_cast<std::size_t>(k));
      const int best = argmax_row(row);
      // Softmax probability of the winner: 1 / sum_j exp(l_j - l_best).
      double z = 0;
      for (float x : row) z += std::exp(static_cast<double>(x) - row[static_cast<std::size_t>(best)]);
      guesses.push_back({pos, best, static_cast<float>(1.0 / z)});
    }
    // Cosine keep-schedule: after round r, floor(n0 * cos(pi/2 * r/K)) stay masked.
    const std::size_t remain =
        round == rounds ? 0
                        : static_cast<std::size_t>(std::floor(initial * std::cos(std::numbers::pi / 2.0 * round / rounds)));
    const std::size_t fill = std::max<std::size_t>(1, pending.size() > remain ? pending.size() - remain : 0);
    std::stable_sort(guesses.begin(), guesses.end(),
                     [](const Guess& a, const Guess& b) { return a.confidence > b.confidence; });
    pending.clear();
    for (std::size_t i = 0; i < guesses.size(); ++i) {
      if (i < fill) {
        out.tokens[static_cast<std::size_t>(guesses[i].pos)] = guesses[i].token;
      } else {
        pending.push_back(guesses[i].pos);
      }
    }
    std::sort(pending.begin(), pending.end());
  }
  return out;
}

SemanticMap generate(const Tokenizer& tokenizer, const Maskformer& model, const PartialMap& partial,
                     std::optional<int> target, const GenerateOptions& options) {
  check_tokenizer_match(tokenizer, model.config());
  const TokenGrid observed = tokenizer.tokenize_partial(partial, options.theta_obs);
  const TokenGrid completed = complete_tokens(model, observed, target, options.mode, options.iterations);
  return argmax_map(tokenizer.decode_tokens(completed));
}

// ---------------------------------------------------------------------------
// Training

MaskformerTrainResult train_maskformer(Maskformer& model, const Tokenizer& tokenizer,
                                       std::span<const SemanticMap> train, std::span<const SemanticMap> val,
                                       const MaskformerTrainConfig& cfg) {
  const auto& mc = model.config();
  check_tokenizer_match(tokenizer, mc);
  if (train.empty()) throw DataError("maskformer training needs at least one map");
  if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.lr > 0) || cfg.warmup_steps < 0 || cfg.stop_after < 0)
    throw ConfigError("epochs, batch_size and lr must be positive; warmup_steps and stop_after non-negative");
  const int patch = tokenizer.geometry().patch_size;

  const std::vector<TokenGrid> train_tokens = tokenizer.tokenize(train);
  const std::vector<TokenGrid> val_tokens = val.empty() ? std::vector<TokenGrid>{} : tokenizer.tokenize(val);
  const std::uint64_t val_seed = CounterRng::derive(cfg.seed, 0xFFFF0001ULL);

  // Fixed probe of training samples and plans for the before/after loss.
  const std::size_t probe_n = std::min<std::size_t>(train.size(), 256);
  std::vector<TokenGrid> probe_in, probe_truth;
  std::vector<MaskPlan> probe_plans;
  std::vector<std::optional<int>> probe_targets;
  {
    CounterRng rng(CounterRng::derive(cfg.seed, 0xFFFF0002ULL));
    for (std::size_t i = 0; i < probe_n; ++i) {
      probe_plans.push_back(sample_mask_plan(train[i], patch, 0.5, mc.p_obj, rng));
      probe_truth.push_back(train_tokens[i]);
      probe_in.push_back(apply_mask(train_tokens[i], probe_plans.back()));
      probe_targets.push_back(probe_plans.back().target_category());
    }
  }
  auto probe_loss = [&] {
    nn::NoGradGuard guard;
    double total = 0;
    std::size_t masked = 0;
    for (std::size_t s = 0; s < probe_n; s += kEvalBatch) {
      const std::size_t len = std::min(kEvalBatch, probe_n - s);
      const Tensorf logits = model.forward(std::span(probe_in).subspan(s, len), std::span(probe_targets).subspan(s, len));
      std::size_t m = 0;
      for (std::size_t i = s; i < s + len; ++i) m += probe_plans[i].masked_count();
      total += mt_loss(logits, std::span(probe_truth).subspan(s, len), std::span(probe_plans).subspan(s, len)).item() *
               static_cast<double>(m);
      masked += m;
    }
    return total / static_cast<double>(masked);
  };

  MaskformerTrainResult result;
  result.initial_train_loss = probe_loss();

  auto params = model.parameters().tensors();
  nn::Adam opt(params, {.lr = cfg.lr, .beta1 = 0.9, .beta2 = 0.98});
  const std::size_t batches = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = static_cast<double>(batches) * cfg.epochs;
  const int run_epochs = cfg.stop_after > 0 ? std::min(cfg.stop_after, cfg.epochs) : cfg.epochs;

  std::vector<std::size_t> order(train.size());
  std::vector<TokenGrid> inputs, truth;
  std::vector<MaskPlan> plans;
  std::vector<std::optional<int>> targets;
  for (int epoch = 0; epoch < run_epochs; ++epoch) {
    CounterRng rng(CounterRng::derive(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    double loss_sum = 0;
    std::size_t loss_count = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t start = b * cfg.batch_size;
      const std::size_t len = std::min<std::size_t>(cfg.batch_size, train.size() - start);
      const double t = epoch + static_cast<double>(b) / static_cast<double>(batches);
      const double ratio = mask_ratio(t, cfg.epochs, rng);
      inputs.clear();
      truth.clear();
      plans.clear();
      targets.clear();
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t idx = order[start + i];
        plans.push_back(sample_mask_plan(train[idx], patch, ratio, mc.p_obj, rng));
        truth.push_back(train_tokens[idx]);
        inputs.push_back(apply_mask(train_tokens[idx], plans.back()));
        targets.push_back(plans.back().target_category());
      }

      const double step = static_cast<double>(opt.steps());
      double lr = cfg.lr;
      if (step < cfg.warmup_steps) {
        lr = cfg.lr * (step + 1) / cfg.warmup_steps;
      } else {
        const double progress = (step - cfg.warmup_steps) / std::max(1.0, total_steps - cfg.warmup_steps);
        lr = cfg.lr * (cfg.final_lr_fraction +
                       (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0))));
      }
      opt.set_lr(lr);
      opt.zero_grad();
      const Tensorf loss = mt_loss(model.forward(inputs, targets), truth, plans);
      if (!std::isfinite(loss.item()))
        throw DivergenceError(fmt::format("maskformer loss became non-finite in epoch {} (batch {})", epoch, b));
      loss.backward();
      if (cfg.grad_clip > 0) nn::clip_grad_norm(params, cfg.grad_clip);
      opt.step();
      loss_sum += loss.item() * static_cast<double>(len);
      loss_count += len;
    }
    MaskformerEpoch e;
    e.epoch = epoch;
    e.train_loss = loss_sum / static_cast<double>(loss_count);
    e.val_accuracy = val_tokens.empty() ? 0.0 : restoration_accuracy(model, val_tokens, cfg.val_ratio, val_seed);
    result.trace.push_back(e);
  }
  result.final_train_loss = probe_loss();
  return result;
}

}  // namespace mapbert
