#pragma once

// Bidirectional masked transformer over patch tokens: mask scheduling,
// object-aware and random mask plans, target-conditioned forward pass,
// masked cross-entropy, training, and partial-map completion.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mapbert/map_core.hpp"
#include "mapbert/nn/checkpoint.hpp"
#include "mapbert/nn/parameters.hpp"
#include "mapbert/nn/tensor.hpp"
#include "mapbert/quantizers.hpp"
#include "mapbert/rng.hpp"

namespace mapbert {

enum class DecodeMode { kSinglePass, kIterative };

struct MaskformerConfig {
  int d_model = 128;
  int layers = 4;
  int heads = 4;
  int ffn_width = 512;
  int grid_rows = 8;
  int grid_cols = 8;
  /// Real token values; the MASK input id equals this.
  int codebook = 64;
  /// Target rows 0..categories-1 follow the map channel ids; one extra null row.
  int categories = 6;
  double p_obj = 0.5;
  DecodeMode decode = DecodeMode::kSinglePass;
  int iterations = 4;

  int sequence() const { return grid_rows * grid_cols; }
  int null_target() const { return categories; }

  /// 768 wide, 12 layers, 12 heads.
  static MaskformerConfig vit_base(int grid_rows, int grid_cols, int codebook, int categories);
  /// 1024 wide, 24 layers, 16 heads.
  static MaskformerConfig vit_large(int grid_rows, int grid_cols, int codebook, int categories);
};

void validate(const MaskformerConfig& cfg);

// ---------------------------------------------------------------------------
// Masking

/// Mask ratio at training time t of T. Before T/4 it is drawn uniformly from
/// [0.15, 0.20]; afterwards it follows a cosine ramp from 0.15 to 0.75.
double mask_ratio(double t, double total, CounterRng& rng);

/// Number of patches a ratio masks: ceil(ratio * patches).
int masked_patch_count(double ratio, int patches);

/// With probability p_obj (and at least one object present) masks every patch
/// of a uniformly chosen present object and tops up with random patches;
/// otherwise a purely random plan without target.
MaskPlan sample_mask_plan(const SemanticMap& map, int patch_size, double ratio, double p_obj, CounterRng& rng);

/// Random plan masking exactly `count` patches.
MaskPlan random_mask_plan(int patch_size, int grid_rows, int grid_cols, int count, CounterRng& rng);

/// Plan masking every patch of `category` plus random patches up to `count`.
MaskPlan object_mask_plan(const SemanticMap& map, int patch_size, int category, int count, CounterRng& rng);

/// Replaces masked positions of a token grid with MASK.
TokenGrid apply_mask(const TokenGrid& tokens, const MaskPlan& plan);

// ---------------------------------------------------------------------------
// Model

class Maskformer {
 public:
  Maskformer(const MaskformerConfig& cfg, std::uint64_t seed);
  static Maskformer from_checkpoint(const nn::Checkpoint& ck);

  const MaskformerConfig& config() const { return cfg_; }

  /// Logits [B, h*w, codebook]. `targets[i]` empty selects the null row.
  nn::Tensorf forward(std::span<const TokenGrid> inputs, std::span<const std::optional<int>> targets) const;
  /// Logits [h*w, codebook] for one grid.
  nn::Tensorf forward(const TokenGrid& input, std::optional<int> target) const;

  nn::Checkpoint checkpoint() const;
  nn::ParameterStore& parameters() { return params_; }
  const nn::ParameterStore& parameters() const { return params_; }

 private:
  struct Layer {
    nn::Tensorf ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;
  };
  nn::Tensorf block(const Layer& l, const nn::Tensorf& x, int batch) const;

  MaskformerConfig cfg_;
  nn::ParameterStore params_;
  nn::Tensorf token_emb_, pos_emb_, target_emb_, ln_f_g_, ln_f_b_, head_w_, head_b_;
  std::vector<Layer> layers_;
};

/// Mean cross-entropy over masked positions only. `logits` is [B, L, K].
/// Throws DataError when no position is masked.
nn::Tensorf mt_loss(const nn::Tensorf& logits, std::span<const TokenGrid> truth, std::span<const MaskPlan> plans);

// ---------------------------------------------------------------------------
// Training

struct MaskformerTrainConfig {
  int epochs = 40;
  int batch_size = 32;
  double lr = 5e-4;
  int warmup_steps = 200;
  double final_lr_fraction = 0.05;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  /// Masking ratio used for the validation restoration accuracy.
  double val_ratio = 0.5;
  /// Stop after this many epochs (0 = run all); the schedule still spans `epochs`.
  int stop_after = 0;
};

struct MaskformerEpoch {
  int epoch = 0;
  double train_loss = 0;
  double val_accuracy = 0;  // fraction of masked tokens restored exactly
};

struct MaskformerTrainResult {
  std::vector<MaskformerEpoch> trace;
  double initial_train_loss = 0;
  double final_train_loss = 0;  // re-measured after training on the initial probe
};

/// Trains against a frozen tokenizer. Throws DivergenceError on a NaN loss.
MaskformerTrainResult train_maskformer(Maskformer& model, const Tokenizer& tokenizer,
                                       std::span<const SemanticMap> train, std::span<const SemanticMap> val,
                                       const MaskformerTrainConfig& cfg);

/// Top-1 restoration accuracy on precomputed token grids: each grid gets
/// ceil(ratio * h * w) random masked positions drawn from `seed` and the
/// grid's own content.
double restoration_accuracy(const Maskformer& model, std::span<const TokenGrid> truth, double ratio,
                            std::uint64_t seed);

// ---------------------------------------------------------------------------
// Generation

struct GenerateOptions {
  double theta_obs = 0.5;
  DecodeMode mode = DecodeMode::kSinglePass;
  int iterations = 4;
};

/// Fills every MASK of `tokens` (observed tokens never change).
TokenGrid complete_tokens(const Maskformer& model, const TokenGrid& tokens, std::optional<int> target,
                          DecodeMode mode, int iterations);

/// Partial map to completed one-hot map.
SemanticMap generate(const Tokenizer& tokenizer, const Maskformer& model, const PartialMap& partial,
                     std::optional<int> target, const GenerateOptions& options = {});

}  // namespace mapbert
