#pragma once

// Map tokenizers: the lookup-free binary autoencoder (sign-binarised patch
// latents, token = LSB-first bit index) and a codebook VQ-VAE baseline that
// shares its encoder/decoder architecture.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mapbert/map_core.hpp"
#include "mapbert/nn/checkpoint.hpp"
#include "mapbert/nn/parameters.hpp"
#include "mapbert/nn/tensor.hpp"

namespace mapbert {

// ---------------------------------------------------------------------------
// Token algebra

/// h x w grid of token indices in [0, codebook]; `codebook` itself is MASK.
struct TokenGrid {
  int rows = 0;
  int cols = 0;
  int codebook = 0;
  std::vector<int> tokens;

  int mask_token() const { return codebook; }
  int at(int r, int c) const { return tokens[static_cast<std::size_t>(r * cols + c)]; }
  std::size_t mask_count() const;
  /// Throws DataError if any token lies outside [0, codebook].
  void validate() const;
  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

/// MASK index for b-bit tokens: 2^b.
inline constexpr int mask_index(int bits) { return 1 << bits; }

/// {-1, 1}^b -> [0, 2^b - 1]; bit k contributes ((bit_k + 1) / 2) * 2^k.
int bits_to_index(std::span<const int> bits);
/// Inverse of bits_to_index. Throws DataError when index is outside [0, 2^b).
std::vector<int> index_to_bits(int index, int bits);

/// Elementwise: 1 if value > 0, else -1.
std::vector<float> binarize(std::span<const float> values);

/// Nearest codebook row by Euclidean distance, lowest index on ties.
/// `codebook` is row-major [entries, dim].
struct VqMatch {
  int index = 0;
  std::vector<float> vector;
};
VqMatch vq_quantize(std::span<const float> query, std::span<const float> codebook, int dim);

// ---------------------------------------------------------------------------
// Configuration

struct AutoencoderConfig {
  int height = 64;
  int width = 64;
  int channels = 6;
  int patch_size = 8;
  int encoder_width = 64;
  int decoder_width = 64;
  int decoder_blocks = 2;
  int upsample_width = 32;
  double lambda_bce = 1.0;
  double lambda_iou = 1.0;

  int grid_rows() const { return height / patch_size; }
  int grid_cols() const { return width / patch_size; }
};

struct BitVaeConfig : AutoencoderConfig {
  int bits = 6;

  /// 224 x 224 maps, 16-cell patches, 9 bits.
  static BitVaeConfig full_scale(int channels);
};

struct VqConfig : AutoencoderConfig {
  int codebook_size = 64;
  int code_dim = 16;
  double commitment = 0.25;
};

void validate(const BitVaeConfig& cfg);
void validate(const VqConfig& cfg);

struct TrainConfig {
  int epochs = 20;
  int batch_size = 16;
  double lr = 1e-3;
  /// Cosine decay from lr to lr * final_lr_fraction over all steps.
  double final_lr_fraction = 0.1;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  /// Stop after this many epochs (0 = run all); the schedule still spans `epochs`.
  int stop_after = 0;
};

// ---------------------------------------------------------------------------
// Models

struct ReconstructionLoss {
  nn::Tensorf total;
  nn::Tensorf bce;
  nn::Tensorf iou;
};

/// lambda_bce * BCE + lambda_iou * soft-IoU loss on [N, C, H, W] tensors.
ReconstructionLoss reconstruction_loss(const nn::Tensorf& pred, const nn::Tensorf& target, double lambda_bce,
                                       double lambda_iou);

/// Scalar values of the reconstruction loss for single maps.
struct BitVaeLossValues {
  double total = 0, bce = 0, iou = 0;
};
BitVaeLossValues bitvae_loss(const SemanticMap& target, std::span<const float> pred_hwc, const BitVaeConfig& cfg);

/// [N, C, H, W] float tensor from one-hot maps (or zero-filled partial maps).
nn::Tensorf maps_to_tensor(std::span<const SemanticMap> maps);
nn::Tensorf partial_to_tensor(const PartialMap& map);

/// Per-cell argmax of a [1, C, H, W] probability tensor.
SemanticMap argmax_map(const nn::Tensorf& probs);

/// Shared interface of the two tokenizers.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;

  virtual std::string kind() const = 0;
  /// Number of real token values; the MASK index equals this.
  virtual int codebook_size() const = 0;
  virtual const AutoencoderConfig& geometry() const = 0;

  virtual std::vector<TokenGrid> tokenize(std::span<const SemanticMap> maps) const = 0;
  TokenGrid tokenize(const SemanticMap& map) const;
  /// Patches whose unobserved fraction exceeds `theta_obs` become MASK; the
  /// rest are tokenized from the zero-filled data.
  virtual TokenGrid tokenize_partial(const PartialMap& map, double theta_obs) const = 0;
  /// Probabilities [1, C, H, W] for a grid without MASK tokens.
  virtual nn::Tensorf decode_tokens(const TokenGrid& grid) const = 0;
  /// Probabilities [N, C, H, W] of decode(quantize(encode(maps))) without
  /// gradient tracking.
  virtual nn::Tensorf reconstruct(const nn::Tensorf& maps) const = 0;
  /// decode(quantize(encode(M))) as a label map.
  SemanticMap roundtrip(const SemanticMap& map) const;

  virtual nn::Checkpoint checkpoint() const = 0;
  virtual nn::ParameterStore& parameters() = 0;
};

/// Encoder (stride-P patch conv + 1x1 convs) and residual CNN decoder shared
/// by both tokenizers; `latent` is b bits or the VQ code dimension.
class PatchAutoencoder {
 public:
  PatchAutoencoder(const AutoencoderConfig& cfg, int latent, std::uint64_t seed);

  /// [N, C, H, W] -> [N, latent, h, w]
  nn::Tensorf encode(const nn::Tensorf& maps) const;
  /// [N, latent, h, w] -> probabilities [N, C, H, W]
  nn::Tensorf decode(const nn::Tensorf& latent) const;

  nn::ParameterStore& parameters() { return params_; }
  const nn::ParameterStore& parameters() const { return params_; }

 private:
  struct Conv {
    nn::Tensorf weight, bias;
    int stride = 1, padding = 0;
  };
  Conv make_conv(const std::string& name, int in, int out, int kernel, int stride, int padding, CounterRng& rng);
  Conv make_deconv(const std::string& name, int in, int out, int kernel, int stride, CounterRng& rng);
  static nn::Tensorf apply(const Conv& c, const nn::Tensorf& x);

  AutoencoderConfig cfg_;
  nn::ParameterStore params_;
  std::vector<Conv> encoder_;
  Conv dec_in_;
  std::vector<std::pair<Conv, Conv>> dec_blocks_;
  Conv dec_up_;
  Conv dec_out_;
};

class BitVae final : public Tokenizer {
 public:
  BitVae(const BitVaeConfig& cfg, std::uint64_t seed);
  static BitVae from_checkpoint(const nn::Checkpoint& ck);

  const BitVaeConfig& config() const { return cfg_; }
  std::string kind() const override { return "bitvae"; }
  int codebook_size() const override { return mask_index(cfg_.bits); }
  const AutoencoderConfig& geometry() const override { return cfg_; }

  /// Feature map m: [N, b, h, w].
  nn::Tensorf encode(const nn::Tensorf& maps) const { return net_.encode(maps); }
  /// Probabilities [N, C, H, W] from a {-1, 1} bit tensor [N, b, h, w].
  nn::Tensorf decode(const nn::Tensorf& bits) const { return net_.decode(bits); }

  struct Forward {
    nn::Tensorf features;  // m
    nn::Tensorf bits;      // B(m), straight-through
    nn::Tensorf probs;     // M-hat
  };
  Forward forward(const nn::Tensorf& maps) const;

  using Tokenizer::tokenize;
  std::vector<TokenGrid> tokenize(std::span<const SemanticMap> maps) const override;
  TokenGrid tokenize_partial(const PartialMap& map, double theta_obs) const override;
  nn::Tensorf decode_tokens(const TokenGrid& grid) const override;
  nn::Tensorf reconstruct(const nn::Tensorf& maps) const override;
  /// [1, b, h, w] bit tensor for a token grid without MASK entries.
  nn::Tensorf bits_tensor(const TokenGrid& grid) const;
  /// Token grid from a [N, b, h, w] feature tensor, one grid per sample.
  std::vector<TokenGrid> tokens_from_features(const nn::Tensorf& features) const;

  nn::Checkpoint checkpoint() const override;
  nn::ParameterStore& parameters() override { return net_.parameters(); }

 private:
  BitVaeConfig cfg_;
  PatchAutoencoder net_;
};

class VqVae final : public Tokenizer {
 public:
  VqVae(const VqConfig& cfg, std::uint64_t seed);
  static VqVae from_checkpoint(const nn::Checkpoint& ck);

  const VqConfig& config() const { return cfg_; }
  std::string kind() const override { return "vqvae"; }
  int codebook_size() const override { return cfg_.codebook_size; }
  const AutoencoderConfig& geometry() const override { return cfg_; }

  struct Forward {
    nn::Tensorf features;  // z_e [N, D, h, w]
    std::vector<int> indices;
    nn::Tensorf quantized;  // straight-through z_q
    nn::Tensorf probs;
    nn::Tensorf codebook_loss;
    nn::Tensorf commitment_loss;
  };
  Forward forward(const nn::Tensorf& maps) const;

  using Tokenizer::tokenize;
  std::vector<TokenGrid> tokenize(std::span<const SemanticMap> maps) const override;
  TokenGrid tokenize_partial(const PartialMap& map, double theta_obs) const override;
  nn::Tensorf decode_tokens(const TokenGrid& grid) const override;
  nn::Tensorf reconstruct(const nn::Tensorf& maps) const override;

  /// Replaces codebook rows with encoder outputs of `maps` (data-dependent
  /// initialisation); rows beyond the available vectors keep their values.
  void init_codebook_from(std::span<const SemanticMap> maps, std::uint64_t seed);

  nn::Checkpoint checkpoint() const override;
  nn::ParameterStore& parameters() override { return net_.parameters(); }
  const nn::Tensorf& codebook() const { return codebook_; }

 private:
  /// Nearest codebook rows for a [rows, D] tensor.
  std::vector<int> nearest(const nn::Tensorf& vectors) const;

  VqConfig cfg_;
  PatchAutoencoder net_;  // its store also holds the codebook
  nn::Tensorf codebook_;
};

std::unique_ptr<Tokenizer> load_tokenizer(const nn::Checkpoint& ck);

// ---------------------------------------------------------------------------
// Training

struct EpochLosses {
  int epoch = 0;
  double train_total = 0, train_bce = 0, train_iou = 0, train_vq = 0;
  double val_total = 0;
};

struct TokenizerTrainResult {
  std::vector<EpochLosses> trace;
  double initial_train_total = 0;  // on the training set before any update
  int best_epoch = 0;
  nn::Checkpoint best;
};

/// Minimises the weighted reconstruction loss with Adam; the model is left
/// holding the best-validation weights. Throws DivergenceError on a
/// non-finite loss.
TokenizerTrainResult train_bitvae(BitVae& model, std::span<const SemanticMap> train, std::span<const SemanticMap> val,
                                  const TrainConfig& cfg);
TokenizerTrainResult train_vqvae(VqVae& model, std::span<const SemanticMap> train, std::span<const SemanticMap> val,
                                 const TrainConfig& cfg);

/// Mean reconstruction loss over `maps` without updates.
EpochLosses evaluate_reconstruction(const Tokenizer& model, std::span<const SemanticMap> maps);

}  // namespace mapbert
