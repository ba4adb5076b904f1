#pragma once

// Experiment configuration: a sectioned key-value file ([scene], [bitvae],
// [vqvae], [maskformer], [train], [eval], [paths]) resolved into the module
// configs, plus a content fingerprint over every resolved value.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mapbert/eval.hpp"
#include "mapbert/maskformer.hpp"
#include "mapbert/quantizers.hpp"
#include "mapbert/scenegen.hpp"

namespace mapbert {

struct ExperimentConfig {
  SceneSpec scene;
  int train_maps = 512;
  int val_maps = 64;
  int eval_maps = 200;

  TokenizerKind tokenizer = TokenizerKind::kBitVae;
  BitVaeConfig bitvae;
  VqConfig vqvae;
  TrainConfig vae_train;

  MaskformerConfig maskformer;
  MaskformerTrainConfig mt_train;

  SsrOptions ssr;
  double restoration_ratio = 0.5;
  /// "default" or a comma list such as "bitvae:6:O, vqvae:64:R".
  std::string ablation = "default";

  std::filesystem::path dir = "run";

  /// Seed of the training stages; the scene and eval sections carry their own.
  std::uint64_t seed() const { return vae_train.seed; }

  /// Geometry and vocabulary of the selected tokenizer.
  const AutoencoderConfig& geometry() const;
  int codebook_size() const;
  /// Maskformer config with grid, vocabulary and categories filled in.
  MaskformerConfig resolved_maskformer() const;
  std::vector<AblationCell> ablation_cells() const;

  std::filesystem::path train_data() const { return dir / "train.smap"; }
  std::filesystem::path val_data() const { return dir / "val.smap"; }
  std::filesystem::path eval_data() const { return dir / "eval.smap"; }
  std::filesystem::path tokenizer_checkpoint() const { return dir / "tokenizer.ckpt"; }
  std::filesystem::path tokenizer_trace() const { return dir / "tokenizer_trace.jsonl"; }
  std::filesystem::path maskformer_checkpoint() const { return dir / "maskformer.ckpt"; }
  std::filesystem::path maskformer_trace() const { return dir / "maskformer_trace.jsonl"; }
  std::filesystem::path eval_report() const { return dir / "eval_report.jsonl"; }
  std::filesystem::path eval_table() const { return dir / "eval_table.txt"; }
  std::filesystem::path ablation_report() const { return dir / "ablation.jsonl"; }
  std::filesystem::path ablation_table() const { return dir / "ablation.txt"; }

  /// One "section.key = value" line per resolved key, sorted.
  std::string canonical() const;
  /// 16 hex digits of FNV-1a over canonical().
  std::string fingerprint() const;
};

/// Parses config text; `overrides` are "section.key=value" strings applied
/// after the file. Throws ConfigError naming the section and key at fault.
ExperimentConfig parse_config(std::string_view text, const std::vector<std::string>& overrides = {});
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Every accepted "section.key", in canonical order.
std::vector<std::string> config_keys();

}  // namespace mapbert
