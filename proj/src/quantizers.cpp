#include "mapbert/quantizers.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <limits>
#include <numbers>
#include <numeric>

#include "mapbert/error.hpp"
#include "mapbert/nn/adam.hpp"
#include "mapbert/nn/ops.hpp"
#include "mapbert/rng.hpp"

namespace mapbert {

using nn::Tensorf;

// ---------------------------------------------------------------------------
// Token algebra

std::size_t TokenGrid::mask_count() const {
  return static_cast<std::size_t>(std::count(tokens.begin(), tokens.end(), codebook));
}

void TokenGrid::validate() const {
  if (rows <= 0 || cols <= 0 || tokens.size() != static_cast<std::size_t>(rows) * cols)
    throw DataError(fmt::format("token grid {}x{} holds {} tokens", rows, cols, tokens.size()));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] > codebook)
      throw DataError(fmt::format("token {} at patch ({}, {}) outside [0, {}]", tokens[i],
                                  i / static_cast<std::size_t>(cols), i % static_cast<std::size_t>(cols), codebook));
  }
}

int bits_to_index(std::span<const int> bits) {
  if (bits.empty() || bits.size() > 30) throw DataError(fmt::format("cannot index {} bits", bits.size()));
  int index = 0;
  for (std::size_t k = 0; k < bits.size(); ++k) {
    if (bits[k] != 1 && bits[k] != -1) throw DataError(fmt::format("bit {} has value {}, expected +-1", k, bits[k]));
    index += ((bits[k] + 1) / 2) << k;
  }
  return index;
}

std::vector<int> index_to_bits(int index, int bits) {
  if (bits < 1 || bits > 30) throw DataError(fmt::format("cannot expand to {} bits", bits));
  if (index < 0 || index >= (1 << bits))
    throw DataError(fmt::format("index {} outside [0, {}) for {} bits", index, 1 << bits, bits));
  std::vector<int> out(static_cast<std::size_t>(bits));
  for (int k = 0; k < bits; ++k) out[static_cast<std::size_t>(k)] = ((index >> k) & 1) ? 1 : -1;
  return out;
}

std::vector<float> binarize(std::span<const float> values) {
  std::vector<float> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] > 0.0f ? 1.0f : -1.0f;
  return out;
}

VqMatch vq_quantize(std::span<const float> query, std::span<const float> codebook, int dim) {
  if (dim <= 0 || query.size() != static_cast<std::size_t>(dim) || codebook.empty() || codebook.size() % dim != 0)
    throw ShapeError(fmt::format("vq_quantize: query of {} against codebook of {} with dim {}", query.size(),
                                 codebook.size(), dim));
  const std::size_t entries = codebook.size() / static_cast<std::size_t>(dim);
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_index = 0;
  for (std::size_t e = 0; e < entries; ++e) {
    double d = 0;
    for (int k = 0; k < dim; ++k) {
      const double diff = static_cast<double>(query[static_cast<std::size_t>(k)]) - codebook[e * dim + k];
      d += diff * diff;
    }
    if (d < best) {
      best = d;
      best_index = e;
    }
  }
  VqMatch m;
  m.index = static_cast<int>(best_index);
  m.vector.assign(codebook.begin() + static_cast<std::ptrdiff_t>(best_index * dim),
                  codebook.begin() + static_cast<std::ptrdiff_t>((best_index + 1) * dim));
  return m;
}

// ---------------------------------------------------------------------------
// Configuration

BitVaeConfig BitVaeConfig::full_scale(int channels) {
  BitVaeConfig cfg;
  cfg.height = 224;
  cfg.width = 224;
  cfg.channels = channels;
  cfg.patch_size = 16;
  cfg.bits = 9;
  return cfg;
}

namespace {

void validate_geometry(const AutoencoderConfig& cfg) {
  if (cfg.channels < 1) throw ConfigError(fmt::format("channels must be >= 1, got {}", cfg.channels));
  if (cfg.patch_size < 1) throw ConfigError(fmt::format("patch_size must be >= 1, got {}", cfg.patch_size));
  if (cfg.height < 1 || cfg.width < 1 || cfg.height % cfg.patch_size != 0 || cfg.width % cfg.patch_size != 0)
    throw ConfigError(fmt::format("map size {}x{} is not a positive multiple of patch_size {}", cfg.height, cfg.width,
                                  cfg.patch_size));
  if (cfg.encoder_width < 1 || cfg.decoder_width < 1 || cfg.upsample_width < 1 || cfg.decoder_blocks < 0)
    throw ConfigError("autoencoder widths must be >= 1 and decoder_blocks >= 0");
  if (!(cfg.lambda_bce >= 0) || !(cfg.lambda_iou >= 0) || cfg.lambda_bce + cfg.lambda_iou <= 0)
    throw ConfigError("loss weights must be non-negative and not both zero");
}

void check_maps(std::span<const SemanticMap> maps, const AutoencoderConfig& cfg, const char* what) {
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto& m = maps[i];
    if (m.height() != cfg.height || m.width() != cfg.width || m.channels() != cfg.channels)
      throw DataError(fmt::format("{} map {} is {}x{}x{}, model expects {}x{}x{}", what, i, m.height(), m.width(),
                                  m.channels(), cfg.height, cfg.width, cfg.channels));
  }
}

}  // namespace

void validate(const BitVaeConfig& cfg) {
  validate_geometry(cfg);
  if (cfg.bits < 1 || cfg.bits > 16) throw ConfigError(fmt::format("bits must be in [1, 16], got {}", cfg.bits));
}

void validate(const VqConfig& cfg) {
  validate_geometry(cfg);
  if (cfg.codebook_size < 2 || (cfg.codebook_size & (cfg.codebook_size - 1)) != 0)
    throw ConfigError(fmt::format("codebook_size must be a power of two >= 2, got {}", cfg.codebook_size));
  if (cfg.code_dim < 1) throw ConfigError(fmt::format("code_dim must be >= 1, got {}", cfg.code_dim));
  if (!(cfg.commitment >= 0)) throw ConfigError("commitment weight must be non-negative");
}

// ---------------------------------------------------------------------------
// Tensors and losses

ReconstructionLoss reconstruction_loss(const Tensorf& pred, const Tensorf& target, double lambda_bce,
                                       double lambda_iou) {
  ReconstructionLoss l;
  l.bce = nn::binary_cross_entropy(pred, target);
  l.iou = nn::soft_iou_loss(pred, target);
  l.total = nn::add(nn::scale(l.bce, static_cast<float>(lambda_bce)), nn::scale(l.iou, static_cast<float>(lambda_iou)));
  return l;
}

Tensorf maps_to_tensor(std::span<const SemanticMap> maps) {
  if (maps.empty()) throw DataError("no maps to convert");
  const int h = maps[0].height(), w = maps[0].width(), c = maps[0].channels();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<float> v(maps.size() * c * plane);
  for (std::size_t n = 0; n < maps.size(); ++n) {
    const auto& m = maps[n];
    if (m.height() != h || m.width() != w || m.channels() != c)
      throw DataError(fmt::format("map {} has shape {}x{}x{}, expected {}x{}x{}", n, m.height(), m.width(),
                                  m.channels(), h, w, c));
    const auto& d = m.data();
    float* out = v.data() + n * c * plane;
    for (std::size_t p = 0; p < plane; ++p)
      for (int k = 0; k < c; ++k) out[k * plane + p] = d[p * c + k];
  }
  return Tensorf({static_cast<int>(maps.size()), c, h, w}, std::move(v));
}

Tensorf partial_to_tensor(const PartialMap& map) {
  const int h = map.height(), w = map.width(), c = map.channels();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<float> v(c * plane);
  const auto& d = map.data();
  for (std::size_t p = 0; p < plane; ++p)
    for (int k = 0; k < c; ++k) v[k * plane + p] = d[p * c + k];
  return Tensorf({1, c, h, w}, std::move(v));
}

SemanticMap argmax_map(const Tensorf& probs) {
  if (probs.rank() != 4 || probs.dim(0) != 1)
    throw ShapeError("argmax_map expects [1, C, H, W], got " + nn::shape_str(probs.shape()));
  const int c = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const auto v = probs.values();
  std::vector<std::uint8_t> out(plane * c, 0);
  for (std::size_t p = 0; p < plane; ++p) {
    int best = 0;
    for (int k = 1; k < c; ++k)
      if (v[k * plane + p] > v[best * plane + p]) best = k;
    out[p * c + best] = 1;
  }
  return SemanticMap(h, w, c, std::move(out));
}

BitVaeLossValues bitvae_loss(const SemanticMap& target, std::span<const float> pred_hwc, const BitVaeConfig& cfg) {
  const int h = target.height(), w = target.width(), c = target.channels();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  if (pred_hwc.size() != plane * c)
    throw ShapeError(fmt::format("prediction holds {} values, map needs {}", pred_hwc.size(), plane * c));
  std::vector<float> p(plane * c);
  for (std::size_t i = 0; i < plane; ++i)
    for (int k = 0; k < c; ++k) p[k * plane + i] = pred_hwc[i * c + k];
  nn::NoGradGuard guard;
  const auto l = reconstruction_loss(Tensorf({1, c, h, w}, std::move(p)), maps_to_tensor({&target, 1}),
                                     cfg.lambda_bce, cfg.lambda_iou);
  return {l.total.item(), l.bce.item(), l.iou.item()};
}

// ---------------------------------------------------------------------------
// Shared autoencoder

PatchAutoencoder::PatchAutoencoder(const AutoencoderConfig& cfg, int latent, std::uint64_t seed) : cfg_(cfg) {
  CounterRng rng(seed);
  const int p = cfg.patch_size;
  encoder_.push_back(make_conv("enc.patch", cfg.channels, cfg.encoder_width, p, p, 0, rng));
  encoder_.push_back(make_conv("enc.mix", cfg.encoder_width, cfg.encoder_width, 1, 1, 0, rng));
  encoder_.push_back(make_conv("enc.out", cfg.encoder_width, latent, 1, 1, 0, rng));
  dec_in_ = make_conv("dec.in", latent, cfg.decoder_width, 1, 1, 0, rng);
  for (int b = 0; b < cfg.decoder_blocks; ++b) {
    dec_blocks_.emplace_back(make_conv(fmt::format("dec.block{}.a", b), cfg.decoder_width, cfg.decoder_width, 3, 1, 1, rng),
                             make_conv(fmt::format("dec.block{}.b", b), cfg.decoder_width, cfg.decoder_width, 3, 1, 1, rng));
  }
  dec_up_ = make_deconv("dec.up", cfg.decoder_width, cfg.upsample_width, p, p, rng);
  dec_out_ = make_conv("dec.out", cfg.upsample_width, cfg.channels, 3, 1, 1, rng);
}

PatchAutoencoder::Conv PatchAutoencoder::make_conv(const std::string& name, int in, int out, int kernel, int stride,
                                                   int padding, CounterRng& rng) {
  Conv c;
  c.weight = params_.add(name + ".w", nn::kaiming_uniform({out, in, kernel, kernel}, in * kernel * kernel, rng));
  c.bias = params_.add(name + ".b", Tensorf::zeros({out}));
  c.stride = stride;
  c.padding = padding;
  return c;
}

PatchAutoencoder::Conv PatchAutoencoder::make_deconv(const std::string& name, int in, int out, int kernel, int stride,
                                                     CounterRng& rng) {
  Conv c;
  // With stride == kernel each output cell receives exactly `in` terms.
  c.weight = params_.add(name + ".w", nn::kaiming_uniform({in, out, kernel, kernel}, in, rng));
  c.bias = params_.add(name + ".b", Tensorf::zeros({out}));
  c.stride = stride;
  c.padding = -1;  // marks a transposed convolution
  return c;
}

Tensorf PatchAutoencoder::apply(const Conv& c, const Tensorf& x) {
  if (c.padding < 0) return nn::conv_transpose2d(x, c.weight, c.bias, c.stride, 0);
  return nn::conv2d(x, c.weight, c.bias, c.stride, c.padding);
}

Tensorf PatchAutoencoder::encode(const Tensorf& maps) const {
  if (maps.rank() != 4 || maps.dim(1) != cfg_.channels || maps.dim(2) != cfg_.height || maps.dim(3) != cfg_.width)
    throw ShapeError(fmt::format("encoder expects [N, {}, {}, {}], got {}", cfg_.channels, cfg_.height, cfg_.width,
                                 nn::shape_str(maps.shape())));
  Tensorf x = maps;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    x = apply(encoder_[i], x);
    if (i + 1 < encoder_.size()) x = nn::gelu(x);
  }
  return x;
}

Tensorf PatchAutoencoder::decode(const Tensorf& latent) const {
  Tensorf x = apply(dec_in_, latent);
  for (const auto& [a, b] : dec_blocks_) x = nn::add(x, apply(b, nn::gelu(apply(a, nn::gelu(x)))));
  x = nn::gelu(apply(dec_up_, nn::gelu(x)));
  return nn::sigmoid(apply(dec_out_, x));
}

// ---------------------------------------------------------------------------
// Tokenizer helpers

namespace {

constexpr std::size_t kInferenceChunk = 32;

template <typename Fn>
void for_chunks(std::size_t count, std::size_t chunk, Fn&& fn) {
  for (std::size_t start = 0; start < count; start += chunk) fn(start, std::min(chunk, count - start));
}

/// Patches whose unobserved fraction exceeds theta.
std::vector<std::uint8_t> hidden_patches(const PartialMap& map, const AutoencoderConfig& cfg, double theta_obs) {
  if (map.height() != cfg.height || map.width() != cfg.width || map.channels() != cfg.channels)
    throw DataError(fmt::format("partial map is {}x{}x{}, model expects {}x{}x{}", map.height(), map.width(),
                                map.channels(), cfg.height, cfg.width, cfg.channels));
  if (!(theta_obs >= 0.0 && theta_obs <= 1.0))
    throw ConfigError(fmt::format("theta_obs must lie in [0, 1], got {}", theta_obs));
  const int p = cfg.patch_size, gr = cfg.grid_rows(), gc = cfg.grid_cols();
  std::vector<std::uint8_t> hidden(static_cast<std::size_t>(gr) * gc, 0);
  for (int r = 0; r < gr; ++r)
    for (int c = 0; c < gc; ++c) {
      int unobserved = 0;
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j) unobserved += map.observed(r * p + i, c * p + j) ? 0 : 1;
      hidden[static_cast<std::size_t>(r * gc + c)] = unobserved > theta_obs * p * p ? 1 : 0;
    }
  return hidden;
}

void check_decodable(const TokenGrid& grid, const AutoencoderConfig& cfg, int codebook) {
  grid.validate();
  if (grid.rows != cfg.grid_rows() || grid.cols != cfg.grid_cols() || grid.codebook != codebook)
    throw DataError(fmt::format("token grid {}x{} (codebook {}) does not match tokenizer {}x{} (codebook {})", grid.rows,
                                grid.cols, grid.codebook, cfg.grid_rows(), cfg.grid_cols(), codebook));
  if (grid.mask_count() != 0) throw DataError("cannot decode a token grid that still contains MASK tokens");
}

nlohmann::json geometry_json(const AutoencoderConfig& cfg) {
  return {{"height", cfg.height},
          {"width", cfg.width},
          {"channels", cfg.channels},
          {"patch_size", cfg.patch_size},
          {"encoder_width", cfg.encoder_width},
          {"decoder_width", cfg.decoder_width},
          {"decoder_blocks", cfg.decoder_blocks},
          {"upsample_width", cfg.upsample_width},
          {"lambda_bce", cfg.lambda_bce},
          {"lambda_iou", cfg.lambda_iou}};
}

void read_geometry(const nlohmann::json& j, AutoencoderConfig& cfg) {
  try {
    cfg.height = j.at("height");
    cfg.width = j.at("width");
    cfg.channels = j.at("channels");
    cfg.patch_size = j.at("patch_size");
    cfg.encoder_width = j.at("encoder_width");
    cfg.decoder_width = j.at("decoder_width");
    cfg.decoder_blocks = j.at("decoder_blocks");
    cfg.upsample_width = j.at("upsample_width");
    cfg.lambda_bce = j.at("lambda_bce");
    cfg.lambda_iou = j.at("lambda_iou");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint config is incomplete: ") + e.what());
  }
}

}  // namespace

TokenGrid Tokenizer::tokenize(const SemanticMap& map) const { return tokenize(std::span(&map, 1)).front(); }

SemanticMap Tokenizer::roundtrip(const SemanticMap& map) const { return argmax_map(reconstruct(maps_to_tensor({&map, 1}))); }

// ---------------------------------------------------------------------------
// BitVae

BitVae::BitVae(const BitVaeConfig& cfg, std::uint64_t seed) : cfg_((validate(cfg), cfg)), net_(cfg, cfg.bits, seed) {}

BitVae::Forward BitVae::forward(const Tensorf& maps) const {
  Forward f;
  f.features = net_.encode(maps);
  f.bits = nn::binarize_ste(f.features);
  f.probs = net_.decode(f.bits);
  return f;
}

Tensorf BitVae::reconstruct(const Tensorf& maps) const {
  nn::NoGradGuard guard;
  return forward(maps).probs;
}

std::vector<TokenGrid> BitVae::tokens_from_features(const Tensorf& features) const {
  const int n = features.dim(0), b = features.dim(1), h = features.dim(2), w = features.dim(3);
  if (b != cfg_.bits) throw ShapeError(fmt::format("features carry {} bits, model uses {}", b, cfg_.bits));
  const auto v = features.values();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<TokenGrid> out(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    auto& g = out[static_cast<std::size_t>(s)];
    g.rows = h;
    g.cols = w;
    g.codebook = codebook_size();
    g.tokens.assign(plane, 0);
    for (int k = 0; k < b; ++k) {
      const float* src = v.data() + (static_cast<std::size_t>(s) * b + k) * plane;
      for (std::size_t p = 0; p < plane; ++p)
        if (src[p] > 0.0f) g.tokens[p] |= 1 << k;
    }
  }
  return out;
}

std::vector<TokenGrid> BitVae::tokenize(std::span<const SemanticMap> maps) const {
  check_maps(maps, cfg_, "tokenize");
  std::vector<TokenGrid> out;
  out.reserve(maps.size());
  nn::NoGradGuard guard;
  for_chunks(maps.size(), kInferenceChunk, [&](std::size_t start, std::size_t len) {
    auto grids = tokens_from_features(net_.encode(maps_to_tensor(maps.subspan(start, len))));
    for (auto& g : grids) out.push_back(std::move(g));
  });
  return out;
}

TokenGrid BitVae::tokenize_partial(const PartialMap& map, double theta_obs) const {
  const auto hidden = hidden_patches(map, cfg_, theta_obs);
  nn::NoGradGuard guard;
  TokenGrid g = tokens_from_features(net_.encode(partial_to_tensor(map))).front();
  for (std::size_t i = 0; i < hidden.size(); ++i)
    if (hidden[i]) g.tokens[i] = g.mask_token();
  return g;
}

Tensorf BitVae::bits_tensor(const TokenGrid& grid) const {
  check_decodable(grid, cfg_, codebook_size());
  const std::size_t plane = grid.tokens.size();
  std::vector<float> v(static_cast<std::size_t>(cfg_.bits) * plane);
  for (int k = 0; k < cfg_.bits; ++k)
    for (std::size_t p = 0; p < plane; ++p) v[k * plane + p] = ((grid.tokens[p] >> k) & 1) ? 1.0f : -1.0f;
  return Tensorf({1, cfg_.bits, grid.rows, grid.cols}, std::move(v));
}

Tensorf BitVae::decode_tokens(const TokenGrid& grid) const {
  nn::NoGradGuard guard;
  return net_.decode(bits_tensor(grid));
}

nn::Checkpoint BitVae::checkpoint() const {
  nn::Checkpoint ck;
  ck.config = geometry_json(cfg_);
  ck.config["kind"] = "bitvae";
  ck.config["bits"] = cfg_.bits;
  nn::capture(net_.parameters(), ck);
  return ck;
}

BitVae BitVae::from_checkpoint(const nn::Checkpoint& ck) {
  if (ck.config.value("kind", "") != "bitvae") throw DataError("checkpoint does not hold a bitvae tokenizer");
  BitVaeConfig cfg;
  read_geometry(ck.config, cfg);
  cfg.bits = ck.config.value("bits", 0);
  try {
    validate(cfg);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint config is invalid: ") + e.what());
  }
  BitVae model(cfg, 0);
  nn::restore(model.parameters(), ck);
  return model;
}

// ---------------------------------------------------------------------------
// VqVae

VqVae::VqVae(const VqConfig& cfg, std::uint64_t seed) : cfg_((validate(cfg), cfg)), net_(cfg, cfg.code_dim, seed) {
  CounterRng rng(CounterRng::derive(seed, 1));
  const float bound = 1.0f / static_cast<float>(cfg.codebook_size);
  std::vector<float> v(static_cast<std::size_t>(cfg.codebook_size) * cfg.code_dim);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
  codebook_ = net_.parameters().add("codebook", Tensorf({cfg.codebook_size, cfg.code_dim}, std::move(v)));
}

std::vector<int> VqVae::nearest(const Tensorf& vectors) const {
  const int rows = vectors.dim(0), d = vectors.dim(1);
  const auto q = vectors.values();
  const auto cb = codebook_.values();
  std::vector<int> idx(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r)
    idx[static_cast<std::size_t>(r)] =
        vq_quantize(q.subspan(static_cast<std::size_t>(r) * d, static_cast<std::size_t>(d)), cb, d).index;
  return idx;
}

VqVae::Forward VqVae::forward(const Tensorf& maps) const {
  Forward f;
  f.features = net_.encode(maps);
  const int n = f.features.dim(0), d = f.features.dim(1), h = f.features.dim(2), w = f.features.dim(3);
  const Tensorf z = nn::reshape(nn::permute(f.features, {0, 2, 3, 1}), {n * h * w, d});
  f.indices = nearest(z);
  const Tensorf e = nn::embedding(codebook_, std::span<const int>(f.indices));
  f.codebook_loss = nn::mse(e, z.detach());
  f.commitment_loss = nn::mse(z, e.detach());
  // Straight-through: forward value e, gradient flows to z unchanged.
  const Tensorf zq = nn::add(z, nn::sub(e, z).detach());
  f.quantized = nn::permute(nn::reshape(zq, {n, h, w, d}), {0, 3, 1, 2});
  f.probs = net_.decode(f.quantized);
  return f;
}

Tensorf VqVae::reconstruct(const Tensorf& maps) const {
  nn::NoGradGuard guard;
  return forward(maps).probs;
}

std::vector<TokenGrid> VqVae::tokenize(std::span<const SemanticMap> maps) const {
  check_maps(maps, cfg_, "tokenize");
  std::vector<TokenGrid> out;
  out.reserve(maps.size());
  nn::NoGradGuard guard;
  const int gr = cfg_.grid_rows(), gc = cfg_.grid_cols();
  const std::size_t per = static_cast<std::size_t>(gr) * gc;
  for_chunks(maps.size(), kInferenceChunk, [&](std::size_t start, std::size_t len) {
    const Tensorf feats = net_.encode(maps_to_tensor(maps.subspan(start, len)));
    const auto idx = nearest(nn::reshape(nn::permute(feats, {0, 2, 3, 1}), {static_cast<int>(len * per), cfg_.code_dim}));
    for (std::size_t s = 0; s < len; ++s)
      out.push_back({gr, gc, cfg_.codebook_size,
                     std::vector<int>(idx.begin() + static_cast<std::ptrdiff_t>(s * per),
                                      idx.begin() + static_cast<std::ptrdiff_t>((s + 1) * per))});
  });
  return out;
}

TokenGrid VqVae::tokenize_partial(const PartialMap& map, double theta_obs) const {
  const auto hidden = hidden_patches(map, cfg_, theta_obs);
  nn::NoGradGuard guard;
  const Tensorf feats = net_.encode(partial_to_tensor(map));
  const int gr = cfg_.grid_rows(), gc = cfg_.grid_cols();
  TokenGrid g{gr, gc, cfg_.codebook_size, nearest(nn::reshape(nn::permute(feats, {0, 2, 3, 1}), {gr * gc, cfg_.code_dim}))};
  for (std::size_t i = 0; i < hidden.size(); ++i)
    if (hidden[i]) g.tokens[i] = g.mask_token();
  return g;
}

Tensorf VqVae::decode_tokens(const TokenGrid& grid) const {
  check_decodable(grid, cfg_, cfg_.codebook_size);
  nn::NoGradGuard guard;
  const Tensorf e = nn::embedding(codebook_, std::span<const int>(grid.tokens));
  return net_.decode(nn::permute(nn::reshape(e, {1, grid.rows, grid.cols, cfg_.code_dim}), {0, 3, 1, 2}));
}

void VqVae::init_codebook_from(std::span<const SemanticMap> maps, std::uint64_t seed) {
  check_maps(maps, cfg_, "codebook init");
  if (maps.empty()) return;
  std::vector<float> pool;
  {
    nn::NoGradGuard guard;
    for_chunks(maps.size(), kInferenceChunk, [&](std::size_t start, std::size_t len) {
      const Tensorf feats = net_.encode(maps_to_tensor(maps.subspan(start, len)));
      const Tensorf z = nn::permute(feats, {0, 2, 3, 1});
      pool.insert(pool.end(), z.values().begin(), z.values().end());
    });
  }
  const std::size_t d = static_cast<std::size_t>(cfg_.code_dim);
  std::vector<std::size_t> order(pool.size() / d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(seed);
  rng.shuffle(order);
  auto cb = codebook_.mutable_values();
  const std::size_t rows = std::min(order.size(), static_cast<std::size_t>(cfg_.codebook_size));
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(pool.begin() + static_cast<std::ptrdiff_t>(order[r] * d), d,
                cb.begin() + static_cast<std::ptrdiff_t>(r * d));
}

nn::Checkpoint VqVae::checkpoint() const {
  nn::Checkpoint ck;
  ck.config = geometry_json(cfg_);
  ck.config["kind"] = "vqvae";
  ck.config["codebook_size"] = cfg_.codebook_size;
  ck.config["code_dim"] = cfg_.code_dim;
  ck.config["commitment"] = cfg_.commitment;
  nn::capture(net_.parameters(), ck);
  return ck;
}

VqVae VqVae::from_checkpoint(const nn::Checkpoint& ck) {
  if (ck.config.value("kind", "") != "vqvae") throw DataError("checkpoint does not hold a vqvae tokenizer");
  VqConfig cfg;
  read_geometry(ck.config, cfg);
  cfg.codebook_size = ck.config.value("codebook_size", 0);
  cfg.code_dim = ck.config.value("code_dim", 0);
  cfg.commitment = ck.config.value("commitment", 0.25);
  try {
    validate(cfg);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint config is invalid: ") + e.what());
  }
  VqVae model(cfg, 0);
  nn::restore(model.parameters(), ck);
  return model;
}

std::unique_ptr<Tokenizer> load_tokenizer(const nn::Checkpoint& ck) {
  const std::string kind = ck.config.value("kind", "");
  if (kind == "bitvae") return std::make_unique<BitVae>(BitVae::from_checkpoint(ck));
  if (kind == "vqvae") return std::make_unique<VqVae>(VqVae::from_checkpoint(ck));
  throw DataError("checkpoint holds no tokenizer (kind '" + kind + "')");
}

// ---------------------------------------------------------------------------
// Training

EpochLosses evaluate_reconstruction(const Tokenizer& model, std::span<const SemanticMap> maps) {
  EpochLosses out;
  if (maps.empty()) return out;
  const auto& cfg = model.geometry();
  check_maps(maps, cfg, "evaluation");
  nn::NoGradGuard guard;
  for_chunks(maps.size(), kInferenceChunk, [&](std::size_t start, std::size_t len) {
    const Tensorf x = maps_to_tensor(maps.subspan(start, len));
    const auto l = reconstruction_loss(model.reconstruct(x), x, cfg.lambda_bce, cfg.lambda_iou);
    out.train_total += l.total.item() * static_cast<double>(len);
    out.train_bce += l.bce.item() * static_cast<double>(len);
    out.train_iou += l.iou.item() * static_cast<double>(len);
  });
  const double n = static_cast<double>(maps.size());
  out.train_total /= n;
  out.train_bce /= n;
  out.train_iou /= n;
  out.val_total = out.train_total;
  return out;
}

namespace {

struct StepLosses {
  double total, bce, iou, vq;
};

/// Generic loop shared by both tokenizers; `step` builds the loss graph for
/// a batch and returns its scalar pieces plus the total tensor.
template <typename Model, typename Step>
TokenizerTrainResult train_tokenizer(Model& model, std::span<const SemanticMap> train,
                                     std::span<const SemanticMap> val, const TrainConfig& cfg, Step&& step) {
  if (train.empty()) throw DataError("tokenizer training needs at least one map");
  if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.lr > 0) || cfg.stop_after < 0)
    throw ConfigError("epochs, batch_size and lr must be positive; stop_after non-negative");
  check_maps(train, model.geometry(), "training");
  check_maps(val, model.geometry(), "validation");

  TokenizerTrainResult result;
  result.initial_train_total = evaluate_reconstruction(model, train).train_total;

  auto params = model.parameters().tensors();
  nn::Adam opt(params, {.lr = cfg.lr});
  const std::size_t batches = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = static_cast<double>(batches) * cfg.epochs;
  const int run_epochs = cfg.stop_after > 0 ? std::min(cfg.stop_after, cfg.epochs) : cfg.epochs;
  double best_val = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(train.size());
  std::vector<SemanticMap> batch;
  for (int epoch = 0; epoch < run_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng rng(CounterRng::derive(cfg.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);

    EpochLosses e;
    e.epoch = epoch;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t start = b * cfg.batch_size;
      const std::size_t len = std::min<std::size_t>(cfg.batch_size, train.size() - start);
      batch.clear();
      for (std::size_t i = 0; i < len; ++i) batch.push_back(train[order[start + i]]);

      const double progress = static_cast<double>(opt.steps()) / total_steps;
      opt.set_lr(cfg.lr * (cfg.final_lr_fraction +
                           (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress))));
      opt.zero_grad();
      const auto [loss, parts] = step(maps_to_tensor(batch));
      if (!std::isfinite(parts.total))
        throw DivergenceError(fmt::format("tokenizer loss became non-finite in epoch {} (batch {})", epoch, b));
      loss.backward();
      if (cfg.grad_clip > 0) nn::clip_grad_norm(params, cfg.grad_clip);
      opt.step();

      const double wgt = static_cast<double>(len);
      e.train_total += parts.total * wgt;
      e.train_bce += parts.bce * wgt;
      e.train_iou += parts.iou * wgt;
      e.train_vq += parts.vq * wgt;
    }
    const double n = static_cast<double>(train.size());
    e.train_total /= n;
    e.train_bce /= n;
    e.train_iou /= n;
    e.train_vq /= n;
    e.val_total = val.empty() ? e.train_total : evaluate_reconstruction(model, val).train_total;
    if (!std::isfinite(e.val_total))
      throw DivergenceError(fmt::format("validation loss became non-finite in epoch {}", epoch));
    result.trace.push_back(e);
    if (e.val_total < best_val) {
      best_val = e.val_total;
      result.best_epoch = epoch;
      result.best = model.checkpoint();
    }
  }
  nn::restore(model.parameters(), result.best);
  return result;
}

}  // namespace

TokenizerTrainResult train_bitvae(BitVae& model, std::span<const SemanticMap> train, std::span<const SemanticMap> val,
                                  const TrainConfig& cfg) {
  const auto& mc = model.config();
  return train_tokenizer(model, train, val, cfg, [&](const Tensorf& x) {
    const auto f = model.forward(x);
    const auto l = reconstruction_loss(f.probs, x, mc.lambda_bce, mc.lambda_iou);
    return std::pair{l.total, StepLosses{l.total.item(), l.bce.item(), l.iou.item(), 0.0}};
  });
}

TokenizerTrainResult train_vqvae(VqVae& model, std::span<const SemanticMap> train, std::span<const SemanticMap> val,
                                 const TrainConfig& cfg) {
  const auto& mc = model.config();
  return train_tokenizer(model, train, val, cfg, [&](const Tensorf& x) {
    const auto f = model.forward(x);
    const auto l = reconstruction_loss(f.probs, x, mc.lambda_bce, mc.lambda_iou);
    const Tensorf vq = nn::add(f.codebook_loss, nn::scale(f.commitment_loss, static_cast<float>(mc.commitment)));
    const Tensorf total = nn::add(l.total, vq);
    return std::pair{total, StepLosses{total.item(), l.bce.item(), l.iou.item(), vq.item()}};
  });
}

}  // namespace mapbert
