#include "mapbert/config.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "mapbert/error.hpp"
#include "mapbert/rng.hpp"

namespace mapbert {
namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError(fmt::format("{}: '{}' is not {}", key, value, expected));
}

long long parse_integer(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

int parse_int(const std::string& key, const std::string& v) {
  const long long x = parse_integer(key, v);
  if (x < -(1LL << 31) || x >= (1LL << 31)) bad_value(key, v, "a 32-bit integer");
  return static_cast<int>(x);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) bad_value(key, v, "an unsigned integer");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  if (v.empty()) bad_value(key, v, "a number");
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    bad_value(key, v, "a number");
  }
  if (used != v.size() || !std::isfinite(out)) bad_value(key, v, "a finite number");
  return out;
}

std::string fmt_double(double x) { return fmt::format("{}", x); }

struct Field {
  std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define MB_INT(member)                                                                               \
  Field {                                                                                            \
    [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = parse_int(k, v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.member); }                           \
  }
#define MB_DOUBLE(member)                                                                                 \
  Field {                                                                                                 \
    [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = parse_double(k, v); }, \
        [](const ExperimentConfig& c) { return fmt_double(c.member); }                                    \
  }
#define MB_U64(member)                                                                                 \
  Field {                                                                                              \
    [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = parse_u64(k, v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.member); }                             \
  }

using Registry = std::map<std::string, Field>;  // "section.key" -> field

const Registry& registry() {
  static const Registry r = [] {
    Registry m;
    // [scene]
    m["scene.height"] = MB_INT(scene.height);
    m["scene.width"] = MB_INT(scene.width);
    m["scene.patch_size"] = MB_INT(scene.patch_size);
    m["scene.rooms_min"] = MB_INT(scene.room_count_range.first);
    m["scene.rooms_max"] = MB_INT(scene.room_count_range.second);
    m["scene.objects_min"] = MB_INT(scene.objects_per_room_range.first);
    m["scene.objects_max"] = MB_INT(scene.objects_per_room_range.second);
    m["scene.object_size_min"] = MB_INT(scene.object_size_range.first);
    m["scene.object_size_max"] = MB_INT(scene.object_size_range.second);
    m["scene.min_room_size"] = MB_INT(scene.min_room_size);
    m["scene.seed"] = MB_U64(scene.seed);
    m["scene.train_maps"] = MB_INT(train_maps);
    m["scene.val_maps"] = MB_INT(val_maps);
    m["scene.eval_maps"] = MB_INT(eval_maps);
    // [bitvae]
    m["bitvae.bits"] = MB_INT(bitvae.bits);
    m["bitvae.encoder_width"] = MB_INT(bitvae.encoder_width);
    m["bitvae.decoder_width"] = MB_INT(bitvae.decoder_width);
    m["bitvae.decoder_blocks"] = MB_INT(bitvae.decoder_blocks);
    m["bitvae.upsample_width"] = MB_INT(bitvae.upsample_width);
    m["bitvae.lambda_bce"] = MB_DOUBLE(bitvae.lambda_bce);
    m["bitvae.lambda_iou"] = MB_DOUBLE(bitvae.lambda_iou);
    // [vqvae]
    m["vqvae.codebook_size"] = MB_INT(vqvae.codebook_size);
    m["vqvae.code_dim"] = MB_INT(vqvae.code_dim);
    m["vqvae.commitment"] = MB_DOUBLE(vqvae.commitment);
    m["vqvae.encoder_width"] = MB_INT(vqvae.encoder_width);
    m["vqvae.decoder_width"] = MB_INT(vqvae.decoder_width);
    m["vqvae.decoder_blocks"] = MB_INT(vqvae.decoder_blocks);
    m["vqvae.upsample_width"] = MB_INT(vqvae.upsample_width);
    m["vqvae.lambda_bce"] = MB_DOUBLE(vqvae.lambda_bce);
    m["vqvae.lambda_iou"] = MB_DOUBLE(vqvae.lambda_iou);
    // [maskformer]
    m["maskformer.d_model"] = MB_INT(maskformer.d_model);
    m["maskformer.layers"] = MB_INT(maskformer.layers);
    m["maskformer.heads"] = MB_INT(maskformer.heads);
    m["maskformer.ffn_width"] = MB_INT(maskformer.ffn_width);
    m["maskformer.p_obj"] = MB_DOUBLE(maskformer.p_obj);
    m["maskformer.iterations"] = MB_INT(maskformer.iterations);
    m["maskformer.decode"] = Field{[](ExperimentConfig& c, const std::string& k, const std::string& v) {
                                     const auto s = lower(v);
                                     if (s == "single") {
                                       c.maskformer.decode = DecodeMode::kSinglePass;
                                     } else if (s == "iterative") {
                                       c.maskformer.decode = DecodeMode::kIterative;
                                     } else {
                                       bad_value(k, v, "'single' or 'iterative'");
                                     }
                                   },
                                   [](const ExperimentConfig& c) {
                                     return std::string(c.maskformer.decode == DecodeMode::kIterative ? "iterative"
                                                                                                      : "single");
                                   }};
    // [train]
    m["train.tokenizer"] = Field{[](ExperimentConfig& c, const std::string& k, const std::string& v) {
                                   const auto s = lower(v);
                                   if (s == "bitvae") {
                                     c.tokenizer = TokenizerKind::kBitVae;
                                   } else if (s == "vqvae") {
                                     c.tokenizer = TokenizerKind::kVqVae;
                                   } else {
                                     bad_value(k, v, "'bitvae' or 'vqvae'");
                                   }
                                 },
                                 [](const ExperimentConfig& c) {
                                   return std::string(c.tokenizer == TokenizerKind::kBitVae ? "bitvae" : "vqvae");
                                 }};
    m["train.seed"] = Field{[](ExperimentConfig& c, const std::string& k, const std::string& v) {
                              c.vae_train.seed = parse_u64(k, v);
                              c.mt_train.seed = c.vae_train.seed;
                            },
                            [](const ExperimentConfig& c) { return std::to_string(c.vae_train.seed); }};
    m["train.vae_epochs"] = MB_INT(vae_train.epochs);
    m["train.vae_batch_size"] = MB_INT(vae_train.batch_size);
    m["train.vae_lr"] = MB_DOUBLE(vae_train.lr);
    m["train.vae_final_lr_fraction"] = MB_DOUBLE(vae_train.final_lr_fraction);
    m["train.vae_grad_clip"] = MB_DOUBLE(vae_train.grad_clip);
    m["train.mt_epochs"] = MB_INT(mt_train.epochs);
    m["train.mt_batch_size"] = MB_INT(mt_train.batch_size);
    m["train.mt_lr"] = MB_DOUBLE(mt_train.lr);
    m["train.mt_warmup_steps"] = MB_INT(mt_train.warmup_steps);
    m["train.mt_final_lr_fraction"] = MB_DOUBLE(mt_train.final_lr_fraction);
    m["train.mt_grad_clip"] = MB_DOUBLE(mt_train.grad_clip);
    m["train.mt_val_ratio"] = MB_DOUBLE(mt_train.val_ratio);
    m["train.stop_after"] = Field{[](ExperimentConfig& c, const std::string& k, const std::string& v) {
                                    c.mt_train.stop_after = parse_int(k, v);
                                    c.vae_train.stop_after = c.mt_train.stop_after;
                                  },
                                  [](const ExperimentConfig& c) { return std::to_string(c.mt_train.stop_after); }};
    // [eval]
    m["eval.trials"] = MB_INT(ssr.trials);
    m["eval.mask_ratio"] = MB_DOUBLE(ssr.mask_ratio);
    m["eval.min_overlap"] = MB_INT(ssr.min_overlap);
    m["eval.theta_obs"] = MB_DOUBLE(ssr.generate.theta_obs);
    m["eval.seed"] = MB_U64(ssr.seed);
    m["eval.restoration_ratio"] = MB_DOUBLE(restoration_ratio);
    m["eval.ablation"] = Field{[](ExperimentConfig& c, const std::string&, const std::string& v) { c.ablation = v; },
                               [](const ExperimentConfig& c) { return c.ablation; }};
    // [paths]
    m["paths.dir"] = Field{[](ExperimentConfig& c, const std::string&, const std::string& v) { c.dir = v; },
                           [](const ExperimentConfig& c) { return c.dir.generic_string(); }};
    return m;
  }();
  return r;
}

#undef MB_INT
#undef MB_DOUBLE
#undef MB_U64

// Keys that restate a value owned by another section. They are accepted only
// when they agree with the owner, which keeps b, P, H and W consistent.
struct Restatement {
  std::string key;
  std::string value;
};

const std::map<std::string, std::string>& restated_keys() {
  static const std::map<std::string, std::string> m = {
      {"bitvae.height", "scene.height"},      {"bitvae.width", "scene.width"},
      {"bitvae.patch_size", "scene.patch_size"}, {"vqvae.height", "scene.height"},
      {"vqvae.width", "scene.width"},         {"vqvae.patch_size", "scene.patch_size"},
      {"maskformer.bits", "bitvae.bits"},     {"maskformer.codebook_size", "vqvae.codebook_size"},
  };
  return m;
}

std::vector<std::string> section_names() {
  return {"scene", "bitvae", "vqvae", "maskformer", "train", "eval", "paths"};
}

void apply(ExperimentConfig& c, const std::string& full_key, const std::string& value,
           std::vector<Restatement>& restated) {
  const auto dot = full_key.find('.');
  const std::string section = full_key.substr(0, dot);
  const auto sections = section_names();
  if (std::find(sections.begin(), sections.end(), section) == sections.end())
    throw ConfigError(fmt::format("unknown section [{}]", section));
  if (restated_keys().count(full_key)) {
    restated.push_back({full_key, value});
    return;
  }
  const auto it = registry().find(full_key);
  if (it == registry().end())
    throw ConfigError(fmt::format("unknown key '{}' in section [{}]", full_key.substr(dot + 1), section));
  it->second.set(c, full_key, value);
}

void apply_preset(ExperimentConfig& c, const std::string& value) {
  const auto s = lower(value);
  MaskformerConfig p;
  if (s == "desk") {
    p = MaskformerConfig{};
  } else if (s == "vit_base") {
    p = MaskformerConfig::vit_base(1, 1, 2, 1);
  } else if (s == "vit_large") {
    p = MaskformerConfig::vit_large(1, 1, 2, 1);
  } else {
    bad_value("maskformer.preset", value, "'desk', 'vit_base' or 'vit_large'");
  }
  c.maskformer.d_model = p.d_model;
  c.maskformer.layers = p.layers;
  c.maskformer.heads = p.heads;
  c.maskformer.ffn_width = p.ffn_width;
}

void finalize(ExperimentConfig& c, const std::vector<Restatement>& restated) {
  validate(c.scene);
  for (auto* g : std::initializer_list<AutoencoderConfig*>{&c.bitvae, &c.vqvae}) {
    g->height = c.scene.height;
    g->width = c.scene.width;
    g->patch_size = c.scene.patch_size;
    g->channels = c.scene.palette.size();
  }
  for (const auto& r : restated) {
    const auto& owner = restated_keys().at(r.key);
    const std::string actual = registry().at(owner).get(c);
    if (trim(r.value) != actual)
      throw ConfigError(fmt::format("{} = {} contradicts {} = {}", r.key, r.value, owner, actual));
  }
  validate(c.bitvae);
  validate(c.vqvae);
  validate(c.resolved_maskformer());
  const auto positive = [](const char* key, long long v) {
    if (v < 1) throw ConfigError(fmt::format("{} must be at least 1, got {}", key, v));
  };
  positive("scene.train_maps", c.train_maps);
  positive("scene.val_maps", c.val_maps);
  positive("scene.eval_maps", c.eval_maps);
  positive("train.vae_epochs", c.vae_train.epochs);
  positive("train.vae_batch_size", c.vae_train.batch_size);
  positive("train.mt_epochs", c.mt_train.epochs);
  positive("train.mt_batch_size", c.mt_train.batch_size);
  positive("eval.trials", c.ssr.trials);
  positive("eval.min_overlap", c.ssr.min_overlap);
  if (!(c.vae_train.lr > 0)) throw ConfigError("train.vae_lr must be positive");
  if (!(c.mt_train.lr > 0)) throw ConfigError("train.mt_lr must be positive");
  if (c.mt_train.warmup_steps < 0) throw ConfigError("train.mt_warmup_steps must be nonnegative");
  if (c.mt_train.stop_after < 0) throw ConfigError("train.stop_after must be nonnegative");
  for (const auto& [key, v] : {std::pair{"eval.mask_ratio", c.ssr.mask_ratio},
                               std::pair{"eval.restoration_ratio", c.restoration_ratio},
                               std::pair{"train.mt_val_ratio", c.mt_train.val_ratio}})
    if (!(v > 0 && v < 1)) throw ConfigError(fmt::format("{} must lie in (0, 1), got {}", key, v));
  if (!(c.ssr.generate.theta_obs >= 0 && c.ssr.generate.theta_obs <= 1))
    throw ConfigError(fmt::format("eval.theta_obs must lie in [0, 1], got {}", c.ssr.generate.theta_obs));
  c.ssr.generate.mode = c.maskformer.decode;
  c.ssr.generate.iterations = c.maskformer.iterations;
  (void)c.ablation_cells();  // rejects malformed lists early
}

}  // namespace

const AutoencoderConfig& ExperimentConfig::geometry() const {
  return tokenizer == TokenizerKind::kBitVae ? static_cast<const AutoencoderConfig&>(bitvae)
                                             : static_cast<const AutoencoderConfig&>(vqvae);
}

int ExperimentConfig::codebook_size() const {
  return tokenizer == TokenizerKind::kBitVae ? 1 << bitvae.bits : vqvae.codebook_size;
}

MaskformerConfig ExperimentConfig::resolved_maskformer() const {
  MaskformerConfig m = maskformer;
  m.grid_rows = geometry().grid_rows();
  m.grid_cols = geometry().grid_cols();
  m.codebook = codebook_size();
  m.categories = scene.palette.size();
  return m;
}

std::vector<AblationCell> ExperimentConfig::ablation_cells() const {
  if (lower(trim(ablation)) == "default") return default_ablation_grid();
  std::vector<AblationCell> cells;
  std::stringstream ss(ablation);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto a = item.find(':'), b = item.rfind(':');
    if (a == std::string::npos || a == b) bad_value("eval.ablation", item, "of the form kind:size:R|O");
    AblationCell cell;
    const auto kind = lower(item.substr(0, a));
    if (kind == "bitvae") {
      cell.tokenizer = TokenizerKind::kBitVae;
    } else if (kind == "vqvae") {
      cell.tokenizer = TokenizerKind::kVqVae;
    } else {
      bad_value("eval.ablation", item, "a bitvae or vqvae cell");
    }
    cell.size = parse_int("eval.ablation", item.substr(a + 1, b - a - 1));
    const auto mode = lower(item.substr(b + 1));
    if (mode != "r" && mode != "o") bad_value("eval.ablation", item, "masking R or O");
    cell.object_aware = mode == "o";
    cells.push_back(cell);
  }
  if (cells.empty()) throw ConfigError("eval.ablation lists no cells");
  return cells;
}

std::string ExperimentConfig::canonical() const {
  std::string out;
  for (const auto& key : config_keys()) out += fmt::format("{} = {}\n", key, registry().at(key).get(*this));
  return out;
}

std::string ExperimentConfig::fingerprint() const {
  const std::string c = canonical();
  return fmt::format("{:016x}", fnv1a64(c.data(), c.size()));
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& section : section_names())
    for (const auto& [key, field] : registry())
      if (key.substr(0, key.find('.')) == section) keys.push_back(key);
  return keys;
}

ExperimentConfig parse_config(std::string_view text, const std::vector<std::string>& overrides) {
  // Collect (key, value, origin) first so a preset applies before the keys it
  // would otherwise overwrite.
  struct Entry {
    std::string key, value, where;
  };
  std::vector<Entry> entries;
  boost::property_tree::ptree tree;
  try {
    std::istringstream in{std::string(text)};
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(fmt::format("line {}: {}", e.line(), e.message()));
  }
  const auto names = section_names();
  for (const auto& [name, node] : tree) {
    const std::string section = lower(name);
    const bool known = std::find(names.begin(), names.end(), section) != names.end();
    if (node.empty() && (!known || !node.data().empty()))
      throw ConfigError(fmt::format("key '{}' outside any section", name));
    if (std::find(names.begin(), names.end(), section) == names.end())
      throw ConfigError(fmt::format("unknown section [{}]", section));
    for (const auto& [key, value] : node)
      entries.push_back({section + "." + lower(key), trim(value.data()), "[" + section + "]"});
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const std::string key = lower(trim(o.substr(0, eq)));
    if (eq == std::string::npos || key.find('.') == std::string::npos)
      throw ConfigError(fmt::format("override '{}' is not section.key=value", o));
    entries.push_back({key, trim(o.substr(eq + 1)), "override"});
  }

  ExperimentConfig c;
  std::vector<Restatement> restated;
  for (const auto& e : entries)
    if (e.key == "maskformer.preset") apply_preset(c, e.value);
  for (const auto& e : entries) {
    if (e.key == "maskformer.preset") continue;
    try {
      apply(c, e.key, e.value, restated);
    } catch (const ConfigError& err) {
      throw ConfigError(fmt::format("{}: {}", e.where, err.what()));
    }
  }
  finalize(c, restated);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const DataError& e) {
    throw ConfigError(fmt::format("cannot read config: {}", e.what()));
  }
  return parse_config(text, overrides);
}

}  // namespace mapbert
