#include "mapbert/cli.hpp"

#include <fmt/format.h>

#include <CLI11.hpp>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "json.hpp"
#include "mapbert/config.hpp"
#include "mapbert/error.hpp"
#include "mapbert/eval.hpp"
#include "mapbert/rng.hpp"

namespace mapbert {
namespace {

using nlohmann::json;

// Every artifact carries these two fields.
json stamp(const ExperimentConfig& c, std::uint64_t seed) {
  return {{"fingerprint", c.fingerprint()}, {"seed", seed}};
}

// The dataset layout has no room for metadata, so provenance goes to a
// sidecar file next to it.
void write_dataset_with_meta(const Dataset& d, const std::filesystem::path& path, json meta) {
  write_dataset(d, path);
  meta["file"] = path.filename().string();
  meta["count"] = d.maps.size();
  write_file(path.string() + ".meta.json", meta.dump(2) + "\n");
}

void write_ppm_with_meta(const RgbImage& image, const std::filesystem::path& path, const json& meta) {
  std::string ppm = to_ppm(image);
  ppm.insert(3, fmt::format("# fingerprint={} seed={}\n", meta.at("fingerprint").get<std::string>(),
                            meta.at("seed").get<std::uint64_t>()));
  write_file(path, ppm);
}

Dataset read_checked(const std::filesystem::path& path, const ExperimentConfig& c) {
  Dataset d = read_dataset(path);
  const auto& g = c.geometry();
  for (const auto& m : d.maps)
    if (m.height() != g.height || m.width() != g.width || m.channels() != g.channels)
      throw DataError(fmt::format("{} holds {}x{}x{} maps but the config expects {}x{}x{}", path.string(), m.height(),
                                  m.width(), m.channels(), g.height, g.width, g.channels));
  if (d.patch_size != g.patch_size)
    throw DataError(fmt::format("{} uses patch size {} but the config expects {}", path.string(), d.patch_size,
                                g.patch_size));
  return d;
}

std::unique_ptr<Tokenizer> load_checked_tokenizer(const std::filesystem::path& path, const ExperimentConfig& c) {
  auto tok = load_tokenizer(nn::Checkpoint::load(path));
  const std::string want_kind = c.tokenizer == TokenizerKind::kBitVae ? "bitvae" : "vqvae";
  if (tok->kind() != want_kind)
    throw DataError(fmt::format("tokenizer {} is a {} but the config selects {}", path.string(), tok->kind(), want_kind));
  const auto& g = tok->geometry();
  const auto& want = c.geometry();
  if (g.height != want.height || g.width != want.width || g.channels != want.channels ||
      g.patch_size != want.patch_size || tok->codebook_size() != c.codebook_size())
    throw DataError(fmt::format("tokenizer {} ({} tokens, {}x{} patches of {}) does not match the config ({} tokens)",
                                path.string(), tok->codebook_size(), g.grid_rows(), g.grid_cols(), g.patch_size,
                                c.codebook_size()));
  return tok;
}

std::filesystem::path or_default(const std::string& given, const std::filesystem::path& fallback) {
  return given.empty() ? fallback : std::filesystem::path(given);
}

void check_threads_env() {
  const char* v = std::getenv("MAPBERT_THREADS");
  if (v == nullptr) return;
  const std::string_view s(v);
  int n = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
  if (ec != std::errc{} || ptr != s.data() + s.size() || n < 1)
    throw ConfigError(fmt::format("MAPBERT_THREADS must be a positive integer, got '{}'", s));
}

// ---------------------------------------------------------------------------
// Commands

int cmd_gen_data(const ExperimentConfig& c, std::ostream& out) {
  const std::uint64_t seed = c.scene.seed;
  const struct {
    const char* split;
    int count;
    std::filesystem::path path;
  } splits[] = {{"train", c.train_maps, c.train_data()}, {"val", c.val_maps, c.val_data()},
                {"eval", c.eval_maps, c.eval_data()}};
  json summary = stamp(c, seed);
  for (std::size_t i = 0; i < std::size(splits); ++i) {
    Dataset d;
    d.palette = c.scene.palette;
    d.patch_size = c.scene.patch_size;
    d.maps = generate_dataset(c.scene, splits[i].count, CounterRng::derive(seed, i));
    json meta = stamp(c, seed);
    meta["split"] = splits[i].split;
    write_dataset_with_meta(d, splits[i].path, meta);
    summary[splits[i].split] = splits[i].path.string();
  }
  summary["command"] = "gen-data";
  out << summary.dump() << "\n";
  return 0;
}

int cmd_train_vae(const ExperimentConfig& c, std::ostream& out) {
  const Dataset train = read_checked(c.train_data(), c), val = read_checked(c.val_data(), c);
  const std::uint64_t seed = c.seed();
  const std::uint64_t init_seed = CounterRng::derive(seed, 1);
  TokenizerTrainResult result;
  nn::Checkpoint ck;
  if (c.tokenizer == TokenizerKind::kBitVae) {
    BitVae model(c.bitvae, init_seed);
    result = train_bitvae(model, train.maps, val.maps, c.vae_train);
    ck = model.checkpoint();
  } else {
    VqVae model(c.vqvae, init_seed);
    model.init_codebook_from(train.maps, CounterRng::derive(seed, 2));
    result = train_vqvae(model, train.maps, val.maps, c.vae_train);
    ck = model.checkpoint();
  }
  ck.config["fingerprint"] = c.fingerprint();
  ck.config["seed"] = seed;
  ck.save(c.tokenizer_checkpoint());

  std::string trace;
  for (const auto& e : result.trace) {
    json j = stamp(c, seed);
    j.update({{"type", "epoch"},
              {"epoch", e.epoch},
              {"train_total", e.train_total},
              {"train_bce", e.train_bce},
              {"train_iou", e.train_iou},
              {"train_vq", e.train_vq},
              {"val_total", e.val_total}});
    trace += j.dump() + "\n";
  }
  json summary = stamp(c, seed);
  summary.update({{"type", "summary"},
                  {"initial_train_total", result.initial_train_total},
                  {"best_epoch", result.best_epoch},
                  {"checkpoint", c.tokenizer_checkpoint().string()}});
  trace += summary.dump() + "\n";
  write_file(c.tokenizer_trace(), trace);
  summary["command"] = "train-vae";
  out << summary.dump() << "\n";
  return 0;
}

int cmd_train_mt(const ExperimentConfig& c, std::ostream& out) {
  const Dataset train = read_checked(c.train_data(), c), val = read_checked(c.val_data(), c);
  const auto tok = load_checked_tokenizer(c.tokenizer_checkpoint(), c);
  const std::uint64_t seed = c.seed();
  Maskformer model(c.resolved_maskformer(), CounterRng::derive(seed, 3));
  const auto result = train_maskformer(model, *tok, train.maps, val.maps, c.mt_train);
  auto ck = model.checkpoint();
  ck.config["fingerprint"] = c.fingerprint();
  ck.config["seed"] = seed;
  ck.save(c.maskformer_checkpoint());

  std::string trace;
  for (const auto& e : result.trace) {
    json j = stamp(c, seed);
    j.update({{"type", "epoch"},
              {"epoch", e.epoch},
              {"train_loss", e.train_loss},
              {"val_restoration_accuracy", e.val_accuracy}});
    trace += j.dump() + "\n";
  }
  json summary = stamp(c, seed);
  summary.update({{"type", "summary"},
                  {"initial_train_loss", result.initial_train_loss},
                  {"final_train_loss", result.final_train_loss},
                  {"checkpoint", c.maskformer_checkpoint().string()}});
  trace += summary.dump() + "\n";
  write_file(c.maskformer_trace(), trace);
  summary["command"] = "train-mt";
  out << summary.dump() << "\n";
  return 0;
}

struct GenerateArgs {
  std::string input;
  int index = 0;
  std::string target;
  std::string mask_spec;
  std::string output;
  std::string panel;
  std::string tokenizer;
  std::string maskformer;
};

int cmd_generate(const ExperimentConfig& c, const GenerateArgs& a, std::ostream& out) {
  const Dataset input = read_checked(a.input, c);
  if (a.index < 0 || a.index >= static_cast<int>(input.maps.size()))
    throw DataError(fmt::format("--index {} outside [0, {})", a.index, input.maps.size()));
  const SemanticMap& gt = input.maps[static_cast<std::size_t>(a.index)];
  std::optional<int> target;
  if (!a.target.empty()) {
    target = input.palette.find(a.target);
    if (!target) throw ConfigError(fmt::format("--target '{}' is not a palette category", a.target));
  }
  const auto tok = load_checked_tokenizer(or_default(a.tokenizer, c.tokenizer_checkpoint()), c);
  const auto model =
      Maskformer::from_checkpoint(nn::Checkpoint::load(or_default(a.maskformer, c.maskformer_checkpoint())));
  const MaskPlan plan = parse_mask_spec(a.mask_spec, gt, c.geometry().patch_size, target, c.ssr.seed);
  const PartialMap partial = apply_mask(gt, plan);
  const SemanticMap pred = generate(*tok, model, partial, target, c.ssr.generate);

  const std::uint64_t seed = c.ssr.seed;
  const std::filesystem::path out_map = a.output.empty() ? c.dir / "generated.smap" : std::filesystem::path(a.output);
  const std::filesystem::path panel = a.panel.empty() ? c.dir / "generated.ppm" : std::filesystem::path(a.panel);
  Dataset d;
  d.palette = input.palette;
  d.patch_size = input.patch_size;
  d.maps = {pred};
  json meta = stamp(c, seed);
  meta.update({{"input", a.input}, {"index", a.index}, {"mask_spec", a.mask_spec}, {"target", a.target}});
  write_dataset_with_meta(d, out_map, meta);
  write_ppm_with_meta(comparison_panel(gt, partial, pred, input.palette), panel, meta);

  const auto m = map_metrics(pred, gt);
  json summary = stamp(c, seed);
  summary.update({{"command", "generate"},
                  {"output", out_map.string()},
                  {"panel", panel.string()},
                  {"masked_patches", plan.masked_count()},
                  {"iou", 100 * m.iou},
                  {"precision", 100 * m.precision},
                  {"recall", 100 * m.recall},
                  {"f1", 100 * m.f1}});
  out << summary.dump() << "\n";
  return 0;
}

int cmd_eval(const ExperimentConfig& c, const std::string& tok_path, const std::string& mt_path, std::ostream& out) {
  const Dataset eval_set = read_checked(c.eval_data(), c);
  const auto tok = load_checked_tokenizer(or_default(tok_path, c.tokenizer_checkpoint()), c);
  const auto model =
      Maskformer::from_checkpoint(nn::Checkpoint::load(or_default(mt_path, c.maskformer_checkpoint())));
  const auto result = ssr(*tok, model, eval_set.maps, c.ssr);
  const double restoration = restoration_accuracy(*tok, model, eval_set.maps, c.restoration_ratio, c.ssr.seed);
  const auto report =
      make_report(c.tokenizer == TokenizerKind::kBitVae ? "BitVAE" : "VQVAE", result, restoration, c.fingerprint(),
                  c.ssr.seed, c.ssr.min_overlap, eval_set.palette);
  write_file(c.eval_report(), report_jsonl(report));
  const std::vector<EvalReport> reports{report};
  write_file(c.eval_table(), report_table(reports));
  json summary = summary_json(report);
  summary["command"] = "eval";
  out << summary.dump() << "\n";
  return 0;
}

int cmd_ablate(const ExperimentConfig& c, std::ostream& out) {
  const Dataset train = read_checked(c.train_data(), c), val = read_checked(c.val_data(), c),
                eval_set = read_checked(c.eval_data(), c);
  AblationSettings s;
  s.bitvae = c.bitvae;
  s.vqvae = c.vqvae;
  s.tokenizer_train = c.vae_train;
  s.maskformer = c.maskformer;
  s.maskformer_train = c.mt_train;
  s.ssr = c.ssr;
  s.restoration_ratio = c.restoration_ratio;
  s.seed = c.seed();
  const auto cells = c.ablation_cells();
  const auto rows = ablation_run(cells, s, train.maps, val.maps, eval_set.maps, eval_set.palette, c.fingerprint());
  std::string jsonl;
  int failed = 0;
  for (const auto& r : rows) {
    json j = stamp(c, c.seed());
    j["cell"] = r.cell.name();
    j["ok"] = r.ok;
    if (r.ok) {
      j["summary"] = summary_json(r.report);
    } else {
      j["error"] = r.error;
      ++failed;
    }
    jsonl += j.dump() + "\n";
  }
  write_file(c.ablation_report(), jsonl);
  const std::string table = ablation_table(rows);
  write_file(c.ablation_table(), fmt::format("# fingerprint={} seed={}\n{}", c.fingerprint(), c.seed(), table));
  out << table;
  if (failed > 0) throw EvalError(fmt::format("{} of {} ablation cells failed", failed, rows.size()));
  return 0;
}

const char* kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::kConfig:
      return "config";
    case ErrorKind::kData:
      return "data";
    case ErrorKind::kDivergence:
      return "divergence";
    case ErrorKind::kEval:
      return "eval";
  }
  return "unknown";
}

int fail(std::ostream& err, ErrorKind kind, const std::string& message) {
  err << json{{"error", kind_name(kind)}, {"code", static_cast<int>(kind)}, {"message", message}}.dump() << "\n";
  return static_cast<int>(kind);
}

}  // namespace

MaskPlan parse_mask_spec(const std::string& spec, const SemanticMap& map, int patch_size,
                         std::optional<int> target, std::uint64_t seed) {
  check_patch_geometry(map.height(), map.width(), patch_size);
  const int rows = map.height() / patch_size, cols = map.width() / patch_size;
  const int patches = rows * cols;
  CounterRng rng(seed);
  const auto ratio_of = [&](const std::string& s) {
    double r = 0;
    std::size_t used = 0;
    try {
      r = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || !(r > 0 && r <= 1))
      throw ConfigError(fmt::format("mask spec ratio '{}' must lie in (0, 1]", s));
    return masked_patch_count(r, patches);
  };
  if (spec.empty()) return MaskPlan(patch_size, rows, cols, std::vector<PatchCoord>{});
  if (spec == "all") return random_mask_plan(patch_size, rows, cols, patches, rng);
  if (spec.rfind("random:", 0) == 0) return random_mask_plan(patch_size, rows, cols, ratio_of(spec.substr(7)), rng);
  if (spec.rfind("object:", 0) == 0) {
    if (!target) throw ConfigError("mask spec 'object:<ratio>' needs --target");
    return object_mask_plan(map, patch_size, *target, ratio_of(spec.substr(7)), rng);
  }
  std::vector<PatchCoord> coords;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ';')) {
    if (item.empty()) continue;
    int r = -1, c = -1;
    char comma = 0, extra = 0;
    std::istringstream is(item);
    if (!(is >> r >> comma >> c) || comma != ',' || (is >> extra))
      throw ConfigError(fmt::format("mask spec entry '{}' is not row,col", item));
    if (r < 0 || r >= rows || c < 0 || c >= cols)
      throw ConfigError(fmt::format("mask spec patch {},{} outside the {}x{} patch grid", r, c, rows, cols));
    coords.push_back({r, c});
  }
  return MaskPlan(patch_size, rows, cols, coords, target);
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"mapbert: semantic map completion with bit tokens and a masked transformer", "mapbert"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "experiment config file")->required();
    sub->add_option("--set", overrides, "override one key, e.g. --set train.seed=3")->take_all();
  };
  auto* gen_data = app.add_subcommand("gen-data", "generate train / val / eval map datasets");
  auto* train_vae = app.add_subcommand("train-vae", "train the tokenizer (BitVAE or VQ baseline)");
  auto* train_mt = app.add_subcommand("train-mt", "train the masked transformer on a frozen tokenizer");
  auto* gen = app.add_subcommand("generate", "complete one partial map");
  auto* ev = app.add_subcommand("eval", "restoration accuracy, map metrics and sSR on the eval split");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate the ablation grid");
  for (auto* s : {gen_data, train_vae, train_mt, gen, ev, ablate}) add_common(s);

  GenerateArgs ga;
  gen->add_option("--input", ga.input, "dataset file holding the map")->required();
  gen->add_option("--index", ga.index, "map index inside the dataset");
  gen->add_option("--target", ga.target, "target category name");
  gen->add_option("--mask-spec", ga.mask_spec,
                  "'' (none), all, random:<ratio>, object:<ratio> or row,col;row,col");
  gen->add_option("--output", ga.output, "output dataset file");
  gen->add_option("--panel", ga.panel, "output PPM panel");
  gen->add_option("--tokenizer", ga.tokenizer, "tokenizer checkpoint (default from config)");
  gen->add_option("--maskformer", ga.maskformer, "transformer checkpoint (default from config)");
  std::string eval_tok, eval_mt;
  ev->add_option("--tokenizer", eval_tok, "tokenizer checkpoint (default from config)");
  ev->add_option("--maskformer", eval_mt, "transformer checkpoint (default from config)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    return fail(err, ErrorKind::kConfig, e.what());
  }

  try {
    check_threads_env();
    const ExperimentConfig c = load_config(config_path, overrides);
    if (*gen_data) return cmd_gen_data(c, out);
    if (*train_vae) return cmd_train_vae(c, out);
    if (*train_mt) return cmd_train_mt(c, out);
    if (*gen) return cmd_generate(c, ga, out);
    if (*ev) return cmd_eval(c, eval_tok, eval_mt, out);
    return cmd_ablate(c, out);
  } catch (const Error& e) {
    return fail(err, e.kind(), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(err, ErrorKind::kData, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(err, ErrorKind::kData, e.what());
  }
}

}  // namespace mapbert
