#include "mapbert/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "json.hpp"
#include "mapbert/config.hpp"
#include "mapbert/error.hpp"

namespace mapbert {
namespace {

namespace fs = std::filesystem;

const char* kTiny = R"(
[scene]
height = 32
width = 32
rooms_min = 1
rooms_max = 3
train_maps = 8
val_maps = 4
eval_maps = 4
[bitvae]
encoder_width = 16
decoder_width = 16
decoder_blocks = 1
upsample_width = 8
[vqvae]
encoder_width = 16
decoder_width = 16
decoder_blocks = 1
upsample_width = 8
[maskformer]
d_model = 32
layers = 1
heads = 2
ffn_width = 64
[train]
vae_epochs = 1
vae_batch_size = 4
mt_epochs = 1
mt_batch_size = 4
mt_warmup_steps = 1
[eval]
trials = 4
ablation = bitvae:5:O, vqvae:32:R
)";

// ---------------------------------------------------------------------------
// Config parsing

TEST(Config, DefaultsParseAndFingerprintIsStable) {
  const auto a = parse_config(""), b = parse_config("# nothing here\n\n");
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_EQ(a.fingerprint().size(), 16u);
  const auto c = parse_config("[train]\nseed = 7\n");
  EXPECT_NE(a.fingerprint(), c.fingerprint());
  EXPECT_EQ(c.seed(), 7u);
  EXPECT_EQ(c.mt_train.seed, 7u);
}

TEST(Config, CanonicalListsEveryKey) {
  const auto c = parse_config("");
  const std::string text = c.canonical();
  for (const auto& key : config_keys()) EXPECT_NE(text.find(key + " = "), std::string::npos) << key;
  // Reparsing the canonical form gives back the same configuration.
  std::string ini;
  std::string section;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto dot = line.find('.');
    const std::string s = line.substr(0, dot);
    if (s != section) ini += "[" + (section = s) + "]\n";
    ini += line.substr(dot + 1) + "\n";
  }
  EXPECT_EQ(parse_config(ini).fingerprint(), c.fingerprint());
}

TEST(Config, UnknownKeyIsNamed) {
  try {
    parse_config("[bitvae]\nbitz = 6\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bitz"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[bitvae]"), std::string::npos);
  }
}

TEST(Config, MalformedInputRejected) {
  EXPECT_THROW(parse_config("[nowhere]\nx = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[bitvae]\nbits = 6\nbits = 7\n"), ConfigError);
  EXPECT_NO_THROW(parse_config("[bitvae]\n; only a comment\n"));
  EXPECT_THROW(parse_config("bits = 6\n"), ConfigError);
  EXPECT_THROW(parse_config("[bitvae]\nbits\n"), ConfigError);
  EXPECT_THROW(parse_config("[bitvae]\nbits = six\n"), ConfigError);
  EXPECT_THROW(parse_config("[bitvae]\nbits = 6.5\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nvae_lr = nan\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\ntokenizer = pq\n"), ConfigError);
  EXPECT_THROW(parse_config("[scene]\nheight = 60\n"), ConfigError);
  EXPECT_THROW(parse_config("[maskformer]\nheads = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("[eval]\nmask_ratio = 1.5\n"), ConfigError);
  EXPECT_THROW(parse_config("[eval]\nablation = bitvae:6\n"), ConfigError);
  EXPECT_THROW(parse_config("", {"no_dot=1"}), ConfigError);
}

TEST(Config, CrossSectionRestatementsMustAgree) {
  EXPECT_NO_THROW(parse_config("[bitvae]\npatch_size = 8\nheight = 64\n[maskformer]\nbits = 6\n"));
  EXPECT_THROW(parse_config("[bitvae]\npatch_size = 16\n"), ConfigError);
  EXPECT_THROW(parse_config("[bitvae]\nbits = 7\n[maskformer]\nbits = 6\n"), ConfigError);
  EXPECT_THROW(parse_config("[vqvae]\ncodebook_size = 32\n[maskformer]\ncodebook_size = 64\n"), ConfigError);
}

TEST(Config, GeometryFlowsFromScene) {
  const auto c = parse_config("[scene]\nheight = 32\nwidth = 48\npatch_size = 16\n[train]\ntokenizer = vqvae\n"
                              "[vqvae]\ncodebook_size = 32\n");
  EXPECT_EQ(c.vqvae.height, 32);
  EXPECT_EQ(c.vqvae.width, 48);
  const auto m = c.resolved_maskformer();
  EXPECT_EQ(m.grid_rows, 2);
  EXPECT_EQ(m.grid_cols, 3);
  EXPECT_EQ(m.codebook, 32);
  EXPECT_EQ(m.categories, 6);
}

TEST(Config, PresetAppliesBeforeExplicitKeys) {
  const auto a = parse_config("[maskformer]\nlayers = 2\npreset = vit_base\n");
  EXPECT_EQ(a.maskformer.d_model, 768);
  EXPECT_EQ(a.maskformer.heads, 12);
  EXPECT_EQ(a.maskformer.layers, 2);
}

TEST(Config, OverridesWinOverFile) {
  const auto c = parse_config("[train]\nseed = 1\n", {"train.seed=2", "eval.trials = 5"});
  EXPECT_EQ(c.seed(), 2u);
  EXPECT_EQ(c.ssr.trials, 5);
}

TEST(Config, AblationList) {
  const auto c = parse_config("[eval]\nablation = bitvae:7:O, vqvae:128:r\n");
  const auto cells = c.ablation_cells();
  ASSERT_EQ(cells.size(), 2u);
  EXPECT_EQ(cells[0].name(), "BitVAE b=7 O");
  EXPECT_EQ(cells[1].name(), "VQVAE N=128 R");
  EXPECT_EQ(parse_config("").ablation_cells().size(), 12u);
}

TEST(Config, ShippedDeskConfigParses) {
  const auto c = load_config(fs::path(MAPBERT_SOURCE_DIR) / "configs" / "desk.ini");
  EXPECT_EQ(c.bitvae.bits, 6);
  EXPECT_EQ(c.maskformer.d_model, 128);
  EXPECT_EQ(c.train_maps, 512);
}

// ---------------------------------------------------------------------------
// Mask specs

TEST(MaskSpec, Forms) {
  const auto map = onehot_encode(LabelGrid(32, 32, kFreeSpace), 6);
  EXPECT_EQ(parse_mask_spec("", map, 8, {}, 1).masked_count(), 0u);
  EXPECT_EQ(parse_mask_spec("all", map, 8, {}, 1).masked_count(), 16u);
  EXPECT_EQ(parse_mask_spec("random:0.5", map, 8, {}, 1).masked_count(), 8u);
  const auto p = parse_mask_spec("0,1;3,3", map, 8, {}, 1);
  EXPECT_TRUE(p.is_masked(0, 1));
  EXPECT_TRUE(p.is_masked(3, 3));
  EXPECT_EQ(p.masked_count(), 2u);
  EXPECT_THROW(parse_mask_spec("4,0", map, 8, {}, 1), ConfigError);
  EXPECT_THROW(parse_mask_spec("1;2", map, 8, {}, 1), ConfigError);
  EXPECT_THROW(parse_mask_spec("random:0", map, 8, {}, 1), ConfigError);
  EXPECT_THROW(parse_mask_spec("object:0.5", map, 8, {}, 1), ConfigError);
}

// ---------------------------------------------------------------------------
// Commands

class CliRun : public ::testing::Test {
 protected:
  void SetUp() override {
    const std::string name = ::testing::UnitTest::GetInstance()->current_test_info()->name();
    dir = fs::temp_directory_path() / ("mapbert_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    config = dir / "tiny.ini";
    write_file(config, std::string(kTiny) + "[paths]\ndir = " + (dir / "out").string() + "\n");
  }
  void TearDown() override { fs::remove_all(dir); }

  int run(std::vector<std::string> args) {
    out.str("");
    err.str("");
    args.insert(args.begin() + 1, {"-c", config.string()});
    return run_cli(args, out, err);
  }

  fs::path dir, config;
  std::ostringstream out, err;
};

TEST_F(CliRun, UnknownKeyExitsWithConfigCode) {
  EXPECT_EQ(run({"gen-data", "--set", "scene.colour=1"}), 2);
  const auto j = nlohmann::json::parse(err.str());
  EXPECT_EQ(j["code"], 2);
  EXPECT_NE(j["message"].get<std::string>().find("colour"), std::string::npos);
  EXPECT_EQ(err.str().find('\n'), err.str().size() - 1);  // exactly one line
}

TEST_F(CliRun, MissingInputsExitWithDataCode) {
  EXPECT_EQ(run({"train-vae"}), 3);
  EXPECT_EQ(nlohmann::json::parse(err.str())["error"], "data");
}

TEST_F(CliRun, BadThreadEnvironmentIsAConfigError) {
  ::setenv("MAPBERT_THREADS", "-1", 1);
  EXPECT_EQ(run({"gen-data"}), 2);
  ::unsetenv("MAPBERT_THREADS");
}

TEST_F(CliRun, PipelineEndToEnd) {
  ASSERT_EQ(run({"gen-data"}), 0) << err.str();
  const auto c = load_config(config);
  const std::string first = read_file(c.train_data());
  ASSERT_EQ(run({"gen-data"}), 0);
  EXPECT_EQ(read_file(c.train_data()), first);  // rerun is byte-identical
  const auto meta = nlohmann::json::parse(read_file(c.train_data().string() + ".meta.json"));
  EXPECT_EQ(meta["fingerprint"], c.fingerprint());

  ASSERT_EQ(run({"train-vae"}), 0) << err.str();
  ASSERT_EQ(run({"train-mt"}), 0) << err.str();
  EXPECT_EQ(nn::Checkpoint::load(c.maskformer_checkpoint()).config["fingerprint"], c.fingerprint());
  {
    std::istringstream trace(read_file(c.maskformer_trace()));
    std::string line;
    while (std::getline(trace, line)) EXPECT_EQ(nlohmann::json::parse(line)["fingerprint"], c.fingerprint());
  }

  // An empty mask spec reproduces the tokenizer round trip.
  const fs::path generated = dir / "gen.smap";
  ASSERT_EQ(run({"generate", "--input", c.eval_data().string(), "--index", "2", "--mask-spec", "", "--output",
                 generated.string(), "--panel", (dir / "gen.ppm").string()}),
            0)
      << err.str();
  const auto tok = load_tokenizer(nn::Checkpoint::load(c.tokenizer_checkpoint()));
  const auto eval_set = read_dataset(c.eval_data());
  EXPECT_TRUE(read_dataset(generated).maps.at(0) == tok->roundtrip(eval_set.maps.at(2)));
  EXPECT_NE(read_file(dir / "gen.ppm").find("fingerprint=" + c.fingerprint()), std::string::npos);

  ASSERT_EQ(run({"generate", "--input", c.eval_data().string(), "--target", "sofa", "--mask-spec", "all", "--output",
                 generated.string(), "--panel", (dir / "gen.ppm").string()}),
            0)
      << err.str();
  EXPECT_EQ(run({"generate", "--input", c.eval_data().string(), "--target", "piano"}), 2);

  ASSERT_EQ(run({"eval"}), 0) << err.str();
  const auto summary = nlohmann::json::parse(out.str());
  EXPECT_EQ(summary["fingerprint"], c.fingerprint());
  EXPECT_EQ(summary["trials"].get<int>() + summary["skipped"].get<int>(), 4);
  EXPECT_TRUE(fs::exists(c.eval_report()));
  EXPECT_TRUE(fs::exists(c.eval_table()));

  // The checkpoint holds a BitVAE, so selecting the VQ tokenizer must fail.
  EXPECT_EQ(run({"eval", "--set", "train.tokenizer=vqvae"}), 3);
}

TEST_F(CliRun, AblateWritesOneRowPerCell) {
  ASSERT_EQ(run({"gen-data"}), 0) << err.str();
  ASSERT_EQ(run({"ablate"}), 0) << err.str();
  const auto c = load_config(config);
  std::istringstream rows(read_file(c.ablation_report()));
  std::string line;
  int n = 0;
  while (std::getline(rows, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j["ok"].get<bool>());
    ++n;
  }
  EXPECT_EQ(n, 2);
  EXPECT_NE(out.str().find("VQVAE N=32 R"), std::string::npos);
}

}  // namespace
}  // namespace mapbert
