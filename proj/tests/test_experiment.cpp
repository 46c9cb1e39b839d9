#include <cstdlib>
#include <fstream>

#include <gtest/gtest.h>

#include "json.hpp"
#include "mmfs/error.hpp"
#include "mmfs/experiment.hpp"
#include "test_util.hpp"

using namespace mmfs;
using nlohmann::json;
using mmfs::testing::TempDir;

namespace {

// Small but complete config: tiny networks, a few episodes, one grid cell.
json tiny_config(const std::filesystem::path& out) {
  json j = default_config_json();
  j["out_dir"] = out.string();
  j["data"]["n_per_class"] = 30;
  j["data"]["split"] = {0.5, 0.1, 0.4};
  j["background"]["n_classes"] = 4;
  j["background"]["n_per_class"] = 10;
  j["arch"]["latent_dim"] = 8;
  j["arch"]["speech_layers"] = 1;
  j["arch"]["speech_hidden"] = 8;
  j["arch"]["decoder_hidden"] = 8;
  j["arch"]["conv1_channels"] = 2;
  j["arch"]["conv2_channels"] = 3;
  j["classifier"]["max_epochs"] = 2;
  j["train"]["max_epochs"] = 2;
  j["train"]["k_sample"] = 10;
  j["grid"]["batch_sizes"] = {16};
  j["grid"]["seeds"] = {1};
  j["episodes"]["count"] = 4;
  return j;
}

void write_json(const std::filesystem::path& p, const json& j) {
  std::ofstream(p) << j.dump(2);
}

struct CliResult {
  int code;
  std::string err;
};

CliResult cli(const std::string& args, const std::filesystem::path& scratch) {
  const auto err = scratch / "stderr.txt";
  const std::string cmd = std::string(MMFS_CLI_PATH) + " " + args + " 2> " + err.string() + " > /dev/null";
  const int status = std::system(cmd.c_str());
  return {WEXITSTATUS(status), mmfs::testing::read_text(err)};
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const ExperimentConfig c = parse_config(default_config_json());
  EXPECT_EQ(c.arms.size(), known_arms().size());
  EXPECT_EQ(c.episodes.episodes, 400);
  EXPECT_EQ(c.train.margin, 0.2);
  EXPECT_EQ(parse_config(default_config_json()).hash(), c.hash());
}

TEST(Config, UnknownKeyNamesField) {
  json j = default_config_json();
  j["train"]["margn"] = 0.3;
  try {
    parse_config(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.margn"), std::string::npos);
  }
}

TEST(Config, Rejections) {
  json j = default_config_json();
  j["grid"]["batch_sizes"] = {17};
  EXPECT_THROW(parse_config(j), ConfigError);
  j = default_config_json();
  j["arms"] = {"mtriplet_magic"};
  EXPECT_THROW(parse_config(j), ConfigError);
  j = default_config_json();
  j["train"]["margin"] = "wide";
  EXPECT_THROW(parse_config(j), ConfigError);
  j = default_config_json();
  j["data"]["source"] = "files";
  j["data"]["speech_archive"] = "/nonexistent/a.mfca";
  try {
    parse_config(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("data.speech_archive"), std::string::npos);
  }
}

TEST(Config, AliasesFollowMiningMetric) {
  json j = default_config_json();
  j["arms"] = {"mtriplet", "mcae"};
  j["mining"]["metric"] = "cosine";
  const ExperimentConfig c = parse_config(j);
  EXPECT_TRUE(c.wants("mtriplet_cosine"));
  EXPECT_TRUE(c.wants("mcae_cosine"));
  EXPECT_FALSE(c.needs_classifiers());
  EXPECT_EQ(c.mining_metrics(), std::vector<std::string>{"cosine"});
}

TEST(Config, HashIgnoresOutDir) {
  json a = default_config_json(), b = default_config_json();
  b["out_dir"] = "elsewhere";
  EXPECT_EQ(parse_config(a).hash(), parse_config(b).hash());
  b["seed"] = 2;
  EXPECT_NE(parse_config(a).hash(), parse_config(b).hash());
}

TEST(Config, GridParsing) {
  const auto g = parse_grid("16,32:1,2,3");
  EXPECT_EQ(g.first, (std::vector<int>{16, 32}));
  EXPECT_EQ(g.second, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_THROW(parse_grid("16,32"), ConfigError);
  EXPECT_THROW(parse_grid("a:1"), ConfigError);
  ExperimentConfig c = parse_config(default_config_json());
  Overrides o;
  o.grid = parse_grid("64:9");
  o.seed = 5;
  apply_overrides(c, o);
  EXPECT_EQ(c.batch_sizes, std::vector<int>{64});
  EXPECT_EQ(c.seed, 5u);
  o.grid = parse_grid("20:1");
  EXPECT_THROW(apply_overrides(c, o), ConfigError);
}

TEST(Cli, ExitCodes) {
  TempDir dir("cli");
  EXPECT_EQ(cli("default-config", dir.path()).code, 0);
  EXPECT_NE(cli("frobnicate", dir.path()).code, 0);

  json j = default_config_json();
  j["data"]["source"] = "files";
  j["data"]["images_idx"] = "/nonexistent/images.idx";
  write_json(dir / "bad.json", j);
  const CliResult bad = cli("prepare --config " + (dir / "bad.json").string(), dir.path());
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("ConfigError"), std::string::npos);
  EXPECT_NE(bad.err.find("data."), std::string::npos);

  const CliResult missing = cli("run --config " + (dir / "none.json").string(), dir.path());
  EXPECT_EQ(missing.code, 1);
  const CliResult grid = cli("run --grid 17:1", dir.path());
  EXPECT_EQ(grid.code, 1);
  EXPECT_NE(grid.err.find("grid"), std::string::npos);
}

TEST(Pipeline, RunsResumesAndReproduces) {
  TempDir dir("pipe");
  write_json(dir / "a.json", tiny_config(dir / "a"));
  write_json(dir / "b.json", tiny_config(dir / "b"));
  ASSERT_EQ(cli("run -q --config " + (dir / "a.json").string(), dir.path()).code, 0) << mmfs::testing::read_text(dir / "stderr.txt");

  const auto report = dir / "a" / "report";
  for (const char* f : {"summary.json", "table.txt", "grid_mtriplet_oracle.csv", "confusion_mcae_transfer.csv",
                        "grid_dtw_pixels.csv", "grid_mtriplet_transfer_indirect.csv"}) {
    EXPECT_TRUE(std::filesystem::exists(report / f)) << f;
  }
  const json summary = json::parse(mmfs::testing::read_text(report / "summary.json"));
  EXPECT_EQ(summary["master_seed"], 1);
  const auto ck = dir / "a" / "checkpoints" / "mtriplet_oracle" / "bs16_seed1.ck";
  ASSERT_TRUE(std::filesystem::exists(ck));
  const auto before = std::filesystem::last_write_time(ck);

  // Rerun: every stage is up to date and nothing is retrained.
  const CliResult again = cli("run --config " + (dir / "a.json").string(), dir.path());
  ASSERT_EQ(again.code, 0);
  EXPECT_NE(again.err.find("prepare: up to date"), std::string::npos);
  EXPECT_EQ(std::filesystem::last_write_time(ck), before);

  // Fresh directory, same seed: identical report files.
  ASSERT_EQ(cli("run -q --config " + (dir / "b.json").string(), dir.path()).code, 0);
  for (const auto& entry : std::filesystem::directory_iterator(report)) {
    const auto other = dir / "b" / "report" / entry.path().filename();
    EXPECT_EQ(mmfs::testing::read_bytes(entry.path()), mmfs::testing::read_bytes(other)) << entry.path().filename();
  }

  // Report re-emission into another directory.
  ASSERT_EQ(cli("report --config " + (dir / "a.json").string() + " --out " + (dir / "r").string(), dir.path()).code, 0);
  EXPECT_EQ(mmfs::testing::read_bytes(dir / "r" / "summary.json"), mmfs::testing::read_bytes(report / "summary.json"));
}

TEST(Pipeline, FileSources) {
  TempDir dir("files");
  const SynthDigits d = synth_paired_digits(30, 0.2, 5);
  write_feature_archive(dir / "speech.mfca", strip_labels(d.speech));
  std::vector<std::pair<std::string, std::string>> labels;
  for (const auto& s : d.speech.items) labels.emplace_back(s.id, *s.label);
  write_label_table(dir / "speech.tsv", labels);
  write_idx_images(dir / "images.idx", d.images);
  write_idx_labels(dir / "labels.idx", d.images);

  json j = tiny_config(dir / "out");
  j["data"]["source"] = "files";
  j["data"]["speech_archive"] = (dir / "speech.mfca").string();
  j["data"]["speech_labels"] = (dir / "speech.tsv").string();
  j["data"]["images_idx"] = (dir / "images.idx").string();
  j["data"]["image_labels"] = (dir / "labels.idx").string();
  j["arms"] = {"dtw_pixels", "mtriplet_oracle"};
  write_json(dir / "c.json", j);
  const CliResult r = cli("run --config " + (dir / "c.json").string(), dir.path());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "out" / "report" / "grid_mtriplet_oracle.csv"));
  EXPECT_EQ(r.err.find("classifier"), std::string::npos);
}
