#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmfs/data.hpp"
#include "mmfs/eval.hpp"
#include "mmfs/fewshot.hpp"
#include "mmfs/models.hpp"
#include "mmfs/networks.hpp"

namespace mmfs {

// Where the paired in-domain data comes from. "synthetic" uses the
// generator; "files" reads an MFCA archive plus label table and IDX images
// plus IDX labels.
struct DataConfig {
  std::string source = "synthetic";
  int n_per_class = 60;
  double noise = 0.3;
  std::array<double, 3> split{0.7, 0.1, 0.2};
  std::string speech_archive, speech_labels, images_idx, image_labels;
};

// Labelled non-digit data for the transfer classifiers. "files" reads an
// MFCA archive plus label table and raw IDX images (any square side) plus a
// label table keyed by zero-padded record index.
struct BackgroundConfig {
  std::string source = "synthetic";
  int n_classes = 10;
  int n_per_class = 40;
  double noise = 0.3;
  std::string speech_archive, speech_labels, images_idx, image_labels;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::filesystem::path out_dir = "runs/default";
  DataConfig data;
  BackgroundConfig background;
  ArchSpec arch;
  ClassifierConfig classifier;  // arch and seed are filled in per modality
  TrainConfig train;            // batch_size and seed are set per grid cell
  int support_k = 5;
  std::vector<std::string> arms;
  std::vector<int> batch_sizes{16, 32, 64, 128, 256};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  EpisodeProtocol episodes;

  void validate() const;
  // Canonical form without out_dir; echoed into reports and hashed.
  nlohmann::json to_json() const;
  std::string hash() const;

  bool wants(const std::string& arm) const;
  bool needs_classifiers() const;
  // Mining metrics required by the selected arms: transfer, cosine, oracle.
  std::vector<std::string> mining_metrics() const;
};

const std::vector<std::string>& known_arms();
// Arms that own a trained model per grid cell.
bool is_trained_arm(const std::string& arm);

ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json default_config_json();

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::vector<std::string>> arms;
  std::optional<std::pair<std::vector<int>, std::vector<std::uint64_t>>> grid;
};

// "16,32:1,2" -> batch sizes {16, 32}, seeds {1, 2}.
std::pair<std::vector<int>, std::vector<std::uint64_t>> parse_grid(const std::string& text);
void apply_overrides(ExperimentConfig& cfg, const Overrides& o);

// ---- data ---------------------------------------------------------------------

struct PreparedData {
  SplitResult<SpeechSet> speech;
  SplitResult<ImageSet> images;
  PairLabels labels;
};

// Loads or generates the paired data and applies the stored split manifest.
PreparedData load_prepared(const ExperimentConfig& cfg);

// Corpus files written by the mine stage, rebuilt against the prepared data.
PairCorpus load_corpus(const ExperimentConfig& cfg, const PreparedData& data, const std::string& metric,
                       const std::string& split);

// ---- stages -------------------------------------------------------------------

using LogFn = std::function<void(const std::string&)>;

void cmd_prepare(const ExperimentConfig& cfg, const LogFn& log = {});
void cmd_mine(const ExperimentConfig& cfg, const LogFn& log = {});
void cmd_train(const ExperimentConfig& cfg, const LogFn& log = {});
void cmd_evaluate(const ExperimentConfig& cfg, const LogFn& log = {});
// Re-emits report files from the stored evaluation, into out (default
// <out_dir>/report).
void cmd_report(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out = std::nullopt);
void run_pipeline(const ExperimentConfig& cfg, const LogFn& log = {});

std::filesystem::path checkpoint_path(const ExperimentConfig& cfg, const std::string& arm, int batch_size,
                                      std::uint64_t seed);

nlohmann::json arm_report_to_json(const ArmReport& arm);
ArmReport arm_report_from_json(const nlohmann::json& j);

}  // namespace mmfs
