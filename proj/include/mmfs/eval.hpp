#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmfs/data.hpp"
#include "mmfs/fewshot.hpp"

namespace mmfs {

struct MatchResult {
  std::size_t episode_id = 0;
  std::string query_id;
  std::string spoken_class;
  std::string predicted_image_id;
  int predicted_visual = 0;
  int true_visual = 0;
  bool correct = false;
};

// Returns the chosen position within episode.matching for one query.
using Matcher = std::function<std::size_t(const Episode&, std::size_t query)>;

std::vector<MatchResult> run_episodes(const Matcher& matcher, const std::vector<Episode>& episodes,
                                      const SpeechSet& speech, const ImageSet& images, const PairLabels& labels);

double accuracy(const std::vector<MatchResult>& results);

struct Aggregate {
  double mean_percent = 0.0;
  double ci95_percent = 0.0;
};

// Mean and 1.96 * sample-std / sqrt(n) over model accuracies, in percent.
Aggregate aggregate(const std::vector<double>& accuracies);

struct ConfusionMatrix {
  std::vector<std::string> rows;  // spoken classes
  std::vector<int> row_visual;    // visual class of each row
  std::vector<int> columns;       // visual classes
  std::vector<std::vector<long>> counts;

  long total() const;
  // Cells where the row's visual class equals the column.
  long consistent() const;
};

ConfusionMatrix confusion(const std::vector<MatchResult>& results, const PairLabels& labels);

struct GridEntry {
  int batch_size = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
};

struct ArmReport {
  std::string name;
  std::vector<GridEntry> grid;
  ConfusionMatrix confusion;  // from the first grid cell
  std::optional<double> unimodal_accuracy;
};

struct Provenance {
  std::uint64_t master_seed = 0;
  std::string config_hash;
  nlohmann::json config;
};

// summary.json, grid_<arm>.csv, confusion_<arm>.csv and table.txt.
void emit_report(const std::vector<ArmReport>& arms, const Provenance& provenance,
                 const std::filesystem::path& out_dir);

nlohmann::json summarize_arm(const ArmReport& arm);
std::string format_table(const std::vector<ArmReport>& arms);

}  // namespace mmfs
