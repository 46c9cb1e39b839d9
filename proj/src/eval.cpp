#include "mmfs/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "mmfs/error.hpp"

namespace mmfs {

std::vector<MatchResult> run_episodes(const Matcher& matcher, const std::vector<Episode>& episodes,
                                      const SpeechSet& speech, const ImageSet& images, const PairLabels& labels) {
  if (episodes.empty()) throw ArgumentError("no episodes to run");
  std::vector<MatchResult> out;
  for (const auto& ep : episodes) {
    for (std::size_t q : ep.queries) {
      const std::size_t pos = matcher(ep, q);
      if (pos >= ep.matching.size()) throw StateError("matcher returned an out-of-range position");
      const auto& image = images.items[ep.matching[pos]];
      MatchResult r;
      r.episode_id = ep.id;
      r.query_id = speech.items[q].id;
      r.spoken_class = labels.speech_to_class.at(r.query_id);
      r.predicted_image_id = image.id;
      r.predicted_visual = labels.image_to_class.at(image.id);
      r.true_visual = labels.visual_class(r.spoken_class);
      r.correct = score_query(r.predicted_visual, r.spoken_class, labels);
      out.push_back(std::move(r));
    }
  }
  return out;
}

double accuracy(const std::vector<MatchResult>& results) {
  if (results.empty()) throw ArgumentError("no results");
  const auto correct = std::count_if(results.begin(), results.end(), [](const auto& r) { return r.correct; });
  return static_cast<double>(correct) / static_cast<double>(results.size());
}

Aggregate aggregate(const std::vector<double>& accuracies) {
  if (accuracies.size() < 2) throw ArgumentError("aggregate needs at least two model accuracies");
  const double n = static_cast<double>(accuracies.size());
  const double mean = std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / n;
  double ss = 0.0;
  for (double a : accuracies) ss += (a - mean) * (a - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  return {100.0 * mean, 100.0 * 1.96 * sd / std::sqrt(n)};
}

long ConfusionMatrix::total() const {
  long t = 0;
  for (const auto& row : counts) t = std::accumulate(row.begin(), row.end(), t);
  return t;
}

long ConfusionMatrix::consistent() const {
  long t = 0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int visual = row_visual[r];
    for (std::size_t c = 0; c < columns.size(); ++c) {
      if (columns[c] == visual) t += counts[r][c];
    }
  }
  return t;
}

ConfusionMatrix confusion(const std::vector<MatchResult>& results, const PairLabels& labels) {
  ConfusionMatrix m;
  m.rows = labels.class_names;
  for (const auto& name : m.rows) m.row_visual.push_back(labels.visual_class(name));
  std::set<int> visuals;
  for (const auto& [name, v] : labels.visual_of_class) visuals.insert(v);
  m.columns.assign(visuals.begin(), visuals.end());
  m.counts.assign(m.rows.size(), std::vector<long>(m.columns.size(), 0));
  for (const auto& r : results) {
    const auto row = std::find(m.rows.begin(), m.rows.end(), r.spoken_class);
    const auto col = std::find(m.columns.begin(), m.columns.end(), r.predicted_visual);
    if (row == m.rows.end() || col == m.columns.end()) throw ArgumentError("result outside the class table");
    ++m.counts[static_cast<std::size_t>(row - m.rows.begin())][static_cast<std::size_t>(col - m.columns.begin())];
  }
  return m;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string provenance_line(const Provenance& p) {
  return "# master_seed=" + std::to_string(p.master_seed) + " config_hash=" + p.config_hash + "\n";
}

}  // namespace

nlohmann::json summarize_arm(const ArmReport& arm) {
  nlohmann::json j;
  j["arm"] = arm.name;
  std::vector<double> acc;
  for (const auto& g : arm.grid) acc.push_back(g.accuracy);
  j["n_models"] = acc.size();
  j["accuracies"] = acc;
  if (acc.size() >= 2) {
    const Aggregate a = aggregate(acc);
    j["mean"] = a.mean_percent;
    j["ci95"] = a.ci95_percent;
  } else if (acc.size() == 1) {
    j["mean"] = 100.0 * acc[0];
    j["ci95"] = nullptr;
  }
  if (arm.unimodal_accuracy) j["unimodal_speech_accuracy"] = 100.0 * *arm.unimodal_accuracy;
  return j;
}

std::string format_table(const std::vector<ArmReport>& arms) {
  std::ostringstream out;
  std::size_t width = 5;
  for (const auto& a : arms) width = std::max(width, a.name.size());
  out << "Model" << std::string(width - 5 + 2, ' ') << "Accuracy (%)\n";
  out << std::string(width + 2 + 16, '-') << "\n";
  for (const auto& a : arms) {
    const nlohmann::json s = summarize_arm(a);
    out << a.name << std::string(width - a.name.size() + 2, ' ');
    if (!s.contains("mean")) {
      out << "n/a\n";
    } else if (s["ci95"].is_null()) {
      out << fixed(s["mean"].get<double>(), 1) << "\n";
    } else {
      out << fixed(s["mean"].get<double>(), 1) << " +- " << fixed(s["ci95"].get<double>(), 1) << "\n";
    }
  }
  return out.str();
}

void emit_report(const std::vector<ArmReport>& arms, const Provenance& provenance,
                 const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  nlohmann::json summary;
  summary["master_seed"] = provenance.master_seed;
  summary["config_hash"] = provenance.config_hash;
  summary["config"] = provenance.config;
  summary["arms"] = nlohmann::json::array();
  for (const auto& arm : arms) summary["arms"].push_back(summarize_arm(arm));
  write_file(out_dir / "summary.json", summary.dump(2) + "\n");

  for (const auto& arm : arms) {
    std::string grid = provenance_line(provenance) + "batch_size,seed,accuracy\n";
    for (const auto& g : arm.grid) {
      grid += std::to_string(g.batch_size) + "," + std::to_string(g.seed) + "," + fixed(g.accuracy, 6) + "\n";
    }
    write_file(out_dir / ("grid_" + arm.name + ".csv"), grid);

    const ConfusionMatrix& m = arm.confusion;
    std::string csv = provenance_line(provenance) + "spoken";
    for (int c : m.columns) csv += "," + std::to_string(c);
    csv += "\n";
    for (std::size_t r = 0; r < m.rows.size(); ++r) {
      csv += m.rows[r];
      for (long v : m.counts[r]) csv += "," + std::to_string(v);
      csv += "\n";
    }
    write_file(out_dir / ("confusion_" + arm.name + ".csv"), csv);
  }
  write_file(out_dir / "table.txt", provenance_line(provenance) + format_table(arms));
}

}  // namespace mmfs
