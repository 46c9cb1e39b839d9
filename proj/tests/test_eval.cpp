#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "json.hpp"
#include "mmfs/error.hpp"
#include "mmfs/eval.hpp"
#include "test_util.hpp"

using namespace mmfs;

namespace {

const SynthDigits& test_digits() {
  static const SynthDigits d = synth_paired_digits(12, 0.3, 33);
  return d;
}

std::vector<Episode> episodes(int n, std::uint64_t seed) {
  EpisodeProtocol p;
  p.episodes = n;
  const auto& d = test_digits();
  return sample_episodes(d.speech, d.images, d.labels, p, seed);
}

}  // namespace

TEST(RunEpisodes, CountsAndFields) {
  const auto& d = test_digits();
  const auto eps = episodes(40, 2);
  const auto results = run_episodes([](const Episode&, std::size_t) { return std::size_t{0}; }, eps, d.speech,
                                    d.images, d.labels);
  ASSERT_EQ(results.size(), 400u);
  for (const auto& r : results) {
    EXPECT_EQ(r.true_visual, d.labels.visual_class(r.spoken_class));
    EXPECT_EQ(r.correct, r.true_visual == r.predicted_visual);
  }
  EXPECT_THROW(run_episodes([](const Episode&, std::size_t) { return std::size_t{10}; }, eps, d.speech, d.images,
                            d.labels),
               StateError);
  EXPECT_THROW(run_episodes({}, {}, d.speech, d.images, d.labels), ArgumentError);
}

TEST(Aggregate, KnownValues) {
  const Aggregate a = aggregate({0.8, 0.9});
  EXPECT_NEAR(a.mean_percent, 85.0, 1e-12);
  // sample std of {80, 90} is 7.0710678; 1.96 * sd / sqrt(2) = 9.8.
  EXPECT_NEAR(a.ci95_percent, 9.8, 1e-9);
  const Aggregate same = aggregate({0.5, 0.5, 0.5});
  EXPECT_EQ(same.ci95_percent, 0.0);
  EXPECT_THROW(aggregate({0.5}), ArgumentError);
}

TEST(Confusion, ReconcilesWithAccuracy) {
  const auto& d = test_digits();
  const auto eps = episodes(30, 7);
  Rng rng(3);
  for (int t = 0; t < 5; ++t) {
    const auto results = run_episodes([&](const Episode& ep, std::size_t) { return rng.below(ep.matching.size()); }, eps,
                                      d.speech, d.images, d.labels);
    const ConfusionMatrix m = confusion(results, d.labels);
    EXPECT_EQ(m.rows.size(), 11u);
    EXPECT_EQ(m.columns.size(), 10u);
    EXPECT_EQ(m.total(), static_cast<long>(results.size()));
    EXPECT_EQ(static_cast<double>(m.consistent()) / static_cast<double>(m.total()), accuracy(results));
  }
}

TEST(Confusion, OhRowScoredOnColumnZero) {
  const PairLabels labels = digit_pair_labels();
  MatchResult r;
  r.spoken_class = "oh";
  r.predicted_visual = 0;
  r.correct = true;
  const ConfusionMatrix m = confusion({r}, labels);
  EXPECT_EQ(m.consistent(), 1);
  MatchResult bad = r;
  bad.spoken_class = "eleven";
  EXPECT_THROW(confusion({bad}, labels), Error);
}

TEST(Report, Files) {
  mmfs::testing::TempDir dir("report");
  ArmReport a;
  a.name = "mtriplet_oracle";
  a.grid = {{16, 1, 0.9}, {16, 2, 0.8}};
  a.confusion = confusion({}, digit_pair_labels());
  a.unimodal_accuracy = 0.5;
  ArmReport b;
  b.name = "dtw_pixels";
  b.grid = {{0, 0, 0.25}};
  b.confusion = a.confusion;
  Provenance p{7, "abc123", {{"seed", 7}}};
  emit_report({a, b}, p, dir.path());

  const auto summary = nlohmann::json::parse(mmfs::testing::read_text(dir / "summary.json"));
  EXPECT_EQ(summary["master_seed"], 7);
  EXPECT_EQ(summary["config_hash"], "abc123");
  EXPECT_NEAR(summary["arms"][0]["mean"].get<double>(), 85.0, 1e-12);
  EXPECT_NEAR(summary["arms"][0]["unimodal_speech_accuracy"].get<double>(), 50.0, 1e-12);
  EXPECT_TRUE(summary["arms"][1]["ci95"].is_null());
  EXPECT_EQ(mmfs::testing::read_text(dir / "grid_mtriplet_oracle.csv"),
            "# master_seed=7 config_hash=abc123\nbatch_size,seed,accuracy\n16,1,0.900000\n16,2,0.800000\n");
  const std::string conf = mmfs::testing::read_text(dir / "confusion_dtw_pixels.csv");
  EXPECT_NE(conf.find("spoken,0,1,2,3,4,5,6,7,8,9\n"), std::string::npos);
  EXPECT_EQ(std::count(conf.begin(), conf.end(), '\n'), 13);
  const std::string table = mmfs::testing::read_text(dir / "table.txt");
  EXPECT_NE(table.find("85.0 +- 9.8"), std::string::npos);
  EXPECT_NE(table.find("25.0"), std::string::npos);
}
