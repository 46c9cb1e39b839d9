#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmfs/data.hpp"
#include "mmfs/rng.hpp"

namespace mmfs {

// One labelled speech-image pair. Indices refer to whichever speech and image
// sets the owner holds.
struct SupportPair {
  std::size_t speech = 0;
  std::size_t image = 0;
  std::string class_name;
  int visual_class = 0;
};

struct SupportSet {
  std::vector<SupportPair> pairs;

  std::size_t size() const { return pairs.size(); }
};

// K pairs for each spoken class, images drawn from the class's visual digit.
// Items listed in `taken_*` are skipped and the chosen ones are added to them.
SupportSet sample_support(const SpeechSet& speech, const ImageSet& images, const PairLabels& labels,
                          const std::vector<std::string>& classes, int k, Rng& rng,
                          std::vector<char>& taken_speech, std::vector<char>& taken_images);

struct Assignment {
  std::size_t item = 0;
  std::size_t support_index = 0;
  double distance = 0.0;
};

using PairDistance = std::function<double(std::size_t, std::size_t)>;

// Nearest support item for every pool item; ties go to the lowest support
// index. distance(pool_index, support_index).
std::vector<Assignment> assign_to_support(std::size_t pool_size, std::size_t support_size,
                                          const PairDistance& distance);

// Indices below pool size refer to pool items; pool_size + i refers to
// support pair i (used by the empty-bucket fallback).
struct MinedPair {
  std::size_t speech = 0;
  std::size_t image = 0;
  int pivot_index = -1;  // -1 for label-derived pairs
  std::string pivot_class;
  int pivot_visual = 0;
};

// Zips seeded permutations of the speech and image buckets of every support
// pair. A pair with an empty bucket contributes the support pair itself.
std::vector<MinedPair> mine_cross_modal_pairs(const std::vector<Assignment>& speech_assign,
                                              const std::vector<Assignment>& image_assign,
                                              const SupportSet& support, std::uint64_t seed);

// Nearest neighbour of each item excluding itself, lowest index on ties.
std::vector<std::size_t> mine_within_modality_positives(std::size_t count, const PairDistance& distance);

struct NegativePick {
  std::size_t speech = 0;
  std::size_t image = 0;
};

// Per modality: draws up to k_sample candidates whose class differs from
// anchor_class (k_sample 0 means all of them) and keeps the one closest to
// the anchor item of that modality.
NegativePick mine_hard_negatives(std::size_t anchor_speech, std::size_t anchor_image, int anchor_class,
                                 const std::vector<int>& speech_classes, const std::vector<int>& image_classes,
                                 const PairDistance& speech_distance, const PairDistance& image_distance,
                                 std::size_t k_sample, std::uint64_t seed);

// Single-modality helper behind mine_hard_negatives.
std::size_t mine_hard_negative(std::size_t anchor, int anchor_class, const std::vector<int>& classes,
                               const PairDistance& distance, std::size_t k_sample, Rng& rng);

// Class-correct pairs from ground truth: seeded permutations zipped within
// each spoken class against the images of its visual digit.
std::vector<MinedPair> mine_oracle_pairs(const SpeechSet& speech, const ImageSet& images,
                                         const PairLabels& labels, std::uint64_t seed);

// "speech_id TAB image_id TAB pivot_index TAB pivot_class" lines plus a JSON
// sidecar at <path>.json.
struct PairManifest {
  struct Row {
    std::string speech_id;
    std::string image_id;
    int pivot_index = -1;
    std::string pivot_class;
  };
  std::vector<Row> rows;
  nlohmann::json sidecar;
};

void write_pair_manifest(const std::filesystem::path& path, const PairManifest& manifest);
PairManifest load_pair_manifest(const std::filesystem::path& path);

}  // namespace mmfs
