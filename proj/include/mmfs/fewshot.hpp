#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mmfs/data.hpp"
#include "mmfs/mining.hpp"
#include "mmfs/networks.hpp"

namespace mmfs {

struct EpisodeProtocol {
  int L = 11;  // spoken classes in the support set
  int K = 5;   // pairs per class
  int N = 10;  // matching-set images, one per visual class
  int queries = 10;
  int episodes = 400;

  void validate() const;
};

// Indices refer to the test speech and image sets the episode was drawn from.
struct Episode {
  std::size_t id = 0;
  SupportSet support;
  std::vector<std::size_t> matching;
  std::vector<std::size_t> queries;
};

Episode sample_episode(const SpeechSet& speech, const ImageSet& images, const PairLabels& labels,
                       const EpisodeProtocol& protocol, std::uint64_t seed, std::size_t id = 0);
// Episode i uses derive_seed(seed, i).
std::vector<Episode> sample_episodes(const SpeechSet& speech, const ImageSet& images, const PairLabels& labels,
                                     const EpisodeProtocol& protocol, std::uint64_t seed);

// Distances between test items, addressed by their set indices.
struct MatchingSpace {
  PairDistance speech_speech;
  PairDistance image_image;
  PairDistance speech_image;  // empty for spaces without a shared embedding
};

// Cosine distances over per-item embedding columns.
MatchingSpace embedding_space(const Eigen::MatrixXd& speech_table, const Eigen::MatrixXd& image_table);
// DTW over frames and cosine over pixels; no cross-modal distance.
MatchingSpace raw_space(const SpeechSet& speech, const ImageSet& images);

// Positions within episode.matching.
std::size_t match_direct(const MatchingSpace& space, const Episode& episode, std::size_t query);
std::size_t match_indirect(const MatchingSpace& space, const Episode& episode, std::size_t query);

// Convenience forms on raw items with a trained model.
std::size_t match_direct(const ModelParams& params, const FrameSequence& query, const std::vector<ImageGrid>& matching);

// 1-nearest-neighbour class over the support speech items.
std::string classify_unimodal(const PairDistance& speech_speech, const SupportSet& support, std::size_t query);

// Zero/oh rule: both spoken classes score correct against visual digit 0.
bool score_query(int predicted_visual, const std::string& spoken_class, const PairLabels& labels);

// Writes one line per episode role: "<episode> support <speech_id> <image_id> <class>",
// "<episode> matching <image_id>", "<episode> query <speech_id>".
void write_episode_manifest(const std::filesystem::path& path, const std::vector<Episode>& episodes,
                            const SpeechSet& speech, const ImageSet& images);

}  // namespace mmfs
