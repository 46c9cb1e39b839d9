#include "mmfs/fewshot.hpp"

#include <algorithm>
#include <fstream>
#include <memory>
#include <set>

#include "mmfs/error.hpp"
#include "mmfs/features.hpp"

namespace mmfs {

void EpisodeProtocol::validate() const {
  if (L < 1 || K < 1 || N < 1 || queries < 1 || episodes < 1) {
    throw ArgumentError("episode protocol values must be positive");
  }
}

Episode sample_episode(const SpeechSet& speech, const ImageSet& images, const PairLabels& labels,
                       const EpisodeProtocol& protocol, std::uint64_t seed, std::size_t id) {
  protocol.validate();
  Rng rng(seed);
  std::vector<std::string> classes = labels.class_names;
  if (static_cast<std::size_t>(protocol.L) > classes.size()) {
    throw ArgumentError("L exceeds the number of spoken classes");
  }
  if (static_cast<std::size_t>(protocol.L) < classes.size()) {
    rng.shuffle(classes);
    classes.resize(static_cast<std::size_t>(protocol.L));
    std::sort(classes.begin(), classes.end(), [&](const auto& a, const auto& b) {
      return std::find(labels.class_names.begin(), labels.class_names.end(), a) <
             std::find(labels.class_names.begin(), labels.class_names.end(), b);
    });
  }

  Episode ep;
  ep.id = id;
  std::vector<char> taken_speech, taken_images;
  ep.support = sample_support(speech, images, labels, classes, protocol.K, rng, taken_speech, taken_images);

  std::set<int> visual_set;
  for (const auto& c : classes) visual_set.insert(labels.visual_class(c));
  std::vector<int> visuals(visual_set.begin(), visual_set.end());
  if (static_cast<std::size_t>(protocol.N) > visuals.size()) {
    throw ArgumentError("N exceeds the number of visual classes in the episode");
  }
  if (static_cast<std::size_t>(protocol.N) < visuals.size()) {
    rng.shuffle(visuals);
    visuals.resize(static_cast<std::size_t>(protocol.N));
  }
  for (int v : visuals) {
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (!taken_images[i] && labels.image_to_class.at(images.items[i].id) == v) free.push_back(i);
    }
    if (free.empty()) throw ArgumentError("no unused image of visual class " + std::to_string(v));
    const std::size_t pick = free[rng.below(free.size())];
    taken_images[pick] = 1;
    ep.matching.push_back(pick);
  }
  rng.shuffle(ep.matching);

  std::vector<std::string> query_classes;
  for (const auto& c : classes) {
    if (std::find(visuals.begin(), visuals.end(), labels.visual_class(c)) != visuals.end()) query_classes.push_back(c);
  }
  std::map<std::string, std::vector<std::size_t>> free_speech;
  for (std::size_t i = 0; i < speech.size(); ++i) {
    if (!taken_speech[i]) free_speech[labels.speech_to_class.at(speech.items[i].id)].push_back(i);
  }
  for (int q = 0; q < protocol.queries; ++q) {
    std::vector<std::string> open;
    for (const auto& c : query_classes) {
      if (!free_speech[c].empty()) open.push_back(c);
    }
    if (open.empty()) throw ArgumentError("not enough unused spoken items for the queries");
    auto& pool = free_speech[open[rng.below(open.size())]];
    const std::size_t k = rng.below(pool.size());
    ep.queries.push_back(pool[k]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return ep;
}

std::vector<Episode> sample_episodes(const SpeechSet& speech, const ImageSet& images, const PairLabels& labels,
                                     const EpisodeProtocol& protocol, std::uint64_t seed) {
  protocol.validate();
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(protocol.episodes));
  for (int i = 0; i < protocol.episodes; ++i) {
    out.push_back(sample_episode(speech, images, labels, protocol, derive_seed(seed, static_cast<std::uint64_t>(i)),
                                 static_cast<std::size_t>(i)));
  }
  return out;
}

namespace {

std::shared_ptr<const Eigen::MatrixXd> unit_columns(const Eigen::MatrixXd& table) {
  auto out = std::make_shared<Eigen::MatrixXd>(table);
  for (Eigen::Index j = 0; j < out->cols(); ++j) {
    const double n = out->col(j).norm();
    if (n == 0.0) throw DegenerateVectorError("zero-norm embedding in matching space");
    out->col(j) /= n;
  }
  return out;
}

PairDistance cosine_between(std::shared_ptr<const Eigen::MatrixXd> a, std::shared_ptr<const Eigen::MatrixXd> b) {
  return [a, b](std::size_t i, std::size_t j) { return std::clamp(1.0 - a->col(i).dot(b->col(j)), 0.0, 2.0); };
}

}  // namespace

MatchingSpace embedding_space(const Eigen::MatrixXd& speech_table, const Eigen::MatrixXd& image_table) {
  MatchingSpace space;
  auto s = unit_columns(speech_table);
  auto v = unit_columns(image_table);
  space.speech_speech = cosine_between(s, s);
  space.image_image = cosine_between(v, v);
  if (speech_table.rows() == image_table.rows()) space.speech_image = cosine_between(s, v);
  return space;
}

MatchingSpace raw_space(const SpeechSet& speech, const ImageSet& images) {
  MatchingSpace space;
  space.speech_speech = [&speech](std::size_t i, std::size_t j) {
    return dtw_distance(speech.items[i].frames, speech.items[j].frames);
  };
  space.image_image = [&images](std::size_t i, std::size_t j) {
    return pixel_distance(images.items[i].grid, images.items[j].grid);
  };
  return space;
}

std::size_t match_direct(const MatchingSpace& space, const Episode& episode, std::size_t query) {
  if (!space.speech_image) throw StateError("space has no cross-modal distance");
  return nearest(episode.matching.size(), [&](std::size_t m) { return space.speech_image(query, episode.matching[m]); })
      .index;
}

std::size_t match_indirect(const MatchingSpace& space, const Episode& episode, std::size_t query) {
  const auto& pairs = episode.support.pairs;
  const std::size_t pivot =
      nearest(pairs.size(), [&](std::size_t p) { return space.speech_speech(query, pairs[p].speech); }).index;
  const std::size_t image = pairs[pivot].image;
  return nearest(episode.matching.size(), [&](std::size_t m) { return space.image_image(image, episode.matching[m]); })
      .index;
}

std::size_t match_direct(const ModelParams& params, const FrameSequence& query, const std::vector<ImageGrid>& matching) {
  const Embedding z = encode_speech(params, query);
  return nearest(matching.size(), [&](std::size_t m) { return cosine_distance(z, encode_image(params, matching[m])); })
      .index;
}

std::string classify_unimodal(const PairDistance& speech_speech, const SupportSet& support, std::size_t query) {
  const auto& pairs = support.pairs;
  if (pairs.empty()) throw ArgumentError("empty support set");
  return pairs[nearest(pairs.size(), [&](std::size_t p) { return speech_speech(query, pairs[p].speech); }).index]
      .class_name;
}

bool score_query(int predicted_visual, const std::string& spoken_class, const PairLabels& labels) {
  if (predicted_visual < 0 || predicted_visual > 9) {
    throw ArgumentError("unknown visual class " + std::to_string(predicted_visual));
  }
  return labels.visual_class(spoken_class) == predicted_visual;
}

void write_episode_manifest(const std::filesystem::path& path, const std::vector<Episode>& episodes,
                            const SpeechSet& speech, const ImageSet& images) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& ep : episodes) {
    for (const auto& p : ep.support.pairs) {
      out << ep.id << "\tsupport\t" << speech.items[p.speech].id << '\t' << images.items[p.image].id << '\t'
          << p.class_name << '\n';
    }
    for (std::size_t m : ep.matching) out << ep.id << "\tmatching\t" << images.items[m].id << '\n';
    for (std::size_t q : ep.queries) out << ep.id << "\tquery\t" << speech.items[q].id << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace mmfs
