#include "mmfs/mining.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "mmfs/error.hpp"
#include "mmfs/features.hpp"

namespace mmfs {

SupportSet sample_support(const SpeechSet& speech, const ImageSet& images, const PairLabels& labels,
                          const std::vector<std::string>& classes, int k, Rng& rng,
                          std::vector<char>& taken_speech, std::vector<char>& taken_images) {
  if (k < 1) throw ArgumentError("K must be >= 1");
  taken_speech.resize(speech.size(), 0);
  taken_images.resize(images.size(), 0);
  SupportSet support;
  for (const auto& name : classes) {
    const int visual = labels.visual_class(name);
    std::vector<std::size_t> s_free, v_free;
    for (std::size_t i = 0; i < speech.size(); ++i) {
      if (!taken_speech[i] && labels.speech_to_class.at(speech.items[i].id) == name) s_free.push_back(i);
    }
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (!taken_images[i] && labels.image_to_class.at(images.items[i].id) == visual) v_free.push_back(i);
    }
    if (s_free.size() < static_cast<std::size_t>(k) || v_free.size() < static_cast<std::size_t>(k)) {
      throw ArgumentError("class '" + name + "' has too few unused items for a " + std::to_string(k) +
                          "-shot support set");
    }
    rng.shuffle(s_free);
    rng.shuffle(v_free);
    for (int j = 0; j < k; ++j) {
      taken_speech[s_free[j]] = 1;
      taken_images[v_free[j]] = 1;
      support.pairs.push_back({s_free[j], v_free[j], name, visual});
    }
  }
  return support;
}

std::vector<Assignment> assign_to_support(std::size_t pool_size, std::size_t support_size,
                                          const PairDistance& distance) {
  if (support_size == 0) throw ArgumentError("support set is empty");
  std::vector<Assignment> out(pool_size);
  for (std::size_t i = 0; i < pool_size; ++i) {
    const Nearest best = nearest(support_size, [&](std::size_t j) { return distance(i, j); });
    out[i] = {i, best.index, best.distance};
  }
  return out;
}

std::vector<MinedPair> mine_cross_modal_pairs(const std::vector<Assignment>& speech_assign,
                                              const std::vector<Assignment>& image_assign,
                                              const SupportSet& support, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> a_bucket(support.size()), v_bucket(support.size());
  for (const auto& a : speech_assign) a_bucket.at(a.support_index).push_back(a.item);
  for (const auto& v : image_assign) v_bucket.at(v.support_index).push_back(v.item);

  std::vector<MinedPair> pairs;
  for (std::size_t i = 0; i < support.size(); ++i) {
    const SupportPair& pivot = support.pairs[i];
    auto& A = a_bucket[i];
    auto& V = v_bucket[i];
    if (A.empty() || V.empty()) {
      pairs.push_back({speech_assign.size() + i, image_assign.size() + i, static_cast<int>(i), pivot.class_name,
                       pivot.visual_class});
      continue;
    }
    // Buckets are filled in pool order, so the permutations depend only on
    // the seed and the bucket contents.
    Rng ra(derive_seed(seed, i, 0));
    Rng rv(derive_seed(seed, i, 1));
    ra.shuffle(A);
    rv.shuffle(V);
    const std::size_t n = std::min(A.size(), V.size());
    for (std::size_t j = 0; j < n; ++j) {
      pairs.push_back({A[j], V[j], static_cast<int>(i), pivot.class_name, pivot.visual_class});
    }
  }
  return pairs;
}

std::vector<std::size_t> mine_within_modality_positives(std::size_t count, const PairDistance& distance) {
  if (count < 2) throw ArgumentError("positive mining needs at least two items");
  std::vector<std::size_t> positive(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t best = count;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < count; ++j) {
      if (j == i) continue;
      const double d = distance(i, j);
      if (d < best_d || best == count) {
        best = j;
        best_d = d;
      }
    }
    positive[i] = best;
  }
  return positive;
}

std::size_t mine_hard_negative(std::size_t anchor, int anchor_class, const std::vector<int>& classes,
                               const PairDistance& distance, std::size_t k_sample, Rng& rng) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] != anchor_class) candidates.push_back(i);
  }
  if (candidates.empty()) throw NoNegativeError("no item with a pivot class other than " + std::to_string(anchor_class));
  if (k_sample > 0 && k_sample < candidates.size()) {
    // Partial Fisher-Yates, then restore index order for the tie rule.
    for (std::size_t j = 0; j < k_sample; ++j) {
      std::swap(candidates[j], candidates[j + rng.below(candidates.size() - j)]);
    }
    candidates.resize(k_sample);
    std::sort(candidates.begin(), candidates.end());
  }
  const Nearest best = nearest(candidates.size(), [&](std::size_t j) { return distance(anchor, candidates[j]); });
  return candidates[best.index];
}

NegativePick mine_hard_negatives(std::size_t anchor_speech, std::size_t anchor_image, int anchor_class,
                                 const std::vector<int>& speech_classes, const std::vector<int>& image_classes,
                                 const PairDistance& speech_distance, const PairDistance& image_distance,
                                 std::size_t k_sample, std::uint64_t seed) {
  Rng rng(seed);
  NegativePick pick;
  pick.speech = mine_hard_negative(anchor_speech, anchor_class, speech_classes, speech_distance, k_sample, rng);
  pick.image = mine_hard_negative(anchor_image, anchor_class, image_classes, image_distance, k_sample, rng);
  return pick;
}

std::vector<MinedPair> mine_oracle_pairs(const SpeechSet& speech, const ImageSet& images,
                                         const PairLabels& labels, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> by_class;
  std::map<int, std::vector<std::size_t>> by_visual;
  for (std::size_t i = 0; i < speech.size(); ++i) {
    by_class[labels.speech_to_class.at(speech.items[i].id)].push_back(i);
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    by_visual[labels.image_to_class.at(images.items[i].id)].push_back(i);
  }
  std::vector<MinedPair> pairs;
  for (const auto& name : labels.class_names) {
    const int visual = labels.visual_class(name);
    std::vector<std::size_t> A = by_class[name];
    std::vector<std::size_t> V = by_visual[visual];
    if (A.empty() || V.empty()) {
      throw ArgumentError("class '" + name + "' has no items in one modality");
    }
    Rng ra(derive_seed(seed, "speech:" + name));
    Rng rv(derive_seed(seed, "image:" + name));
    ra.shuffle(A);
    rv.shuffle(V);
    for (std::size_t j = 0; j < std::min(A.size(), V.size()); ++j) pairs.push_back({A[j], V[j], -1, name, visual});
  }
  return pairs;
}

void write_pair_manifest(const std::filesystem::path& path, const PairManifest& manifest) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : manifest.rows) {
    out << r.speech_id << '\t' << r.image_id << '\t' << r.pivot_index << '\t' << r.pivot_class << '\n';
  }
  std::ofstream side(path.string() + ".json", std::ios::trunc);
  if (!side) throw IoError("cannot write " + path.string() + ".json");
  side << manifest.sidecar.dump(2) << '\n';
  if (!out || !side) throw IoError("write failed for " + path.string());
}

PairManifest load_pair_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing pair manifest " + path.string());
  PairManifest m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    PairManifest::Row r;
    std::string pivot;
    if (!std::getline(fields, r.speech_id, '\t') || !std::getline(fields, r.image_id, '\t') ||
        !std::getline(fields, pivot, '\t') || !std::getline(fields, r.pivot_class)) {
      throw FormatError(path.string() + ": malformed manifest line");
    }
    r.pivot_index = std::stoi(pivot);
    m.rows.push_back(std::move(r));
  }
  std::ifstream side(path.string() + ".json");
  if (side) m.sidecar = nlohmann::json::parse(side);
  return m;
}

}  // namespace mmfs
