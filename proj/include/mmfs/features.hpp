#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mmfs/data.hpp"

namespace mmfs {

// 1 - cos(u, v), in [0, 2]. Zero-norm input throws DegenerateVectorError.
double cosine_distance(std::span<const double> u, std::span<const double> v);
double cosine_distance(const Eigen::Ref<const Eigen::VectorXd>& u,
                       const Eigen::Ref<const Eigen::VectorXd>& v);

// Classic DTW with per-frame cosine distance and steps (1,0), (0,1), (1,1).
// The minimum-cost alignment (shortest path among equal costs) is divided by
// its path length.
double dtw_distance(const FrameSequence& a, const FrameSequence& b);

// Cosine distance over the flattened 784 pixels.
double pixel_distance(const ImageGrid& a, const ImageGrid& b);

enum class MetricKind { CosineOnVectors, DtwOnSequences, CosineOnPixels, EmbeddingBacked };

const char* metric_name(MetricKind kind);

// Distance between two items identified by index. The concrete kinds above
// are wrapped into this shape by the callers that own the item storage.
struct DistanceMetric {
  MetricKind kind = MetricKind::CosineOnVectors;
  std::function<double(std::size_t, std::size_t)> distance;
};

struct Nearest {
  std::size_t index = 0;
  double distance = 0.0;
};

// Minimum over candidates, ties broken by the smallest index.
Nearest nearest(std::size_t count, const std::function<double(std::size_t)>& distance_to);

template <class Query, class Candidate, class Metric>
Nearest nearest(const Query& query, const std::vector<Candidate>& candidates, Metric&& metric) {
  return nearest(candidates.size(),
                 [&](std::size_t i) { return static_cast<double>(metric(query, candidates[i])); });
}

// Column-wise cosine distances between one vector and every column of a table.
Eigen::VectorXd cosine_distances(const Eigen::Ref<const Eigen::VectorXd>& query,
                                 const Eigen::Ref<const Eigen::MatrixXd>& table);

}  // namespace mmfs
