#include "mmfs/features.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mmfs/error.hpp"

namespace mmfs {

namespace {

double cosine_raw(const double* u, const double* v, std::size_t n) {
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw DegenerateVectorError("cosine distance of a zero-norm vector");
  // sqrt(uu * vv) is exact for u == v, so self-distance is exactly 0.
  const double d = 1.0 - dot / std::sqrt(uu * vv);
  return std::clamp(d, 0.0, 2.0);
}

}  // namespace

double cosine_distance(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ShapeError("cosine distance of vectors with different lengths");
  return cosine_raw(u.data(), v.data(), u.size());
}

double cosine_distance(const Eigen::Ref<const Eigen::VectorXd>& u,
                       const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (u.size() != v.size()) throw ShapeError("cosine distance of vectors with different lengths");
  return cosine_raw(u.data(), v.data(), static_cast<std::size_t>(u.size()));
}

double dtw_distance(const FrameSequence& a, const FrameSequence& b) {
  const int n = a.length(), m = b.length();
  if (n == 0 || m == 0) throw EmptyItemError("DTW of an empty sequence");
  if (a.dim() != b.dim()) throw ShapeError("DTW of sequences with different frame dims");
  const std::size_t dim = static_cast<std::size_t>(a.dim());

  // Lexicographic (cost, path length) dynamic programme.
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> cost(static_cast<std::size_t>(n) * m, inf);
  std::vector<int> steps(static_cast<std::size_t>(n) * m, 0);
  auto at = [m](int i, int j) { return static_cast<std::size_t>(i) * m + j; };
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      const double local = cosine_raw(a.frames.col(i).data(), b.frames.col(j).data(), dim);
      if (i == 0 && j == 0) {
        cost[at(0, 0)] = local;
        steps[at(0, 0)] = 1;
        continue;
      }
      double best = inf;
      int best_steps = 0;
      auto consider = [&](int pi, int pj) {
        if (pi < 0 || pj < 0) return;
        const double c = cost[at(pi, pj)];
        const int s = steps[at(pi, pj)];
        if (c < best || (c == best && s < best_steps)) {
          best = c;
          best_steps = s;
        }
      };
      consider(i - 1, j - 1);
      consider(i - 1, j);
      consider(i, j - 1);
      cost[at(i, j)] = best + local;
      steps[at(i, j)] = best_steps + 1;
    }
  }
  return cost[at(n - 1, m - 1)] / steps[at(n - 1, m - 1)];
}

double pixel_distance(const ImageGrid& a, const ImageGrid& b) {
  return cosine_raw(a.pixels.data(), b.pixels.data(), a.pixels.size());
}

const char* metric_name(MetricKind kind) {
  switch (kind) {
    case MetricKind::CosineOnVectors: return "cosine-on-vectors";
    case MetricKind::DtwOnSequences: return "dtw-on-sequences";
    case MetricKind::CosineOnPixels: return "cosine-on-pixels";
    case MetricKind::EmbeddingBacked: return "embedding-backed";
  }
  return "unknown";
}

Nearest nearest(std::size_t count, const std::function<double(std::size_t)>& distance_to) {
  if (count == 0) throw ArgumentError("nearest() needs at least one candidate");
  Nearest best{0, distance_to(0)};
  for (std::size_t i = 1; i < count; ++i) {
    const double d = distance_to(i);
    if (d < best.distance) best = {i, d};
  }
  return best;
}

Eigen::VectorXd cosine_distances(const Eigen::Ref<const Eigen::VectorXd>& query,
                                 const Eigen::Ref<const Eigen::MatrixXd>& table) {
  if (query.size() != table.rows()) throw ShapeError("query length differs from table rows");
  Eigen::VectorXd out(table.cols());
  for (Eigen::Index j = 0; j < table.cols(); ++j) {
    out(j) = cosine_raw(query.data(), table.col(j).data(), static_cast<std::size_t>(query.size()));
  }
  return out;
}

}  // namespace mmfs
