#include "sgm/seeding.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

namespace sgm {

namespace {

double squared_distance(std::span<const double> x, std::span<const double> y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double t = x[i] - y[i];
    acc += t * t;
  }
  return acc;
}

double point_distance(const Matrix& coords, std::size_t i, std::size_t j) {
  return std::sqrt(squared_distance(coords.row(i), coords.row(j)));
}

std::vector<double> squared_norms(const Matrix& m) {
  std::vector<double> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double acc = 0.0;
    for (double v : m.row(i)) acc += v * v;
    out[i] = acc;
  }
  return out;
}

}  // namespace

void KeypointSet::validate(double tolerance) const {
  if (coords.rows() != descriptors.rows())
    throw Error(ErrorKind::contract, "keypoints: coords " + coords.shape_string() + " vs descriptors " +
                                         descriptors.shape_string());
  if (coords.rows() > 0 && coords.cols() != 2)
    throw Error(ErrorKind::contract, "keypoints: coords must be n x 2, got " + coords.shape_string());
  for (std::size_t i = 0; i < descriptors.rows(); ++i) {
    double acc = 0.0;
    for (double v : descriptors.row(i)) acc += v * v;
    if (std::abs(std::sqrt(acc) - 1.0) > tolerance)
      throw Error(ErrorKind::contract, "keypoints: descriptor " + std::to_string(i) + " is not unit length");
  }
}

KeypointSet KeypointSet::permuted(std::span<const std::size_t> order) const {
  KeypointSet out{Matrix(order.size(), coords.cols()), Matrix(order.size(), descriptors.cols())};
  for (std::size_t i = 0; i < order.size(); ++i) {
    std::copy(coords.row(order[i]).begin(), coords.row(order[i]).end(), out.coords.row(i).begin());
    std::copy(descriptors.row(order[i]).begin(), descriptors.row(order[i]).end(), out.descriptors.row(i).begin());
  }
  return out;
}

PutativeMatches nn_match(const KeypointSet& a, const KeypointSet& b) {
  PutativeMatches result;
  if (a.size() < 2 || b.size() < 2) {
    result.warning = true;
    result.status = "nn_match: need at least 2 keypoints per image";
    return result;
  }
  if (a.descriptor_dim() != b.descriptor_dim())
    throw Error(ErrorKind::dimension, "nn_match: descriptor widths " + a.descriptors.shape_string() + " and " +
                                          b.descriptors.shape_string());

  // Search on the Gram form, then recompute the two distances that matter
  // directly so scores do not carry cancellation error.
  const Matrix gram = matmul_nt(a.descriptors, b.descriptors);
  const auto na = squared_norms(a.descriptors);
  const auto nb = squared_norms(b.descriptors);
  const std::size_t n = a.size();
  const std::size_t m = b.size();

  std::vector<std::size_t> best_b(n), second_b(n);
  for (std::size_t i = 0; i < n; ++i) {
    double d1 = std::numeric_limits<double>::infinity();
    double d2 = d1;
    std::size_t j1 = 0, j2 = 0;
    for (std::size_t j = 0; j < m; ++j) {
      const double d = na[i] + nb[j] - 2.0 * gram(i, j);
      if (d < d1) {
        d2 = d1;
        j2 = j1;
        d1 = d;
        j1 = j;
      } else if (d < d2) {
        d2 = d;
        j2 = j;
      }
    }
    best_b[i] = j1;
    second_b[i] = j2;
  }
  std::vector<std::size_t> best_a(m);
  for (std::size_t j = 0; j < m; ++j) {
    double d1 = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      const double d = na[i] + nb[j] - 2.0 * gram(i, j);
      if (d < d1) {
        d1 = d;
        best_a[j] = i;
      }
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = best_b[i];
    if (best_a[j] != i) continue;
    const double d1 = std::sqrt(squared_distance(a.descriptors.row(i), b.descriptors.row(j)));
    const double d2 = std::sqrt(squared_distance(a.descriptors.row(i), b.descriptors.row(second_b[i])));
    const double ratio = d2 > 0.0 ? std::min(d1 / d2, 1.0) : 1.0;
    result.matches.push_back({i, j, 1.0 - ratio});
  }
  return result;
}

double nms_radius(const Matrix& coords, double theta) {
  const std::size_t n = coords.rows();
  if (n < 2) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) total += point_distance(coords, i, j);
  // Each unordered pair appears twice in the ordered sum.
  return theta * 2.0 * total / (static_cast<double>(n) * static_cast<double>(n - 1));
}

SeedSet select_seeds(std::vector<Candidate> candidates, int k, double radius, const Matrix& coords_a,
                     const Matrix& coords_b, NmsSide side) {
  SeedSet seeds;
  if (k <= 0) return seeds;
  if (radius < 0.0) throw Error(ErrorKind::contract, "select_seeds: negative radius");

  auto key = [&](const Candidate& c) {
    return std::make_tuple(-c.score, coords_a(c.a, 0), coords_a(c.a, 1), coords_b(c.b, 0), coords_b(c.b, 1));
  };
  std::sort(candidates.begin(), candidates.end(),
            [&](const Candidate& x, const Candidate& y) { return key(x) < key(y); });

  std::vector<char> used_a(coords_a.rows(), 0), used_b(coords_b.rows(), 0);
  for (const Candidate& c : candidates) {
    if (seeds.size() >= static_cast<std::size_t>(k)) break;
    if (used_a[c.a] || used_b[c.b]) continue;
    bool suppressed = false;
    for (std::size_t s = 0; s < seeds.size() && !suppressed; ++s) {
      if (side != NmsSide::image_b && point_distance(coords_a, c.a, seeds.indices_a[s]) < radius) suppressed = true;
      if (side != NmsSide::image_a && point_distance(coords_b, c.b, seeds.indices_b[s]) < radius) suppressed = true;
    }
    if (suppressed) continue;
    used_a[c.a] = used_b[c.b] = 1;
    seeds.indices_a.push_back(c.a);
    seeds.indices_b.push_back(c.b);
    seeds.scores.push_back(c.score);
  }
  return seeds;
}

std::vector<Candidate> mutual_argmax_candidates(const Matrix& assignment) {
  std::vector<Candidate> out;
  if (assignment.rows() < 2 || assignment.cols() < 2) return out;
  const std::size_t n = assignment.rows() - 1;
  const std::size_t m = assignment.cols() - 1;
  std::vector<std::size_t> col_best(m + 1, 0);
  for (std::size_t j = 0; j <= m; ++j)
    for (std::size_t i = 1; i <= n; ++i)
      if (assignment(i, j) > assignment(col_best[j], j)) col_best[j] = i;
  for (std::size_t i = 0; i < n; ++i) {
    auto r = assignment.row(i);
    const auto j = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
    if (j < m && col_best[j] == i) out.push_back({i, j, assignment(i, j)});
  }
  return out;
}

SeedSet reseed(const Matrix& assignment, int k, const Matrix& coords_a, const Matrix& coords_b, NmsSide side) {
  return select_seeds(mutual_argmax_candidates(assignment), k, nms_radius(coords_a), coords_a, coords_b, side);
}

int default_seed_count(std::size_t keypoints) {
  const auto k = static_cast<int>(std::lround(128.0 * static_cast<double>(keypoints) / 2000.0));
  return std::max(k, 8);
}

}  // namespace sgm
