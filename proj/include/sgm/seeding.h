#pragma once

#include "sgm/tensor.h"

#include <cstddef>
#include <string>
#include <vector>

namespace sgm {

/// Keypoints of one image: n x 2 coordinates (normalized units) and n x d
/// L2-normalized descriptors.
struct KeypointSet {
  Matrix coords;
  Matrix descriptors;

  std::size_t size() const noexcept { return coords.rows(); }
  std::size_t descriptor_dim() const noexcept { return descriptors.cols(); }

  /// Throws Error(contract) if row counts differ, coords are not n x 2, or a
  /// descriptor row is not unit length within `tolerance`.
  void validate(double tolerance = 1e-6) const;

  KeypointSet permuted(std::span<const std::size_t> order) const;
};

/// Paired seed correspondences, sorted by non-increasing score.
struct SeedSet {
  std::vector<std::size_t> indices_a;
  std::vector<std::size_t> indices_b;
  std::vector<double> scores;

  std::size_t size() const noexcept { return indices_a.size(); }
  bool empty() const noexcept { return indices_a.empty(); }
};

struct Candidate {
  std::size_t a = 0;
  std::size_t b = 0;
  double score = 0.0;
};

struct PutativeMatches {
  std::vector<Candidate> matches;
  bool warning = false;
  std::string status;
};

enum class NmsSide { image_a, image_b, both };

inline constexpr double kNmsTheta = 1e-2;

/// Mutual nearest neighbours by descriptor L2 distance, scored 1 - d1/d2.
PutativeMatches nn_match(const KeypointSet& a, const KeypointSet& b);

/// theta times the mean pairwise Euclidean distance over ordered pairs i != j.
double nms_radius(const Matrix& coords, double theta = kNmsTheta);

/// Greedy descending-score sweep with spatial suppression. Ties in score are
/// broken by coordinates, not indices, so the result does not depend on
/// keypoint order.
SeedSet select_seeds(std::vector<Candidate> candidates, int k, double radius, const Matrix& coords_a,
                     const Matrix& coords_b, NmsSide side = NmsSide::image_a);

/// Cells that are the argmax of both their row and column in an
/// (n+1) x (m+1) assignment matrix; the dustbin competes but is never
/// returned.
std::vector<Candidate> mutual_argmax_candidates(const Matrix& assignment);

SeedSet reseed(const Matrix& assignment, int k, const Matrix& coords_a, const Matrix& coords_b,
               NmsSide side = NmsSide::image_a);

/// round(128 * n / 2000), at least 8.
int default_seed_count(std::size_t keypoints);

}  // namespace sgm
