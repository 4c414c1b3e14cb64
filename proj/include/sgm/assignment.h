#pragma once

#include "sgm/tensor.h"

#include <cstddef>
#include <vector>

namespace sgm {

inline constexpr double kDefaultMatchThreshold = 0.2;
inline constexpr int kFinalSinkhornIterations = 100;
inline constexpr int kReseedSinkhornIterations = 10;

struct Match {
  std::size_t a = 0;
  std::size_t b = 0;
  double confidence = 0.0;

  friend bool operator==(const Match&, const Match&) = default;
};

/// One-to-one matches extracted from an assignment matrix.
using MatchList = std::vector<Match>;

/// C = F_A * F_B^T.
Var correlation(const Var& features_a, const Var& features_b);

/// Log-domain Sinkhorn on exp(scores) for an (n+1) x (m+1) dustbin-augmented
/// score matrix. Marginals are (1,...,1,m) for rows and (1,...,1,n) for
/// columns; each iteration normalizes rows then columns. Returns the
/// exponentiated matrix, differentiable through the active tape.
Var sinkhorn(const Var& scores, int iterations);

/// Sum of absolute deviations of interior row and column sums from 1.
double marginal_violation(const Matrix& assignment);

/// Cells of the real block that are the argmax of both their row and column
/// (dustbin included in the competition) with value >= threshold.
MatchList extract_matches(const Matrix& assignment, double threshold = kDefaultMatchThreshold);

}  // namespace sgm
