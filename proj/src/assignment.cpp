#include "sgm/assignment.h"

#include "sgm/seeding.h"

#include <cmath>
#include <limits>

namespace sgm {

Var correlation(const Var& features_a, const Var& features_b) {
  if (features_a->value().cols() != features_b->value().cols())
    throw Error(ErrorKind::dimension, "correlation: feature widths " + features_a->value().shape_string() +
                                          " and " + features_b->value().shape_string());
  return matmul_nt(features_a, features_b);
}

Var sinkhorn(const Var& scores, int iterations) {
  const Matrix& s = scores->value();
  if (iterations < 1) throw Error(ErrorKind::contract, "sinkhorn: iterations must be >= 1");
  if (s.rows() < 1 || s.cols() < 1) throw Error(ErrorKind::dimension, "sinkhorn: empty score matrix");
  if (!s.all_finite()) throw Error(ErrorKind::numeric, "sinkhorn: non-finite input");
  const std::size_t n = s.rows() - 1;
  const std::size_t m = s.cols() - 1;

  if (n == 0 || m == 0) {
    // Every real point goes to the dustbin; the corner carries no mass.
    Matrix trivial(n + 1, m + 1);
    for (std::size_t i = 0; i < n; ++i) trivial(i, m) = 1.0;
    for (std::size_t j = 0; j < m; ++j) trivial(n, j) = 1.0;
    return constant(std::move(trivial));
  }

  std::vector<double> log_rows(n + 1, 0.0), log_cols(m + 1, 0.0);
  log_rows[n] = std::log(static_cast<double>(m));
  log_cols[m] = std::log(static_cast<double>(n));

  Var current = scores;
  for (int it = 0; it < iterations; ++it) {
    current = log_normalize_rows(current, log_rows);
    current = log_normalize_cols(current, log_cols);
  }
  return exp(current);
}

double marginal_violation(const Matrix& assignment) {
  const std::size_t n = assignment.rows() - 1;
  const std::size_t m = assignment.cols() - 1;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (double v : assignment.row(i)) acc += v;
    total += std::abs(acc - 1.0);
  }
  for (std::size_t j = 0; j < m; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i <= n; ++i) acc += assignment(i, j);
    total += std::abs(acc - 1.0);
  }
  return total;
}

MatchList extract_matches(const Matrix& assignment, double threshold) {
  if (threshold < 0.0 || threshold >= 1.0)
    throw Error(ErrorKind::contract, "extract_matches: threshold must lie in [0, 1)");
  MatchList out;
  for (const Candidate& c : mutual_argmax_candidates(assignment))
    if (c.score >= threshold) out.push_back({c.a, c.b, c.score});
  return out;
}

}  // namespace sgm
