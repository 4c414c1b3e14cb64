#pragma once

// Oracles and helpers shared by the test binaries. The oracles here are
// written with plain loops in long double and never call the library's
// kernels, so agreement is an independent check.

#include "sgm/attention.h"
#include "sgm/seeding.h"
#include "sgm/sgnn.h"
#include "sgm/tensor.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace sgm::test {

using Real = long double;
using Grid = std::vector<std::vector<Real>>;

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (double& v : m.data()) v = u(rng);
  return m;
}

inline Grid to_grid(const Matrix& m) {
  Grid g(m.rows(), std::vector<Real>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) g[i][j] = m(i, j);
  return g;
}

inline Matrix to_matrix(const Grid& g) {
  Matrix m(g.size(), g.empty() ? 0 : g[0].size());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = static_cast<double>(g[i][j]);
  return m;
}

inline Grid naive_matmul(const Grid& a, const Grid& b) {
  const std::size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
  Grid out(n, std::vector<Real>(m, 0.0L));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t t = 0; t < k; ++t) out[i][j] += a[i][t] * b[t][j];
  return out;
}

inline Grid naive_transpose(const Grid& a) {
  Grid out(a.empty() ? 0 : a[0].size(), std::vector<Real>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) out[j][i] = a[i][j];
  return out;
}

inline Grid naive_softmax(const Grid& a) {
  Grid out = a;
  for (auto& row : out) {
    Real total = 0.0L;
    for (Real v : row) total += std::exp(v);
    for (Real& v : row) v = std::exp(v) / total;
  }
  return out;
}

inline Grid naive_linear(const Grid& x, const Linear& l) {
  Grid out = naive_matmul(x, to_grid(l.weight.value));
  for (auto& row : out)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += l.bias.value(0, j);
  return out;
}

inline Grid naive_mlp(const Grid& x, const Mlp& net) {
  Grid h = x;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    h = naive_linear(h, net.layers[i]);
    if (i + 1 < net.layers.size())
      for (auto& row : h)
        for (Real& v : row) v = std::max(v, 0.0L);
  }
  return h;
}

inline Grid hconcat(const Grid& a, const Grid& b) {
  Grid out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out[i].insert(out[i].end(), b[i].begin(), b[i].end());
  return out;
}

/// Delta = softmax(Q K^T / sqrt(d/h)) Diag(w) V per head, concatenated.
inline Grid naive_message(const Grid& x, const Grid& y, const std::vector<Real>* w, const AttentionWeights& att,
                          std::size_t heads, bool scaled) {
  const std::size_t d = x[0].size();
  const std::size_t hd = d / heads;
  Grid q = naive_linear(x, att.query), k = naive_linear(y, att.key), v = naive_linear(y, att.value);
  Grid out(x.size(), std::vector<Real>(d, 0.0L));
  const Real s = scaled ? 1.0L / std::sqrt(static_cast<Real>(hd)) : 1.0L;
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      std::vector<Real> scores(y.size());
      Real mx = -1e300L;
      for (std::size_t j = 0; j < y.size(); ++j) {
        Real acc = 0.0L;
        for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) acc += q[i][c] * s * k[j][c];
        scores[j] = acc;
        mx = std::max(mx, acc);
      }
      Real total = 0.0L;
      for (Real& e : scores) total += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < y.size(); ++j) {
        const Real p = scores[j] / total * (w ? (*w)[j] : 1.0L);
        for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) out[i][c] += p * v[j][c];
      }
    }
  }
  return out;
}

inline Grid naive_attention(const Grid& x, const Grid& y, const std::vector<Real>* w, const AttentionWeights& att,
                            std::size_t heads, bool scaled) {
  Grid upd = naive_mlp(hconcat(x, naive_message(x, y, w, att, heads, scaled)), att.update);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x[i].size(); ++j) upd[i][j] += x[i][j];
  return upd;
}

inline double max_diff(const Matrix& a, const Grid& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      worst = std::max(worst, static_cast<double>(std::abs(static_cast<Real>(a(i, j)) - b[i][j])));
  return worst;
}

// ---------------------------------------------------------------------------
// Central finite differences against the tape.

struct GradCheck {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t refined = 0;
  std::string worst;
};

/// Ridders' extrapolation of central differences from `h` down by factors of
/// 1.4, returning the tableau entry with the smallest error estimate.
inline double ridders_derivative(const std::function<double(double)>& central, double h) {
  constexpr int kTable = 16;
  constexpr double kShrink = 1.4, kShrink2 = kShrink * kShrink, kSafe = 2.0;
  double a[kTable][kTable];
  a[0][0] = central(h);
  double best = a[0][0], err = std::numeric_limits<double>::max();
  for (int i = 1; i < kTable; ++i) {
    h /= kShrink;
    a[0][i] = central(h);
    double fac = kShrink2;
    for (int j = 1; j <= i; ++j) {
      a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
      fac *= kShrink2;
      const double e = std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
      if (e <= err) {
        err = e;
        best = a[j][i];
      }
    }
    if (std::abs(a[i][i] - a[i - 1][i - 1]) >= kSafe * err) break;
  }
  return best;
}

/// `loss` builds a 1 x 1 Var from the current parameter values. Relative
/// error per entry is |analytic - numeric| / max(|analytic|, |numeric|, tau)
/// with tau = floor * max(1, |loss|): central-difference roundoff grows with
/// the loss value, so entries below that scale are compared absolutely.
/// The numeric value is a central difference at `step`; entries where that
/// disagrees with the tape are re-estimated with Ridders' method, which
/// adapts the step to curvature, kinks (ReLU, argmax, reseeding) and roundoff.
inline GradCheck check_gradients(const std::vector<Parameter*>& params, const std::function<Var()>& loss,
                                 double step = 1e-5, double floor = 1e-6, double tolerance = 1e-4) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    Var l = loss();
    tape.backward(l);
  }
  const double tau = floor * std::max(1.0, std::abs(loss()->value()(0, 0)));
  auto relative = [tau](double x, double y) { return std::abs(x - y) / std::max({std::abs(x), std::abs(y), tau}); };
  GradCheck result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    auto values = p->value.data();
    for (std::size_t e = 0; e < values.size(); ++e) {
      const double saved = values[e];
      auto central = [&](double h) {
        values[e] = saved + h;
        const double up = loss()->value()(0, 0);
        values[e] = saved - h;
        const double down = loss()->value()(0, 0);
        values[e] = saved;
        return (up - down) / (2.0 * h);
      };
      const double analytic = p->grad.data()[e];
      double numeric = central(step);
      double rel = relative(analytic, numeric);
      if (rel >= tolerance) {
        ++result.refined;
        numeric = ridders_derivative(central, step);
        rel = relative(analytic, numeric);
      }
      ++result.checked;
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst = "param " + std::to_string(pi) + " entry " + std::to_string(e) + ": analytic " +
                       std::to_string(analytic) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return result;
}

/// sum_ij r_i c_j X_ij with fixed random r, c: a scalar that depends on every entry.
inline Var weighted_sum(const Var& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Matrix r = random_matrix(x->value().rows(), 1, rng, 0.5, 1.5);
  Matrix c = random_matrix(1, x->value().cols(), rng, -1.0, 1.0);
  return sum(scale_cols(scale_rows(x, constant(r)), constant(c)));
}

// ---------------------------------------------------------------------------
// Seeding, assignment and network-unit oracles.

inline KeypointSet random_keypoints(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  KeypointSet kp{random_matrix(n, 2, rng), random_matrix(n, d, rng)};
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (double v : kp.descriptors.row(i)) norm += v * v;
    norm = std::sqrt(norm);
    for (double& v : kp.descriptors.row(i)) v /= norm;
  }
  return kp;
}

inline Real distance(std::span<const double> x, std::span<const double> y) {
  Real acc = 0.0L;
  for (std::size_t i = 0; i < x.size(); ++i) acc += (static_cast<Real>(x[i]) - y[i]) * (static_cast<Real>(x[i]) - y[i]);
  return std::sqrt(acc);
}

/// Mutual nearest neighbours by exhaustive scan, scored 1 - d1/d2.
inline std::vector<Candidate> brute_force_mnn(const KeypointSet& a, const KeypointSet& b) {
  std::vector<Candidate> out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::vector<std::pair<Real, std::size_t>> d;
    for (std::size_t j = 0; j < b.size(); ++j) d.emplace_back(distance(a.descriptors.row(i), b.descriptors.row(j)), j);
    std::sort(d.begin(), d.end());
    const std::size_t j = d[0].second;
    bool mutual = true;
    for (std::size_t o = 0; o < a.size(); ++o)
      if (o != i && distance(a.descriptors.row(o), b.descriptors.row(j)) < d[0].first) mutual = false;
    if (mutual) out.push_back({i, j, static_cast<double>(1.0L - d[0].first / d[1].first)});
  }
  return out;
}

inline Real brute_force_nms_radius(const Matrix& coords, Real theta = 1e-2L) {
  const std::size_t n = coords.rows();
  if (n < 2) return 0.0L;
  Real total = 0.0L;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) total += distance(coords.row(i), coords.row(j));
  return theta * total / static_cast<Real>(n * (n - 1));
}

/// Greedy sweep in descending score that re-scans every accepted seed per
/// candidate. Assumes distinct scores.
inline SeedSet greedy_oracle(std::vector<Candidate> c, std::size_t k, double radius, const Matrix& coords_a) {
  std::stable_sort(c.begin(), c.end(), [](const Candidate& x, const Candidate& y) { return x.score > y.score; });
  SeedSet s;
  for (const Candidate& cand : c) {
    if (s.size() == k) break;
    bool ok = true;
    for (std::size_t t = 0; t < s.size(); ++t) {
      if (s.indices_a[t] == cand.a || s.indices_b[t] == cand.b) ok = false;
      if (distance(coords_a.row(cand.a), coords_a.row(s.indices_a[t])) < radius) ok = false;
    }
    if (!ok) continue;
    s.indices_a.push_back(cand.a);
    s.indices_b.push_back(cand.b);
    s.scores.push_back(cand.score);
  }
  return s;
}

/// Interior cells that dominate their full row and column, dustbins included.
inline std::vector<std::pair<std::size_t, std::size_t>> brute_force_mutual_argmax(const Matrix& m) {
  const std::size_t n = m.rows() - 1, cols = m.cols() - 1;
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      bool best = true;
      for (std::size_t t = 0; t <= cols; ++t) best = best && m(i, t) <= m(i, j);
      for (std::size_t t = 0; t <= n; ++t) best = best && m(t, j) <= m(i, j);
      if (best) out.emplace_back(i, j);
    }
  return out;
}

/// Probability-domain iterative scaling with marginals (1,...,1,m) and (1,...,1,n).
inline Grid oracle_sinkhorn(const Matrix& scores, int iterations) {
  Grid p = to_grid(scores);
  const std::size_t n = p.size() - 1, m = p[0].size() - 1;
  for (auto& row : p)
    for (Real& v : row) v = std::exp(v);
  for (int it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i <= n; ++i) {
      Real total = 0.0L;
      for (Real v : p[i]) total += v;
      const Real target = i == n ? static_cast<Real>(m) : 1.0L;
      for (Real& v : p[i]) v *= target / total;
    }
    for (std::size_t j = 0; j <= m; ++j) {
      Real total = 0.0L;
      for (std::size_t i = 0; i <= n; ++i) total += p[i][j];
      const Real target = j == m ? static_cast<Real>(n) : 1.0L;
      for (std::size_t i = 0; i <= n; ++i) p[i][j] *= target / total;
    }
  }
  return p;
}

inline std::pair<Grid, Grid> oracle_pooling(const Grid& fa, const Grid& fb, const SeedSet& seeds,
                                            ProcessingUnitWeights& u, std::size_t heads) {
  Grid s1a, s1b;
  for (std::size_t i : seeds.indices_a) s1a.push_back(fa[i]);
  for (std::size_t j : seeds.indices_b) s1b.push_back(fb[j]);
  const Grid fused = naive_mlp(hconcat(naive_attention(s1a, fa, nullptr, u.pool, heads, true),
                                       naive_attention(s1b, fb, nullptr, u.pool, heads, true)),
                               u.fusion);
  const std::size_t d = fa[0].size();
  Grid a(fused.size()), b(fused.size());
  for (std::size_t i = 0; i < fused.size(); ++i) {
    a[i].assign(fused[i].begin(), fused[i].begin() + static_cast<std::ptrdiff_t>(d));
    b[i].assign(fused[i].begin() + static_cast<std::ptrdiff_t>(d), fused[i].end());
  }
  return {a, b};
}

inline std::vector<Real> oracle_inlier(const Grid& sa, const Grid& sb, const InlierBranch& branch) {
  Grid h = hconcat(sa, sb);
  for (std::size_t blk = 0; blk < branch.blocks.size(); ++blk) {
    h = naive_linear(h, branch.blocks[blk]);
    const std::size_t rows = h.size(), cols = h[0].size();
    for (std::size_t j = 0; j < cols; ++j) {
      Real mu = 0.0L, var = 0.0L;
      for (std::size_t i = 0; i < rows; ++i) mu += h[i][j];
      mu /= static_cast<Real>(rows);
      for (std::size_t i = 0; i < rows; ++i) var += (h[i][j] - mu) * (h[i][j] - mu);
      var /= static_cast<Real>(rows);
      for (std::size_t i = 0; i < rows; ++i) {
        const Real normed = (h[i][j] - mu) / std::sqrt(var + static_cast<Real>(kContextNormEps));
        h[i][j] = std::max(0.0L, normed * branch.scales[blk].value(0, j) + branch.shifts[blk].value(0, j));
      }
    }
  }
  std::vector<Real> out;
  for (const auto& row : naive_linear(h, branch.head)) out.push_back(1.0L / (1.0L + std::exp(-row[0])));
  return out;
}

struct FilterOracle {
  Grid a;
  Grid b;
  std::vector<Real> gamma;
};

inline FilterOracle oracle_filtering(const Grid& a, const Grid& b, ProcessingUnitWeights& u, std::size_t heads) {
  const Grid s4a = naive_attention(a, a, nullptr, u.self_filter, heads, true);
  const Grid s4b = naive_attention(b, b, nullptr, u.self_filter, heads, true);
  FilterOracle out{naive_attention(s4a, s4b, nullptr, u.cross_filter, heads, true),
                   naive_attention(s4b, s4a, nullptr, u.cross_filter, heads, true), {}};
  out.gamma = oracle_inlier(out.a, out.b, u.inlier);
  return out;
}

}  // namespace sgm::test
