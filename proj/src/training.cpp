#include "sgm/training.h"

#include "sgm/binary_io.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <ostream>
#include <set>

namespace sgm {

void SynthConfig::validate() const {
  if (n_points == 0) throw Error(ErrorKind::config, "synth: n_points must be positive");
  if (descriptor_dim == 0) throw Error(ErrorKind::config, "synth: descriptor_dim must be positive");
  for (double f : {overlap, outlier_fraction})
    if (!(f >= 0.0 && f <= 1.0)) throw Error(ErrorKind::config, "synth: fractions must lie in [0, 1]");
  if (!(descriptor_noise >= 0.0) || !(coord_noise >= 0.0))
    throw Error(ErrorKind::config, "synth: noise sigmas must be non-negative");
  if (!(match_radius > 0.0) || !(unmatchable_radius >= match_radius))
    throw Error(ErrorKind::config, "synth: need 0 < match_radius <= unmatchable_radius");
}

std::pair<double, double> apply_transform(const Matrix& h, double x, double y) {
  const double w = h(2, 0) * x + h(2, 1) * y + h(2, 2);
  return {(h(0, 0) * x + h(0, 1) * y + h(0, 2)) / w, (h(1, 0) * x + h(1, 1) * y + h(1, 2)) / w};
}

namespace {

Matrix sample_transform(TransformFamily family, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix h = Matrix::identity(3);
  if (family == TransformFamily::homography) {
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 2; ++c) h(r, c) += 0.15 * u(rng);
    h(0, 2) = 0.2 * u(rng);
    h(1, 2) = 0.2 * u(rng);
    h(2, 0) = 0.1 * u(rng);
    h(2, 1) = 0.1 * u(rng);
  } else {
    const double angle = 0.4 * u(rng);
    const double s = 1.0 + 0.2 * u(rng);
    h(0, 0) = s * std::cos(angle);
    h(0, 1) = -s * std::sin(angle);
    h(1, 0) = s * std::sin(angle);
    h(1, 1) = s * std::cos(angle);
    h(0, 2) = 0.2 * u(rng);
    h(1, 2) = 0.2 * u(rng);
  }
  return h;
}

void random_unit(std::span<double> out, std::normal_distribution<double>& normal, std::mt19937_64& rng) {
  double norm = 0.0;
  for (double& v : out) {
    v = normal(rng);
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double& v : out) v /= norm;
}

void noisy_copy(std::span<const double> latent, double sigma, std::span<double> out,
                std::normal_distribution<double>& normal, std::mt19937_64& rng) {
  double norm = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = latent[i] + (sigma > 0.0 ? sigma * normal(rng) : 0.0);
    norm += out[i] * out[i];
  }
  norm = std::sqrt(norm);
  for (double& v : out) v /= norm;
}

}  // namespace

GroundTruth label_ground_truth(const KeypointSet& a, const KeypointSet& b, const Matrix& h,
                               double match_radius, double unmatchable_radius) {
  const std::size_t n = a.size();
  const std::size_t m = b.size();
  Matrix dist(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    const auto [px, py] = apply_transform(h, a.coords(i, 0), a.coords(i, 1));
    for (std::size_t j = 0; j < m; ++j) dist(i, j) = std::hypot(px - b.coords(j, 0), py - b.coords(j, 1));
  }
  std::vector<std::size_t> best_b(n, 0), best_a(m, 0);
  std::vector<double> min_a(n, std::numeric_limits<double>::infinity());
  std::vector<double> min_b(m, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (dist(i, j) < min_a[i]) {
        min_a[i] = dist(i, j);
        best_b[i] = j;
      }
      if (dist(i, j) < min_b[j]) {
        min_b[j] = dist(i, j);
        best_a[j] = i;
      }
    }
  GroundTruth gt;
  for (std::size_t i = 0; i < n; ++i) {
    if (m > 0 && best_a[best_b[i]] == i && min_a[i] < match_radius) gt.matches.emplace_back(i, best_b[i]);
    if (min_a[i] > unmatchable_radius) gt.unmatchable_a.push_back(i);
  }
  for (std::size_t j = 0; j < m; ++j)
    if (min_b[j] > unmatchable_radius) gt.unmatchable_b.push_back(j);
  return gt;
}

SynthPair synth_pair(const SynthConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t n = cfg.n_points;
  const std::size_t d = cfg.descriptor_dim;
  const auto shared = static_cast<std::size_t>(std::lround(cfg.overlap * static_cast<double>(n)));
  const auto outliers = static_cast<std::size_t>(std::lround(cfg.outlier_fraction * static_cast<double>(shared)));

  std::uniform_real_distribution<double> unit_box(-1.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  SynthPair pair;
  pair.transform = sample_transform(cfg.transform, rng);
  pair.a = {Matrix(n, 2), Matrix(n, d)};
  pair.b = {Matrix(n, 2), Matrix(n, d)};
  std::vector<double> latent(d);

  for (std::size_t i = 0; i < n; ++i) {
    pair.a.coords(i, 0) = unit_box(rng);
    pair.a.coords(i, 1) = unit_box(rng);
    if (i < shared) {
      random_unit(latent, normal, rng);
      noisy_copy(latent, cfg.descriptor_noise, pair.a.descriptors.row(i), normal, rng);
      noisy_copy(latent, cfg.descriptor_noise, pair.b.descriptors.row(i), normal, rng);
      if (i + outliers >= shared) {
        pair.b.coords(i, 0) = unit_box(rng);
        pair.b.coords(i, 1) = unit_box(rng);
      } else {
        const auto [x, y] = apply_transform(pair.transform, pair.a.coords(i, 0), pair.a.coords(i, 1));
        pair.b.coords(i, 0) = x + (cfg.coord_noise > 0.0 ? cfg.coord_noise * normal(rng) : 0.0);
        pair.b.coords(i, 1) = y + (cfg.coord_noise > 0.0 ? cfg.coord_noise * normal(rng) : 0.0);
      }
    } else {
      random_unit(pair.a.descriptors.row(i), normal, rng);
      random_unit(pair.b.descriptors.row(i), normal, rng);
      pair.b.coords(i, 0) = unit_box(rng);
      pair.b.coords(i, 1) = unit_box(rng);
    }
  }
  // Geometry decides among co-visible points; points outside the overlap are
  // unmatchable by construction.
  const GroundTruth geo = label_ground_truth(pair.a, pair.b, pair.transform, cfg.match_radius, cfg.unmatchable_radius);
  std::vector<char> matched(n, 0);
  for (const auto& [i, j] : geo.matches) {
    if (i == j && i + outliers < shared) {
      pair.gt.matches.emplace_back(i, j);
      matched[i] = 1;
    }
  }
  std::vector<char> far_a(n, 0), far_b(n, 0);
  for (std::size_t i : geo.unmatchable_a) far_a[i] = 1;
  for (std::size_t j : geo.unmatchable_b) far_b[j] = 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (matched[i]) continue;
    if (i >= shared || far_a[i]) pair.gt.unmatchable_a.push_back(i);
    if (i >= shared || far_b[i]) pair.gt.unmatchable_b.push_back(i);
  }
  return pair;
}

SynthPair synth_pair(const SynthConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  return synth_pair(cfg, rng);
}

// ---------------------------------------------------------------------------

Var assignment_loss(const Var& assignment, const GroundTruth& gt) {
  const Matrix& mv = assignment->value();
  const std::size_t n = mv.rows() - 1;
  const std::size_t m = mv.cols() - 1;
  std::vector<std::pair<std::size_t, std::size_t>> cells(gt.matches.begin(), gt.matches.end());
  for (std::size_t i : gt.unmatchable_a) cells.emplace_back(i, m);
  for (std::size_t j : gt.unmatchable_b) cells.emplace_back(n, j);
  if (cells.empty()) return constant(Matrix(1, 1));
  return scale(sum(log_floor(gather_cells(assignment, cells), kProbabilityFloor)), -1.0);
}

std::vector<std::uint8_t> label_seeds(const SeedSet& seeds, const GroundTruth& gt) {
  const std::set<std::pair<std::size_t, std::size_t>> truth(gt.matches.begin(), gt.matches.end());
  std::vector<std::uint8_t> labels(seeds.size());
  for (std::size_t s = 0; s < seeds.size(); ++s)
    labels[s] = truth.count({seeds.indices_a[s], seeds.indices_b[s]}) ? 1 : 0;
  return labels;
}

std::vector<std::uint8_t> label_seeds_geometric(const SeedSet& seeds, const KeypointSet& a, const KeypointSet& b,
                                                const Matrix& transform, double tolerance) {
  std::vector<std::uint8_t> labels(seeds.size());
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    const auto [x, y] = apply_transform(transform, a.coords(seeds.indices_a[s], 0), a.coords(seeds.indices_a[s], 1));
    labels[s] = std::hypot(x - b.coords(seeds.indices_b[s], 0), y - b.coords(seeds.indices_b[s], 1)) < tolerance;
  }
  return labels;
}

Var weight_loss(const std::vector<Var>& gammas, const std::vector<std::vector<std::uint8_t>>& labels) {
  if (gammas.size() != labels.size())
    throw Error(ErrorKind::dimension, "weight_loss: " + std::to_string(gammas.size()) + " units but " +
                                          std::to_string(labels.size()) + " label sets");
  Var total = constant(Matrix(1, 1));
  for (std::size_t t = 0; t < gammas.size(); ++t)
    total = add(total, binary_cross_entropy(gammas[t], labels[t], kProbabilityFloor));
  return total;
}

LossTerms total_loss(const Var& reseed_assignment, const Var& final_assignment, const std::vector<Var>& gammas,
                     const std::vector<std::vector<std::uint8_t>>& labels, const GroundTruth& gt, double delta) {
  if (delta < 0.0) throw Error(ErrorKind::contract, "total_loss: negative weight");
  Var lr = assignment_loss(reseed_assignment, gt);
  Var lf = assignment_loss(final_assignment, gt);
  Var lw = weight_loss(gammas, labels);
  LossTerms terms;
  terms.assign_reseed = lr->value()(0, 0);
  terms.assign_final = lf->value()(0, 0);
  terms.weight = lw->value()(0, 0);
  terms.total = add(add(lr, lf), scale(lw, delta));
  return terms;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw Error(ErrorKind::config, "train: learning rate must be non-negative");
  if (!(delta >= 0.0)) throw Error(ErrorKind::config, "train: delta must be non-negative");
  if (batch_size == 0) throw Error(ErrorKind::config, "train: batch size must be positive");
  if (!(block_fraction >= 0.0 && block_fraction <= 1.0))
    throw Error(ErrorKind::config, "train: block fraction must lie in [0, 1]");
  if (!(decay_rate > 0.0 && decay_rate <= 1.0)) throw Error(ErrorKind::config, "train: decay rate in (0, 1]");
  if (reseed_iterations < 1 || final_iterations < 1)
    throw Error(ErrorKind::config, "train: Sinkhorn iterations must be >= 1");
  if (checkpoint_every > 0 && checkpoint_path.empty())
    throw Error(ErrorKind::config, "train: periodic checkpoints need a path");
}

AdamState AdamState::zeros_like(const std::vector<Parameter*>& params) {
  AdamState s;
  for (const Parameter* p : params) {
    s.first.emplace_back(p->value.rows(), p->value.cols());
    s.second.emplace_back(p->value.rows(), p->value.cols());
  }
  return s;
}

void adam_step(std::vector<Parameter*>& params, AdamState& state, double learning_rate, const TrainConfig& cfg) {
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto value = params[p]->value.data();
    auto grad = params[p]->grad.data();
    auto m = state.first[p].data();
    auto v = state.second[p].data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
      value[i] -= learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
    }
  }
}

double learning_rate_at(const TrainConfig& cfg, std::size_t iteration) {
  if (cfg.decay_hold == 0 || iteration < cfg.decay_hold) return cfg.learning_rate;
  return cfg.learning_rate * std::pow(cfg.decay_rate, static_cast<double>(iteration - cfg.decay_hold));
}

std::uint64_t pair_seed(std::uint64_t base, std::size_t iteration, std::size_t slot) {
  // splitmix64 finalizer over a combined key
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(iteration) * 1024 + slot + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<TraceRow> train(TrainState& state, const SynthConfig& synth, const TrainConfig& cfg,
                            const TraceCallback& on_row) {
  cfg.validate();
  synth.validate();
  auto params = state.model.parameters();
  if (state.optimizer.first.size() != params.size()) state.optimizer = AdamState::zeros_like(params);
  const auto blocked_until =
      static_cast<std::size_t>(std::llround(cfg.block_fraction * static_cast<double>(cfg.iterations)));

  std::vector<TraceRow> trace;
  for (std::size_t it = state.next_iteration; it < cfg.iterations; ++it) {
    for (Parameter* p : params) p->zero_grad();
    TraceRow row;
    row.iteration = it;
    std::size_t used = 0;
    for (std::size_t slot = 0; slot < cfg.batch_size; ++slot) {
      SynthConfig sc = synth;
      sc.seed = pair_seed(cfg.data_seed, it, slot);
      const SynthPair pair = synth_pair(sc);

      ForwardConfig fc;
      fc.seed_count = cfg.seed_count;
      fc.reseed_iterations = cfg.reseed_iterations;
      fc.final_iterations = cfg.final_iterations;
      fc.block_stage_gradient = it < blocked_until;
      fc.gamma_weighting = cfg.gamma_weighting;

      Tape tape;
      TapeScope scope(tape);
      ForwardResult out;
      try {
        out = forward(pair.a, pair.b, state.model, fc);
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::unseedable) continue;
        if (e.kind() == ErrorKind::numeric)
          throw Error(ErrorKind::numeric, std::string(e.what()) + " (iteration " + std::to_string(it) +
                                              ", batch slot " + std::to_string(slot) + ", pair seed " +
                                              std::to_string(sc.seed) + ")");
        throw;
      }
      std::vector<std::vector<std::uint8_t>> labels;
      const auto initial_labels = label_seeds(out.seeds_initial, pair.gt);
      const auto refined_labels = label_seeds(out.seeds_refined, pair.gt);
      for (std::size_t u = 0; u < out.gammas.size(); ++u)
        labels.push_back(u < state.model.initial.size() ? initial_labels : refined_labels);

      LossTerms terms = total_loss(out.reseed_assignment, out.final_assignment, out.gammas, labels, pair.gt,
                                   cfg.delta);
      const double total = terms.total->value()(0, 0);
      if (!std::isfinite(total)) {
        throw Error(ErrorKind::numeric, "train: non-finite loss at iteration " + std::to_string(it) +
                                            ", batch slot " + std::to_string(slot) + ", pair seed " +
                                            std::to_string(sc.seed));
      }
      tape.backward(terms.total);
      row.assign_reseed += terms.assign_reseed;
      row.assign_final += terms.assign_final;
      row.weight += terms.weight;
      row.total += total;
      ++used;
    }
    if (used > 0) {
      const double inv = 1.0 / static_cast<double>(used);
      row.assign_reseed *= inv;
      row.assign_final *= inv;
      row.weight *= inv;
      row.total *= inv;
      if (used > 1)
        for (Parameter* p : params)
          for (double& g : p->grad.data()) g *= inv;
      adam_step(params, state.optimizer, learning_rate_at(cfg, it), cfg);
    }
    state.next_iteration = it + 1;
    trace.push_back(row);
    if (on_row) on_row(row);
    if (cfg.checkpoint_every > 0 && state.next_iteration % cfg.checkpoint_every == 0)
      save_checkpoint(cfg.checkpoint_path, state);
  }
  return trace;
}

std::vector<TraceRow> train(ModelWeights& model, const SynthConfig& synth, const TrainConfig& cfg,
                            const TraceCallback& on_row) {
  TrainState state{std::move(model), {}, 0};
  auto trace = train(state, synth, cfg, on_row);
  model = std::move(state.model);
  return trace;
}

// ---------------------------------------------------------------------------

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

void save_checkpoint(const std::string& path, const TrainState& state) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot open " + path + " for writing");
  write_model(out, state.model);
  binary::write_magic(out, "SGMO");
  binary::write_u32(out, kCheckpointVersion);
  binary::write_u64(out, state.next_iteration);
  binary::write_u64(out, state.optimizer.step);
  const auto params = state.model.parameters();
  const bool have_moments = state.optimizer.first.size() == params.size();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Matrix zeros(params[p]->value.rows(), params[p]->value.cols());
    binary::write_tensor(out, have_moments ? state.optimizer.first[p] : zeros);
    binary::write_tensor(out, have_moments ? state.optimizer.second[p] : zeros);
  }
  if (!out) throw Error(ErrorKind::io, "write failed: " + path);
}

TrainState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path);
  TrainState state;
  state.model = read_model(in);
  binary::expect_magic(in, "SGMO");
  const std::uint32_t version = binary::read_u32(in, "checkpoint version");
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::format, "checkpoint: unsupported version " + std::to_string(version));
  state.next_iteration = binary::read_u64(in, "checkpoint iteration");
  state.optimizer = AdamState::zeros_like(state.model.parameters());
  state.optimizer.step = binary::read_u64(in, "checkpoint step");
  for (std::size_t p = 0; p < state.optimizer.first.size(); ++p) {
    binary::read_tensor_into(in, state.optimizer.first[p], "optimizer moment");
    binary::read_tensor_into(in, state.optimizer.second[p], "optimizer moment");
  }
  if (!binary::at_end(in)) throw Error(ErrorKind::format, "checkpoint: trailing bytes in " + path);
  return state;
}

std::string trace_csv_header() { return "iteration,assign_reseed,assign_final,weight,total"; }

std::string trace_csv_row(const TraceRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g", r.iteration, r.assign_reseed, r.assign_final,
                r.weight, r.total);
  return buf;
}

void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& rows) {
  out << trace_csv_header() << '\n';
  for (const TraceRow& r : rows) out << trace_csv_row(r) << '\n';
}

// ---------------------------------------------------------------------------

MatchQuality score_matches(const MatchList& matches, const GroundTruth& gt) {
  const std::set<std::pair<std::size_t, std::size_t>> truth(gt.matches.begin(), gt.matches.end());
  MatchQuality q;
  q.predicted = matches.size();
  q.ground_truth = gt.matches.size();
  for (const Match& mt : matches) q.correct += truth.count({mt.a, mt.b});
  return q;
}

MatchList ratio_test_matches(const KeypointSet& a, const KeypointSet& b, double ratio) {
  MatchList out;
  for (const Candidate& c : nn_match(a, b).matches)
    if (c.score >= 1.0 - ratio) out.push_back({c.a, c.b, c.score});
  return out;
}

SeedSet noisy_seeds(const GroundTruth& gt, std::size_t n, std::size_t m, std::size_t k, double precision,
                    std::mt19937_64& rng) {
  auto matches = gt.matches;
  std::shuffle(matches.begin(), matches.end(), rng);
  const std::size_t inliers =
      std::min(matches.size(), static_cast<std::size_t>(std::lround(precision * static_cast<double>(k))));
  const std::set<std::pair<std::size_t, std::size_t>> truth(gt.matches.begin(), gt.matches.end());

  std::vector<std::pair<std::size_t, std::size_t>> chosen(matches.begin(),
                                                          matches.begin() + static_cast<std::ptrdiff_t>(inliers));
  std::vector<char> used_a(n, 0), used_b(m, 0);
  for (const auto& [i, j] : chosen) used_a[i] = used_b[j] = 1;
  std::uniform_int_distribution<std::size_t> pick_a(0, n - 1), pick_b(0, m - 1);
  std::size_t attempts = 0;
  while (chosen.size() < k && attempts++ < 100 * (k + 1)) {
    const std::size_t i = pick_a(rng);
    const std::size_t j = pick_b(rng);
    if (used_a[i] || used_b[j] || truth.count({i, j})) continue;
    used_a[i] = used_b[j] = 1;
    chosen.emplace_back(i, j);
  }
  std::shuffle(chosen.begin(), chosen.end(), rng);
  SeedSet seeds;
  for (const auto& [i, j] : chosen) {
    seeds.indices_a.push_back(i);
    seeds.indices_b.push_back(j);
    seeds.scores.push_back(1.0);
  }
  return seeds;
}

}  // namespace sgm
