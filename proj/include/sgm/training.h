#pragma once

#include "sgm/assignment.h"
#include "sgm/seeding.h"
#include "sgm/sgnn.h"
#include "sgm/tensor.h"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace sgm {

struct GroundTruth {
  std::vector<std::pair<std::size_t, std::size_t>> matches;
  std::vector<std::size_t> unmatchable_a;
  std::vector<std::size_t> unmatchable_b;

  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

enum class TransformFamily { homography, affine };

struct SynthConfig {
  std::size_t n_points = 100;
  std::size_t descriptor_dim = 32;
  double overlap = 0.8;
  double descriptor_noise = 0.05;   // per-component sigma before renormalizing
  double coord_noise = 0.002;       // jitter on projected coordinates
  double outlier_fraction = 0.0;    // shared points re-detected at a random place in B
  TransformFamily transform = TransformFamily::homography;
  std::uint64_t seed = 0;
  // Labeling thresholds in normalized units (roughly 3 px and 10 px at
  // 640 px across the [-1, 1] frame).
  double match_radius = 0.01;
  double unmatchable_radius = 0.03;

  void validate() const;
};

struct SynthPair {
  KeypointSet a;
  KeypointSet b;
  GroundTruth gt;
  Matrix transform;  // 3 x 3, maps A coordinates to B
};

/// Points [0, overlap * n) are co-visible and share index in both images;
/// the last outlier share of them is re-detected at a random place in B.
/// Matches are co-visible pairs that are mutual nearest neighbours within
/// match_radius after projection. Points outside the overlap are unmatchable,
/// as are co-visible points farther than unmatchable_radius from everything.
SynthPair synth_pair(const SynthConfig& cfg, std::mt19937_64& rng);
SynthPair synth_pair(const SynthConfig& cfg);  // uses cfg.seed

/// Matched: mutual nearest neighbours after projecting A into B, closer than
/// match_radius. Unmatchable: farther than unmatchable_radius from every
/// point of the other image.
GroundTruth label_ground_truth(const KeypointSet& a, const KeypointSet& b, const Matrix& transform,
                               double match_radius, double unmatchable_radius);

/// Applies a 3x3 projective transform to a 2D point.
std::pair<double, double> apply_transform(const Matrix& h, double x, double y);

// ---------------------------------------------------------------------------
// Losses.

inline constexpr double kProbabilityFloor = 1e-12;

/// -[sum log M(i,j) over matches + sum log M(i, m) over unmatchable A +
///   sum log M(n, j) over unmatchable B].
Var assignment_loss(const Var& assignment, const GroundTruth& gt);

/// Seed is an inlier iff (index_a, index_b) is a ground-truth match.
std::vector<std::uint8_t> label_seeds(const SeedSet& seeds, const GroundTruth& gt);
/// Seed is an inlier iff its B keypoint lies within `tolerance` of the
/// projected A keypoint.
std::vector<std::uint8_t> label_seeds_geometric(const SeedSet& seeds, const KeypointSet& a, const KeypointSet& b,
                                                const Matrix& transform, double tolerance);

/// Sum over units of mean binary cross entropy.
Var weight_loss(const std::vector<Var>& gammas, const std::vector<std::vector<std::uint8_t>>& labels);

struct LossTerms {
  Var total;
  double assign_reseed = 0.0;
  double assign_final = 0.0;
  double weight = 0.0;
};

LossTerms total_loss(const Var& reseed_assignment, const Var& final_assignment, const std::vector<Var>& gammas,
                     const std::vector<std::vector<std::uint8_t>>& labels, const GroundTruth& gt, double delta);

// ---------------------------------------------------------------------------
// Optimization.

struct TrainConfig {
  double learning_rate = 1e-4;
  double delta = 250.0;
  std::size_t iterations = 2000;
  std::size_t batch_size = 1;
  bool gamma_weighting = true;      // false trains without weighted unpooling
  double block_fraction = 0.3;      // stage gradient blocking for this share of iterations
  std::size_t decay_hold = 0;       // iterations before decay starts; 0 = never decay
  double decay_rate = 0.999996;     // per-iteration factor after the hold
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int seed_count = 0;               // <= 0: default policy
  int reseed_iterations = kReseedSinkhornIterations;
  int final_iterations = kFinalSinkhornIterations;
  std::uint64_t data_seed = 1;
  std::size_t checkpoint_every = 0;  // 0 = no periodic checkpoints
  std::string checkpoint_path;

  void validate() const;
};

struct AdamState {
  std::vector<Matrix> first;
  std::vector<Matrix> second;
  std::uint64_t step = 0;

  static AdamState zeros_like(const std::vector<Parameter*>& params);
};

void adam_step(std::vector<Parameter*>& params, AdamState& state, double learning_rate, const TrainConfig& cfg);

struct TraceRow {
  std::size_t iteration = 0;
  double assign_reseed = 0.0;
  double assign_final = 0.0;
  double weight = 0.0;
  double total = 0.0;
};

struct TrainState {
  ModelWeights model;
  AdamState optimizer;
  std::size_t next_iteration = 0;
};

using TraceCallback = std::function<void(const TraceRow&)>;

/// Runs iterations [state.next_iteration, cfg.iterations). Returns the trace
/// of the iterations it ran.
std::vector<TraceRow> train(TrainState& state, const SynthConfig& synth, const TrainConfig& cfg,
                            const TraceCallback& on_row = {});

/// Convenience wrapper starting from fresh optimizer state.
std::vector<TraceRow> train(ModelWeights& model, const SynthConfig& synth, const TrainConfig& cfg,
                            const TraceCallback& on_row = {});

double learning_rate_at(const TrainConfig& cfg, std::size_t iteration);
std::uint64_t pair_seed(std::uint64_t base, std::size_t iteration, std::size_t slot);

void save_checkpoint(const std::string& path, const TrainState& state);
TrainState load_checkpoint(const std::string& path);

void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& rows);
std::string trace_csv_header();
std::string trace_csv_row(const TraceRow& row);

// ---------------------------------------------------------------------------
// Evaluation helpers.

struct MatchQuality {
  std::size_t predicted = 0;
  std::size_t correct = 0;
  std::size_t ground_truth = 0;

  double precision() const { return predicted == 0 ? 1.0 : static_cast<double>(correct) / predicted; }
  double recall() const { return ground_truth == 0 ? 1.0 : static_cast<double>(correct) / ground_truth; }
};

MatchQuality score_matches(const MatchList& matches, const GroundTruth& gt);

inline constexpr double kLoweRatio = 0.8;

/// Mutual nearest neighbours that also pass the ratio test d1/d2 <= ratio.
MatchList ratio_test_matches(const KeypointSet& a, const KeypointSet& b, double ratio = kLoweRatio);

/// `k` seeds of which round(precision * k) are ground-truth matches, padded
/// with random non-matching pairs (no index reused on either side).
SeedSet noisy_seeds(const GroundTruth& gt, std::size_t n, std::size_t m, std::size_t k, double precision,
                    std::mt19937_64& rng);

}  // namespace sgm
