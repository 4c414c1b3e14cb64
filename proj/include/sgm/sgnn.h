#pragma once

#include "sgm/assignment.h"
#include "sgm/attention.h"
#include "sgm/seeding.h"
#include "sgm/tensor.h"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace sgm {

inline constexpr double kContextNormEps = 1e-6;
inline constexpr std::size_t kContextNormBlocks = 3;

/// Inlier predictor over seed correspondences: stacked
/// {linear, context norm, per-channel scale + shift, ReLU} blocks, then
/// linear -> 1 and a sigmoid.
struct InlierBranch {
  std::vector<Linear> blocks;        // 2d -> d, then d -> d
  std::vector<Parameter> scales;     // 1 x d, init 1
  std::vector<Parameter> shifts;     // 1 x d, init 0
  Linear head;                       // d -> 1

  InlierBranch() = default;
  explicit InlierBranch(std::size_t d);
};

struct ProcessingUnitWeights {
  AttentionWeights pool;
  Mlp fusion;  // 2d -> 2d -> 2d
  AttentionWeights self_filter;
  AttentionWeights cross_filter;
  InlierBranch inlier;
  AttentionWeights unpool;

  ProcessingUnitWeights() = default;
  explicit ProcessingUnitWeights(std::size_t d);
};

struct ModelConfig {
  std::size_t d = 128;
  std::size_t heads = 4;
  std::size_t initial_blocks = 6;
  std::size_t refine_blocks = 3;
  std::size_t descriptor_dim = 128;  // != d adds a linear projection
  bool scaled_attention = true;

  AttentionOptions attention() const { return {heads, scaled_attention}; }
  void validate() const;
};

struct ModelWeights {
  ModelConfig config;
  Mlp position;  // 2 -> d -> d
  std::optional<Linear> descriptor_projection;
  std::vector<ProcessingUnitWeights> initial;
  std::vector<ProcessingUnitWeights> refine;
  Parameter dustbin{Matrix(1, 1, 1.0)};

  ModelWeights() = default;
  explicit ModelWeights(const ModelConfig& config);

  static ModelWeights random(const ModelConfig& config, std::uint64_t seed);

  /// Every parameter in canonical declaration order (also the file order).
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;
};

// ---------------------------------------------------------------------------
// Building blocks.

/// 0F = descriptors (+ projection) + MLP(coords).
Var embed_positions(const KeypointSet& kp, ModelWeights& weights);

struct PooledSeeds {
  Var a;
  Var b;
};

PooledSeeds attentional_pooling(const Var& features_a, const Var& features_b, const SeedSet& seeds,
                                ProcessingUnitWeights& unit, const AttentionOptions& options);

struct FilteredSeeds {
  Var a;
  Var b;
  Var inlier_scores;  // k x 1 in [0, 1]
};

FilteredSeeds seed_filtering(const Var& pooled_a, const Var& pooled_b, ProcessingUnitWeights& unit,
                             const AttentionOptions& options);

Var inlier_scores(const Var& seeds_a, const Var& seeds_b, InlierBranch& branch);

/// F + MLP(F || softmax(Q K^T) Diag(gamma) V) with keys/values from the
/// filtered seeds. Null gamma means unweighted.
Var attentional_unpooling(const Var& features, const Var& filtered, const Var& gamma,
                          ProcessingUnitWeights& unit, const AttentionOptions& options);

struct UnitOutput {
  Var a;
  Var b;
  Var gamma;
};

UnitOutput processing_unit(const Var& features_a, const Var& features_b, const SeedSet& seeds,
                           ProcessingUnitWeights& unit, const AttentionOptions& options,
                           bool gamma_weighting = true);

// ---------------------------------------------------------------------------
// Full two-stage pass.

struct ForwardConfig {
  int seed_count = 0;  // <= 0: default_seed_count(min(n, m))
  int reseed_iterations = kReseedSinkhornIterations;
  int final_iterations = kFinalSinkhornIterations;
  NmsSide nms_side = NmsSide::image_a;
  bool block_stage_gradient = false;
  bool gamma_weighting = true;
  std::optional<SeedSet> initial_seeds;  // replaces the seeding module
};

struct ForwardResult {
  Var reseed_assignment;  // M_r
  Var final_assignment;   // M_f
  std::vector<Var> gammas;
  SeedSet seeds_initial;
  SeedSet seeds_refined;
  bool reseed_fallback = false;
  Var features_a;
  Var features_b;
};

ForwardResult forward(const KeypointSet& a, const KeypointSet& b, ModelWeights& weights,
                      const ForwardConfig& config = {});

/// Initial seeding only: MNN ratio candidates + NMS.
SeedSet initial_seeds(const KeypointSet& a, const KeypointSet& b, int k, NmsSide side = NmsSide::image_a);

int resolve_seed_count(const ForwardConfig& config, std::size_t n, std::size_t m);

// ---------------------------------------------------------------------------
// Weight file: "SGMW", version, shape header, tensors in canonical order.

inline constexpr std::uint32_t kModelFormatVersion = 1;

void write_model(std::ostream& out, const ModelWeights& weights);
/// Reads one model from the stream; leaves the stream after the last tensor.
ModelWeights read_model(std::istream& in);
void save_model(const std::string& path, const ModelWeights& weights);
/// Loads a model file, or the model section of a checkpoint.
ModelWeights load_model(const std::string& path);
std::string model_hash(const ModelWeights& weights);

}  // namespace sgm
