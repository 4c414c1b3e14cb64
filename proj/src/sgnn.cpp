#include "sgm/sgnn.h"

#include "sgm/binary_io.h"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace sgm {

InlierBranch::InlierBranch(std::size_t d) : head(d, 1) {
  for (std::size_t b = 0; b < kContextNormBlocks; ++b) {
    blocks.emplace_back(b == 0 ? 2 * d : d, d);
    scales.emplace_back(Matrix(1, d, 1.0));
    shifts.emplace_back(Matrix(1, d, 0.0));
  }
}

ProcessingUnitWeights::ProcessingUnitWeights(std::size_t d)
    : pool(d), fusion({2 * d, 2 * d, 2 * d}), self_filter(d), cross_filter(d), inlier(d), unpool(d) {}

void ModelConfig::validate() const {
  if (d == 0 || heads == 0 || d % heads != 0)
    throw Error(ErrorKind::config, "model: head count must divide a positive feature width");
  if (descriptor_dim == 0) throw Error(ErrorKind::config, "model: descriptor width must be positive");
}

ModelWeights::ModelWeights(const ModelConfig& cfg) : config(cfg), position({2, cfg.d, cfg.d}) {
  config.validate();
  if (cfg.descriptor_dim != cfg.d) descriptor_projection.emplace(cfg.descriptor_dim, cfg.d);
  for (std::size_t i = 0; i < cfg.initial_blocks; ++i) initial.emplace_back(cfg.d);
  for (std::size_t i = 0; i < cfg.refine_blocks; ++i) refine.emplace_back(cfg.d);
}

ModelWeights ModelWeights::random(const ModelConfig& cfg, std::uint64_t seed) {
  ModelWeights w(cfg);
  std::mt19937_64 rng(seed);
  init_mlp(w.position, rng);
  if (w.descriptor_projection) init_linear(*w.descriptor_projection, rng);
  for (auto* stage : {&w.initial, &w.refine}) {
    for (ProcessingUnitWeights& u : *stage) {
      init_attention(u.pool, rng);
      init_mlp(u.fusion, rng);
      init_attention(u.self_filter, rng);
      init_attention(u.cross_filter, rng);
      for (Linear& l : u.inlier.blocks) init_linear(l, rng);
      init_linear(u.inlier.head, rng);
      init_attention(u.unpool, rng);
    }
  }
  for (Parameter* p : w.parameters()) p->zero_grad();
  return w;
}

namespace {

template <class F>
void visit_linear(Linear& l, F& f) {
  f(l.weight);
  f(l.bias);
}

template <class F>
void visit_mlp(Mlp& net, F& f) {
  for (Linear& l : net.layers) visit_linear(l, f);
}

template <class F>
void visit_unit(ProcessingUnitWeights& u, F& f) {
  u.pool.for_each_parameter(f);
  visit_mlp(u.fusion, f);
  u.self_filter.for_each_parameter(f);
  u.cross_filter.for_each_parameter(f);
  for (std::size_t b = 0; b < u.inlier.blocks.size(); ++b) {
    visit_linear(u.inlier.blocks[b], f);
    f(u.inlier.scales[b]);
    f(u.inlier.shifts[b]);
  }
  visit_linear(u.inlier.head, f);
  u.unpool.for_each_parameter(f);
}

template <class F>
void visit_model(ModelWeights& w, F& f) {
  visit_mlp(w.position, f);
  if (w.descriptor_projection) visit_linear(*w.descriptor_projection, f);
  for (ProcessingUnitWeights& u : w.initial) visit_unit(u, f);
  for (ProcessingUnitWeights& u : w.refine) visit_unit(u, f);
  f(w.dustbin);
}

}  // namespace

std::vector<Parameter*> ModelWeights::parameters() {
  std::vector<Parameter*> out;
  auto collect = [&out](Parameter& p) { out.push_back(&p); };
  visit_model(*this, collect);
  return out;
}

std::vector<const Parameter*> ModelWeights::parameters() const {
  auto mutable_params = const_cast<ModelWeights*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

std::size_t ModelWeights::parameter_count() const {
  std::size_t total = 0;
  for (const Parameter* p : parameters()) total += p->value.size();
  return total;
}

// ---------------------------------------------------------------------------

Var embed_positions(const KeypointSet& kp, ModelWeights& weights) {
  const std::size_t d = weights.config.d;
  Var desc = constant(kp.descriptors);
  if (weights.descriptor_projection) {
    if (kp.descriptor_dim() != weights.descriptor_projection->in())
      throw Error(ErrorKind::dimension, "embed: descriptor width " + std::to_string(kp.descriptor_dim()) +
                                            " does not match projection input " +
                                            std::to_string(weights.descriptor_projection->in()));
    desc = linear(desc, *weights.descriptor_projection);
  } else if (kp.descriptor_dim() != d) {
    throw Error(ErrorKind::dimension, "embed: descriptor width " + std::to_string(kp.descriptor_dim()) +
                                          " does not match model width " + std::to_string(d));
  }
  if (kp.coords.cols() != 2 || kp.coords.rows() != kp.descriptors.rows())
    throw Error(ErrorKind::dimension, "embed: coords " + kp.coords.shape_string() + " for descriptors " +
                                          kp.descriptors.shape_string());
  return add(desc, mlp(constant(kp.coords), weights.position));
}

PooledSeeds attentional_pooling(const Var& features_a, const Var& features_b, const SeedSet& seeds,
                                ProcessingUnitWeights& unit, const AttentionOptions& options) {
  if (seeds.empty()) throw Error(ErrorKind::contract, "pooling: empty seed set");
  const std::size_t d = features_a->value().cols();
  Var s1a = gather_rows(features_a, seeds.indices_a);
  Var s1b = gather_rows(features_b, seeds.indices_b);
  Var s2a = weighted_attention(s1a, features_a, nullptr, unit.pool, options);
  Var s2b = weighted_attention(s1b, features_b, nullptr, unit.pool, options);
  Var fused = mlp(concat_cols({s2a, s2b}), unit.fusion);
  return {slice_cols(fused, 0, d), slice_cols(fused, d, 2 * d)};
}

Var inlier_scores(const Var& seeds_a, const Var& seeds_b, InlierBranch& branch) {
  Var h = concat_cols({seeds_a, seeds_b});
  for (std::size_t b = 0; b < branch.blocks.size(); ++b) {
    h = context_norm(linear(h, branch.blocks[b]), kContextNormEps);
    h = relu(add_bias(scale_cols(h, param(branch.scales[b])), param(branch.shifts[b])));
  }
  return sigmoid(linear(h, branch.head));
}

FilteredSeeds seed_filtering(const Var& pooled_a, const Var& pooled_b, ProcessingUnitWeights& unit,
                             const AttentionOptions& options) {
  if (pooled_a->value().rows() != pooled_b->value().rows())
    throw Error(ErrorKind::dimension, "seed filtering: seed counts " + pooled_a->value().shape_string() +
                                          " vs " + pooled_b->value().shape_string());
  Var s4a = weighted_attention(pooled_a, pooled_a, nullptr, unit.self_filter, options);
  Var s4b = weighted_attention(pooled_b, pooled_b, nullptr, unit.self_filter, options);
  Var s5a = weighted_attention(s4a, s4b, nullptr, unit.cross_filter, options);
  Var s5b = weighted_attention(s4b, s4a, nullptr, unit.cross_filter, options);
  return {s5a, s5b, inlier_scores(s5a, s5b, unit.inlier)};
}

Var attentional_unpooling(const Var& features, const Var& filtered, const Var& gamma,
                          ProcessingUnitWeights& unit, const AttentionOptions& options) {
  return weighted_attention(features, filtered, gamma, unit.unpool, options);
}

UnitOutput processing_unit(const Var& features_a, const Var& features_b, const SeedSet& seeds,
                           ProcessingUnitWeights& unit, const AttentionOptions& options, bool gamma_weighting) {
  PooledSeeds pooled = attentional_pooling(features_a, features_b, seeds, unit, options);
  FilteredSeeds filtered = seed_filtering(pooled.a, pooled.b, unit, options);
  Var weights = gamma_weighting ? filtered.inlier_scores : nullptr;
  return {attentional_unpooling(features_a, filtered.a, weights, unit, options),
          attentional_unpooling(features_b, filtered.b, weights, unit, options), filtered.inlier_scores};
}

// ---------------------------------------------------------------------------

int resolve_seed_count(const ForwardConfig& config, std::size_t n, std::size_t m) {
  return config.seed_count > 0 ? config.seed_count : default_seed_count(std::min(n, m));
}

SeedSet initial_seeds(const KeypointSet& a, const KeypointSet& b, int k, NmsSide side) {
  PutativeMatches putative = nn_match(a, b);
  return select_seeds(std::move(putative.matches), k, nms_radius(a.coords), a.coords, b.coords, side);
}

namespace {

void check_seed_indices(const SeedSet& seeds, std::size_t n, std::size_t m) {
  if (seeds.indices_b.size() != seeds.size())
    throw Error(ErrorKind::contract, "seeds: index lists differ in length");
  for (std::size_t i = 0; i < seeds.size(); ++i)
    if (seeds.indices_a[i] >= n || seeds.indices_b[i] >= m)
      throw Error(ErrorKind::contract, "seeds: index out of range");
}

}  // namespace

ForwardResult forward(const KeypointSet& a, const KeypointSet& b, ModelWeights& weights,
                      const ForwardConfig& config) {
  if (a.size() == 0 || b.size() == 0) throw Error(ErrorKind::unseedable, "forward: empty keypoint set");
  const AttentionOptions options = weights.config.attention();
  const int k = resolve_seed_count(config, a.size(), b.size());

  ForwardResult result;
  result.seeds_initial = config.initial_seeds ? *config.initial_seeds : initial_seeds(a, b, k, config.nms_side);
  if (result.seeds_initial.empty())
    throw Error(ErrorKind::unseedable, "forward: seeding produced no seed matches");
  check_seed_indices(result.seeds_initial, a.size(), b.size());

  Var fa = embed_positions(a, weights);
  Var fb = embed_positions(b, weights);
  for (ProcessingUnitWeights& unit : weights.initial) {
    UnitOutput out = processing_unit(fa, fb, result.seeds_initial, unit, options, config.gamma_weighting);
    fa = out.a;
    fb = out.b;
    result.gammas.push_back(out.gamma);
  }

  Var z = param(weights.dustbin);
  result.reseed_assignment = sinkhorn(augment_dustbin(correlation(fa, fb), z), config.reseed_iterations);
  result.seeds_refined = reseed(result.reseed_assignment->value(), k, a.coords, b.coords, config.nms_side);
  if (result.seeds_refined.empty()) {
    result.seeds_refined = result.seeds_initial;
    result.reseed_fallback = true;
  }

  if (config.block_stage_gradient) {
    fa = detach(fa);
    fb = detach(fb);
  }
  for (ProcessingUnitWeights& unit : weights.refine) {
    UnitOutput out = processing_unit(fa, fb, result.seeds_refined, unit, options, config.gamma_weighting);
    fa = out.a;
    fb = out.b;
    result.gammas.push_back(out.gamma);
  }
  result.final_assignment = sinkhorn(augment_dustbin(correlation(fa, fb), z), config.final_iterations);
  result.features_a = fa;
  result.features_b = fb;
  return result;
}

// ---------------------------------------------------------------------------

void write_model(std::ostream& out, const ModelWeights& weights) {
  const ModelConfig& c = weights.config;
  binary::write_magic(out, "SGMW");
  binary::write_u32(out, kModelFormatVersion);
  binary::write_u32(out, static_cast<std::uint32_t>(c.d));
  binary::write_u32(out, static_cast<std::uint32_t>(c.heads));
  binary::write_u32(out, static_cast<std::uint32_t>(c.initial_blocks));
  binary::write_u32(out, static_cast<std::uint32_t>(c.refine_blocks));
  binary::write_u32(out, static_cast<std::uint32_t>(c.descriptor_dim));
  binary::write_u32(out, c.scaled_attention ? 1u : 0u);
  const auto params = weights.parameters();
  binary::write_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) binary::write_tensor(out, p->value);
}

ModelWeights read_model(std::istream& in) {
  binary::expect_magic(in, "SGMW");
  const std::uint32_t version = binary::read_u32(in, "model version");
  if (version != kModelFormatVersion)
    throw Error(ErrorKind::format, "model: unsupported format version " + std::to_string(version));
  ModelConfig c;
  c.d = binary::read_u32(in, "model header");
  c.heads = binary::read_u32(in, "model header");
  c.initial_blocks = binary::read_u32(in, "model header");
  c.refine_blocks = binary::read_u32(in, "model header");
  c.descriptor_dim = binary::read_u32(in, "model header");
  const std::uint32_t flags = binary::read_u32(in, "model header");
  if (flags > 1u) throw Error(ErrorKind::format, "model: unknown flag bits");
  c.scaled_attention = (flags & 1u) != 0;
  if (c.d == 0 || c.heads == 0 || c.d % c.heads != 0 || c.descriptor_dim == 0 || c.d > (1u << 16) ||
      c.descriptor_dim > (1u << 16) || c.initial_blocks > 1024 || c.refine_blocks > 1024)
    throw Error(ErrorKind::format, "model: implausible header");
  ModelWeights w(c);
  const auto params = w.parameters();
  const std::uint32_t count = binary::read_u32(in, "tensor count");
  if (count != params.size())
    throw Error(ErrorKind::format, "model: tensor count " + std::to_string(count) + ", expected " +
                                       std::to_string(params.size()));
  for (Parameter* p : params) {
    binary::read_tensor_into(in, p->value, "model tensor");
    p->zero_grad();
  }
  return w;
}

void save_model(const std::string& path, const ModelWeights& weights) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot open " + path + " for writing");
  write_model(out, weights);
  if (!out) throw Error(ErrorKind::io, "write failed: " + path);
}

ModelWeights load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path);
  ModelWeights w = read_model(in);
  if (!binary::at_end(in)) {
    // Checkpoints append optimizer state after the model section.
    char tag[4] = {};
    in.read(tag, 4);
    if (!in || std::string_view(tag, 4) != "SGMO")
      throw Error(ErrorKind::format, "model: trailing bytes after last tensor in " + path);
  }
  return w;
}

std::string model_hash(const ModelWeights& weights) {
  std::ostringstream os(std::ios::binary);
  write_model(os, weights);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(binary::fnv1a(os.str())));
  return buf;
}

}  // namespace sgm
