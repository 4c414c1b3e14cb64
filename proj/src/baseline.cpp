#include "sgm/baseline.h"

#include <random>

namespace sgm {

DenseFeatures dense_block(const Var& features_a, const Var& features_b, DenseLayerWeights& weights,
                          const AttentionOptions& options) {
  if (features_a->value().cols() != features_b->value().cols())
    throw Error(ErrorKind::dimension, "dense_block: widths " + features_a->value().shape_string() + " and " +
                                          features_b->value().shape_string());
  Var a1 = weighted_attention(features_a, features_a, nullptr, weights.self_attention, options);
  Var b1 = weighted_attention(features_b, features_b, nullptr, weights.self_attention, options);
  Var a2 = weighted_attention(a1, b1, nullptr, weights.cross_attention, options);
  Var b2 = weighted_attention(b1, a1, nullptr, weights.cross_attention, options);
  return {a2, b2};
}

std::vector<DenseLayerWeights> random_dense_layers(std::size_t d, std::size_t blocks, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<DenseLayerWeights> layers;
  for (std::size_t i = 0; i < blocks; ++i) {
    DenseLayerWeights w(d);
    init_attention(w.self_attention, rng);
    init_attention(w.cross_attention, rng);
    layers.push_back(std::move(w));
  }
  return layers;
}

}  // namespace sgm
