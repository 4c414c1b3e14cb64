#pragma once

#include "sgm/attention.h"

#include <cstdint>
#include <vector>

namespace sgm {

/// One densely connected message-passing layer: self attention inside each
/// image, then cross attention between images.
struct DenseLayerWeights {
  AttentionWeights self_attention;
  AttentionWeights cross_attention;

  DenseLayerWeights() = default;
  explicit DenseLayerWeights(std::size_t d) : self_attention(d), cross_attention(d) {}
};

struct DenseFeatures {
  Var a;
  Var b;
};

DenseFeatures dense_block(const Var& features_a, const Var& features_b, DenseLayerWeights& weights,
                          const AttentionOptions& options);

std::vector<DenseLayerWeights> random_dense_layers(std::size_t d, std::size_t blocks, std::uint64_t seed);

}  // namespace sgm
