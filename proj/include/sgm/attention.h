#pragma once

#include "sgm/tensor.h"

#include <cstddef>
#include <random>
#include <utility>
#include <vector>

namespace sgm {

/// Projections and update MLP of one weighted attentional aggregation.
/// Q, K, V are d x d; head h uses columns [h*d/H, (h+1)*d/H).
struct AttentionWeights {
  Linear query;
  Linear key;
  Linear value;
  Mlp update;  // 2d -> 2d -> d

  AttentionWeights() = default;
  explicit AttentionWeights(std::size_t d);

  template <class F>
  void for_each_parameter(F&& f) {
    for (Linear* l : {&query, &key, &value}) {
      f(l->weight);
      f(l->bias);
    }
    for (Linear& l : update.layers) {
      f(l.weight);
      f(l.bias);
    }
  }
};

struct AttentionOptions {
  std::size_t heads = 4;
  bool scaled = true;  // divide scores by sqrt(d / heads)
};

/// Delta = softmax(Q K^T) Diag(w) V, computed per head and concatenated.
/// `weights` is rows(Y) x 1 with non-negative entries, or null for all ones.
Var attention_message(const Var& x, const Var& y, const Var& weights, AttentionWeights& att,
                      const AttentionOptions& options);

/// X + MLP(X || Delta).
Var weighted_attention(const Var& x, const Var& y, const Var& weights, AttentionWeights& att,
                       const AttentionOptions& options);

/// Records the shape of every attention score matrix computed on this
/// thread while alive (one entry per call, not per head).
class ScoreShapeRecorder {
 public:
  ScoreShapeRecorder();
  ~ScoreShapeRecorder();
  ScoreShapeRecorder(const ScoreShapeRecorder&) = delete;
  ScoreShapeRecorder& operator=(const ScoreShapeRecorder&) = delete;

  const std::vector<std::pair<std::size_t, std::size_t>>& shapes() const noexcept { return shapes_; }

 private:
  friend void record_score_shape(std::size_t, std::size_t);
  std::vector<std::pair<std::size_t, std::size_t>> shapes_;
  ScoreShapeRecorder* previous_;
};

void record_score_shape(std::size_t rows, std::size_t cols);

/// Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero.
void init_linear(Linear& layer, std::mt19937_64& rng);
void init_mlp(Mlp& net, std::mt19937_64& rng);
void init_attention(AttentionWeights& att, std::mt19937_64& rng);

}  // namespace sgm
