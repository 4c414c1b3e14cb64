#include "sgm/attention.h"

#include <cmath>

namespace sgm {

namespace {
thread_local ScoreShapeRecorder* t_recorder = nullptr;
}

ScoreShapeRecorder::ScoreShapeRecorder() : previous_(t_recorder) { t_recorder = this; }
ScoreShapeRecorder::~ScoreShapeRecorder() { t_recorder = previous_; }

void record_score_shape(std::size_t rows, std::size_t cols) {
  if (t_recorder != nullptr) t_recorder->shapes_.emplace_back(rows, cols);
}

AttentionWeights::AttentionWeights(std::size_t d)
    : query(d, d), key(d, d), value(d, d), update({2 * d, 2 * d, d}) {}

Var attention_message(const Var& x, const Var& y, const Var& weights, AttentionWeights& att,
                      const AttentionOptions& options) {
  const std::size_t d = x->value().cols();
  if (y->value().cols() != d)
    throw Error(ErrorKind::dimension,
                "attention: X " + x->value().shape_string() + " and Y " + y->value().shape_string());
  if (options.heads == 0 || d % options.heads != 0)
    throw Error(ErrorKind::contract, "attention: head count must divide feature width");
  if (weights) {
    const Matrix& w = weights->value();
    if (w.rows() != y->value().rows() || w.cols() != 1)
      throw Error(ErrorKind::dimension, "attention: weight vector " + w.shape_string() + " for Y " +
                                            y->value().shape_string());
    for (double v : w.data())
      if (v < 0.0) throw Error(ErrorKind::contract, "attention: negative aggregation weight");
  }
  record_score_shape(x->value().rows(), y->value().rows());

  const std::size_t head_dim = d / options.heads;
  Var q = linear(x, att.query);
  if (options.scaled) q = scale(q, 1.0 / std::sqrt(static_cast<double>(head_dim)));
  Var k = linear(y, att.key);
  Var v = linear(y, att.value);
  if (weights) v = scale_rows(v, weights);

  if (options.heads == 1) return matmul(row_softmax(matmul_nt(q, k)), v);

  std::vector<Var> heads;
  heads.reserve(options.heads);
  for (std::size_t h = 0; h < options.heads; ++h) {
    const std::size_t lo = h * head_dim;
    const std::size_t hi = lo + head_dim;
    Var scores = matmul_nt(slice_cols(q, lo, hi), slice_cols(k, lo, hi));
    heads.push_back(matmul(row_softmax(scores), slice_cols(v, lo, hi)));
  }
  return concat_cols(heads);
}

Var weighted_attention(const Var& x, const Var& y, const Var& weights, AttentionWeights& att,
                       const AttentionOptions& options) {
  Var delta = attention_message(x, y, weights, att, options);
  return add(x, mlp(concat_cols({x, delta}), att.update));
}

void init_linear(Linear& layer, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in()));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : layer.weight.value.data()) v = dist(rng);
  for (double& v : layer.bias.value.data()) v = 0.0;
  layer.weight.zero_grad();
  layer.bias.zero_grad();
}

void init_mlp(Mlp& net, std::mt19937_64& rng) {
  for (Linear& l : net.layers) init_linear(l, rng);
}

void init_attention(AttentionWeights& att, std::mt19937_64& rng) {
  init_linear(att.query, rng);
  init_linear(att.key, rng);
  init_linear(att.value, rng);
  init_mlp(att.update, rng);
}

}  // namespace sgm
