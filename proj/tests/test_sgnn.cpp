#include "sgm/sgnn.h"
#include "sgm/training.h"
#include "support.h"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

using namespace sgm;
using namespace sgm::test;

namespace {

ModelConfig toy_config(std::size_t d = 8, std::size_t initial = 2, std::size_t refine = 1, std::size_t heads = 2) {
  ModelConfig c;
  c.d = d;
  c.heads = heads;
  c.initial_blocks = initial;
  c.refine_blocks = refine;
  c.descriptor_dim = d;
  return c;
}

void zero_linear(Linear& l) {
  for (double& v : l.weight.value.data()) v = 0.0;
  for (double& v : l.bias.value.data()) v = 0.0;
}

void randomize_branch_affine(InlierBranch& branch, std::mt19937_64& rng) {
  for (auto& p : branch.scales) p.value = random_matrix(1, p.value.cols(), rng, 0.5, 1.5);
  for (auto& p : branch.shifts) p.value = random_matrix(1, p.value.cols(), rng, -0.2, 0.2);
  branch.head.bias.value = random_matrix(1, 1, rng);
}

SeedSet seeds_of(std::vector<std::size_t> a, std::vector<std::size_t> b) {
  SeedSet s{std::move(a), std::move(b), {}};
  s.scores.assign(s.indices_a.size(), 1.0);
  return s;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("sgm_test_" + std::to_string(::getpid()) + "_" + name)).string();
}

}  // namespace

TEST_CASE("embedding") {
  std::mt19937_64 rng(1);
  ModelWeights w = ModelWeights::random(toy_config(), 3);
  const KeypointSet kp = random_keypoints(5, 8, rng);

  const Matrix full = embed_positions(kp, w)->value();
  Grid want = naive_mlp(to_grid(kp.coords), w.position);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j) want[i][j] += kp.descriptors(i, j);
  CHECK(max_diff(full, want) < 1e-12);

  KeypointSet blank{kp.coords, Matrix(5, 8)};
  CHECK(max_diff(embed_positions(blank, w)->value(), naive_mlp(to_grid(kp.coords), w.position)) < 1e-12);

  for (Linear& l : w.position.layers) zero_linear(l);
  CHECK(embed_positions(kp, w)->value() == kp.descriptors);

  KeypointSet wide{kp.coords, Matrix(5, 6)};
  CHECK_THROWS_AS(embed_positions(wide, w), Error);

  ModelConfig projected = toy_config();
  projected.descriptor_dim = 6;
  ModelWeights pw = ModelWeights::random(projected, 4);
  CHECK(embed_positions(wide, pw)->value().cols() == 8);
}

TEST_CASE("weighted attention") {
  std::mt19937_64 rng(2);
  AttentionWeights att(8);
  init_attention(att, rng);
  const Matrix x = random_matrix(2, 8, rng), y = random_matrix(3, 8, rng);
  const Matrix w = random_matrix(3, 1, rng, 0.0, 1.0);
  std::vector<Real> wv{w(0, 0), w(1, 0), w(2, 0)};

  for (std::size_t heads : {1u, 2u, 4u}) {
    const AttentionOptions opt{heads, true};
    const Matrix got = weighted_attention(constant(x), constant(y), constant(w), att, opt)->value();
    CHECK(max_diff(got, naive_attention(to_grid(x), to_grid(y), &wv, att, heads, true)) < 1e-10);
  }
  const AttentionOptions unscaled{1, false};
  CHECK(max_diff(weighted_attention(constant(x), constant(y), constant(w), att, unscaled)->value(),
                 naive_attention(to_grid(x), to_grid(y), &wv, att, 1, false)) < 1e-10);

  const AttentionOptions opt{2, true};
  const Matrix ones = weighted_attention(constant(x), constant(y), constant(Matrix(3, 1, 1.0)), att, opt)->value();
  CHECK(ones == weighted_attention(constant(x), constant(y), nullptr, att, opt)->value());

  const Matrix zero = weighted_attention(constant(x), constant(y), constant(Matrix(3, 1, 0.0)), att, opt)->value();
  CHECK(max_diff(zero, [&] {
          Grid g = naive_mlp(hconcat(to_grid(x), Grid(2, std::vector<Real>(8, 0.0L))), att.update);
          for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 8; ++j) g[i][j] += x(i, j);
          return g;
        }()) < 1e-12);
  CHECK(max_abs_diff(attention_message(constant(x), constant(y), constant(Matrix(3, 1, 0.0)), att, opt)->value(),
                     Matrix(2, 8)) == 0.0);

  Matrix negative = w;
  negative(1, 0) = -0.1;
  CHECK_THROWS_AS(weighted_attention(constant(x), constant(y), constant(negative), att, opt), Error);
  CHECK_THROWS_AS(weighted_attention(constant(x), constant(y), constant(Matrix(2, 1, 1.0)), att, opt), Error);
  CHECK_THROWS_AS(weighted_attention(constant(x), constant(random_matrix(3, 6, rng)), nullptr, att, opt), Error);
  CHECK_THROWS_AS(weighted_attention(constant(x), constant(y), nullptr, att, AttentionOptions{3, true}), Error);
}

TEST_CASE("attentional pooling") {
  std::mt19937_64 rng(3);
  ProcessingUnitWeights u(8);
  std::mt19937_64 init(4);
  init_attention(u.pool, init);
  init_mlp(u.fusion, init);
  const Matrix fa = random_matrix(7, 8, rng), fb = random_matrix(6, 8, rng);
  const SeedSet seeds = seeds_of({0, 3, 5, 6}, {2, 1, 5, 0});
  const AttentionOptions opt{2, true};
  const PooledSeeds got = attentional_pooling(constant(fa), constant(fb), seeds, u, opt);
  const auto [wa, wb] = oracle_pooling(to_grid(fa), to_grid(fb), seeds, u, 2);
  CHECK(max_diff(got.a->value(), wa) < 1e-10);
  CHECK(max_diff(got.b->value(), wb) < 1e-10);

  // Single keypoint: attention over one element returns that element's value row.
  const Matrix one_a = random_matrix(1, 8, rng), one_b = random_matrix(1, 8, rng);
  const PooledSeeds single = attentional_pooling(constant(one_a), constant(one_b), seeds_of({0}, {0}), u, opt);
  const auto [sa, sb] = oracle_pooling(to_grid(one_a), to_grid(one_b), seeds_of({0}, {0}), u, 2);
  CHECK(max_diff(single.a->value(), sa) < 1e-12);
  CHECK(max_diff(single.b->value(), sb) < 1e-12);

  for (Linear& l : u.pool.update.layers) zero_linear(l);
  const Matrix sq = random_matrix(4, 8, rng);
  const PooledSeeds identity = attentional_pooling(constant(sq), constant(sq), seeds_of({0, 1, 2, 3}, {0, 1, 2, 3}), u, opt);
  const Grid raw = naive_mlp(hconcat(to_grid(sq), to_grid(sq)), u.fusion);
  Grid left(4);
  for (std::size_t i = 0; i < 4; ++i) left[i].assign(raw[i].begin(), raw[i].begin() + 8);
  CHECK(max_diff(identity.a->value(), left) < 1e-12);

  CHECK_THROWS_AS(attentional_pooling(constant(fa), constant(fb), SeedSet{}, u, opt), Error);
}

TEST_CASE("seed filtering") {
  std::mt19937_64 rng(5);
  ProcessingUnitWeights u(8);
  std::mt19937_64 init(6);
  init_attention(u.self_filter, init);
  init_attention(u.cross_filter, init);
  for (Linear& l : u.inlier.blocks) init_linear(l, init);
  init_linear(u.inlier.head, init);
  randomize_branch_affine(u.inlier, init);
  const AttentionOptions opt{2, true};

  const Matrix a = random_matrix(5, 8, rng), b = random_matrix(5, 8, rng);
  const FilteredSeeds got = seed_filtering(constant(a), constant(b), u, opt);
  const Grid s4a = naive_attention(to_grid(a), to_grid(a), nullptr, u.self_filter, 2, true);
  const Grid s4b = naive_attention(to_grid(b), to_grid(b), nullptr, u.self_filter, 2, true);
  const Grid s5a = naive_attention(s4a, s4b, nullptr, u.cross_filter, 2, true);
  const Grid s5b = naive_attention(s4b, s4a, nullptr, u.cross_filter, 2, true);
  CHECK(max_diff(got.a->value(), s5a) < 1e-10);
  CHECK(max_diff(got.b->value(), s5b) < 1e-10);
  const std::vector<Real> gamma = oracle_inlier(s5a, s5b, u.inlier);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(std::abs(got.inlier_scores->value()(i, 0) - static_cast<double>(gamma[i])) < 1e-9);
    CHECK(got.inlier_scores->value()(i, 0) >= 0.0);
    CHECK(got.inlier_scores->value()(i, 0) <= 1.0);
  }

  const FilteredSeeds same = seed_filtering(constant(a), constant(a), u, opt);
  CHECK(same.a->value() == same.b->value());

  // One seed: context normalization maps every channel to zero.
  const FilteredSeeds single = seed_filtering(constant(random_matrix(1, 8, rng)), constant(random_matrix(1, 8, rng)), u, opt);
  Grid h(1, std::vector<Real>(8, 0.0L));
  for (std::size_t blk = 0; blk < u.inlier.blocks.size(); ++blk)
    for (std::size_t j = 0; j < 8; ++j) h[0][j] = std::max(0.0L, static_cast<Real>(u.inlier.shifts[blk].value(0, j)));
  const Real logit = naive_linear(h, u.inlier.head)[0][0];
  CHECK(std::abs(single.inlier_scores->value()(0, 0) - static_cast<double>(1.0L / (1.0L + std::exp(-logit)))) < 1e-12);

  CHECK_THROWS_AS(seed_filtering(constant(a), constant(random_matrix(4, 8, rng)), u, opt), Error);
}

TEST_CASE("attentional unpooling") {
  std::mt19937_64 rng(7);
  ProcessingUnitWeights u(8);
  std::mt19937_64 init(8);
  init_attention(u.unpool, init);
  const Matrix f = random_matrix(6, 8, rng), s5 = random_matrix(3, 8, rng);
  const Matrix gamma = random_matrix(3, 1, rng, 0, 1);
  std::vector<Real> gv{gamma(0, 0), gamma(1, 0), gamma(2, 0)};
  const AttentionOptions multi{2, true};
  CHECK(max_diff(attentional_unpooling(constant(f), constant(s5), constant(gamma), u, multi)->value(),
                 naive_attention(to_grid(f), to_grid(s5), &gv, u.unpool, 2, true)) < 1e-10);

  Grid blocked = naive_mlp(hconcat(to_grid(f), Grid(6, std::vector<Real>(8, 0.0L))), u.unpool.update);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 8; ++j) blocked[i][j] += f(i, j);
  CHECK(max_diff(attentional_unpooling(constant(f), constant(s5), constant(Matrix(3, 1)), u, multi)->value(), blocked) <
        1e-12);

  const AttentionOptions single{1, true};
  Matrix one(3, 1);
  one(1, 0) = 0.6;
  const Matrix delta = attention_message(constant(f), constant(s5), constant(one), u.unpool, single)->value();
  const Grid v = naive_linear(to_grid(s5), u.unpool.value);
  for (std::size_t i = 0; i < 6; ++i) {
    const double c = delta(i, 0) / static_cast<double>(v[1][0]);
    CHECK(c > 0.0);
    CHECK(c <= 0.6 + 1e-12);
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(delta(i, j) - c * static_cast<double>(v[1][j])) < 1e-12);
  }
  CHECK_THROWS_AS(attentional_unpooling(constant(f), constant(s5), constant(Matrix(2, 1)), u, multi), Error);
}

TEST_CASE("forward shapes and diagnostics") {
  SynthConfig sc;
  sc.seed = 9;
  const SynthPair pair = synth_pair(sc);
  ModelConfig c = toy_config(32, 6, 3, 4);
  ModelWeights w = ModelWeights::random(c, 10);
  const ForwardResult r = forward(pair.a, pair.b, w);
  CHECK(r.final_assignment->value().rows() == 101);
  CHECK(r.final_assignment->value().cols() == 101);
  CHECK(r.reseed_assignment->value().rows() == 101);
  CHECK(r.gammas.size() == 9);
  CHECK(r.seeds_initial.size() <= 8);
  CHECK_FALSE(r.seeds_initial.empty());
  for (const Var& g : r.gammas)
    for (double v : g->value().data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
}

TEST_CASE("forward rejects unseedable and malformed input") {
  std::mt19937_64 rng(11);
  ModelWeights w = ModelWeights::random(toy_config(), 12);
  const KeypointSet one = random_keypoints(1, 8, rng), many = random_keypoints(5, 8, rng);
  try {
    forward(one, many, w);
    FAIL("expected an unseedable error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::unseedable);
  }
  ForwardConfig bad;
  bad.initial_seeds = seeds_of({7}, {0});
  CHECK_THROWS_AS(forward(many, many, w, bad), Error);
}

TEST_CASE("forward is permutation equivariant") {
  SynthConfig sc;
  sc.n_points = 60;
  sc.seed = 13;
  const SynthPair pair = synth_pair(sc);
  ModelWeights w = ModelWeights::random(toy_config(32, 2, 1, 4), 14);
  std::mt19937_64 rng(15);
  std::vector<std::size_t> pa(60), pb(60);
  std::iota(pa.begin(), pa.end(), 0);
  std::iota(pb.begin(), pb.end(), 0);
  std::shuffle(pa.begin(), pa.end(), rng);
  std::shuffle(pb.begin(), pb.end(), rng);

  const Matrix base = forward(pair.a, pair.b, w).final_assignment->value();
  const Matrix perm = forward(pair.a.permuted(pa), pair.b.permuted(pb), w).final_assignment->value();
  double worst = 0.0;
  for (std::size_t i = 0; i < 60; ++i)
    for (std::size_t j = 0; j < 60; ++j) worst = std::max(worst, std::abs(perm(i, j) - base(pa[i], pb[j])));
  CHECK(worst < 1e-9);

  MatchList m1 = extract_matches(base), m2 = extract_matches(perm);
  for (Match& m : m2) {
    m.a = pa[m.a];
    m.b = pb[m.b];
  }
  auto key = [](const Match& x, const Match& y) { return std::tie(x.a, x.b) < std::tie(y.a, y.b); };
  std::sort(m1.begin(), m1.end(), key);
  std::sort(m2.begin(), m2.end(), key);
  REQUIRE(m1.size() == m2.size());
  for (std::size_t i = 0; i < m1.size(); ++i) {
    CHECK(m1[i].a == m2[i].a);
    CHECK(m1[i].b == m2[i].b);
  }
}

TEST_CASE("zero update MLPs make the network an identity on embedded features") {
  SynthConfig sc;
  sc.n_points = 40;
  sc.seed = 16;
  const SynthPair pair = synth_pair(sc);
  ModelWeights w = ModelWeights::random(toy_config(32, 2, 1, 4), 17);
  for (auto* stage : {&w.initial, &w.refine})
    for (ProcessingUnitWeights& u : *stage)
      for (AttentionWeights* att : {&u.pool, &u.self_filter, &u.cross_filter, &u.unpool}) zero_linear(att->update.layers.back());
  const ForwardResult r = forward(pair.a, pair.b, w);
  CHECK(r.features_a->value() == embed_positions(pair.a, w)->value());
  CHECK(r.features_b->value() == embed_positions(pair.b, w)->value());
}

TEST_CASE("attention score matrices stay seed-sized") {
  std::mt19937_64 rng(18);
  ProcessingUnitWeights u = ModelWeights::random(toy_config(), 19).initial[0];
  const std::size_t n = 10, m = 12, k = 3;
  ScoreShapeRecorder recorder;
  processing_unit(constant(random_matrix(n, 8, rng)), constant(random_matrix(m, 8, rng)), seeds_of({0, 4, 9}, {1, 2, 11}), u,
                  AttentionOptions{2, true});
  const std::vector<std::pair<std::size_t, std::size_t>> want{{k, n}, {k, m}, {k, k}, {k, k}, {k, k}, {k, k}, {n, k}, {m, k}};
  CHECK(recorder.shapes() == want);
}

TEST_CASE("parameter count closed form") {
  for (std::size_t d : {8u, 16u, 32u}) {
    for (auto [initial, refine] : {std::pair<std::size_t, std::size_t>{2, 1}, {6, 3}, {0, 0}}) {
      const ModelWeights w(toy_config(d, initial, refine, 4));
      const std::size_t blocks = initial + refine;
      CHECK(w.parameter_count() == d * d + 4 * d + 1 + blocks * (48 * d * d + 38 * d + 1));
    }
  }
  CHECK(ModelWeights(toy_config(32, 2, 1, 4)).parameter_count() == 152260);
}

TEST_CASE("model files round trip bit-exactly") {
  const ModelWeights w = ModelWeights::random(toy_config(), 20);
  std::ostringstream first(std::ios::binary);
  write_model(first, w);
  std::istringstream in(first.str(), std::ios::binary);
  const ModelWeights back = read_model(in);
  std::ostringstream second(std::ios::binary);
  write_model(second, back);
  CHECK(first.str() == second.str());
  CHECK(model_hash(w) == model_hash(back));
  CHECK(model_hash(w) != model_hash(ModelWeights::random(toy_config(), 21)));

  const std::string path = temp_path("model.sgmw");
  save_model(path, w);
  CHECK(model_hash(load_model(path)) == model_hash(w));

  auto expect_format_error = [&](const std::string& bytes) {
    std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
    try {
      load_model(path);
      FAIL("expected a format error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::format);
    }
  };
  const std::string bytes = first.str();
  expect_format_error(bytes.substr(0, bytes.size() - 3));
  expect_format_error(bytes.substr(0, 10));
  expect_format_error(bytes + "junk");
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  expect_format_error(bad_magic);
  std::filesystem::remove(path);
}

TEST_CASE("total loss gradients match finite differences end to end") {
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    std::mt19937_64 rng(22 + seed);
    const KeypointSet a = random_keypoints(6, 8, rng), b = random_keypoints(6, 8, rng);
    ModelWeights w = ModelWeights::random(toy_config(8, 2, 1, 2), 30 + seed);
    ForwardConfig fc;
    fc.seed_count = 3;
    fc.initial_seeds = seeds_of({0, 2, 4}, {1, 2, 5});
    const GroundTruth gt{{{0, 1}, {2, 2}, {3, 0}}, {1, 5}, {3}};
    auto loss = [&] {
      ForwardResult r = forward(a, b, w, fc);
      std::vector<std::vector<std::uint8_t>> labels;
      for (std::size_t u = 0; u < r.gammas.size(); ++u)
        labels.push_back(label_seeds(u < w.initial.size() ? r.seeds_initial : r.seeds_refined, gt));
      return total_loss(r.reseed_assignment, r.final_assignment, r.gammas, labels, gt, 2.0).total;
    };
    const GradCheck r = check_gradients(w.parameters(), loss);
    INFO(r.worst);
    CHECK(r.checked == w.parameter_count());
    CHECK(r.max_relative_error < 1e-4);
  }
}

TEST_CASE("stage gradient blocking stops gradients at the reseeding boundary") {
  std::mt19937_64 rng(40);
  const KeypointSet a = random_keypoints(6, 8, rng), b = random_keypoints(6, 8, rng);
  ModelWeights w = ModelWeights::random(toy_config(8, 2, 1, 2), 41);
  ForwardConfig fc;
  fc.initial_seeds = seeds_of({0, 2, 4}, {1, 2, 5});
  fc.block_stage_gradient = true;
  for (Parameter* p : w.parameters()) p->zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    const ForwardResult r = forward(a, b, w, fc);
    tape.backward(weighted_sum(r.final_assignment, 42));
  }
  auto grad_norm = [](auto&& visit) {
    double total = 0.0;
    visit([&total](Parameter& p) {
      for (double g : p.grad.data()) total += g * g;
    });
    return total;
  };
  const double initial = grad_norm([&](auto f) {
    for (ProcessingUnitWeights& u : w.initial) u.pool.for_each_parameter(f), u.unpool.for_each_parameter(f);
    for (Linear& l : w.position.layers) f(l.weight), f(l.bias);
  });
  const double refine = grad_norm([&](auto f) {
    for (ProcessingUnitWeights& u : w.refine) u.unpool.for_each_parameter(f);
  });
  CHECK(initial == 0.0);
  CHECK(refine > 0.0);
}
