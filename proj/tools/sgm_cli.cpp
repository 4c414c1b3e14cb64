// sgm: generate synthetic pairs, train, match, benchmark, inspect models.

#include "sgm/bench.h"
#include "sgm/io.h"
#include "sgm/sgnn.h"
#include "sgm/training.h"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace sgm;
using nlohmann::json;

namespace {

// Command-line values win over the config file, which wins over defaults.
struct RunOverrides {
  int seed_count = 0;
  double threshold = 0.0;
  int reseed_iterations = 0;
  int final_iterations = 0;
  std::size_t d = 0;
  std::size_t heads = 0;
  std::size_t initial_blocks = 0;
  std::size_t refine_blocks = 0;
  std::uint64_t seed = 0;
  std::string model_path;
  std::string output_path;
  std::string config_path;
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> setters;

  void attach(CLI::App* app, bool with_paths) {
    auto add = [&](const char* flag, auto& field, auto member, const char* help) {
      CLI::Option* opt = app->add_option(flag, field, help);
      setters.emplace_back(opt, [&field, member](RunConfig& c) { c.*member = field; });
    };
    app->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
    add("--seed-count", seed_count, &RunConfig::seed_count, "seed matches per stage (0: scale with n)");
    add("--threshold", threshold, &RunConfig::threshold, "match confidence threshold");
    add("--reseed-iterations", reseed_iterations, &RunConfig::reseed_iterations, "Sinkhorn iterations before reseeding");
    add("--final-iterations", final_iterations, &RunConfig::final_iterations, "Sinkhorn iterations for the output");
    add("--d", d, &RunConfig::d, "feature width");
    add("--heads", heads, &RunConfig::heads, "attention heads");
    add("--initial-blocks", initial_blocks, &RunConfig::initial_blocks, "processing units before reseeding");
    add("--refine-blocks", refine_blocks, &RunConfig::refine_blocks, "processing units after reseeding");
    add("--seed", seed, &RunConfig::seed, "RNG seed");
    if (with_paths) {
      add("--model", model_path, &RunConfig::model_path, "model or checkpoint file");
      add("--out", output_path, &RunConfig::output_path, "output file");
    }
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path, cfg);
    for (const auto& [opt, set] : setters)
      if (opt->count() > 0) set(cfg);
    cfg.validate();
    return cfg;
  }
};

TransformFamily parse_transform(const std::string& s) {
  if (s == "homography") return TransformFamily::homography;
  if (s == "affine") return TransformFamily::affine;
  throw Error(ErrorKind::config, "unknown transform \"" + s + "\" (homography | affine)");
}

void add_synth_options(CLI::App* app, SynthConfig& sc, std::string& transform) {
  app->add_option("--points", sc.n_points, "keypoints per image");
  app->add_option("--descriptor-dim", sc.descriptor_dim, "descriptor width");
  app->add_option("--overlap", sc.overlap, "share of points visible in both images");
  app->add_option("--descriptor-noise", sc.descriptor_noise, "descriptor noise sigma");
  app->add_option("--coord-noise", sc.coord_noise, "coordinate jitter sigma");
  app->add_option("--outliers", sc.outlier_fraction, "share of shared points re-detected elsewhere");
  app->add_option("--transform", transform, "homography | affine");
}

json synth_to_json(const SynthConfig& sc) {
  return {{"points", sc.n_points},
          {"descriptor_dim", sc.descriptor_dim},
          {"overlap", sc.overlap},
          {"descriptor_noise", sc.descriptor_noise},
          {"coord_noise", sc.coord_noise},
          {"outliers", sc.outlier_fraction},
          {"transform", sc.transform == TransformFamily::homography ? "homography" : "affine"},
          {"seed", sc.seed}};
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-")
    std::cout << text;
  else
    write_text_file(path, text);
}

// ---------------------------------------------------------------------------

int cmd_gen(const SynthConfig& base, const std::string& transform, const std::string& out_a,
            const std::string& out_b, const std::string& out_gt) {
  SynthConfig sc = base;
  sc.transform = parse_transform(transform);
  SynthPair pair = synth_pair(sc);
  pair.a = quantize_f32(pair.a);
  pair.b = quantize_f32(pair.b);
  save_keypoints(out_a, pair.a);
  save_keypoints(out_b, pair.b);
  json gt = ground_truth_to_json(pair.gt);
  gt["config"] = synth_to_json(sc);
  json h = json::array();
  for (double v : pair.transform.data()) h.push_back(v);
  gt["transform"] = h;
  write_text_file(out_gt, gt.dump() + "\n");
  std::cerr << "gen: " << pair.a.size() << " points, " << pair.gt.matches.size() << " ground-truth matches\n";
  return 0;
}

int cmd_init(const RunConfig& cfg, std::size_t descriptor_dim, bool unscaled) {
  ModelConfig mc;
  mc.d = cfg.d;
  mc.heads = cfg.heads;
  mc.initial_blocks = cfg.initial_blocks;
  mc.refine_blocks = cfg.refine_blocks;
  mc.descriptor_dim = descriptor_dim > 0 ? descriptor_dim : cfg.d;
  mc.scaled_attention = !unscaled;
  if (cfg.output_path.empty()) throw Error(ErrorKind::config, "init: --out is required");
  const ModelWeights w = ModelWeights::random(mc, cfg.seed);
  save_model(cfg.output_path, w);
  std::cout << model_hash(w) << "\n";
  return 0;
}

struct TrainArgs {
  TrainConfig train;
  SynthConfig synth;
  std::string transform = "homography";
  std::string trace_path;
  std::string resume_path;
  std::size_t descriptor_dim = 0;
};

int cmd_train(const RunConfig& cfg, TrainArgs args) {
  if (cfg.output_path.empty()) throw Error(ErrorKind::config, "train: --out is required");
  args.synth.transform = parse_transform(args.transform);
  TrainConfig tc = args.train;
  tc.seed_count = cfg.seed_count;
  tc.reseed_iterations = cfg.reseed_iterations;
  tc.final_iterations = cfg.final_iterations;
  if (tc.checkpoint_every > 0 && tc.checkpoint_path.empty()) tc.checkpoint_path = cfg.output_path;

  TrainState state;
  if (!args.resume_path.empty()) {
    state = load_checkpoint(args.resume_path);
  } else {
    ModelConfig mc;
    mc.d = cfg.d;
    mc.heads = cfg.heads;
    mc.initial_blocks = cfg.initial_blocks;
    mc.refine_blocks = cfg.refine_blocks;
    mc.descriptor_dim = args.synth.descriptor_dim;
    state.model = ModelWeights::random(mc, cfg.seed);
  }
  if (state.model.config.descriptor_dim != args.synth.descriptor_dim)
    throw Error(ErrorKind::dimension, "train: model expects descriptor width " +
                                          std::to_string(state.model.config.descriptor_dim));

  std::ostringstream trace;
  trace << trace_csv_header() << '\n';
  const auto rows = train(state, args.synth, tc, [&](const TraceRow& r) {
    trace << trace_csv_row(r) << '\n';
    if (r.iteration % 100 == 0) std::cerr << trace_csv_row(r) << '\n';
  });
  save_checkpoint(cfg.output_path, state);
  if (!args.trace_path.empty()) write_text_file(args.trace_path, trace.str());

  json meta = {{"schema_version", kJsonSchemaVersion},
               {"model_hash", model_hash(state.model)},
               {"iterations_run", rows.size()},
               {"next_iteration", state.next_iteration},
               {"run_config", run_config_to_json(cfg)},
               {"synth", synth_to_json(args.synth)},
               {"train",
                {{"learning_rate", tc.learning_rate},
                 {"delta", tc.delta},
                 {"iterations", tc.iterations},
                 {"batch_size", tc.batch_size},
                 {"block_fraction", tc.block_fraction},
                 {"gamma_weighting", tc.gamma_weighting},
                 {"data_seed", tc.data_seed}}}};
  write_text_file(cfg.output_path + ".json", meta.dump(1) + "\n");
  std::cout << model_hash(state.model) << "\n";
  return 0;
}

int cmd_match(const RunConfig& cfg, const std::string& path_a, const std::string& path_b, bool with_timing) {
  if (cfg.model_path.empty()) throw Error(ErrorKind::config, "match: --model is required");
  using Clock = std::chrono::steady_clock;
  const auto t0 = Clock::now();
  ModelWeights model = load_model(cfg.model_path);
  const KeypointSet a = load_keypoints(path_a);
  const KeypointSet b = load_keypoints(path_b);
  if (a.descriptor_dim() != b.descriptor_dim())
    throw Error(ErrorKind::dimension, "match: descriptor widths differ (" + std::to_string(a.descriptor_dim()) +
                                          " vs " + std::to_string(b.descriptor_dim()) + ")");
  if (a.descriptor_dim() != model.config.descriptor_dim)
    throw Error(ErrorKind::dimension, "match: model expects descriptor width " +
                                          std::to_string(model.config.descriptor_dim) + ", files have " +
                                          std::to_string(a.descriptor_dim()));
  const auto t1 = Clock::now();

  ForwardConfig fc;
  fc.seed_count = cfg.seed_count;
  fc.reseed_iterations = cfg.reseed_iterations;
  fc.final_iterations = cfg.final_iterations;
  const ForwardResult out = forward(a, b, model, fc);
  const MatchList matches = extract_matches(out.final_assignment->value(), cfg.threshold);
  const auto t2 = Clock::now();

  json gammas = json::array();
  for (std::size_t u = 0; u < out.gammas.size(); ++u) {
    const auto g = out.gammas[u]->value().data();
    double lo = g[0], hi = g[0], acc = 0.0;
    for (double v : g) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      acc += v;
    }
    gammas.push_back({{"unit", u}, {"mean", acc / static_cast<double>(g.size())}, {"min", lo}, {"max", hi}});
  }
  json doc = {{"schema_version", kJsonSchemaVersion},
              {"matches", matches_to_json(matches)},
              {"metadata",
               {{"model_hash", model_hash(model)},
                {"config", run_config_to_json(cfg)},
                {"inputs", {{"a", path_a}, {"b", path_b}}}}},
              {"diagnostics",
               {{"keypoints", {a.size(), b.size()}},
                {"seeds_initial", out.seeds_initial.size()},
                {"seeds_refined", out.seeds_refined.size()},
                {"reseed_fallback", out.reseed_fallback},
                {"gamma", gammas}}}};
  if (with_timing) {
    auto ms = [](auto x, auto y) { return std::chrono::duration<double, std::milli>(y - x).count(); };
    doc["timing"] = {{"load_ms", ms(t0, t1)}, {"forward_ms", ms(t1, t2)}};
  }
  emit(cfg.output_path, doc.dump(1) + "\n");
  std::cerr << "match: " << matches.size() << " matches\n";
  return 0;
}

int cmd_bench(const BenchConfig& bc, const std::string& csv_path, const std::string& json_path) {
  const BenchReport report = bench_run(bc);
  std::ostringstream csv;
  write_bench_csv(csv, report);
  emit(csv_path, csv.str());
  if (!json_path.empty()) write_text_file(json_path, bench_to_json(report).dump(1) + "\n");
  return 0;
}

int cmd_inspect(const std::string& path, bool as_json) {
  const ModelWeights w = load_model(path);
  const ModelConfig& c = w.config;
  std::size_t units = 0;
  auto count = [](const auto& params) {
    std::size_t n = 0;
    for (const Parameter* p : params) n += p->value.size();
    return n;
  };
  ModelConfig bare = c;
  bare.initial_blocks = 0;
  bare.refine_blocks = 0;
  const std::size_t outer = count(ModelWeights(bare).parameters());
  units = (w.parameter_count() - outer) / std::max<std::size_t>(1, c.initial_blocks + c.refine_blocks);
  if (as_json) {
    json doc = {{"schema_version", kJsonSchemaVersion},
                {"d", c.d},
                {"heads", c.heads},
                {"initial_blocks", c.initial_blocks},
                {"refine_blocks", c.refine_blocks},
                {"descriptor_dim", c.descriptor_dim},
                {"scaled_attention", c.scaled_attention},
                {"tensors", w.parameters().size()},
                {"parameters", w.parameter_count()},
                {"parameters_per_unit", units},
                {"dustbin", w.dustbin.value(0, 0)},
                {"hash", model_hash(w)}};
    std::cout << doc.dump(1) << "\n";
    return 0;
  }
  std::printf("model        %s\n", path.c_str());
  std::printf("width        %zu (descriptors %zu)\n", c.d, c.descriptor_dim);
  std::printf("heads        %zu%s\n", c.heads, c.scaled_attention ? "" : " (unscaled)");
  std::printf("units        %zu + %zu\n", c.initial_blocks, c.refine_blocks);
  std::printf("tensors      %zu\n", w.parameters().size());
  std::printf("parameters   %zu (%zu per unit, %zu embedding and dustbin)\n", w.parameter_count(), units, outer);
  std::printf("dustbin      %.17g\n", w.dustbin.value(0, 0));
  std::printf("hash         %s\n", model_hash(w).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparse seeded graph matching"};
  app.require_subcommand(1);

  SynthConfig synth;
  std::string transform = "homography";
  std::string out_a, out_b, out_gt;
  CLI::App* gen = app.add_subcommand("gen", "write a synthetic keypoint pair and its ground truth");
  add_synth_options(gen, synth, transform);
  gen->add_option("--seed", synth.seed, "RNG seed");
  gen->add_option("--out-a", out_a, "keypoint file for image A")->required();
  gen->add_option("--out-b", out_b, "keypoint file for image B")->required();
  gen->add_option("--out-gt", out_gt, "ground truth JSON")->required();

  RunOverrides init_run;
  std::size_t init_descriptor_dim = 0;
  bool init_unscaled = false;
  CLI::App* init = app.add_subcommand("init", "write a randomly initialized model");
  init_run.attach(init, true);
  init->add_option("--descriptor-dim", init_descriptor_dim, "input descriptor width (default: d)");
  init->add_flag("--unscaled", init_unscaled, "disable 1/sqrt(d/h) score scaling");

  RunOverrides train_run;
  TrainArgs targs;
  targs.synth.seed = 0;
  CLI::App* train_cmd = app.add_subcommand("train", "train on synthetic pairs");
  train_run.attach(train_cmd, true);
  add_synth_options(train_cmd, targs.synth, targs.transform);
  train_cmd->add_option("--iterations", targs.train.iterations, "total iterations");
  train_cmd->add_option("--lr", targs.train.learning_rate, "Adam learning rate");
  train_cmd->add_option("--delta", targs.train.delta, "weight of the inlier loss");
  train_cmd->add_option("--batch", targs.train.batch_size, "pairs per step");
  train_cmd->add_option("--block-fraction", targs.train.block_fraction, "share of iterations with stage gradient blocking");
  train_cmd->add_flag_callback("--no-gamma-weighting", [&targs] { targs.train.gamma_weighting = false; },
                               "train without inlier-weighted unpooling");
  train_cmd->add_option("--decay-hold", targs.train.decay_hold, "iterations before learning-rate decay (0: none)");
  train_cmd->add_option("--data-seed", targs.train.data_seed, "seed of the training pair stream");
  train_cmd->add_option("--checkpoint-every", targs.train.checkpoint_every, "write --out every N iterations");
  train_cmd->add_option("--trace", targs.trace_path, "loss trace CSV");
  train_cmd->add_option("--resume", targs.resume_path, "continue from a checkpoint")->check(CLI::ExistingFile);

  RunOverrides match_run;
  std::string match_a, match_b;
  bool no_timing = false;
  CLI::App* match = app.add_subcommand("match", "match two keypoint files");
  match_run.attach(match, true);
  match->add_option("a", match_a, "keypoint file A")->required();
  match->add_option("b", match_b, "keypoint file B")->required();
  match->add_flag("--no-timing", no_timing, "omit wall-clock timing from the output");

  BenchConfig bench;
  std::string csv_path, json_path;
  std::uint64_t budget_mb = bench.memory_budget_bytes >> 20;
  CLI::App* bench_cmd = app.add_subcommand("bench", "seeded vs dense runtime and cost sweep");
  bench_cmd->add_option("--n", bench.n_values, "keypoint counts")->delimiter(',');
  bench_cmd->add_option("--k", bench.k, "seed count (0: scale with n)");
  bench_cmd->add_option("--d", bench.d, "feature width");
  bench_cmd->add_option("--heads", bench.heads, "attention heads");
  bench_cmd->add_option("--blocks", bench.blocks, "layers per variant");
  bench_cmd->add_option("--runs", bench.runs, "timed runs per configuration");
  bench_cmd->add_option("--warmup", bench.warmup, "untimed runs first");
  bench_cmd->add_option("--sinkhorn-iterations", bench.sinkhorn_iterations, "iterations in the Sinkhorn-included timing");
  bench_cmd->add_option("--seed", bench.seed, "RNG seed");
  bench_cmd->add_option("--budget-mb", budget_mb, "skip configurations above this analytic footprint");
  bench_cmd->add_option("--csv", csv_path, "CSV report (default stdout)");
  bench_cmd->add_option("--json", json_path, "JSON report");

  std::string inspect_path;
  bool inspect_json = false;
  CLI::App* inspect = app.add_subcommand("inspect", "summarize a model file");
  inspect->add_option("model", inspect_path, "model or checkpoint file")->required();
  inspect->add_flag("--json", inspect_json, "machine-readable output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen(synth, transform, out_a, out_b, out_gt);
    if (*init) return cmd_init(init_run.resolve(), init_descriptor_dim, init_unscaled);
    if (*train_cmd) return cmd_train(train_run.resolve(), targs);
    if (*match) return cmd_match(match_run.resolve(), match_a, match_b, !no_timing);
    if (*bench_cmd) {
      bench.memory_budget_bytes = budget_mb << 20;
      return cmd_bench(bench, csv_path, json_path);
    }
    if (*inspect) return cmd_inspect(inspect_path, inspect_json);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
