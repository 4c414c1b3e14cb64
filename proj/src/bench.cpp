#include "sgm/bench.h"

#include "sgm/baseline.h"
#include "sgm/sgnn.h"
#include "sgm/tensor.h"
#include "sgm/training.h"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

#ifdef __linux__
#include <sched.h>
#endif

namespace sgm {

using nlohmann::json;

void CostModel::validate() const {
  if (n == 0 || m == 0 || k == 0 || d == 0 || heads == 0 || blocks == 0)
    throw Error(ErrorKind::contract, "cost model: all counts must be positive");
  if (d % heads != 0) throw Error(ErrorKind::contract, "cost model: heads must divide d");
}

std::uint64_t CostModel::attention_macs(std::uint64_t r, std::uint64_t s, std::uint64_t d) {
  return r * d * d + 2 * s * d * d + 2 * r * s * d + 6 * r * d * d;
}

std::uint64_t CostModel::seeded_unit_macs() const {
  const std::uint64_t pooling = attention_macs(k, n, d) + attention_macs(k, m, d) + k * (4 * d * d + 4 * d * d);
  const std::uint64_t filtering = 4 * attention_macs(k, k, d) + k * (2 * d * d + d * d + d * d + d);
  const std::uint64_t unpooling = attention_macs(n, k, d) + attention_macs(m, k, d);
  return pooling + filtering + unpooling;
}

std::uint64_t CostModel::dense_layer_macs() const {
  return attention_macs(n, n, d) + attention_macs(m, m, d) + attention_macs(n, m, d) + attention_macs(m, n, d);
}

std::uint64_t CostModel::embed_macs() const { return (n + m) * (2 * d + d * d); }

std::uint64_t CostModel::seeded_score_entries() const { return 2 * k * (n + m) + 4 * k * k; }
std::uint64_t CostModel::dense_score_entries() const { return n * n + m * m + 2 * n * m; }

std::uint64_t flops_seeded(std::uint64_t n, std::uint64_t m, std::uint64_t k, std::uint64_t d, std::uint64_t h,
                           std::uint64_t blocks) {
  const CostModel c{n, m, k, d, h, blocks};
  c.validate();
  return c.seeded_flops();
}

std::uint64_t flops_dense(std::uint64_t n, std::uint64_t m, std::uint64_t d, std::uint64_t h,
                          std::uint64_t blocks) {
  const CostModel c{n, m, 1, d, h, blocks};
  c.validate();
  return c.dense_flops();
}

void BenchConfig::validate() const {
  if (n_values.empty()) throw Error(ErrorKind::config, "bench: empty n sweep");
  for (std::size_t n : n_values)
    if (n < 2) throw Error(ErrorKind::config, "bench: n must be at least 2");
  if (d == 0 || heads == 0 || d % heads != 0) throw Error(ErrorKind::config, "bench: heads must divide d");
  if (blocks == 0 || runs == 0) throw Error(ErrorKind::config, "bench: blocks and runs must be positive");
  if (sinkhorn_iterations < 1) throw Error(ErrorKind::config, "bench: Sinkhorn iterations must be >= 1");
}

double median(std::vector<double> v) {
  if (v.empty()) throw Error(ErrorKind::contract, "median of empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

void pin_to_one_cpu() {
#ifdef __linux__
  cpu_set_t set;
  CPU_ZERO(&set);
  if (sched_getaffinity(0, sizeof set, &set) != 0) return;
  for (int c = 0; c < CPU_SETSIZE; ++c) {
    if (CPU_ISSET(c, &set)) {
      CPU_ZERO(&set);
      CPU_SET(c, &set);
      sched_setaffinity(0, sizeof set, &set);
      return;
    }
  }
#endif
}

struct Sample {
  double excluded;
  double included;
};

struct Timed {
  std::vector<double> excluded;
  std::vector<double> included;
  std::uint64_t alloc_peak = 0;
};

template <class F>
Timed time_runs(const BenchConfig& cfg, F&& run) {
  for (std::size_t w = 0; w < cfg.warmup; ++w) run();
  Timed t;
  memory::reset_peak();
  const std::size_t base = memory::current_bytes();
  for (std::size_t r = 0; r < cfg.runs; ++r) {
    const Sample s = run();
    t.excluded.push_back(s.excluded);
    t.included.push_back(s.included);
  }
  t.alloc_peak = memory::peak_bytes() - base;
  return t;
}

void fill_timing(BenchRow& row, const Timed& t) {
  row.runs = t.excluded.size();
  row.median_ms = median(t.excluded);
  row.min_ms = *std::min_element(t.excluded.begin(), t.excluded.end());
  row.max_ms = *std::max_element(t.excluded.begin(), t.excluded.end());
  row.median_total_ms = median(t.included);
  row.min_total_ms = *std::min_element(t.included.begin(), t.included.end());
  row.max_total_ms = *std::max_element(t.included.begin(), t.included.end());
  row.alloc_peak_bytes = t.alloc_peak;
}

}  // namespace

BenchReport bench_run(const BenchConfig& cfg) {
  cfg.validate();
  if (cfg.pin_cpu) pin_to_one_cpu();
  BenchReport report;
  report.config = cfg;

  ModelConfig mc;
  mc.d = cfg.d;
  mc.heads = cfg.heads;
  mc.initial_blocks = cfg.blocks;
  mc.refine_blocks = 0;
  mc.descriptor_dim = cfg.d;
  ModelWeights seeded = ModelWeights::random(mc, cfg.seed);
  auto dense = random_dense_layers(cfg.d, cfg.blocks, cfg.seed + 1);
  const AttentionOptions options = mc.attention();

  for (std::size_t n : cfg.n_values) {
    SynthConfig sc;
    sc.n_points = n;
    sc.descriptor_dim = cfg.d;
    sc.seed = cfg.seed + n;
    const SynthPair pair = synth_pair(sc);
    const std::size_t m = n;
    const std::size_t k = cfg.k > 0 ? cfg.k : static_cast<std::size_t>(default_seed_count(n));
    const CostModel cost{n, m, k, cfg.d, cfg.heads, cfg.blocks};

    auto make_row = [&](const char* variant, std::uint64_t flops, std::uint64_t att_flops, std::uint64_t att_bytes,
                        std::uint64_t seeding_bytes) {
      BenchRow r;
      r.n = n;
      r.m = m;
      r.k = k;
      r.variant = variant;
      r.flops = flops;
      r.attention_flops = att_flops;
      r.attention_bytes = att_bytes;
      r.seeding_bytes = seeding_bytes;
      r.sinkhorn_bytes = cost.sinkhorn_bytes();
      return r;
    };
    BenchRow s_row = make_row("seeded", cost.seeded_flops(), cost.seeded_attention_flops(),
                              cost.seeded_attention_bytes(), cost.seeding_bytes());
    BenchRow d_row = make_row("dense", cost.dense_flops(), cost.dense_attention_flops(), cost.dense_attention_bytes(), 0);

    auto sinkhorn_tail = [&](const Var& fa, const Var& fb) {
      Var z = constant(Matrix(1, 1, seeded.dustbin.value(0, 0)));
      return sinkhorn(augment_dustbin(correlation(fa, fb), z), cfg.sinkhorn_iterations);
    };

    if (s_row.attention_bytes + s_row.seeding_bytes + s_row.sinkhorn_bytes > cfg.memory_budget_bytes) {
      s_row.note = "skipped: analytic footprint exceeds memory budget";
    } else {
      const Timed t = time_runs(cfg, [&] {
        const auto t0 = Clock::now();
        const SeedSet seeds = initial_seeds(pair.a, pair.b, static_cast<int>(k));
        if (seeds.empty()) throw Error(ErrorKind::unseedable, "bench: no seeds");
        Var fa = embed_positions(pair.a, seeded);
        Var fb = embed_positions(pair.b, seeded);
        for (ProcessingUnitWeights& unit : seeded.initial) {
          UnitOutput out = processing_unit(fa, fb, seeds, unit, options);
          fa = out.a;
          fb = out.b;
        }
        const auto t1 = Clock::now();
        sinkhorn_tail(fa, fb);
        const auto t2 = Clock::now();
        return Sample{ms_between(t0, t1), ms_between(t0, t2)};
      });
      fill_timing(s_row, t);
    }

    if (d_row.attention_bytes + d_row.sinkhorn_bytes > cfg.memory_budget_bytes) {
      d_row.note = "skipped: analytic footprint exceeds memory budget";
    } else {
      const Timed t = time_runs(cfg, [&] {
        const auto t0 = Clock::now();
        Var fa = embed_positions(pair.a, seeded);
        Var fb = embed_positions(pair.b, seeded);
        for (DenseLayerWeights& layer : dense) {
          DenseFeatures out = dense_block(fa, fb, layer, options);
          fa = out.a;
          fb = out.b;
        }
        const auto t1 = Clock::now();
        sinkhorn_tail(fa, fb);
        const auto t2 = Clock::now();
        return Sample{ms_between(t0, t1), ms_between(t0, t2)};
      });
      fill_timing(d_row, t);
    }
    report.rows.push_back(std::move(s_row));
    report.rows.push_back(std::move(d_row));
  }
  return report;
}

// ---------------------------------------------------------------------------

std::string bench_csv_header() {
  return "n,m,k,variant,flops,attention_flops,attention_bytes,seeding_bytes,sinkhorn_bytes,alloc_peak_bytes,runs,"
         "median_ms,min_ms,max_ms,median_total_ms,min_total_ms,max_total_ms,note";
}

void write_bench_csv(std::ostream& out, const BenchReport& report) {
  out << bench_csv_header() << '\n';
  for (const BenchRow& r : report.rows) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%s,%llu,%llu,%llu,%llu,%llu,%llu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,",
                  r.n, r.m, r.k, r.variant.c_str(), static_cast<unsigned long long>(r.flops),
                  static_cast<unsigned long long>(r.attention_flops),
                  static_cast<unsigned long long>(r.attention_bytes),
                  static_cast<unsigned long long>(r.seeding_bytes), static_cast<unsigned long long>(r.sinkhorn_bytes),
                  static_cast<unsigned long long>(r.alloc_peak_bytes), r.runs, r.median_ms, r.min_ms, r.max_ms,
                  r.median_total_ms, r.min_total_ms, r.max_total_ms);
    out << buf << r.note << '\n';
  }
}

std::vector<BenchRow> parse_bench_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != bench_csv_header())
    throw Error(ErrorKind::format, "bench csv: unexpected header");
  std::vector<BenchRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    for (int i = 0; i < 17 && std::getline(ss, cell, ','); ++i) f.push_back(cell);
    std::string note;
    std::getline(ss, note);
    if (f.size() != 17) throw Error(ErrorKind::format, "bench csv: expected 18 columns in \"" + line + "\"");
    try {
      BenchRow r;
      r.n = std::stoull(f[0]);
      r.m = std::stoull(f[1]);
      r.k = std::stoull(f[2]);
      r.variant = f[3];
      r.flops = std::stoull(f[4]);
      r.attention_flops = std::stoull(f[5]);
      r.attention_bytes = std::stoull(f[6]);
      r.seeding_bytes = std::stoull(f[7]);
      r.sinkhorn_bytes = std::stoull(f[8]);
      r.alloc_peak_bytes = std::stoull(f[9]);
      r.runs = std::stoull(f[10]);
      r.median_ms = std::stod(f[11]);
      r.min_ms = std::stod(f[12]);
      r.max_ms = std::stod(f[13]);
      r.median_total_ms = std::stod(f[14]);
      r.min_total_ms = std::stod(f[15]);
      r.max_total_ms = std::stod(f[16]);
      r.note = note;
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::format, "bench csv: bad number in \"" + line + "\"");
    }
  }
  return rows;
}

json bench_config_to_json(const BenchConfig& c) {
  return {{"n_values", c.n_values},   {"k", c.k},
          {"d", c.d},                 {"heads", c.heads},
          {"blocks", c.blocks},       {"runs", c.runs},
          {"warmup", c.warmup},       {"sinkhorn_iterations", c.sinkhorn_iterations},
          {"seed", c.seed},           {"memory_budget_bytes", c.memory_budget_bytes}};
}

json bench_to_json(const BenchReport& report) {
  json rows = json::array();
  for (const BenchRow& r : report.rows) {
    rows.push_back({{"n", r.n},
                    {"m", r.m},
                    {"k", r.k},
                    {"variant", r.variant},
                    {"flops", r.flops},
                    {"attention_flops", r.attention_flops},
                    {"attention_bytes", r.attention_bytes},
                    {"seeding_bytes", r.seeding_bytes},
                    {"sinkhorn_bytes", r.sinkhorn_bytes},
                    {"alloc_peak_bytes", r.alloc_peak_bytes},
                    {"runs", r.runs},
                    {"timing",
                     {{"median_ms", r.median_ms},
                      {"min_ms", r.min_ms},
                      {"max_ms", r.max_ms},
                      {"median_total_ms", r.median_total_ms},
                      {"min_total_ms", r.min_total_ms},
                      {"max_total_ms", r.max_total_ms}}},
                    {"note", r.note}});
  }
  return {{"schema_version", 1}, {"config", bench_config_to_json(report.config)}, {"rows", rows}};
}

}  // namespace sgm
