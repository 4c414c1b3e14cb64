#pragma once

#include <cstdint>
#include <iosfwd>
#include <json.hpp>
#include <string>
#include <vector>

namespace sgm {

/// Closed-form operation counts for the seeded and dense layer stacks.
///
/// One attention call with r queries, s keys/values and width d costs
///   Q projection              r d^2
///   K, V projections          2 s d^2
///   scores + weighted sum     2 r s d   (summed over heads)
///   update MLP 2d->2d->d      6 r d^2
/// multiply-adds. Bias adds, softmax and elementwise ops are not counted,
/// matching the instrumented counter, which only sees matrix products.
struct CostModel {
  std::uint64_t n = 0;
  std::uint64_t m = 0;
  std::uint64_t k = 0;
  std::uint64_t d = 0;
  std::uint64_t heads = 1;
  std::uint64_t blocks = 1;

  void validate() const;

  static std::uint64_t attention_macs(std::uint64_t r, std::uint64_t s, std::uint64_t d);

  /// Pooling: attention (k over n) and (k over m), fusion MLP 2d->2d->2d on k rows.
  /// Filtering: four attention calls over k x k, inlier branch 2d->d->d->d->1.
  /// Unpooling: attention (n over k) and (m over k).
  std::uint64_t seeded_unit_macs() const;
  /// Self attention n x n and m x m, cross attention n x m and m x n.
  std::uint64_t dense_layer_macs() const;
  /// Position MLP 2->d->d on both images.
  std::uint64_t embed_macs() const;

  /// 2 x multiply-adds over `blocks` units.
  std::uint64_t seeded_flops() const { return 2 * blocks * seeded_unit_macs(); }
  std::uint64_t dense_flops() const { return 2 * blocks * dense_layer_macs(); }

  /// Attention score entries per block: 2k(n+m) + 4k^2 seeded,
  /// n^2 + m^2 + 2nm dense.
  std::uint64_t seeded_score_entries() const;
  std::uint64_t dense_score_entries() const;
  /// Score FLOPs over all blocks: Q K^T and the weighted sum, 4 d per entry.
  std::uint64_t seeded_attention_flops() const { return 4 * d * blocks * seeded_score_entries(); }
  std::uint64_t dense_attention_flops() const { return 4 * d * blocks * dense_score_entries(); }

  /// Bytes of one block's score matrices over all heads (f64).
  std::uint64_t seeded_attention_bytes() const { return 8 * heads * seeded_score_entries(); }
  std::uint64_t dense_attention_bytes() const { return 8 * heads * dense_score_entries(); }
  /// Seeding phase: the n x m descriptor Gram matrix.
  std::uint64_t seeding_bytes() const { return 8 * n * m; }
  /// Sinkhorn phase: one (n+1) x (m+1) log-domain iterate.
  std::uint64_t sinkhorn_bytes() const { return 8 * (n + 1) * (m + 1); }
};

std::uint64_t flops_seeded(std::uint64_t n, std::uint64_t m, std::uint64_t k, std::uint64_t d, std::uint64_t h,
                           std::uint64_t blocks);
std::uint64_t flops_dense(std::uint64_t n, std::uint64_t m, std::uint64_t d, std::uint64_t h,
                          std::uint64_t blocks);

struct BenchConfig {
  std::vector<std::size_t> n_values{512, 1024, 2048, 4096};
  std::size_t k = 128;  // 0: round(128 n / 2000), at least 8
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t blocks = 6;
  std::size_t runs = 5;
  std::size_t warmup = 1;
  int sinkhorn_iterations = 100;
  std::uint64_t seed = 1;
  std::uint64_t memory_budget_bytes = 3ULL << 30;
  bool pin_cpu = true;

  void validate() const;
};

/// Timing columns are wall-clock milliseconds; every other column is a pure
/// function of the configuration.
struct BenchRow {
  std::size_t n = 0;
  std::size_t m = 0;
  std::size_t k = 0;
  std::string variant;  // "seeded" or "dense"
  std::uint64_t flops = 0;
  std::uint64_t attention_flops = 0;
  std::uint64_t attention_bytes = 0;
  std::uint64_t seeding_bytes = 0;
  std::uint64_t sinkhorn_bytes = 0;
  std::uint64_t alloc_peak_bytes = 0;
  std::size_t runs = 0;
  double median_ms = 0.0;  // Sinkhorn excluded
  double min_ms = 0.0;
  double max_ms = 0.0;
  double median_total_ms = 0.0;  // Sinkhorn included
  double min_total_ms = 0.0;
  double max_total_ms = 0.0;
  std::string note;  // non-empty when the configuration was skipped

  bool skipped() const { return !note.empty(); }
};

struct BenchReport {
  BenchConfig config;
  std::vector<BenchRow> rows;
};

BenchReport bench_run(const BenchConfig& config);

/// Median of a non-empty sample (mean of the middle pair for even sizes).
double median(std::vector<double> values);

std::string bench_csv_header();
void write_bench_csv(std::ostream& out, const BenchReport& report);
std::vector<BenchRow> parse_bench_csv(std::istream& in);
nlohmann::json bench_to_json(const BenchReport& report);
nlohmann::json bench_config_to_json(const BenchConfig& config);

}  // namespace sgm
