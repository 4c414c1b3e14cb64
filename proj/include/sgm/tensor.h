#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sgm {

enum class ErrorKind { dimension, contract, format, config, unseedable, numeric, io };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Byte accounting for matrix storage. Gives the benchmark an allocator
// high-water mark that is independent of the platform malloc.
namespace memory {
std::size_t current_bytes() noexcept;
std::size_t peak_bytes() noexcept;
void reset_peak() noexcept;
void on_allocate(std::size_t bytes) noexcept;
void on_deallocate(std::size_t bytes) noexcept;

template <class T>
struct TrackingAllocator {
  using value_type = T;
  TrackingAllocator() = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    on_allocate(n * sizeof(T));
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    on_deallocate(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }
  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};
}  // namespace memory

// Multiply-add counter for the dense product kernels (per thread).
namespace flops {
std::uint64_t multiply_adds() noexcept;
void reset() noexcept;
}  // namespace flops

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix column(std::span<const double> values);
  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<double> data() noexcept { return {data_.data(), data_.size()}; }
  std::span<const double> data() const noexcept { return {data_.data(), data_.size()}; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_string() const;
  bool all_finite() const noexcept;

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double, memory::TrackingAllocator<double>> data_;
};

// Untaped kernels.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // a * b^T
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // a^T * b
Matrix transpose(const Matrix& a);
Matrix row_softmax(const Matrix& m);
void add_in_place(Matrix& dst, const Matrix& src);
double max_abs_diff(const Matrix& a, const Matrix& b);

// ---------------------------------------------------------------------------
// Reverse mode.

struct Parameter {
  Matrix value;
  Matrix grad;

  Parameter() = default;
  explicit Parameter(Matrix v) : value(std::move(v)), grad(value.rows(), value.cols()) {}
  void zero_grad();
};

void zero_grads(std::span<Parameter* const> params);

struct Node {
  Matrix own;
  Parameter* param = nullptr;
  Matrix grad;
  bool requires_grad = false;
  std::function<void(Node&)> backward;

  const Matrix& value() const noexcept { return param ? param->value : own; }
};

using Var = std::shared_ptr<Node>;

/// Ordered record of taped operations. Opened with TapeScope; while a scope
/// is active on the current thread every op whose inputs require gradients
/// is appended here.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(Var node);
  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Accumulates d(loss)/d(parameter) into every Parameter reached.
  /// Intermediate gradients are reset first, so repeated calls add the
  /// same contribution to parameter gradients each time.
  void backward(const Var& loss);

  static Tape* active() noexcept;

 private:
  friend class TapeScope;
  std::vector<Var> nodes_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

void backward(Tape& tape, const Var& loss);

// Taped ops. All are pure functions of their inputs' values.
Var constant(Matrix value);
Var param(Parameter& p);
Var detach(const Var& x);

Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var add_bias(const Var& x, const Var& bias);      // bias is 1 x cols
Var scale(const Var& x, double s);
Var scale_rows(const Var& x, const Var& weights);  // weights is rows x 1
Var scale_cols(const Var& x, const Var& weights);  // weights is 1 x cols
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var exp(const Var& x);
Var log_floor(const Var& x, double floor);
Var row_softmax(const Var& x);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& x, std::size_t begin, std::size_t end);
Var gather_rows(const Var& x, std::span<const std::size_t> rows);
Var gather_cells(const Var& x, std::span<const std::pair<std::size_t, std::size_t>> cells);
Var sum(const Var& x);
Var mean(const Var& x);

/// Subtracts each row's log-sum-exp and adds log_marginal[row].
Var log_normalize_rows(const Var& x, std::span<const double> log_marginal);
/// Column analogue of log_normalize_rows.
Var log_normalize_cols(const Var& x, std::span<const double> log_marginal);
/// (n x m) -> (n+1) x (m+1) with the new row and column filled by z (1 x 1).
Var augment_dustbin(const Var& c, const Var& z);
/// Per-column standardization over rows: (x - mean) / sqrt(var + eps).
Var context_norm(const Var& x, double eps);
/// Mean binary cross entropy of probabilities p (k x 1) against 0/1 labels.
Var binary_cross_entropy(const Var& p, std::span<const std::uint8_t> labels, double floor);

// ---------------------------------------------------------------------------
// Layers.

struct Linear {
  Parameter weight;  // in x out
  Parameter bias;    // 1 x out

  Linear() = default;
  Linear(std::size_t in, std::size_t out);
  std::size_t in() const noexcept { return weight.value.rows(); }
  std::size_t out() const noexcept { return weight.value.cols(); }
};

Var linear(const Var& x, Parameter& weight, Parameter& bias);
Var linear(const Var& x, Linear& layer);

/// Linear -> ReLU -> ... -> Linear (no activation after the last layer).
struct Mlp {
  std::vector<Linear> layers;

  Mlp() = default;
  explicit Mlp(std::span<const std::size_t> widths);
  Mlp(std::initializer_list<std::size_t> widths);
};

Var mlp(const Var& x, Mlp& net);

}  // namespace sgm
