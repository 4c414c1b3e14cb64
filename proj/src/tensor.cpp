#include "sgm/tensor.h"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>

namespace sgm {

namespace memory {
namespace {
std::atomic<std::size_t> g_current{0};
std::atomic<std::size_t> g_peak{0};
}  // namespace

std::size_t current_bytes() noexcept { return g_current.load(); }
std::size_t peak_bytes() noexcept { return g_peak.load(); }
void reset_peak() noexcept { g_peak.store(g_current.load()); }

void on_allocate(std::size_t bytes) noexcept {
  const std::size_t now = g_current.fetch_add(bytes) + bytes;
  std::size_t peak = g_peak.load();
  while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
  }
}

void on_deallocate(std::size_t bytes) noexcept { g_current.fetch_sub(bytes); }
}  // namespace memory

namespace flops {
namespace {
thread_local std::uint64_t t_multiply_adds = 0;
}
std::uint64_t multiply_adds() noexcept { return t_multiply_adds; }
void reset() noexcept { t_multiply_adds = 0; }
}  // namespace flops

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const Matrix& m) {
  return ConstMap(m.data().data(), static_cast<Eigen::Index>(m.rows()),
                  static_cast<Eigen::Index>(m.cols()));
}
MutMap view(Matrix& m) {
  return MutMap(m.data().data(), static_cast<Eigen::Index>(m.rows()),
                static_cast<Eigen::Index>(m.cols()));
}

[[noreturn]] void dimension_error(const char* op, const Matrix& a, const Matrix& b) {
  throw Error(ErrorKind::dimension,
              std::string(op) + ": incompatible shapes " + a.shape_string() + " and " + b.shape_string());
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw Error(ErrorKind::dimension, "ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::column(std::span<const double> values) {
  Matrix m(values.size(), 1);
  std::copy(values.begin(), values.end(), m.data().begin());
  return m;
}

Matrix Matrix::row_vector(std::span<const double> values) {
  Matrix m(1, values.size());
  std::copy(values.begin(), values.end(), m.data().begin());
  return m;
}

std::string Matrix::shape_string() const {
  std::ostringstream os;
  os << rows_ << "x" << cols_;
  return os.str();
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) dimension_error("matmul", a, b);
  Matrix out(a.rows(), b.cols());
  if (a.cols() > 0) view(out).noalias() = view(a) * view(b);
  flops::t_multiply_adds += a.rows() * a.cols() * b.cols();
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) dimension_error("matmul_nt", a, b);
  Matrix out(a.rows(), b.rows());
  if (a.cols() > 0) view(out).noalias() = view(a) * view(b).transpose();
  flops::t_multiply_adds += a.rows() * a.cols() * b.rows();
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) dimension_error("matmul_tn", a, b);
  Matrix out(a.cols(), b.cols());
  if (a.rows() > 0) view(out).noalias() = view(a).transpose() * view(b);
  flops::t_multiply_adds += a.rows() * a.cols() * b.cols();
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix row_softmax(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto in = m.row(i);
    auto dst = out.row(i);
    if (in.empty()) continue;
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      dst[j] = std::exp(in[j] - mx);
      total += dst[j];
    }
    const double inv = 1.0 / total;
    for (double& v : dst) v *= inv;
  }
  return out;
}

void add_in_place(Matrix& dst, const Matrix& src) {
  if (!dst.same_shape(src)) dimension_error("add", dst, src);
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

// ---------------------------------------------------------------------------

void Parameter::zero_grad() {
  if (!grad.same_shape(value)) grad = Matrix(value.rows(), value.cols());
  std::fill(grad.data().begin(), grad.data().end(), 0.0);
}

void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

namespace {
thread_local Tape* t_active_tape = nullptr;

void accumulate(Node& n, const Matrix& g) {
  if (n.grad.empty() && !n.value().empty()) {
    n.grad = g;
    return;
  }
  add_in_place(n.grad, g);
}

bool recording(std::initializer_list<const Var*> inputs) {
  if (t_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Var* v) { return (*v)->requires_grad; });
}

Var make_node(Matrix value) {
  auto n = std::make_shared<Node>();
  n->own = std::move(value);
  return n;
}

Var commit(Var node, std::function<void(Node&)> fn) {
  node->requires_grad = true;
  node->backward = std::move(fn);
  t_active_tape->record(node);
  return node;
}

template <class F>
Matrix map_values(const Matrix& x, F f) {
  Matrix out(x.rows(), x.cols());
  auto s = x.data();
  auto d = out.data();
  for (std::size_t i = 0; i < s.size(); ++i) d[i] = f(s[i]);
  return out;
}

double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double total = 0.0;
  for (double x : v) total += std::exp(x - mx);
  return mx + std::log(total);
}
}  // namespace

void Tape::record(Var node) { nodes_.push_back(std::move(node)); }

Tape* Tape::active() noexcept { return t_active_tape; }

void Tape::backward(const Var& loss) {
  if (loss->value().rows() != 1 || loss->value().cols() != 1)
    throw Error(ErrorKind::contract, "backward: loss must be 1x1, got " + loss->value().shape_string());
  for (auto& n : nodes_) n->grad = Matrix();
  loss->grad = Matrix(1, 1, 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.grad.empty() || !n.backward) continue;
    n.backward(n);
  }
}

void backward(Tape& tape, const Var& loss) { tape.backward(loss); }

TapeScope::TapeScope(Tape& tape) : previous_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = previous_; }

Var constant(Matrix value) { return make_node(std::move(value)); }

Var param(Parameter& p) {
  auto n = std::make_shared<Node>();
  n->param = &p;
  if (t_active_tape != nullptr) {
    commit(n, [](Node& self) {
      Parameter& target = *self.param;
      if (!target.grad.same_shape(target.value)) target.zero_grad();
      add_in_place(target.grad, self.grad);
    });
  }
  return n;
}

Var detach(const Var& x) { return make_node(x->value()); }

Var matmul(const Var& a, const Var& b) {
  auto out = make_node(matmul(a->value(), b->value()));
  if (!recording({&a, &b})) return out;
  return commit(out, [a, b](Node& self) {
    if (a->requires_grad) accumulate(*a, matmul_nt(self.grad, b->value()));
    if (b->requires_grad) accumulate(*b, matmul_tn(a->value(), self.grad));
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  auto out = make_node(matmul_nt(a->value(), b->value()));
  if (!recording({&a, &b})) return out;
  return commit(out, [a, b](Node& self) {
    if (a->requires_grad) accumulate(*a, matmul(self.grad, b->value()));
    if (b->requires_grad) accumulate(*b, matmul_tn(self.grad, a->value()));
  });
}

Var add(const Var& a, const Var& b) {
  Matrix v = a->value();
  add_in_place(v, b->value());
  auto out = make_node(std::move(v));
  if (!recording({&a, &b})) return out;
  return commit(out, [a, b](Node& self) {
    if (a->requires_grad) accumulate(*a, self.grad);
    if (b->requires_grad) accumulate(*b, self.grad);
  });
}

Var add_bias(const Var& x, const Var& bias) {
  const Matrix& xv = x->value();
  const Matrix& bv = bias->value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) dimension_error("add_bias", xv, bv);
  Matrix v = xv;
  for (std::size_t i = 0; i < v.rows(); ++i) {
    auto r = v.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bv(0, j);
  }
  auto out = make_node(std::move(v));
  if (!recording({&x, &bias})) return out;
  return commit(out, [x, bias](Node& self) {
    if (x->requires_grad) accumulate(*x, self.grad);
    if (bias->requires_grad) {
      Matrix g(1, self.grad.cols());
      for (std::size_t i = 0; i < self.grad.rows(); ++i)
        for (std::size_t j = 0; j < self.grad.cols(); ++j) g(0, j) += self.grad(i, j);
      accumulate(*bias, g);
    }
  });
}

Var scale(const Var& x, double s) {
  auto out = make_node(map_values(x->value(), [s](double v) { return v * s; }));
  if (!recording({&x})) return out;
  return commit(out, [x, s](Node& self) {
    accumulate(*x, map_values(self.grad, [s](double g) { return g * s; }));
  });
}

Var scale_rows(const Var& x, const Var& weights) {
  const Matrix& xv = x->value();
  const Matrix& wv = weights->value();
  if (wv.cols() != 1 || wv.rows() != xv.rows()) dimension_error("scale_rows", xv, wv);
  Matrix v = xv;
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (double& e : v.row(i)) e *= wv(i, 0);
  auto out = make_node(std::move(v));
  if (!recording({&x, &weights})) return out;
  return commit(out, [x, weights](Node& self) {
    const Matrix& xv = x->value();
    const Matrix& wv = weights->value();
    if (x->requires_grad) {
      Matrix g = self.grad;
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (double& e : g.row(i)) e *= wv(i, 0);
      accumulate(*x, g);
    }
    if (weights->requires_grad) {
      Matrix g(wv.rows(), 1);
      for (std::size_t i = 0; i < xv.rows(); ++i)
        for (std::size_t j = 0; j < xv.cols(); ++j) g(i, 0) += self.grad(i, j) * xv(i, j);
      accumulate(*weights, g);
    }
  });
}

Var scale_cols(const Var& x, const Var& weights) {
  const Matrix& xv = x->value();
  const Matrix& wv = weights->value();
  if (wv.rows() != 1 || wv.cols() != xv.cols()) dimension_error("scale_cols", xv, wv);
  Matrix v = xv;
  for (std::size_t i = 0; i < v.rows(); ++i) {
    auto r = v.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] *= wv(0, j);
  }
  auto out = make_node(std::move(v));
  if (!recording({&x, &weights})) return out;
  return commit(out, [x, weights](Node& self) {
    const Matrix& xv = x->value();
    const Matrix& wv = weights->value();
    if (x->requires_grad) {
      Matrix g = self.grad;
      for (std::size_t i = 0; i < g.rows(); ++i) {
        auto r = g.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] *= wv(0, j);
      }
      accumulate(*x, g);
    }
    if (weights->requires_grad) {
      Matrix g(1, wv.cols());
      for (std::size_t i = 0; i < xv.rows(); ++i)
        for (std::size_t j = 0; j < xv.cols(); ++j) g(0, j) += self.grad(i, j) * xv(i, j);
      accumulate(*weights, g);
    }
  });
}

Var relu(const Var& x) {
  auto out = make_node(map_values(x->value(), [](double v) { return v > 0.0 ? v : 0.0; }));
  if (!recording({&x})) return out;
  return commit(out, [x](Node& self) {
    Matrix g = self.grad;
    auto xv = x->value().data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i)
      if (!(xv[i] > 0.0)) gd[i] = 0.0;
    accumulate(*x, g);
  });
}

Var sigmoid(const Var& x) {
  auto out = make_node(map_values(x->value(), [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  }));
  if (!recording({&x})) return out;
  return commit(out, [x](Node& self) {
    Matrix g = self.grad;
    auto y = self.own.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] *= y[i] * (1.0 - y[i]);
    accumulate(*x, g);
  });
}

Var exp(const Var& x) {
  auto out = make_node(map_values(x->value(), [](double v) { return std::exp(v); }));
  if (!recording({&x})) return out;
  return commit(out, [x](Node& self) {
    Matrix g = self.grad;
    auto y = self.own.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] *= y[i];
    accumulate(*x, g);
  });
}

Var log_floor(const Var& x, double floor) {
  auto out = make_node(map_values(x->value(), [floor](double v) { return std::log(std::max(v, floor)); }));
  if (!recording({&x})) return out;
  return commit(out, [x, floor](Node& self) {
    Matrix g = self.grad;
    auto xv = x->value().data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] = xv[i] > floor ? gd[i] / xv[i] : 0.0;
    accumulate(*x, g);
  });
}

Var row_softmax(const Var& x) {
  auto out = make_node(row_softmax(x->value()));
  if (!recording({&x})) return out;
  return commit(out, [x](Node& self) {
    const Matrix& y = self.own;
    Matrix g(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      auto yr = y.row(i);
      auto gr = self.grad.row(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
      auto dst = g.row(i);
      for (std::size_t j = 0; j < yr.size(); ++j) dst[j] = yr[j] * (gr[j] - dot);
    }
    accumulate(*x, g);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) return constant(Matrix());
  const std::size_t rows = parts.front()->value().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p->value().rows() != rows) dimension_error("concat_cols", parts.front()->value(), p->value());
    cols += p->value().cols();
  }
  Matrix v(rows, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const Matrix& pv = p->value();
    for (std::size_t i = 0; i < rows; ++i) std::copy(pv.row(i).begin(), pv.row(i).end(), v.row(i).begin() + offset);
    offset += pv.cols();
  }
  auto out = make_node(std::move(v));
  bool any = false;
  for (const auto& p : parts) any = any || p->requires_grad;
  if (t_active_tape == nullptr || !any) return out;
  return commit(out, [parts](Node& self) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t c = p->value().cols();
      if (p->requires_grad) {
        Matrix g(self.grad.rows(), c);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          auto src = self.grad.row(i).subspan(offset, c);
          std::copy(src.begin(), src.end(), g.row(i).begin());
        }
        accumulate(*p, g);
      }
      offset += c;
    }
  });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  const Matrix& xv = x->value();
  if (begin > end || end > xv.cols())
    throw Error(ErrorKind::dimension, "slice_cols: range out of bounds for " + xv.shape_string());
  Matrix v(xv.rows(), end - begin);
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    auto src = xv.row(i).subspan(begin, end - begin);
    std::copy(src.begin(), src.end(), v.row(i).begin());
  }
  auto out = make_node(std::move(v));
  if (!recording({&x})) return out;
  return commit(out, [x, begin](Node& self) {
    const Matrix& xv = x->value();
    Matrix g(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      auto src = self.grad.row(i);
      std::copy(src.begin(), src.end(), g.row(i).begin() + begin);
    }
    accumulate(*x, g);
  });
}

Var gather_rows(const Var& x, std::span<const std::size_t> rows) {
  const Matrix& xv = x->value();
  Matrix v(rows.size(), xv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) throw Error(ErrorKind::dimension, "gather_rows: index out of range");
    std::copy(xv.row(rows[i]).begin(), xv.row(rows[i]).end(), v.row(i).begin());
  }
  auto out = make_node(std::move(v));
  if (!recording({&x})) return out;
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return commit(out, [x, idx = std::move(idx)](Node& self) {
    const Matrix& xv = x->value();
    Matrix g(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto dst = g.row(idx[i]);
      auto src = self.grad.row(i);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    accumulate(*x, g);
  });
}

Var gather_cells(const Var& x, std::span<const std::pair<std::size_t, std::size_t>> cells) {
  const Matrix& xv = x->value();
  Matrix v(cells.size(), 1);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i].first >= xv.rows() || cells[i].second >= xv.cols())
      throw Error(ErrorKind::dimension, "gather_cells: index out of range");
    v(i, 0) = xv(cells[i].first, cells[i].second);
  }
  auto out = make_node(std::move(v));
  if (!recording({&x})) return out;
  std::vector<std::pair<std::size_t, std::size_t>> idx(cells.begin(), cells.end());
  return commit(out, [x, idx = std::move(idx)](Node& self) {
    const Matrix& xv = x->value();
    Matrix g(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g(idx[i].first, idx[i].second) += self.grad(i, 0);
    accumulate(*x, g);
  });
}

Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x->value().data()) total += v;
  auto out = make_node(Matrix(1, 1, total));
  if (!recording({&x})) return out;
  return commit(out, [x](Node& self) {
    accumulate(*x, Matrix(x->value().rows(), x->value().cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& x) {
  const std::size_t n = x->value().size();
  if (n == 0) return constant(Matrix(1, 1));
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var log_normalize_rows(const Var& x, std::span<const double> log_marginal) {
  const Matrix& xv = x->value();
  if (log_marginal.size() != xv.rows())
    throw Error(ErrorKind::dimension, "log_normalize_rows: marginal length mismatch for " + xv.shape_string());
  Matrix v = xv;
  for (std::size_t i = 0; i < v.rows(); ++i) {
    const double shift = log_marginal[i] - log_sum_exp(xv.row(i));
    for (double& e : v.row(i)) e += shift;
  }
  auto out = make_node(std::move(v));
  if (!recording({&x})) return out;
  std::vector<double> lm(log_marginal.begin(), log_marginal.end());
  return commit(out, [x, lm = std::move(lm)](Node& self) {
    const Matrix& y = self.own;
    Matrix g = self.grad;
    for (std::size_t i = 0; i < y.rows(); ++i) {
      auto gr = g.row(i);
      double total = 0.0;
      for (double e : gr) total += e;
      auto yr = y.row(i);
      for (std::size_t j = 0; j < gr.size(); ++j) gr[j] -= std::exp(yr[j] - lm[i]) * total;
    }
    accumulate(*x, g);
  });
}

Var log_normalize_cols(const Var& x, std::span<const double> log_marginal) {
  const Matrix& xv = x->value();
  if (log_marginal.size() != xv.cols())
    throw Error(ErrorKind::dimension, "log_normalize_cols: marginal length mismatch for " + xv.shape_string());
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  std::vector<double> mx(cols, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) mx[j] = std::max(mx[j], xv(i, j));
  std::vector<double> acc(cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) acc[j] += std::exp(xv(i, j) - mx[j]);
  Matrix v = xv;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) v(i, j) += log_marginal[j] - (mx[j] + std::log(acc[j]));
  auto out = make_node(std::move(v));
  if (!recording({&x})) return out;
  std::vector<double> lm(log_marginal.begin(), log_marginal.end());
  return commit(out, [x, lm = std::move(lm)](Node& self) {
    const Matrix& y = self.own;
    Matrix g = self.grad;
    std::vector<double> total(y.cols(), 0.0);
    for (std::size_t i = 0; i < y.rows(); ++i)
      for (std::size_t j = 0; j < y.cols(); ++j) total[j] += g(i, j);
    for (std::size_t i = 0; i < y.rows(); ++i)
      for (std::size_t j = 0; j < y.cols(); ++j) g(i, j) -= std::exp(y(i, j) - lm[j]) * total[j];
    accumulate(*x, g);
  });
}

Var augment_dustbin(const Var& c, const Var& z) {
  const Matrix& cv = c->value();
  const Matrix& zv = z->value();
  if (zv.rows() != 1 || zv.cols() != 1) dimension_error("augment_dustbin", cv, zv);
  const std::size_t n = cv.rows();
  const std::size_t m = cv.cols();
  Matrix v(n + 1, m + 1, zv(0, 0));
  for (std::size_t i = 0; i < n; ++i) std::copy(cv.row(i).begin(), cv.row(i).end(), v.row(i).begin());
  auto out = make_node(std::move(v));
  if (!recording({&c, &z})) return out;
  return commit(out, [c, z, n, m](Node& self) {
    if (c->requires_grad) {
      Matrix g(n, m);
      for (std::size_t i = 0; i < n; ++i)
        std::copy(self.grad.row(i).begin(), self.grad.row(i).begin() + static_cast<std::ptrdiff_t>(m),
                  g.row(i).begin());
      accumulate(*c, g);
    }
    if (z->requires_grad) {
      double border = 0.0;
      for (std::size_t j = 0; j <= m; ++j) border += self.grad(n, j);
      for (std::size_t i = 0; i < n; ++i) border += self.grad(i, m);
      accumulate(*z, Matrix(1, 1, border));
    }
  });
}

Var context_norm(const Var& x, double eps) {
  const Matrix& xv = x->value();
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  std::vector<double> inv_std(cols, 0.0);
  Matrix v(rows, cols);
  if (rows > 0) {
    for (std::size_t j = 0; j < cols; ++j) {
      double mu = 0.0;
      for (std::size_t i = 0; i < rows; ++i) mu += xv(i, j);
      mu /= static_cast<double>(rows);
      double var = 0.0;
      for (std::size_t i = 0; i < rows; ++i) var += (xv(i, j) - mu) * (xv(i, j) - mu);
      var /= static_cast<double>(rows);
      inv_std[j] = 1.0 / std::sqrt(var + eps);
      for (std::size_t i = 0; i < rows; ++i) v(i, j) = (xv(i, j) - mu) * inv_std[j];
    }
  }
  auto out = make_node(std::move(v));
  if (!recording({&x})) return out;
  return commit(out, [x, inv_std = std::move(inv_std)](Node& self) {
    const Matrix& y = self.own;
    const std::size_t rows = y.rows();
    Matrix g(rows, y.cols());
    const double inv_n = 1.0 / static_cast<double>(rows);
    for (std::size_t j = 0; j < y.cols(); ++j) {
      double g_mean = 0.0;
      double gy_mean = 0.0;
      for (std::size_t i = 0; i < rows; ++i) {
        g_mean += self.grad(i, j);
        gy_mean += self.grad(i, j) * y(i, j);
      }
      g_mean *= inv_n;
      gy_mean *= inv_n;
      for (std::size_t i = 0; i < rows; ++i)
        g(i, j) = inv_std[j] * (self.grad(i, j) - g_mean - y(i, j) * gy_mean);
    }
    accumulate(*x, g);
  });
}

Var binary_cross_entropy(const Var& p, std::span<const std::uint8_t> labels, double floor) {
  const Matrix& pv = p->value();
  if (pv.cols() != 1 || pv.rows() != labels.size())
    throw Error(ErrorKind::dimension, "binary_cross_entropy: " + pv.shape_string() + " vs " +
                                          std::to_string(labels.size()) + " labels");
  const std::size_t k = labels.size();
  if (k == 0) return constant(Matrix(1, 1));
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double q = std::clamp(pv(i, 0), floor, 1.0 - floor);
    total -= labels[i] ? std::log(q) : std::log(1.0 - q);
  }
  auto out = make_node(Matrix(1, 1, total / static_cast<double>(k)));
  if (!recording({&p})) return out;
  std::vector<std::uint8_t> lab(labels.begin(), labels.end());
  return commit(out, [p, floor, lab = std::move(lab)](Node& self) {
    const Matrix& pv = p->value();
    const double scale_k = self.grad(0, 0) / static_cast<double>(lab.size());
    Matrix g(pv.rows(), 1);
    for (std::size_t i = 0; i < lab.size(); ++i) {
      const double q = pv(i, 0);
      if (q <= floor || q >= 1.0 - floor) continue;
      g(i, 0) = lab[i] ? -scale_k / q : scale_k / (1.0 - q);
    }
    accumulate(*p, g);
  });
}

// ---------------------------------------------------------------------------

Linear::Linear(std::size_t in, std::size_t out) : weight(Matrix(in, out)), bias(Matrix(1, out)) {}

Var linear(const Var& x, Parameter& weight, Parameter& bias) {
  if (x->value().cols() != weight.value.rows()) dimension_error("linear", x->value(), weight.value);
  return add_bias(matmul(x, param(weight)), param(bias));
}

Var linear(const Var& x, Linear& layer) { return linear(x, layer.weight, layer.bias); }

Mlp::Mlp(std::span<const std::size_t> widths) {
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers.emplace_back(widths[i], widths[i + 1]);
}

Mlp::Mlp(std::initializer_list<std::size_t> widths)
    : Mlp(std::span<const std::size_t>(widths.begin(), widths.size())) {}

Var mlp(const Var& x, Mlp& net) {
  Var h = x;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    h = linear(h, net.layers[i]);
    if (i + 1 < net.layers.size()) h = relu(h);
  }
  return h;
}

}  // namespace sgm
