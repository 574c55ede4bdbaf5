#include "peftlab/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace peftlab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

MutMap grad_matrix(const Tensor& t) {
  return MutMap(t.grad().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

ConstMap grad_matrix_const(const Tensor& t) {
  return ConstMap(t.grad().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

[[noreturn]] void shape_error(std::string_view op, std::initializer_list<const Tensor*> operands,
                              std::string_view detail = {}) {
  std::ostringstream msg;
  msg << op << ": incompatible operand shapes";
  for (const Tensor* t : operands) {
    msg << ' ' << (t->defined() ? shape_to_string(t->shape()) : std::string("<undefined>"));
  }
  if (!detail.empty()) msg << " (" << detail << ')';
  throw DimensionError(msg.str());
}

void require_defined(std::string_view op, std::initializer_list<const Tensor*> operands) {
  for (const Tensor* t : operands) {
    if (!t->defined()) shape_error(op, operands, "undefined operand");
  }
}

void require_matrix(std::string_view op, const Tensor& t) {
  if (t.rank() != 2) shape_error(op, {&t}, "expected a matrix");
}

bool needs_grad(const Tape& tape, std::initializer_list<const Tensor*> operands) {
  if (!tape.recording()) return false;
  return std::any_of(operands.begin(), operands.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

Tensor make_result(Shape shape, std::vector<double> values, bool grad) {
  return Tensor(std::move(shape), std::move(values), grad);
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : storage_(std::make_shared<TensorStorage>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor: zero-sized dimension in " + shape_to_string(shape));
  }
  if (product(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_to_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  storage_->shape = std::move(shape);
  storage_->value = std::move(values);
  storage_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::normal(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(product(shape));
  for (double& v : values) v = dist(rng);
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

const Shape& Tensor::shape() const {
  if (!storage_) throw ContractError("tensor: access to an undefined tensor");
  return storage_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw DimensionError("tensor: axis out of range for " + shape_to_string(s));
  return s[axis];
}

std::size_t Tensor::size() const { return storage_ ? storage_->value.size() : 0; }

std::size_t Tensor::rows() const {
  const Shape& s = shape();
  return s.size() == 2 ? s[0] : 1;
}

std::size_t Tensor::cols() const {
  const Shape& s = shape();
  return s.size() == 2 ? s[1] : size();
}

std::span<double> Tensor::data() {
  shape();
  return storage_->value;
}

std::span<const double> Tensor::data() const {
  shape();
  return storage_->value;
}

double& Tensor::at(std::size_t r, std::size_t c) { return data()[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

double Tensor::item() const {
  if (size() != 1) throw ContractError("tensor: item() on " + shape_to_string(shape()));
  return storage_->value[0];
}

bool Tensor::requires_grad() const { return storage_ && storage_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  shape();
  storage_->requires_grad = flag;
  if (!flag) storage_->grad.clear();
}

bool Tensor::has_grad() const { return storage_ && !storage_->grad.empty(); }

std::span<double> Tensor::grad() const {
  shape();
  if (storage_->grad.empty()) storage_->grad.assign(storage_->value.size(), 0.0);
  return storage_->grad;
}

void Tensor::zero_grad() const {
  if (storage_ && !storage_->grad.empty()) {
    std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0);
  }
}

void Tensor::accumulate_grad(std::span<const double> contribution) const {
  if (!requires_grad()) return;
  auto g = grad();
  if (contribution.size() != g.size()) throw ContractError("tensor: gradient size mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
}

Tensor Tensor::clone() const {
  if (!storage_) return {};
  return Tensor(storage_->shape, storage_->value, storage_->requires_grad);
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  if (defined() != other.defined()) return false;
  if (!defined()) return true;
  if (shape() != other.shape()) return false;
  const auto a = data();
  const auto b = other.data();
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// ---------------------------------------------------------------------------
// Tape

void Tape::record(std::string name, std::function<void()> backward) {
  if (!recording_) return;
  entries_.push_back({std::move(name), std::move(backward)});
}

void Tape::backward(const Tensor& output) {
  if (!output.defined() || output.size() != 1) {
    throw ContractError("backward: output must be a scalar, got " +
                        (output.defined() ? shape_to_string(output.shape()) : "<undefined>"));
  }
  if (!output.requires_grad()) return;
  Tensor seed = output;
  seed.grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
}

// ---------------------------------------------------------------------------
// Primitives

namespace ops {

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_defined("matmul", {&a, &b});
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) shape_error("matmul", {&a, &b});
  const bool grad = needs_grad(tape, {&a, &b});
  std::vector<double> out(a.rows() * b.cols());
  MutMap(out.data(), a.rows(), b.cols()).noalias() = as_matrix(a) * as_matrix(b);
  Tensor y = make_result({a.rows(), b.cols()}, std::move(out), grad);
  if (grad) {
    tape.record("matmul", [a, b, y]() mutable {
      if (!y.has_grad()) return;
      auto dy = grad_matrix_const(y);
      if (a.requires_grad()) grad_matrix(a).noalias() += dy * as_matrix(b).transpose();
      if (b.requires_grad()) grad_matrix(b).noalias() += as_matrix(a).transpose() * dy;
    });
  }
  return y;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined("linear", {&x, &weight});
  if (x.rank() != 2 || weight.rank() != 2 || x.cols() != weight.cols()) {
    shape_error("linear", {&x, &weight});
  }
  if (bias.defined() && (bias.rank() != 1 || bias.size() != weight.rows())) {
    shape_error("linear", {&x, &weight, &bias}, "bias length must equal output rows");
  }
  const bool grad = needs_grad(tape, {&x, &weight, &bias});
  const std::size_t n = x.rows();
  const std::size_t d_out = weight.rows();
  std::vector<double> out(n * d_out);
  MutMap ym(out.data(), n, d_out);
  ym.noalias() = as_matrix(x) * as_matrix(weight).transpose();
  if (bias.defined()) {
    Eigen::Map<const Eigen::RowVectorXd> bv(bias.data().data(), d_out);
    ym.rowwise() += bv;
  }
  Tensor y = make_result({n, d_out}, std::move(out), grad);
  if (grad) {
    tape.record("linear", [x, weight, bias, y]() mutable {
      if (!y.has_grad()) return;
      auto dy = grad_matrix_const(y);
      if (x.requires_grad()) grad_matrix(x).noalias() += dy * as_matrix(weight);
      if (weight.requires_grad()) grad_matrix(weight).noalias() += dy.transpose() * as_matrix(x);
      if (bias.defined() && bias.requires_grad()) {
        Eigen::Map<Eigen::RowVectorXd> db(bias.grad().data(), bias.size());
        db += dy.colwise().sum();
      }
    });
  }
  return y;
}

Tensor transpose(Tape& tape, const Tensor& a) {
  require_defined("transpose", {&a});
  require_matrix("transpose", a);
  const bool grad = needs_grad(tape, {&a});
  std::vector<double> out(a.size());
  MutMap(out.data(), a.cols(), a.rows()) = as_matrix(a).transpose();
  Tensor y = make_result({a.cols(), a.rows()}, std::move(out), grad);
  if (grad) {
    tape.record("transpose", [a, y]() mutable {
      if (!y.has_grad()) return;
      grad_matrix(a) += grad_matrix_const(y).transpose();
    });
  }
  return y;
}

namespace {

template <class Fwd, class Bwd>
Tensor binary_elementwise(std::string_view name, Tape& tape, const Tensor& a, const Tensor& b,
                          Fwd fwd, Bwd bwd) {
  require_defined(name, {&a, &b});
  if (a.shape() != b.shape()) shape_error(name, {&a, &b});
  const bool grad = needs_grad(tape, {&a, &b});
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  Tensor y = make_result(a.shape(), std::move(out), grad);
  if (grad) {
    tape.record(std::string(name), [a, b, y, bwd]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      const auto av = a.data();
      const auto bv = b.data();
      const bool ga = a.requires_grad();
      const bool gb = b.requires_grad();
      std::span<double> da = ga ? a.grad() : std::span<double>{};
      std::span<double> db = gb ? b.grad() : std::span<double>{};
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const auto [pa, pb] = bwd(av[i], bv[i], dy[i]);
        if (ga) da[i] += pa;
        if (gb) db[i] += pb;
      }
    });
  }
  return y;
}

template <class Fwd, class Bwd>
Tensor unary_elementwise(std::string_view name, Tape& tape, const Tensor& a, Fwd fwd, Bwd bwd) {
  require_defined(name, {&a});
  const bool grad = needs_grad(tape, {&a});
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  Tensor y = make_result(a.shape(), std::move(out), grad);
  if (grad) {
    tape.record(std::string(name), [a, y, bwd]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      const auto av = a.data();
      auto da = a.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += bwd(av[i], dy[i]);
    });
  }
  return y;
}

// Reductions to a scalar share this shape: value = f(a), da_i = df/da_i * dy.
template <class Fwd, class Bwd>
Tensor reduce_to_scalar(std::string_view name, Tape& tape, const Tensor& a, Fwd fwd, Bwd bwd) {
  require_defined(name, {&a});
  const bool grad = needs_grad(tape, {&a});
  const double value = fwd(a.data());
  Tensor y = make_result({1}, {value}, grad);
  if (grad) {
    tape.record(std::string(name), [a, y, bwd]() mutable {
      if (!y.has_grad()) return;
      bwd(a.data(), y.data()[0], y.grad()[0], a.grad());
    });
  }
  return y;
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", tape, a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return std::pair{g, g}; });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", tape, a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return std::pair{g, -g}; });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", tape, a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g) { return std::pair{g * y, g * x}; });
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  return unary_elementwise(
      "scale", tape, a, [factor](double x) { return x * factor; },
      [factor](double, double g) { return g * factor; });
}

Tensor mul_scalar(Tape& tape, const Tensor& a, const Tensor& s) {
  require_defined("mul_scalar", {&a, &s});
  if (s.size() != 1) shape_error("mul_scalar", {&a, &s}, "second operand must hold one value");
  const bool grad = needs_grad(tape, {&a, &s});
  const double factor = s.data()[0];
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  Tensor y = make_result(a.shape(), std::move(out), grad);
  if (grad) {
    tape.record("mul_scalar", [a, s, y]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      const auto av = a.data();
      const double factor = s.data()[0];
      if (a.requires_grad()) {
        auto da = a.grad();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * factor;
      }
      if (s.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < dy.size(); ++i) acc += dy[i] * av[i];
        s.grad()[0] += acc;
      }
    });
  }
  return y;
}

Tensor add_rowvec(Tape& tape, const Tensor& x, const Tensor& v) {
  require_defined("add_rowvec", {&x, &v});
  if (x.rank() != 2 || v.rank() != 1 || v.size() != x.cols()) shape_error("add_rowvec", {&x, &v});
  const bool grad = needs_grad(tape, {&x, &v});
  std::vector<double> out(x.size());
  MutMap ym(out.data(), x.rows(), x.cols());
  ym = as_matrix(x);
  ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(v.data().data(), v.size());
  Tensor y = make_result(x.shape(), std::move(out), grad);
  if (grad) {
    tape.record("add_rowvec", [x, v, y]() mutable {
      if (!y.has_grad()) return;
      auto dy = grad_matrix_const(y);
      if (x.requires_grad()) grad_matrix(x) += dy;
      if (v.requires_grad()) {
        Eigen::Map<Eigen::RowVectorXd>(v.grad().data(), v.size()) += dy.colwise().sum();
      }
    });
  }
  return y;
}

Tensor mul_rowvec(Tape& tape, const Tensor& x, const Tensor& v) {
  require_defined("mul_rowvec", {&x, &v});
  if (x.rank() != 2 || v.rank() != 1 || v.size() != x.cols()) shape_error("mul_rowvec", {&x, &v});
  const bool grad = needs_grad(tape, {&x, &v});
  const std::size_t n = x.rows();
  const std::size_t m = x.cols();
  const auto xv = x.data();
  const auto vv = v.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = xv[i * m + j] * vv[j];
  }
  Tensor y = make_result(x.shape(), std::move(out), grad);
  if (grad) {
    tape.record("mul_rowvec", [x, v, y, n, m]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      const auto xv = x.data();
      const auto vv = v.data();
      if (x.requires_grad()) {
        auto dx = x.grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < m; ++j) dx[i * m + j] += dy[i * m + j] * vv[j];
        }
      }
      if (v.requires_grad()) {
        auto dv = v.grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < m; ++j) dv[j] += dy[i * m + j] * xv[i * m + j];
        }
      }
    });
  }
  return y;
}

Tensor scale_cols(Tape& tape, const Tensor& m, const Tensor& s) {
  require_defined("scale_cols", {&m, &s});
  if (m.rank() != 2 || s.rank() != 1 || s.size() != m.cols()) shape_error("scale_cols", {&m, &s});
  return mul_rowvec(tape, m, s);
}

Tensor sum(Tape& tape, const Tensor& a) {
  return reduce_to_scalar(
      "sum", tape, a,
      [](std::span<const double> v) {
        double acc = 0.0;
        for (double x : v) acc += x;
        return acc;
      },
      [](std::span<const double>, double, double g, std::span<double> da) {
        for (double& d : da) d += g;
      });
}

Tensor l1_norm(Tape& tape, const Tensor& a) {
  return reduce_to_scalar(
      "l1_norm", tape, a,
      [](std::span<const double> v) {
        double acc = 0.0;
        for (double x : v) acc += std::abs(x);
        return acc;
      },
      [](std::span<const double> v, double, double g, std::span<double> da) {
        // Subgradient at exactly zero is taken as 0.
        for (std::size_t i = 0; i < v.size(); ++i) {
          if (v[i] > 0.0) da[i] += g;
          else if (v[i] < 0.0) da[i] -= g;
        }
      });
}

Tensor l2_norm(Tape& tape, const Tensor& a) {
  return reduce_to_scalar(
      "l2_norm", tape, a,
      [](std::span<const double> v) {
        double acc = 0.0;
        for (double x : v) acc += x * x;
        return std::sqrt(acc);
      },
      [](std::span<const double> v, double norm, double g, std::span<double> da) {
        if (norm == 0.0) return;
        for (std::size_t i = 0; i < v.size(); ++i) da[i] += g * v[i] / norm;
      });
}

Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
  require_defined("reshape", {&a});
  if (product(shape) != a.size()) shape_error("reshape", {&a}, "target " + shape_to_string(shape));
  const bool grad = needs_grad(tape, {&a});
  Tensor y = make_result(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), grad);
  if (grad) {
    tape.record("reshape", [a, y]() mutable {
      if (!y.has_grad()) return;
      a.accumulate_grad(y.grad());
    });
  }
  return y;
}

Tensor slice_rows(Tape& tape, const Tensor& a, std::size_t begin, std::size_t end) {
  require_defined("slice_rows", {&a});
  require_matrix("slice_rows", a);
  if (begin >= end || end > a.rows()) shape_error("slice_rows", {&a}, "row range out of bounds");
  const bool grad = needs_grad(tape, {&a});
  const std::size_t m = a.cols();
  const auto av = a.data();
  std::vector<double> out(av.begin() + static_cast<std::ptrdiff_t>(begin * m),
                          av.begin() + static_cast<std::ptrdiff_t>(end * m));
  Tensor y = make_result({end - begin, m}, std::move(out), grad);
  if (grad) {
    tape.record("slice_rows", [a, y, begin, m]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      auto da = a.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) da[begin * m + i] += dy[i];
    });
  }
  return y;
}

Tensor slice_cols(Tape& tape, const Tensor& a, std::size_t begin, std::size_t end) {
  require_defined("slice_cols", {&a});
  require_matrix("slice_cols", a);
  if (begin >= end || end > a.cols()) shape_error("slice_cols", {&a}, "column range out of bounds");
  const bool grad = needs_grad(tape, {&a});
  const std::size_t n = a.rows();
  const std::size_t m = a.cols();
  const std::size_t w = end - begin;
  const auto av = a.data();
  std::vector<double> out(n * w);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = av[i * m + begin + j];
  }
  Tensor y = make_result({n, w}, std::move(out), grad);
  if (grad) {
    tape.record("slice_cols", [a, y, begin, n, m, w]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      auto da = a.grad();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < w; ++j) da[i * m + begin + j] += dy[i * w + j];
      }
    });
  }
  return y;
}

Tensor relu(Tape& tape, const Tensor& a) {
  return unary_elementwise(
      "relu", tape, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double g) { return x > 0.0 ? g : 0.0; });
}

Tensor gelu(Tape& tape, const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return unary_elementwise(
      "gelu", tape, a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double g) {
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
        return g * (cdf + x * pdf);
      });
}

namespace {

void softmax_inplace(std::span<double> row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : row) mx = std::max(mx, x);
  if (!std::isfinite(mx)) {
    std::fill(row.begin(), row.end(), 0.0);
    return;
  }
  double total = 0.0;
  for (double& x : row) {
    x = std::exp(x - mx);
    total += x;
  }
  for (double& x : row) x /= total;
}

}  // namespace

Tensor softmax_rows(Tape& tape, const Tensor& a) {
  require_defined("softmax_rows", {&a});
  const bool grad = needs_grad(tape, {&a});
  const std::size_t n = a.rows();
  const std::size_t m = a.cols();
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < n; ++i) softmax_inplace(std::span(out).subspan(i * m, m));
  Tensor y = make_result(a.shape(), std::move(out), grad);
  if (grad) {
    tape.record("softmax_rows", [a, y, n, m]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      const auto p = y.data();
      auto da = a.grad();
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) dot += dy[i * m + j] * p[i * m + j];
        for (std::size_t j = 0; j < m; ++j) da[i * m + j] += p[i * m + j] * (dy[i * m + j] - dot);
      }
    });
  }
  return y;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined("layer_norm", {&x, &gain, &bias});
  if (x.rank() != 2 || gain.rank() != 1 || bias.rank() != 1 || gain.size() != x.cols() ||
      bias.size() != x.cols()) {
    shape_error("layer_norm", {&x, &gain, &bias});
  }
  const bool grad = needs_grad(tape, {&x, &gain, &bias});
  const std::size_t n = x.rows();
  const std::size_t m = x.cols();
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < m; ++j) mean += xv[i * m + j];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double c = xv[i * m + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(m);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      xhat[i * m + j] = (xv[i * m + j] - mean) * inv_std[i];
      out[i * m + j] = xhat[i * m + j] * gv[j] + bv[j];
    }
  }
  Tensor y = make_result(x.shape(), std::move(out), grad);
  if (grad) {
    tape.record("layer_norm", [x, gain, bias, y, xhat = std::move(xhat),
                               inv_std = std::move(inv_std), n, m]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      const auto gv = gain.data();
      if (gain.requires_grad()) {
        auto dg = gain.grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < m; ++j) dg[j] += dy[i * m + j] * xhat[i * m + j];
        }
      }
      if (bias.requires_grad()) {
        auto db = bias.grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < m; ++j) db[j] += dy[i * m + j];
        }
      }
      if (x.requires_grad()) {
        auto dx = x.grad();
        const double inv_m = 1.0 / static_cast<double>(m);
        for (std::size_t i = 0; i < n; ++i) {
          double sum_g = 0.0;
          double sum_gx = 0.0;
          for (std::size_t j = 0; j < m; ++j) {
            const double gh = dy[i * m + j] * gv[j];
            sum_g += gh;
            sum_gx += gh * xhat[i * m + j];
          }
          for (std::size_t j = 0; j < m; ++j) {
            const double gh = dy[i * m + j] * gv[j];
            dx[i * m + j] += inv_std[i] * (gh - inv_m * sum_g - xhat[i * m + j] * inv_m * sum_gx);
          }
        }
      }
    });
  }
  return y;
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> ids) {
  require_defined("embedding", {&table});
  require_matrix("embedding", table);
  if (ids.empty()) shape_error("embedding", {&table}, "empty id sequence");
  const std::size_t vocab = table.rows();
  const std::size_t d = table.cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range("embedding: token id " + std::to_string(id) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
  }
  const bool grad = needs_grad(tape, {&table});
  const auto tv = table.data();
  std::vector<double> out(ids.size() * d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[t] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(t * d));
  }
  Tensor y = make_result({ids.size(), d}, std::move(out), grad);
  if (grad) {
    tape.record("embedding", [table, y, ids = std::vector<int>(ids.begin(), ids.end()), d]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      auto dt = table.grad();
      for (std::size_t t = 0; t < ids.size(); ++t) {
        for (std::size_t j = 0; j < d; ++j) dt[ids[t] * d + j] += dy[t * d + j];
      }
    });
  }
  return y;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> targets) {
  require_defined("cross_entropy", {&logits});
  require_matrix("cross_entropy", logits);
  if (targets.size() != logits.rows()) {
    shape_error("cross_entropy", {&logits},
                "expected " + std::to_string(logits.rows()) + " targets, got " +
                    std::to_string(targets.size()));
  }
  const std::size_t n = logits.rows();
  const std::size_t v = logits.cols();
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw std::out_of_range("cross_entropy: target id " + std::to_string(t) + " outside " +
                              std::to_string(v) + " classes");
    }
  }
  const bool grad = needs_grad(tape, {&logits});
  std::vector<double> probs(logits.data().begin(), logits.data().end());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = std::span(probs).subspan(i * v, v);
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : row) mx = std::max(mx, x);
    double total = 0.0;
    for (double x : row) total += std::exp(x - mx);
    const double log_z = mx + std::log(total);
    loss += log_z - row[static_cast<std::size_t>(targets[i])];
    for (double& x : row) x = std::exp(x - log_z);
  }
  loss /= static_cast<double>(n);
  Tensor y = make_result({1}, {loss}, grad);
  if (grad) {
    tape.record("cross_entropy",
                [logits, y, probs = std::move(probs),
                 targets = std::vector<int>(targets.begin(), targets.end()), n, v]() mutable {
                  if (!y.has_grad()) return;
                  const double g = y.grad()[0] / static_cast<double>(n);
                  auto dl = logits.grad();
                  for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < v; ++j) dl[i * v + j] += g * probs[i * v + j];
                    dl[i * v + static_cast<std::size_t>(targets[i])] -= g;
                  }
                });
  }
  return y;
}

Tensor attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 bool causal, std::span<const std::uint8_t> key_valid) {
  require_defined("attention", {&q, &k, &v});
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || k.shape() != v.shape() ||
      q.cols() != k.cols() || n_heads == 0 || q.cols() % n_heads != 0) {
    shape_error("attention", {&q, &k, &v}, "heads=" + std::to_string(n_heads));
  }
  const std::size_t tq = q.rows();
  const std::size_t tk = k.rows();
  const std::size_t d = q.cols();
  const std::size_t dh = d / n_heads;
  if (!key_valid.empty() && key_valid.size() != tk) {
    shape_error("attention", {&q, &k, &v}, "key mask length mismatch");
  }
  const bool grad = needs_grad(tape, {&q, &k, &v});
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto qv = q.data();
  const auto kv = k.data();
  const auto vv = v.data();

  // probs[h][i][j]
  std::vector<double> probs(n_heads * tq * tk);
  std::vector<double> out(tq * d, 0.0);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < tq; ++i) {
      auto row = std::span(probs).subspan((h * tq + i) * tk, tk);
      for (std::size_t j = 0; j < tk; ++j) {
        const bool visible = (!causal || j <= i) && (key_valid.empty() || key_valid[j] != 0);
        if (!visible) {
          row[j] = -std::numeric_limits<double>::infinity();
          continue;
        }
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += qv[i * d + off + c] * kv[j * d + off + c];
        row[j] = dot * scale;
      }
      softmax_inplace(row);
      for (std::size_t j = 0; j < tk; ++j) {
        const double p = row[j];
        if (p == 0.0) continue;
        for (std::size_t c = 0; c < dh; ++c) out[i * d + off + c] += p * vv[j * d + off + c];
      }
    }
  }
  Tensor y = make_result({tq, d}, std::move(out), grad);
  if (grad) {
    tape.record("attention", [q, k, v, y, probs = std::move(probs), n_heads, tq, tk, d, dh,
                              scale]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      const auto qv = q.data();
      const auto kv = k.data();
      const auto vv = v.data();
      std::span<double> dq = q.requires_grad() ? q.grad() : std::span<double>{};
      std::span<double> dk = k.requires_grad() ? k.grad() : std::span<double>{};
      std::span<double> dv = v.requires_grad() ? v.grad() : std::span<double>{};
      std::vector<double> dp(tk);
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < tq; ++i) {
          const auto p = std::span<const double>(probs).subspan((h * tq + i) * tk, tk);
          double dot = 0.0;
          for (std::size_t j = 0; j < tk; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < dh; ++c) acc += dy[i * d + off + c] * vv[j * d + off + c];
            dp[j] = acc;
            dot += acc * p[j];
          }
          for (std::size_t j = 0; j < tk; ++j) {
            if (p[j] == 0.0) continue;
            if (!dv.empty()) {
              for (std::size_t c = 0; c < dh; ++c) dv[j * d + off + c] += p[j] * dy[i * d + off + c];
            }
            const double ds = p[j] * (dp[j] - dot) * scale;
            if (!dq.empty()) {
              for (std::size_t c = 0; c < dh; ++c) dq[i * d + off + c] += ds * kv[j * d + off + c];
            }
            if (!dk.empty()) {
              for (std::size_t c = 0; c < dh; ++c) dk[j * d + off + c] += ds * qv[i * d + off + c];
            }
          }
        }
      }
    });
  }
  return y;
}

}  // namespace ops

}  // namespace peftlab
