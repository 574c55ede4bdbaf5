#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace peftlab {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

// Raised when operand shapes do not fit a primitive's signature.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Misuse of the autodiff API (e.g. backward from a non-scalar).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorStorage {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
};

/// Shared handle to a dense row-major array of doubles.
///
/// Copies of a Tensor alias the same storage; use clone() for a deep copy.
/// A default-constructed Tensor is "undefined" and is used throughout the
/// library as an optional slot.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor normal(Shape shape, double stddev, std::mt19937_64& rng,
                       bool requires_grad = false);
  static Tensor identity(std::size_t n);

  bool defined() const { return static_cast<bool>(storage_); }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data();
  std::span<const double> data() const;
  double& operator[](std::size_t i) { return data()[i]; }
  double operator[](std::size_t i) const { return data()[i]; }
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  // Gradient state belongs to the shared storage, so these work through
  // const handles (backward closures hold const copies of their operands).
  /// Gradient buffer, allocated (zero-filled) on first access.
  std::span<double> grad() const;
  void zero_grad() const;
  /// Adds `contribution` into the gradient when requires_grad is set.
  void accumulate_grad(std::span<const double> contribution) const;

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }
  bool bitwise_equal(const Tensor& other) const;

 private:
  std::shared_ptr<TensorStorage> storage_;
};

/// Ordered record of primitive operations for reverse-mode differentiation.
///
/// Operations register a backward closure when at least one operand
/// requires a gradient. backward() replays the closures in exact reverse
/// order of recording. A tape constructed with recording=false never stores
/// closures, which is the evaluation (no-grad) mode.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }
  const std::string& op_name(std::size_t i) const { return entries_[i].name; }

  void record(std::string name, std::function<void()> backward);

  /// Seeds d(output)/d(output) = 1 and runs every recorded closure backward.
  void backward(const Tensor& output);

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::string name;
    std::function<void()> backward;
  };
  bool recording_;
  std::vector<Entry> entries_;
};

namespace ops {

// Matrix operands are rank-2; "vec" operands are rank-1.

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
/// x[T,d1] · W[d2,d1]^T + b[d2]; `bias` may be undefined.
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor transpose(Tape& tape, const Tensor& a);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
/// a * s where s holds a single element.
Tensor mul_scalar(Tape& tape, const Tensor& a, const Tensor& s);

/// x[T,n] + v[n] broadcast over rows.
Tensor add_rowvec(Tape& tape, const Tensor& x, const Tensor& v);
/// x[T,n] ⊙ v[n] broadcast over rows.
Tensor mul_rowvec(Tape& tape, const Tensor& x, const Tensor& v);
/// m[d,r] · diag(s[r]).
Tensor scale_cols(Tape& tape, const Tensor& m, const Tensor& s);

Tensor sum(Tape& tape, const Tensor& a);
Tensor l1_norm(Tape& tape, const Tensor& a);
Tensor l2_norm(Tape& tape, const Tensor& a);
Tensor reshape(Tape& tape, const Tensor& a, Shape shape);
Tensor slice_rows(Tape& tape, const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(Tape& tape, const Tensor& a, std::size_t begin, std::size_t end);

Tensor relu(Tape& tape, const Tensor& a);
Tensor gelu(Tape& tape, const Tensor& a);
Tensor softmax_rows(Tape& tape, const Tensor& a);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

/// Rows of table[V,d] selected by ids.
Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> ids);
/// Mean token negative log-likelihood of logits[T,V] against targets.
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> targets);

/// Multi-head scaled dot-product attention over pre-projected q, k, v.
///
/// q is [Tq,d], k and v are [Tk,d]; d is split evenly into n_heads. With
/// `causal`, query i only sees keys j <= i. `key_valid`, when non-empty,
/// excludes keys whose flag is zero.
Tensor attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t n_heads, bool causal, std::span<const std::uint8_t> key_valid = {});

}  // namespace ops

}  // namespace peftlab
