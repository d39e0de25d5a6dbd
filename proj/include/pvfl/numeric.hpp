#pragma once

// Dense row-major matrices, a reverse-mode tape over them, and the small set
// of differentiable operations the disaggregation model is built from.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

namespace pvfl {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  void fill(double v);
  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  bool all_finite() const noexcept;
  std::string shape_string() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// A named trainable tensor with its gradient buffer.
struct ParamTensor {
  std::string name;
  Matrix value;
  Matrix grad;

  ParamTensor() = default;
  ParamTensor(std::string n, Matrix v);

  void zero_grad() { grad = Matrix(value.rows(), value.cols()); }
};

// Plain (non-recorded) kernels.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix softmax_rows(const Matrix& m);
Matrix relu(const Matrix& m);
Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b);

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
};

/// Reverse-mode recording of one forward pass. A tape supports exactly one
/// backward sweep; start a new tape for the next forward pass.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Registers a parameter leaf. The parameter's gradient is zeroed the first
  /// time it is seen by this tape; the backward sweep accumulates into it.
  Var parameter(ParamTensor& p);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  std::size_t node_count() const noexcept { return nodes_.size(); }

  /// Propagates d(loss)/d(node) to every recorded node and accumulates into
  /// the registered parameters. `loss` must be 1x1.
  void backward(Var loss);

  // Used by the operation implementations.
  using Backprop = std::function<void(Tape&, std::size_t self)>;
  Var record(Matrix value, Backprop backprop, bool requires_grad = true);
  Matrix& grad(std::size_t id);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Matrix& node_value(std::size_t id) const { return nodes_[id].value; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backprop backprop;
    bool requires_grad = true;
  };
  std::vector<Node> nodes_;
  std::unordered_set<const ParamTensor*> seen_params_;
  bool consumed_ = false;
};

// Recorded operations. Operands must live on the same tape.
Var affine(Var x, Var w, Var b);
Var matmul(Var a, Var b);
Var relu(Var x);
Var softmax_rows(Var x);
/// softmax(Q K^T / sqrt(d_k)) V. With `group_rows` > 0 the rows are split
/// into consecutive groups of that size and each group only attends within
/// itself, which lets a batch of independent token sets share one node.
Var scaled_dot_attention(Var q, Var k, Var v, std::size_t d_k, std::size_t group_rows = 0);
/// Rows offset, offset + stride, offset + 2*stride, ...
Var select_rows(Var x, std::size_t offset, std::size_t stride);
/// Mean of squared differences over every element, as a 1x1 node.
Var mse(Var prediction, const Matrix& target);
Var sum(Var x);

/// Central-difference gradient of `f` with respect to every coordinate of
/// `params`. `f` reads the current parameter values.
std::vector<Matrix> finite_difference_grad(const std::function<double()>& f,
                                           std::span<ParamTensor* const> params,
                                           double eps = 1e-4);

/// values <- values - learning_rate * grads.
void sgd_step(std::span<ParamTensor* const> params, double learning_rate);

/// Seeded random source with platform-independent draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t below(std::size_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

/// Mixes a master seed with stream identifiers into an independent seed.
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> stream);

}  // namespace pvfl
