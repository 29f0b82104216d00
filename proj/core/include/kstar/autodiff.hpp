// Copyright 2026 The KStar Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Reverse-mode automatic differentiation over dense row-major float64
// tensors. Forward values are computed eagerly as operations are recorded;
// backward() replays the tape in reverse.
//
// Shape rules:
//   add, sub, mul, div        identical shapes
//   add_row(m, r)             m is (n, k), r is (k,): r is added to every row
//   matmul(a, b)              (n, k) x (k, m) -> (n, m)
//   block_matmul(a, x)        a is (n, n), x is (g*n, f): a applied to each
//                             consecutive block of n rows
//   group_mean_rows(x, n)     (g*n, f) -> (g, f), mean over each row block
//   sum, mean                 any shape -> scalar (shape {})
//   concat(xs, axis)          rank-1 along axis 0, rank-2 along axis 0 or 1
//   slice(x, axis, start, n)  same axis rules as concat
//   unary ops                 shape preserved

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace kstar::ad {

using Shape = std::vector<std::size_t>;

/// Fixed 64-byte alignment keeps vectorized kernels on the same code path
/// for every buffer, so results do not depend on where malloc placed them.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value) { return Tensor({}, {value}); }
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double item() const;

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  Storage data_;
};

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Matmul,
  Sin,
  Cos,
  Sqrt,
  Neg,
  Sum,
  Mean,
  Concat,
  Slice,
  Relu,
  LeakyRelu,
  Tanh,
  Square,
  Scale,
  AddRow,
  BlockMatmul,
  GroupMeanRows,
  Reshape,
};

inline constexpr double kLeakySlope = 0.01;

class Tape;

/// Per-node constants needed by backward rules.
struct OpAttrs {
  double scalar = 0.0;
  std::size_t axis = 0;
  std::size_t start = 0;
  std::size_t length = 0;
};

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(const Tape* tape, std::vector<Tensor> grads) : tape_(tape), grads_(std::move(grads)) {}

  /// Gradient for a node; zeros (of the node's shape) if nothing flowed to it.
  Tensor wrt(const Var& v) const;
  /// Raw per-node gradients; empty tensors mean zero.
  const std::vector<Tensor>& by_node() const { return grads_; }

 private:
  const Tape* tape_ = nullptr;
  std::vector<Tensor> grads_;
};

/// Append-only operation record. One tape per worker; not thread-safe.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  Op op(std::size_t id) const { return nodes_[id].op; }
  const std::vector<std::uint32_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

  /// Throws NotScalar unless `loss` has exactly one element.
  Gradients backward(const Var& loss) const;

  /// Low-level entry point used by the op functions below. Inputs must have
  /// been validated by the caller.
  Var record(Op op, std::vector<std::uint32_t> inputs, Tensor value, OpAttrs attrs = {});

 private:
  struct Node {
    Op op;
    std::vector<std::uint32_t> inputs;
    Tensor value;
    OpAttrs attrs;
  };
  std::vector<Node> nodes_;
};

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
Var sin(const Var& a);
Var cos(const Var& a);
Var sqrt(const Var& a);
Var neg(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var concat(std::span<const Var> parts, std::size_t axis);
Var concat(std::initializer_list<Var> parts, std::size_t axis);
Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length);
Var relu(const Var& a);
Var leaky_relu(const Var& a);
Var tanh(const Var& a);
Var square(const Var& a);
Var scale(const Var& a, double factor);
Var add_row(const Var& m, const Var& row);
Var block_matmul(const Var& a, const Var& x);
Var group_mean_rows(const Var& x, std::size_t group);
Var reshape(const Var& a, Shape shape);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

/// Scalar-valued function of one tensor input, recorded on the given tape.
using TapeFunction = std::function<Var(Tape&, const Var&)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// The step is `eps` rounded down to a power of two.
double check_gradient(const TapeFunction& f, const Tensor& x, double eps = 1e-6);

}  // namespace kstar::ad
