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

#include "kstar/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

#include "kstar/error.hpp"

namespace kstar::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
MutMap as_matrix(Tensor& t) { return MutMap(t.data().data(), t.rows(), t.cols()); }

Tape& tape_of(const Var& a) {
  if (!a.tape()) fail(ErrorCode::ShapeMismatch, "operation on a detached Var");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) fail(ErrorCode::ShapeMismatch, "operands live on different tapes");
  return tape_of(a);
}

std::uint32_t id32(const Var& v) { return static_cast<std::uint32_t>(v.id()); }

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::ShapeMismatch, std::string(op) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

template <class F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor out = x;
  for (double& v : out.data()) v = f(v);
  return out;
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(o[i], bd[i]);
  return out;
}

template <class F>
Var unary(Op op, const Var& a, F f) {
  return tape_of(a).record(op, {id32(a)}, map_unary(a.value(), f));
}

void check_axis(const Shape& s, std::size_t axis, const char* op) {
  if (s.empty() || s.size() > 2 || axis >= s.size()) {
    fail(ErrorCode::ShapeMismatch, std::string(op) + ": bad axis " + std::to_string(axis) + " for " + shape_string(s));
  }
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? ", " : "") << shape[i];
  if (shape.size() == 1) out << ',';
  out << ')';
  return out.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  for (std::size_t d : shape_) {
    if (d == 0) fail(ErrorCode::ShapeMismatch, "tensor dimensions must be positive: " + shape_string(shape_));
  }
  if (shape_size(shape_) != data_.size()) {
    fail(ErrorCode::ShapeMismatch,
         "shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

double Tensor::item() const {
  if (data_.size() != 1) fail(ErrorCode::NotScalar, "item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

const Tensor& Var::value() const { return tape_->value(id_); }

Tensor Gradients::wrt(const Var& v) const {
  if (v.id() < grads_.size() && !grads_[v.id()].empty()) return grads_[v.id()];
  return Tensor::zeros(tape_->value(v.id()).shape());
}

Var Tape::leaf(Tensor value) { return record(Op::Leaf, {}, std::move(value)); }

Var Tape::record(Op op, std::vector<std::uint32_t> inputs, Tensor value, OpAttrs attrs) {
  nodes_.push_back({op, std::move(inputs), std::move(value), attrs});
  return Var(this, nodes_.size() - 1);
}

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "add");
  return t.record(Op::Add, {id32(a), id32(b)}, map_binary(a.value(), b.value(), std::plus<>()));
}

Var sub(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "sub");
  return t.record(Op::Sub, {id32(a), id32(b)}, map_binary(a.value(), b.value(), std::minus<>()));
}

Var mul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "mul");
  return t.record(Op::Mul, {id32(a), id32(b)}, map_binary(a.value(), b.value(), std::multiplies<>()));
}

Var div(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "div");
  return t.record(Op::Div, {id32(a), id32(b)}, map_binary(a.value(), b.value(), std::divides<>()));
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    fail(ErrorCode::ShapeMismatch, "matmul: " + shape_string(sa) + " x " + shape_string(sb));
  }
  Tensor out = Tensor::zeros({sa[0], sb[1]});
  as_matrix(out).noalias() = as_matrix(a.value()) * as_matrix(b.value());
  return t.record(Op::Matmul, {id32(a), id32(b)}, std::move(out));
}

Var sin(const Var& a) { return unary(Op::Sin, a, [](double v) { return std::sin(v); }); }
Var cos(const Var& a) { return unary(Op::Cos, a, [](double v) { return std::cos(v); }); }
Var sqrt(const Var& a) { return unary(Op::Sqrt, a, [](double v) { return std::sqrt(v); }); }
Var neg(const Var& a) { return unary(Op::Neg, a, [](double v) { return -v; }); }
Var relu(const Var& a) { return unary(Op::Relu, a, [](double v) { return v > 0.0 ? v : 0.0; }); }
Var leaky_relu(const Var& a) {
  return unary(Op::LeakyRelu, a, [](double v) { return v > 0.0 ? v : kLeakySlope * v; });
}
Var tanh(const Var& a) { return unary(Op::Tanh, a, [](double v) { return std::tanh(v); }); }
Var square(const Var& a) { return unary(Op::Square, a, [](double v) { return v * v; }); }

Var scale(const Var& a, double factor) {
  return tape_of(a).record(Op::Scale, {id32(a)}, map_unary(a.value(), [&](double v) { return v * factor; }),
                           {.scalar = factor});
}

Var sum(const Var& a) {
  const auto d = a.value().data();
  return tape_of(a).record(Op::Sum, {id32(a)}, Tensor::scalar(std::accumulate(d.begin(), d.end(), 0.0)));
}

Var mean(const Var& a) {
  const auto d = a.value().data();
  const double s = std::accumulate(d.begin(), d.end(), 0.0);
  return tape_of(a).record(Op::Mean, {id32(a)}, Tensor::scalar(s / static_cast<double>(d.size())));
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) fail(ErrorCode::ShapeMismatch, "concat of zero tensors");
  Tape& t = tape_of(parts.front());
  const Shape& first = parts.front().shape();
  check_axis(first, axis, "concat");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::uint32_t> ids;
  for (const Var& p : parts) {
    if (p.tape() != &t) fail(ErrorCode::ShapeMismatch, "concat: operands live on different tapes");
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) fail(ErrorCode::ShapeMismatch, "concat: " + shape_string(s) + " vs " + shape_string(first));
    out_shape[axis] += s[axis];
    ids.push_back(id32(p));
  }
  Tensor out = Tensor::zeros(out_shape);
  if (axis == 0) {
    std::size_t offset = 0;
    for (const Var& p : parts) {
      const auto d = p.value().data();
      std::copy(d.begin(), d.end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset));
      offset += d.size();
    }
  } else {
    const std::size_t rows = out_shape[0];
    std::size_t col = 0;
    for (const Var& p : parts) {
      const Tensor& v = p.value();
      const std::size_t w = v.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(r * w), w,
                    out.data().begin() + static_cast<std::ptrdiff_t>(r * out_shape[1] + col));
      }
      col += w;
    }
  }
  return t.record(Op::Concat, std::move(ids), std::move(out), {.axis = axis});
}

Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  check_axis(s, axis, "slice");
  if (length == 0 || start + length > s[axis]) {
    fail(ErrorCode::ShapeMismatch, "slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                       ") out of range for " + shape_string(s));
  }
  Shape out_shape = s;
  out_shape[axis] = length;
  Tensor out = Tensor::zeros(out_shape);
  const Tensor& v = a.value();
  if (axis == 0) {
    const std::size_t row = s.size() == 2 ? s[1] : 1;
    std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(start * row), length * row, out.data().begin());
  } else {
    for (std::size_t r = 0; r < s[0]; ++r) {
      std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(r * s[1] + start), length,
                  out.data().begin() + static_cast<std::ptrdiff_t>(r * length));
    }
  }
  return tape_of(a).record(Op::Slice, {id32(a)}, std::move(out), {.axis = axis, .start = start, .length = length});
}

Var add_row(const Var& m, const Var& row) {
  Tape& t = tape_of(m, row);
  const Shape& sm = m.shape();
  if (sm.size() != 2 || row.shape() != Shape{sm[1]}) {
    fail(ErrorCode::ShapeMismatch, "add_row: " + shape_string(sm) + " + " + shape_string(row.shape()));
  }
  Tensor out = m.value();
  as_matrix(out).rowwise() += Eigen::Map<const Eigen::RowVectorXd>(row.value().data().data(), sm[1]);
  return t.record(Op::AddRow, {id32(m), id32(row)}, std::move(out));
}

Var block_matmul(const Var& a, const Var& x) {
  Tape& t = tape_of(a, x);
  const Shape& sa = a.shape();
  const Shape& sx = x.shape();
  if (sa.size() != 2 || sa[0] != sa[1] || sx.size() != 2 || sx[0] % sa[0] != 0) {
    fail(ErrorCode::ShapeMismatch, "block_matmul: " + shape_string(sa) + " x " + shape_string(sx));
  }
  const std::size_t n = sa[0], f = sx[1], groups = sx[0] / n;
  Tensor out = Tensor::zeros(sx);
  const auto A = as_matrix(a.value());
  for (std::size_t g = 0; g < groups; ++g) {
    ConstMap xb(x.value().data().data() + g * n * f, n, f);
    MutMap ob(out.data().data() + g * n * f, n, f);
    ob.noalias() = A * xb;
  }
  return t.record(Op::BlockMatmul, {id32(a), id32(x)}, std::move(out));
}

Var group_mean_rows(const Var& x, std::size_t group) {
  const Shape& s = x.shape();
  if (s.size() != 2 || group == 0 || s[0] % group != 0) {
    fail(ErrorCode::ShapeMismatch, "group_mean_rows: " + shape_string(s) + " by " + std::to_string(group));
  }
  const std::size_t groups = s[0] / group, f = s[1];
  Tensor out = Tensor::zeros({groups, f});
  const auto X = as_matrix(x.value());
  auto O = as_matrix(out);
  for (std::size_t g = 0; g < groups; ++g) {
    O.row(g) = X.middleRows(g * group, group).colwise().sum() / static_cast<double>(group);
  }
  return tape_of(x).record(Op::GroupMeanRows, {id32(x)}, std::move(out), {.length = group});
}

Var reshape(const Var& a, Shape shape) {
  if (shape_size(shape) != a.value().size()) {
    fail(ErrorCode::ShapeMismatch, "reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  auto d = a.value().data();
  return tape_of(a).record(Op::Reshape, {id32(a)}, Tensor(std::move(shape), {d.begin(), d.end()}));
}

Gradients Tape::backward(const Var& loss) const {
  if (loss.tape() != this) fail(ErrorCode::ShapeMismatch, "backward: loss lives on another tape");
  if (value(loss.id()).size() != 1) {
    fail(ErrorCode::NotScalar, "backward needs a scalar loss, got " + shape_string(value(loss.id()).shape()));
  }
  std::vector<Tensor> grads(nodes_.size());
  grads[loss.id()] = Tensor::filled(value(loss.id()).shape(), 1.0);

  auto slot = [&](std::uint32_t j) -> Tensor& {
    if (grads[j].empty()) grads[j] = Tensor::zeros(nodes_[j].value.shape());
    return grads[j];
  };
  // acc(j, f): grads[j][i] += f(i)
  auto acc = [&](std::uint32_t j, auto f) {
    auto d = slot(j).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += f(i);
  };

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    if (grads[i].empty()) continue;
    const Node& n = nodes_[i];
    const Tensor& g = grads[i];
    const auto gd = g.data();
    const auto& in = n.inputs;
    auto x = [&](std::size_t k) { return nodes_[in[k]].value.data(); };
    const auto y = n.value.data();
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Add:
        acc(in[0], [&](std::size_t k) { return gd[k]; });
        acc(in[1], [&](std::size_t k) { return gd[k]; });
        break;
      case Op::Sub:
        acc(in[0], [&](std::size_t k) { return gd[k]; });
        acc(in[1], [&](std::size_t k) { return -gd[k]; });
        break;
      case Op::Mul: {
        const auto a = x(0), b = x(1);
        acc(in[0], [&](std::size_t k) { return gd[k] * b[k]; });
        acc(in[1], [&](std::size_t k) { return gd[k] * a[k]; });
        break;
      }
      case Op::Div: {
        const auto a = x(0), b = x(1);
        acc(in[0], [&](std::size_t k) { return gd[k] / b[k]; });
        acc(in[1], [&](std::size_t k) { return -gd[k] * a[k] / (b[k] * b[k]); });
        break;
      }
      case Op::Matmul: {
        const auto G = as_matrix(g);
        const auto A = as_matrix(nodes_[in[0]].value);
        const auto B = as_matrix(nodes_[in[1]].value);
        as_matrix(slot(in[0])).noalias() += G * B.transpose();
        as_matrix(slot(in[1])).noalias() += A.transpose() * G;
        break;
      }
      case Op::Sin: {
        const auto a = x(0);
        acc(in[0], [&](std::size_t k) { return gd[k] * std::cos(a[k]); });
        break;
      }
      case Op::Cos: {
        const auto a = x(0);
        acc(in[0], [&](std::size_t k) { return -gd[k] * std::sin(a[k]); });
        break;
      }
      case Op::Sqrt:
        acc(in[0], [&](std::size_t k) { return gd[k] * 0.5 / y[k]; });
        break;
      case Op::Neg:
        acc(in[0], [&](std::size_t k) { return -gd[k]; });
        break;
      case Op::Sum:
        acc(in[0], [&](std::size_t) { return gd[0]; });
        break;
      case Op::Mean: {
        const double inv = 1.0 / static_cast<double>(nodes_[in[0]].value.size());
        acc(in[0], [&](std::size_t) { return gd[0] * inv; });
        break;
      }
      case Op::Concat: {
        if (n.attrs.axis == 0) {
          std::size_t offset = 0;
          for (std::uint32_t j : in) {
            acc(j, [&](std::size_t k) { return gd[offset + k]; });
            offset += nodes_[j].value.size();
          }
        } else {
          const std::size_t width = g.cols();
          std::size_t col = 0;
          for (std::uint32_t j : in) {
            const std::size_t w = nodes_[j].value.cols();
            acc(j, [&](std::size_t k) { return gd[(k / w) * width + col + k % w]; });
            col += w;
          }
        }
        break;
      }
      case Op::Slice: {
        Tensor& dst = slot(in[0]);
        const std::size_t start = n.attrs.start, len = n.attrs.length;
        if (n.attrs.axis == 0) {
          const std::size_t row = dst.rank() == 2 ? dst.cols() : 1;
          for (std::size_t k = 0; k < gd.size(); ++k) dst[start * row + k] += gd[k];
        } else {
          const std::size_t width = dst.cols();
          for (std::size_t k = 0; k < gd.size(); ++k) dst[(k / len) * width + start + k % len] += gd[k];
        }
        break;
      }
      case Op::Relu: {
        const auto a = x(0);
        acc(in[0], [&](std::size_t k) { return a[k] > 0.0 ? gd[k] : 0.0; });
        break;
      }
      case Op::LeakyRelu: {
        const auto a = x(0);
        acc(in[0], [&](std::size_t k) { return a[k] > 0.0 ? gd[k] : kLeakySlope * gd[k]; });
        break;
      }
      case Op::Tanh:
        acc(in[0], [&](std::size_t k) { return gd[k] * (1.0 - y[k] * y[k]); });
        break;
      case Op::Square: {
        const auto a = x(0);
        acc(in[0], [&](std::size_t k) { return 2.0 * a[k] * gd[k]; });
        break;
      }
      case Op::Scale:
        acc(in[0], [&](std::size_t k) { return n.attrs.scalar * gd[k]; });
        break;
      case Op::AddRow: {
        acc(in[0], [&](std::size_t k) { return gd[k]; });
        Tensor& dr = slot(in[1]);
        Eigen::Map<Eigen::RowVectorXd>(dr.data().data(), dr.size()) += as_matrix(g).colwise().sum();
        break;
      }
      case Op::BlockMatmul: {
        const auto A = as_matrix(nodes_[in[0]].value);
        const Tensor& xv = nodes_[in[1]].value;
        const std::size_t nn = A.rows(), f = xv.cols(), groups = xv.rows() / nn;
        auto dA = as_matrix(slot(in[0]));
        Tensor& dx = slot(in[1]);
        for (std::size_t b = 0; b < groups; ++b) {
          ConstMap gb(gd.data() + b * nn * f, nn, f);
          ConstMap xb(xv.data().data() + b * nn * f, nn, f);
          dA.noalias() += gb * xb.transpose();
          MutMap(dx.data().data() + b * nn * f, nn, f).noalias() += A.transpose() * gb;
        }
        break;
      }
      case Op::GroupMeanRows: {
        const std::size_t group = n.attrs.length, f = g.cols();
        const double inv = 1.0 / static_cast<double>(group);
        acc(in[0], [&](std::size_t k) { return gd[(k / f / group) * f + k % f] * inv; });
        break;
      }
      case Op::Reshape:
        acc(in[0], [&](std::size_t k) { return gd[k]; });
        break;
    }
  }
  return Gradients(this, std::move(grads));
}

double check_gradient(const TapeFunction& f, const Tensor& x, double eps) {
  Tape tape;
  const Var input = tape.leaf(x);
  const Var out = f(tape, input);
  const Tensor analytic = tape.backward(out).wrt(input);

  auto eval = [&](const Tensor& at) {
    Tape t;
    return f(t, t.leaf(at)).value().item();
  };
  // A power-of-two step keeps x +/- h exact, so only f's own rounding remains.
  const double h = std::exp2(std::floor(std::log2(eps)));
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor plus = x, minus = x;
    plus[i] += h;
    minus[i] -= h;
    const double numeric = (eval(plus) - eval(minus)) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace kstar::ad
