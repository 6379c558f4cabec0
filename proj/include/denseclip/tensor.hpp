#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "denseclip/errors.hpp"

namespace denseclip {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Storage is a row-major matrix: all leading dims collapse into rows, the last
// dim is the column count. Rank 0 and rank 1 tensors are a single row.
inline std::pair<Index, Index> matrix_extent(const Shape& shape) {
  if (shape.empty()) return {1, 1};
  Index rows = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
  return {rows, shape.back()};
}

template <typename Scalar>
struct TensorNode {
  Shape shape;
  RowMatrix<Scalar> value;
  RowMatrix<Scalar> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;

  bool has_grad() const { return grad.size() == value.size() && grad.rows() == value.rows(); }

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& delta) {
    if (!requires_grad) return;
    if (has_grad()) {
      grad += delta;
    } else {
      grad = delta;
    }
  }
};

template <typename Scalar>
class BasicTape;

// Handle to a shared node. Copies alias the same data, like a tensor handle in
// most autograd libraries; use clone() for an independent copy.
template <typename Scalar>
class BasicTensor {
 public:
  using scalar_type = Scalar;
  using Matrix = RowMatrix<Scalar>;
  using Node = TensorNode<Scalar>;

  BasicTensor() : node_(std::make_shared<Node>()) { node_->value = Matrix::Zero(1, 1); }

  BasicTensor(Shape shape, Matrix value, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    const auto [rows, cols] = matrix_extent(shape);
    if (value.rows() != rows || value.cols() != cols) {
      throw DimensionError("tensor shape " + to_string(shape) + " does not match storage " +
                           std::to_string(value.rows()) + "x" + std::to_string(value.cols()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const auto [rows, cols] = matrix_extent(shape);
    return BasicTensor(std::move(shape), Matrix::Zero(rows, cols), requires_grad);
  }

  static BasicTensor constant(Shape shape, Scalar v, bool requires_grad = false) {
    const auto [rows, cols] = matrix_extent(shape);
    return BasicTensor(std::move(shape), Matrix::Constant(rows, cols, v), requires_grad);
  }

  static BasicTensor scalar(Scalar v, bool requires_grad = false) {
    return BasicTensor(Shape{}, Matrix::Constant(1, 1, v), requires_grad);
  }

  // Builds a tensor from a flat row-major buffer.
  static BasicTensor from_data(Shape shape, const std::vector<Scalar>& data, bool requires_grad = false) {
    if (static_cast<Index>(data.size()) != numel(shape)) {
      throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                           to_string(shape));
    }
    const auto [rows, cols] = matrix_extent(shape);
    Matrix m(rows, cols);
    std::copy(data.begin(), data.end(), m.data());
    return BasicTensor(std::move(shape), std::move(m), requires_grad);
  }

  // 2-D convenience: rows x cols from a matrix expression.
  template <typename Derived>
  static BasicTensor from_matrix(const Eigen::MatrixBase<Derived>& m, bool requires_grad = false) {
    return BasicTensor(Shape{m.rows(), m.cols()}, Matrix(m), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const {
    return node_->shape.at(static_cast<std::size_t>(axis < 0 ? axis + rank() : axis));
  }
  Index size() const { return node_->value.size(); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Scalar* data() const { return node_->value.data(); }
  Scalar* mutable_data() { return node_->value.data(); }
  Scalar item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->value(0, 0);
  }
  std::vector<Scalar> to_vector() const { return {data(), data() + size()}; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return node_->leaf; }

  bool has_grad() const { return node_->has_grad(); }
  const Matrix& grad() const {
    if (!has_grad()) throw ContractError("tensor " + to_string(shape()) + " has no gradient");
    return node_->grad;
  }
  Matrix& mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad = Matrix::Zero(node_->value.rows(), node_->value.cols()); }
  void clear_grad() { node_->grad.resize(0, 0); }

  BasicTensor clone() const { return BasicTensor(shape(), value(), requires_grad()); }
  BasicTensor detach() const { return BasicTensor(shape(), value(), false); }

  const std::shared_ptr<Node>& node() const { return node_; }
  bool same_node(const BasicTensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Ordered record of differentiable ops for one forward pass. Each entry owns
// its inputs, its output and the rule that maps the output gradient onto the
// inputs. Entries are appended in evaluation order, so the record is
// topologically sorted by construction.
template <typename Scalar>
class BasicTape {
 public:
  using Tensor = BasicTensor<Scalar>;
  using Node = TensorNode<Scalar>;
  using Matrix = RowMatrix<Scalar>;
  using BackwardFn = std::function<void(const Matrix& grad_out)>;

  struct Entry {
    const char* op;
    std::vector<std::shared_ptr<Node>> inputs;
    std::shared_ptr<Node> output;
    BackwardFn backward;
  };

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  void push(Entry entry) { entries_.push_back(std::move(entry)); }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void reset() { entries_.clear(); }

  // Populates grad on every requires_grad leaf reachable from the loss.
  // Leaf gradients accumulate across calls; intermediate gradients are
  // recomputed from scratch each time.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    for (auto& e : entries_) e.output->grad.resize(0, 0);
    const auto& root = loss.node();
    if (!root->has_grad()) root->grad = Matrix::Zero(1, 1);
    root->grad(0, 0) += Scalar(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->output->has_grad()) continue;
      it->backward(it->output->grad);
    }
  }

  static BasicTape*& active() {
    thread_local BasicTape* tape = nullptr;
    return tape;
  }

 private:
  std::vector<Entry> entries_;
};

// Makes a tape the recording target for ops issued on this thread.
template <typename Scalar>
class BasicTapeScope {
 public:
  explicit BasicTapeScope(BasicTape<Scalar>& tape) : previous_(BasicTape<Scalar>::active()) {
    BasicTape<Scalar>::active() = &tape;
  }
  BasicTapeScope(const BasicTapeScope&) = delete;
  BasicTapeScope& operator=(const BasicTapeScope&) = delete;
  ~BasicTapeScope() { BasicTape<Scalar>::active() = previous_; }

 private:
  BasicTape<Scalar>* previous_;
};

// Suspends recording, e.g. for inference or finite-difference probes.
template <typename Scalar>
class BasicNoGradScope {
 public:
  BasicNoGradScope() : previous_(BasicTape<Scalar>::active()) { BasicTape<Scalar>::active() = nullptr; }
  BasicNoGradScope(const BasicNoGradScope&) = delete;
  BasicNoGradScope& operator=(const BasicNoGradScope&) = delete;
  ~BasicNoGradScope() { BasicTape<Scalar>::active() = previous_; }

 private:
  BasicTape<Scalar>* previous_;
};

// Creates the result of an op and, when a tape is active and any input needs
// a gradient, appends the op's gradient rule to the tape. The rule receives
// the output gradient and must accumulate into the inputs it captured.
template <typename Scalar>
BasicTensor<Scalar> record_op(const char* op, Shape shape, RowMatrix<Scalar> value,
                              std::initializer_list<BasicTensor<Scalar>> inputs,
                              typename BasicTape<Scalar>::BackwardFn backward) {
  BasicTensor<Scalar> out(std::move(shape), std::move(value), false);
  auto* tape = BasicTape<Scalar>::active();
  if (tape == nullptr) return out;
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  if (!needs_grad) return out;
  out.node()->requires_grad = true;
  out.node()->leaf = false;
  typename BasicTape<Scalar>::Entry entry{op, {}, out.node(), std::move(backward)};
  for (const auto& in : inputs) entry.inputs.push_back(in.node());
  tape->push(std::move(entry));
  return out;
}

template <typename Scalar>
void backward(const BasicTensor<Scalar>& loss) {
  auto* tape = BasicTape<Scalar>::active();
  if (tape == nullptr) throw ContractError("backward() called without an active tape");
  tape->backward(loss);
}

using Tensor = BasicTensor<double>;
using Tape = BasicTape<double>;
using TapeScope = BasicTapeScope<double>;
using NoGradScope = BasicNoGradScope<double>;
using Matrix = RowMatrix<double>;

}  // namespace denseclip
