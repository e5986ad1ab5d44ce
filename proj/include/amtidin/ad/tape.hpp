#pragma once

#include <Eigen/Core>

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "amtidin/common.hpp"

namespace amtidin::ad {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Logical shape. Stored matrices are 2-D:
//   {R, C}     -> R x C
//   {C, B, L}  -> C x (B*L), column b*L + l
//   {O, I, K}  -> O x (I*K) for conv weights, column i*K + k
//   {R}        -> R x 1
using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
Eigen::Index shape_rows(const Shape& s);
Eigen::Index shape_cols(const Shape& s);

template <typename S>
struct Parameter {
  std::string name;
  Shape shape;
  Mat<S> value;
  Mat<S> grad;  // same size as value; accumulated by Tape::backward

  Parameter() = default;
  Parameter(std::string n, Shape s) : name(std::move(n)), shape(std::move(s)) {
    value = Mat<S>::Zero(shape_rows(shape), shape_cols(shape));
    grad = Mat<S>::Zero(value.rows(), value.cols());
  }
  Eigen::Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename S>
class Tape;

// Handle to a tape node.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Mat<S>& value() const;
  const Mat<S>& grad() const;
  const Shape& shape() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  S item() const;  // value of a 1x1 node
  bool valid() const { return tape != nullptr && id >= 0; }
};

template <typename S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  struct Node {
    Mat<S> value;
    Mat<S> grad;  // empty until touched during backward
    Shape shape;
    bool requires_grad = false;
    std::vector<int> parents;
    Backward backward;
    Parameter<S>* param = nullptr;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf without gradient.
  Var<S> constant(Mat<S> value, Shape shape = {});
  // Leaf that receives a gradient (inputs under test).
  Var<S> input(Mat<S> value, Shape shape = {});
  // Leaf bound to a parameter. Repeated calls return the same node, so fan-out
  // across streams accumulates into one gradient.
  Var<S> param(Parameter<S>& p);

  // Interior node. requires_grad is inherited from the parents.
  Var<S> push(Mat<S> value, Shape shape, std::vector<int> parents, Backward backward);

  // Seeds d(loss)/d(loss) = 1, runs the reverse sweep and adds leaf gradients into
  // the bound parameters.
  void backward(Var<S> loss);

  Node& node(int id) { return nodes_.at(static_cast<std::size_t>(id)); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }
  bool requires_grad(int id) const { return node(id).requires_grad; }

  // Adds g into the gradient of node id (no-op for nodes without requires_grad).
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = node(id);
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }
  // Gradient buffer of node id, allocated as zeros on first use.
  Mat<S>& grad_buffer(int id);

  void clear();

  // When disabled, param() and input() yield constants and no backward closures are
  // recorded.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  bool grad_enabled_ = true;
  std::vector<Node> nodes_;
  std::unordered_map<Parameter<S>*, int> param_nodes_;
};

template <typename S>
const Mat<S>& Var<S>::value() const {
  return tape->node(id).value;
}
template <typename S>
const Mat<S>& Var<S>::grad() const {
  return tape->node(id).grad;
}
template <typename S>
const Shape& Var<S>::shape() const {
  return tape->node(id).shape;
}
template <typename S>
S Var<S>::item() const {
  const auto& v = value();
  if (v.size() != 1) throw ShapeError("item() on non-scalar of shape " + shape_str(shape()));
  return v(0, 0);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace amtidin::ad
