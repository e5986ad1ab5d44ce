#include "amtidin/ad/tape.hpp"

#include <sstream>

namespace amtidin::ad {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t k = 0; k < s.size(); ++k) os << (k ? "," : "") << s[k];
  os << ")";
  return os.str();
}

Eigen::Index shape_rows(const Shape& s) {
  if (s.empty()) return 1;
  return s[0];
}

Eigen::Index shape_cols(const Shape& s) {
  Eigen::Index c = 1;
  for (std::size_t k = 1; k < s.size(); ++k) c *= s[k];
  return c;
}

template <typename S>
Var<S> Tape<S>::constant(Mat<S> value, Shape shape) {
  if (shape.empty()) shape = {static_cast<int>(value.rows()), static_cast<int>(value.cols())};
  if (shape_rows(shape) != value.rows() || shape_cols(shape) != value.cols())
    throw ShapeError("constant: shape " + shape_str(shape) + " does not match storage " +
                     std::to_string(value.rows()) + "x" + std::to_string(value.cols()));
  Node n;
  n.value = std::move(value);
  n.shape = std::move(shape);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename S>
Var<S> Tape<S>::input(Mat<S> value, Shape shape) {
  auto v = constant(std::move(value), std::move(shape));
  node(v.id).requires_grad = grad_enabled_;
  return v;
}

template <typename S>
Var<S> Tape<S>::param(Parameter<S>& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
  auto v = input(p.value, p.shape);
  node(v.id).param = &p;
  param_nodes_[&p] = v.id;
  return v;
}

template <typename S>
Var<S> Tape<S>::push(Mat<S> value, Shape shape, std::vector<int> parents, Backward backward) {
  if (shape_rows(shape) != value.rows() || shape_cols(shape) != value.cols())
    throw ShapeError("push: shape " + shape_str(shape) + " does not match storage " + std::to_string(value.rows()) +
                     "x" + std::to_string(value.cols()));
  Node n;
  n.value = std::move(value);
  n.shape = std::move(shape);
  for (int p : parents) n.requires_grad = n.requires_grad || node(p).requires_grad;
  n.parents = std::move(parents);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename S>
Mat<S>& Tape<S>::grad_buffer(int id) {
  Node& n = node(id);
  if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

template <typename S>
void Tape<S>::backward(Var<S> loss) {
  if (loss.tape != this) throw std::invalid_argument("backward: variable belongs to another tape");
  if (loss.value().size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!node(loss.id).requires_grad) return;
  node(loss.id).grad = Mat<S>::Ones(1, 1);
  // Nodes are appended in topological order, so a reverse index sweep suffices.
  for (int id = loss.id; id >= 0; --id) {
    Node& n = node(id);
    if (n.grad.size() == 0 || !n.requires_grad) continue;
    if (n.backward) n.backward(*this, id);
  }
  for (auto& n : nodes_)
    if (n.param != nullptr && n.grad.size() != 0) n.param->grad += n.grad;
}

template <typename S>
void Tape<S>::clear() {
  nodes_.clear();
  param_nodes_.clear();
}

template class Tape<float>;
template class Tape<double>;

}  // namespace amtidin::ad
