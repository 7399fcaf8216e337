#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "usseg/tensor.hpp"

namespace usseg {

namespace detail {

/// One node of the define-by-run graph: a value, its accumulated gradient,
/// and a closure that pushes this node's gradient into its parents.
template <typename Scalar>
struct NodeT {
  TensorT<Scalar> value;
  TensorT<Scalar> grad;  // allocated on first contribution
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<NodeT>> parents;
  std::function<void(NodeT&)> backprop;  // empty for leaves and constants

  bool is_leaf() const { return !backprop; }

  void accumulate(const TensorT<Scalar>& g) {
    if (grad.numel() == 0) grad = TensorT<Scalar>(value.shape());
    grad.array() += g.array();
  }
};

}  // namespace detail

/// Handle to a graph node. Copies share the node; graphs are rebuilt per
/// step, so a handle is only valid as long as its graph is alive.
template <typename Scalar>
class DiffT {
 public:
  using scalar_type = Scalar;
  using TensorType = TensorT<Scalar>;
  using Node = detail::NodeT<Scalar>;

  DiffT() = default;
  explicit DiffT(TensorType value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static DiffT constant(TensorType value) { return DiffT(std::move(value), false); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t numel() const { return node_->value.numel(); }

  const TensorType& value() const { return node_->value; }
  TensorType& value() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }

  /// Accumulated gradient; zeros of the value shape when nothing has been
  /// propagated yet.
  const TensorType& grad() const {
    if (node_->grad.numel() == 0) node_->grad = TensorType(node_->value.shape());
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.numel() != 0; }

  void zero_grad() { node_->grad = TensorType(); }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using DiffTensor = DiffT<float>;
using DiffTensorD = DiffT<double>;

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; interior gradients are reset at the start of each sweep.
template <typename Scalar>
void backward(const DiffT<Scalar>& loss);

extern template void backward<float>(const DiffT<float>&);
extern template void backward<double>(const DiffT<double>&);

namespace detail {

/// Builds an op node. `backprop` sees the finished node and adds into the
/// parents' gradients (only accumulate on parents that require grad).
template <typename Scalar>
DiffT<Scalar> make_op(const char* op, TensorT<Scalar> value, std::vector<DiffT<Scalar>> parents,
                      std::function<void(NodeT<Scalar>&)> backprop) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  DiffT<Scalar> out(std::move(value), needs);
  if (needs) {
    NodeT<Scalar>& n = *out.node();
    n.op = op;
    n.parents.reserve(parents.size());
    for (auto& p : parents) n.parents.push_back(p.node());
    n.backprop = std::move(backprop);
  }
  return out;
}

}  // namespace detail

/// Constant graph input with the scalar type of an existing node, cast from
/// a float tensor. Lets generic code run under float and double graphs.
template <typename Scalar>
DiffT<Scalar> constant_like(const DiffT<Scalar>&, const Tensor& t) {
  if constexpr (std::is_same_v<Scalar, float>) return DiffT<Scalar>::constant(t);
  else return DiffT<Scalar>::constant(t.template cast<Scalar>());
}

}  // namespace usseg
