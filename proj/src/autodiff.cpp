#include "usseg/autodiff.hpp"

#include <stdexcept>
#include <unordered_set>
#include <vector>

namespace usseg {

template <typename Scalar>
void backward(const DiffT<Scalar>& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined tensor");
  if (loss.shape().numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + loss.shape().str());
  }

  using Node = detail::NodeT<Scalar>;
  Node* root = loss.node().get();

  // Post-order DFS over parent edges; reversing it gives an order where
  // every node is processed before the nodes it consumes.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* n;
    std::size_t next = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({root});
  seen.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].get();
      if (p && seen.insert(p).second) stack.push_back({p});
    } else {
      if (f.n->backprop) order.push_back(f.n);
      stack.pop_back();
    }
  }

  // Interior gradients are per-sweep scratch; leaf gradients accumulate
  // across sweeps until explicitly zeroed.
  for (Node* n : order) n->grad = TensorT<Scalar>();

  root->accumulate(TensorT<Scalar>(root->value.shape(), Scalar(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& n = **it;
    if (n.grad.numel() != 0) n.backprop(n);
  }
}

template void backward<float>(const DiffT<float>&);
template void backward<double>(const DiffT<double>&);

}  // namespace usseg
