#pragma once

#include <functional>
#include <string>
#include <vector>

#include "malle/tensor.hpp"

namespace malle {

class Tape;

/// Handle to a value recorded on a tape.
struct Val {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Append-only reverse-mode tape. Nodes are visited in strict reverse
/// insertion order during backward(); each node's backward_fn reads its own
/// gradient slot and accumulates into its parents' slots.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Val push(Tensor value, BackwardFn backward_fn = nullptr, const char* op = "") {
    ensure_finite(value, op[0] ? op : "tape");
    nodes_.push_back(Node{std::move(value), Tensor{}, std::move(backward_fn), op});
    return Val{int(nodes_.size()) - 1};
  }

  /// Leaf with no backward function; gradient still accumulates into its slot.
  Val leaf(Tensor value, const char* op = "leaf") { return push(std::move(value), nullptr, op); }

  const Tensor& value(Val v) const { return nodes_[size_t(v.id)].value; }

  /// Gradient slot, lazily materialized as zeros of the value's shape.
  Tensor& grad(Val v) {
    Node& n = nodes_[size_t(v.id)];
    if (n.grad.size() == 0) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
  }

  bool has_grad(Val v) const { return nodes_[size_t(v.id)].grad.size() != 0; }

  /// Runs reverse-mode accumulation from a scalar loss. Nodes never touched
  /// by the sweep keep empty gradient slots (read as zero via grad()).
  void backward(Val loss) {
    const Tensor& lv = value(loss);
    if (lv.size() != 1)
      throw ContractError("backward: loss must be scalar, got shape " + lv.shape().str());
    grad(loss)[0] = 1.0f;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

  void reset() { nodes_.clear(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until first accumulation
    BackwardFn backward;
    const char* op;
  };
  std::vector<Node> nodes_;
};

inline void accumulate(Tensor& slot, const Tensor& g) {
  ensure_same_shape(slot, g, "accumulate");
  float* d = slot.data();
  const float* s = g.data();
  for (std::int64_t i = 0; i < slot.size(); ++i) d[i] += s[i];
}

}  // namespace malle
