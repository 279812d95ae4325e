#ifndef KOALA_TAPE_HPP
#define KOALA_TAPE_HPP

#include <functional>
#include <vector>

#include "koala/tensor.hpp"

namespace koala {

// Reverse-mode tape. Ops append a backward closure when recording is wanted;
// backward() seeds the scalar loss with 1 and replays closures in reverse
// recorded order, accumulating into .grad of every tracked tensor.
//
// Single-threaded at the node level; node internals may parallelize as long
// as each accumulated element has a single writer.
template <typename T>
class TapeT {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  size_t size() const { return nodes_.size(); }

  // Accumulates gradients for every tracked antecedent of `loss`.
  // Repeated calls without zeroing accumulate additively.
  void backward(TensorT<T>& loss) {
    check_shape(loss.numel() == 1, "backward requires a scalar loss, got " + loss.shape().str());
    check_value(loss.tracked(), "loss is not connected to this tape");
    loss.ensure_grad();
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  // Frees all recorded nodes; leaf tensors (and their gradients) persist.
  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

using Tape = TapeT<float>;

}  // namespace koala

#endif  // KOALA_TAPE_HPP
