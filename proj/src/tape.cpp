#include "sskd/tape.hpp"

#include "sskd/errors.hpp"

namespace sskd {

template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

template Tape<float>*& active_tape<float>();
template Tape<double>*& active_tape<double>();

template <typename T>
void Tape<T>::record(std::string op, std::vector<StoragePtr> inputs, StoragePtr output, BackwardFn backward) {
  if (consumed_) throw StateError("cannot record '" + op + "' on a consumed tape");
  nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) throw StateError("backward called twice on the same tape");
  if (loss.size() != 1) throw UsageError("backward needs a scalar loss, got shape " + to_string(loss.shape()));

  const auto& root = loss.storage();
  bool on_tape = false;
  for (const auto& node : nodes_) {
    if (node.output == root) {
      on_tape = true;
      break;
    }
  }
  if (!on_tape) throw UsageError("loss was not produced on this tape");

  root->ensure_grad()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not on a path to the loss
    it->backward(*it->output);
  }

  // Intermediate results keep no gradient once consumed; leaves (parameters,
  // inputs marked requires_grad) retain theirs.
  for (auto& node : nodes_) {
    if (node.output != root) node.output->grad.clear();
  }
  root->grad.clear();
  nodes_.clear();
  consumed_ = true;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace sskd
