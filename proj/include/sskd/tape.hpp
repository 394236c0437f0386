#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sskd/tensor.hpp"

namespace sskd {

// Append-only record of differentiable operations executed while the tape is
// active on the current thread. backward() walks the record in reverse once;
// afterwards the tape is consumed and releases its saved activations.
template <typename T>
class Tape {
 public:
  using StoragePtr = std::shared_ptr<detail::Storage<T>>;
  // Receives the output storage (with populated grad) and must accumulate
  // into the grads of inputs that require them.
  using BackwardFn = std::function<void(detail::Storage<T>& output)>;

  struct Node {
    std::string op;
    std::vector<StoragePtr> inputs;
    StoragePtr output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string op, std::vector<StoragePtr> inputs, StoragePtr output, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor.
  void backward(const Tensor<T>& loss);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

template <typename T>
Tape<T>*& active_tape();

// Installs a tape as the thread's active tape for the lifetime of the scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(active_tape<T>()) { active_tape<T>() = &tape; }
  ~TapeScope() { active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Suspends recording, e.g. for teacher forwards and evaluation.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape<T>()) { active_tape<T>() = nullptr; }
  ~NoGradScope() { active_tape<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace sskd
