#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "neurocell/errors.hpp"
#include "neurocell/tensor.hpp"

namespace neurocell {

/// Ordered record of executed operations for reverse-mode differentiation.
///
/// Operations append a record after computing their output, so records are
/// in topological order by construction. backward() walks them once, last to
/// first. A tape is single-writer: one forward/backward pass at a time.
template <typename T>
class Tape {
 public:
  struct Record {
    std::string op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    /// Reads output.grad() and accumulates into the inputs that require grad.
    std::function<void()> backward;
  };

  explicit Tape(bool enabled = true) : enabled_(enabled) {}

  /// A tape that never records; use for inference.
  static Tape no_grad() { return Tape(false); }

  bool enabled() const { return enabled_; }

  bool should_record(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!enabled_) return false;
    for (const Tensor<T>* t : inputs) {
      if (t && t->defined() && t->requires_grad()) return true;
    }
    return false;
  }

  void record(std::string op, std::vector<Tensor<T>> inputs, Tensor<T> output,
              std::function<void()> backward_fn) {
    records_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(backward_fn)});
  }

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }

  /// Record indices in the order the last backward() visited them.
  const std::vector<std::size_t>& last_visit_order() const { return visit_order_; }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor that
  /// requires grad. Gradients accumulate into existing buffers.
  void backward(Tensor<T> loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
      throw ContractError("backward() on a loss that was not produced by a recorded operation");
    }
    loss.ensure_grad()[0] += T(1);
    visit_order_.clear();
    for (std::size_t i = records_.size(); i-- > 0;) {
      Record& rec = records_[i];
      if (!rec.output.has_grad()) continue;  // not reachable from the loss
      visit_order_.push_back(i);
      rec.backward();
    }
  }

  /// Drops all records (and the activations they keep alive).
  void clear() { records_.clear(); }

 private:
  bool enabled_;
  std::vector<Record> records_;
  std::vector<std::size_t> visit_order_;
};

}  // namespace neurocell
