#pragma once

#include <span>

#include "normshape/tensor.hpp"

namespace normshape::nn {

/// SGD with momentum and polynomial learning-rate decay:
/// lr(t) = lr0 * (1 - t / total_steps)^power.
struct SgdSchedule {
  double lr0 = 1e-4;
  long total_steps = 1;
  double power = 0.9;
  double momentum = 0.9;

  void validate() const;
  /// Throws StepOverflow for t >= total_steps.
  double learning_rate(long step) const;
};

/// buf = momentum * buf + grad; value -= lr(step) * buf; grad = 0.
template <typename T>
void sgd_step(std::span<Parameter<T>* const> params, const SgdSchedule& schedule, long step);

}  // namespace normshape::nn
