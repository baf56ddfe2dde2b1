#include "normshape/sgd.hpp"

#include <cmath>
#include <string>

#include "normshape/error.hpp"

namespace normshape::nn {

void SgdSchedule::validate() const {
  if (!(lr0 > 0) || total_steps <= 0 || !(power > 0) || momentum < 0 || momentum >= 1) {
    throw Error(ErrorKind::InvalidArgument,
                "sgd schedule needs lr0 > 0, total_steps > 0, power > 0, momentum in [0,1)");
  }
}

double SgdSchedule::learning_rate(long step) const {
  if (step < 0 || step >= total_steps) {
    throw Error(ErrorKind::StepOverflow, "step " + std::to_string(step) + " outside [0, " +
                                             std::to_string(total_steps) + ")");
  }
  return lr0 * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total_steps), power);
}

template <typename T>
void sgd_step(std::span<Parameter<T>* const> params, const SgdSchedule& schedule, long step) {
  schedule.validate();
  const T lr = static_cast<T>(schedule.learning_rate(step));
  const T mom = static_cast<T>(schedule.momentum);
  for (Parameter<T>* p : params) {
    T* v = p->value.ptr();
    T* g = p->grad.ptr();
    T* m = p->momentum.ptr();
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      m[i] = mom * m[i] + g[i];
      v[i] -= lr * m[i];
      g[i] = T(0);
    }
  }
}

template void sgd_step<float>(std::span<Parameter<float>* const>, const SgdSchedule&, long);
template void sgd_step<double>(std::span<Parameter<double>* const>, const SgdSchedule&, long);

}  // namespace normshape::nn
