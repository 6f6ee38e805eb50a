#include "psp/sgd.hpp"

#include <cmath>
#include <stdexcept>

namespace psp {

namespace {

void check_step_inputs(const Tensor& p, const Tensor& grad, SgdState& state,
                       const std::string& name) {
  if (!p.same_shape(grad))
    throw std::invalid_argument("sgd step on '" + name + "': grad shape " + grad.shape_str() +
                                " != param shape " + p.shape_str());
  if (state.velocity.empty()) state.velocity = Tensor(p.shape());
  if (!state.velocity.same_shape(p))
    throw std::invalid_argument("sgd step on '" + name + "': velocity shape mismatch");
  for (int64_t i = 0; i < p.numel(); ++i) {
    if (!std::isfinite(p[i]) || !std::isfinite(grad[i]))
      throw std::invalid_argument("sgd step on '" + name + "': non-finite input at index " +
                                  std::to_string(i));
  }
}

}  // namespace

void sgd_step_weight_decay(Tensor& p, const Tensor& grad, SgdState& state,
                           const std::string& name) {
  check_step_inputs(p, grad, state, name);
  const double mu = state.momentum, eta = state.learning_rate, le = state.lambda * state.learning_rate;
  for (int64_t i = 0; i < p.numel(); ++i) {
    const double v = mu * state.velocity[i] - eta * grad[i] - le * p[i];
    state.velocity[i] = v;
    p[i] += v;
  }
}

void sgd_step_l1(Tensor& p, const Tensor& grad, SgdState& state, const std::string& name) {
  check_step_inputs(p, grad, state, name);
  const double mu = state.momentum, eta = state.learning_rate, le = state.lambda * state.learning_rate;
  for (int64_t i = 0; i < p.numel(); ++i) {
    const double sign = p[i] > 0.0 ? 1.0 : (p[i] < 0.0 ? -1.0 : 0.0);
    const double v = mu * state.velocity[i] - eta * grad[i] - le * sign;
    state.velocity[i] = v;
    p[i] += v;
  }
}

}  // namespace psp
