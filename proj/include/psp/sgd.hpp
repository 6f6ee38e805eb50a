#pragma once

#include <string>

#include "psp/tensor.hpp"

namespace psp {

/// Per-parameter SGD state. The velocity tensor always matches its parameter.
struct SgdState {
  Tensor velocity;              // delta(t); zeros until the first step
  double momentum = 0.9;        // mu
  double learning_rate = 0.1;   // eta
  double lambda = 1e-4;         // regularization strength
};

/// delta(t+1) = mu*delta(t) - eta*grad - lambda*eta*p ; p += delta(t+1)
void sgd_step_weight_decay(Tensor& p, const Tensor& grad, SgdState& state,
                           const std::string& name = "param");

/// delta(t+1) = mu*delta(t) - eta*grad - lambda*eta*sign(p) ; p += delta(t+1)
/// sign(0) is 0 so the penalty vanishes exactly at the origin.
void sgd_step_l1(Tensor& p, const Tensor& grad, SgdState& state,
                 const std::string& name = "param");

}  // namespace psp
