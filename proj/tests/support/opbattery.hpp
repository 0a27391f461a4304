#pragma once

#include "pace/rng.hpp"

namespace pace::testing {

struct BatteryResult {
  double worst_linear = 0.0;     // ops whose gradients are exact in central differences
  double worst_nonlinear = 0.0;  // everything else
  int instances = 0;
};

// Finite-difference checks over every differentiable primitive, per_op random
// instances each.
BatteryResult run_op_gradient_battery(int per_op, Rng& rng);

}  // namespace pace::testing
