#pragma once

namespace rebo {

// Instrumentation shared across the loss and training paths. The contract
// checks lean on these: transfer runs must report zero meta computations,
// warm-up must never evaluate a consistency loss.
struct Counters {
  long consistency_evals = 0;
  long hvp_evals = 0;
  long meta_steps = 0;
  long task_steps = 0;
};

}  // namespace rebo
