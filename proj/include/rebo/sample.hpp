#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "rebo/tensor.hpp"

namespace rebo {

// Cohorts: labeled, in-distribution unlabeled, weak OOD (scene-block
// crops), strong OOD (rotated + heavily jittered blocks), perturbed-box
// OOD. The tags are ground truth for the weight-separation analyses.
enum class Cohort : std::uint8_t { L = 0, U = 1, W = 2, S = 3, O = 4 };

inline char cohort_letter(Cohort c) {
  switch (c) {
    case Cohort::L: return 'L';
    case Cohort::U: return 'U';
    case Cohort::W: return 'W';
    case Cohort::S: return 'S';
    case Cohort::O: return 'O';
  }
  throw std::invalid_argument("cohort_letter: bad cohort value");
}

inline Cohort cohort_from_letter(char c) {
  switch (c) {
    case 'L': return Cohort::L;
    case 'U': return Cohort::U;
    case 'W': return Cohort::W;
    case 'S': return Cohort::S;
    case 'O': return Cohort::O;
  }
  throw std::invalid_argument(std::string("cohort_from_letter: '") + c + "'");
}

constexpr int kNoLabel = -1;

struct Sample {
  std::int64_t id = 0;
  Tensor points;  // [N,3]
  int label = kNoLabel;
  Cohort cohort = Cohort::U;

  bool labeled() const { return label != kNoLabel; }
};

}  // namespace rebo
