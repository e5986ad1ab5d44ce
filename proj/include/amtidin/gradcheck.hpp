#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "amtidin/ad/tape.hpp"

namespace amtidin::gradcheck {

// Relative error |analytic - numeric| / max(|analytic|, |numeric|, kRelFloor).
inline constexpr double kRelFloor = 1e-3;
inline constexpr double kOpTolerance = 1e-5;
inline constexpr double kEndToEndTolerance = 1e-4;

struct GradcheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  int coordinates = 0;
  bool pass = false;
};

using LossFn = std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)>;

// Central differences over every coordinate of every leaf. f must be a pure
// function of the leaf values (copy any mutable layer state inside f). The analytic
// gradient is compared against numeric_sign times the numeric derivative, so -1
// checks a deliberately reversed gradient.
GradcheckResult check_function(const std::string& name, const std::vector<ad::Mat<double>>& leaves,
                               const std::vector<ad::Shape>& shapes, const LossFn& f, double tolerance = kOpTolerance,
                               double eps = 1e-6, double numeric_sign = 1.0);

// One check per differentiable op.
std::vector<GradcheckResult> op_suite(std::uint64_t seed);
// Full AMTIDIN objective on a reduced architecture at `coords` random parameter
// coordinates, for the given discriminator output mode ("sigmoid" or "logit").
// The reference derivative is d(CE part) + s * d(adversarial part) with s = +1 for
// discriminator parameters and -1 elsewhere, which is what the gradient reversal
// layer makes the backward pass compute.
GradcheckResult end_to_end(std::uint64_t seed, int coords = 16, const std::string& mode = "sigmoid");

struct SuiteReport {
  std::vector<GradcheckResult> results;
  bool all_pass = false;
  double max_op_err = 0.0;
  double max_end_to_end_err = 0.0;
  std::string to_text() const;
};

SuiteReport run_suite(std::uint64_t seed);

}  // namespace amtidin::gradcheck
