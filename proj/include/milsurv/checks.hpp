#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "milsurv/gradcheck.hpp"

namespace milsurv {

enum class CheckScope { primitive, block, head };

std::string to_string(CheckScope scope);

struct SuiteEntry {
  std::string name;
  CheckScope scope = CheckScope::primitive;
  GradCheckReport report;
};

struct SuiteTolerances {
  double primitive = 1e-6;
  double head = 1e-4;  // also used for composite blocks
};

/// Finite-difference gradient checks in double precision over every
/// differentiable op, the attention blocks, and all four heads at reduced
/// sizes (m = 7, D = 16, H = 8, A = 4, B = 4).
std::vector<SuiteEntry> gradcheck_suite(std::uint64_t seed = 0, SuiteTolerances tolerances = {});

}  // namespace milsurv
