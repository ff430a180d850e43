#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pmedit {

struct VerifyConfig {
  std::uint64_t seed = 20240501;
  // Perturbs one computed delta by 1e-3 inside the reduction check; used to
  // prove the suite actually fails when an invariant breaks.
  bool inject_fault = false;
};

struct VerifyCheck {
  std::string name;
  bool pass = false;
  std::string detail;  // deterministic, goes into the summary verbatim
};

struct VerifyReport {
  std::vector<VerifyCheck> checks;
  bool all_pass = false;
  std::uint64_t seed = 0;

  // One line per check plus a tail line; bit-identical across runs with the
  // same config.
  std::string summary() const;
};

// The full solver-vs-oracle and invariant suite. Never runs inside timed
// sweeps; the CLI maps all_pass to exit status.
VerifyReport run_verify(const VerifyConfig& config);

}  // namespace pmedit
