#pragma once

#include <string>
#include <vector>

namespace framelet {

struct SelftestCheck {
  std::string name;
  bool pass = false;
  std::string detail;  // failure explanation, empty on pass
};

// Fast deterministic invariant sweep across every module: transform
// identities, mask arithmetic, sensitivity normalization, frame identities,
// perfect reconstruction, metric fixed points, exact lattice interpolation,
// optimizer determinism, and checkpoint round trips. An exception inside one
// check fails that check only. The whole suite runs in seconds.
std::vector<SelftestCheck> run_selftest();

// One "PASS <name>" or "FAIL <name> (<detail>)" line per check.
std::string selftest_to_text(const std::vector<SelftestCheck>& checks);

bool selftest_passed(const std::vector<SelftestCheck>& checks);

}  // namespace framelet
