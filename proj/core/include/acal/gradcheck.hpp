#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "acal/tensor.hpp"

namespace acal {

using ParamMap = std::map<std::string, Tensor>;

struct FdOptions {
  double h = 1e-3;
  double tol = 1e-4;
  // Floor for the relative-error denominator; guards coordinates whose true
  // gradient is ~0, where the central difference is pure rounding noise.
  double denom_floor = 1e-4;
  // A coordinate whose one-sided derivatives disagree by more than
  // kink_abs + kink_rel * max(|left|,|right|) sits on a non-differentiable
  // point (relu corner, l1 tie, pool switch); it is reported but excluded
  // from pass/fail.
  double kink_abs = 0.05;
  double kink_rel = 0.25;
  // Cap on coordinates probed per parameter tensor, seeded subsample.
  // 0 means every coordinate.
  std::size_t max_coords_per_param = 0;
  std::uint64_t coord_seed = 0;
};

struct ParamCheck {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t worst_coord = 0;
  std::size_t coords_checked = 0;
  std::size_t kinks = 0;
  bool pass = true;
};

struct CheckReport {
  std::vector<ParamCheck> params;
  double tol = 0.0;
  bool pass() const;
  double max_rel_err() const;
  std::string summary() const;
};

// Central-difference oracle for reverse-mode gradients of a deterministic
// scalar function over named parameters. The analytic side rebuilds the
// graph with differentiable leaves; the numeric side perturbs plain values
// and never touches the graph. Throws ContractError when f is detected to
// be non-deterministic (two baseline evaluations disagree) and ValueError
// when h is not positive.
CheckReport finite_diff_check(const std::function<Tensor(const ParamMap&)>& f,
                              const ParamMap& params, const FdOptions& opts = {});

// A named gradcheck scenario: parameters plus the scalar composition under
// test.
struct OpCase {
  std::string name;
  ParamMap params;
  std::function<Tensor(const ParamMap&)> f;
};

// One scenario per registered tensor operation.
std::vector<OpCase> standard_op_cases(std::uint64_t seed);

// Scenarios driving each built network topology end to end. These use
// seeded coordinate subsampling via the options passed to the sweep.
std::vector<OpCase> network_topology_cases(std::uint64_t seed);

struct SweepResult {
  struct Entry {
    std::string name;
    CheckReport report;
  };
  std::vector<Entry> entries;
  bool pass() const;
};

SweepResult run_gradcheck_sweep(const std::vector<OpCase>& cases,
                                const FdOptions& opts);

}  // namespace acal
