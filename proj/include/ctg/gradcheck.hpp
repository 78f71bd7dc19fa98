#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ctg/tape.hpp"
#include "ctg/tensor.hpp"

namespace ctg::autodiff {

// A scalar-valued function of one tensor, rebuilt on a fresh tape per
// evaluation. The tensor handed in is already attached as a tape input.
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

struct GradCheckResult {
    // max over coordinates of |analytic - fd| / max(1, |analytic|, |fd|)
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    bool pass = false;
    bool finite = true;
    std::string note;
};

// Compares the tape gradient of f at x0 against central finite differences.
// Non-finite evaluations are reported in `note` rather than thrown.
GradCheckResult grad_check(const ScalarFn& f, const Tensor& x0, double step = 1e-5,
                           double tol = 1e-4);

struct OpCheck {
    std::string op;
    double max_rel_err = 0.0;
    bool pass = false;
    bool skipped = false;  // STE: forward is piecewise constant by construction
    std::string note;
};

// Finite-difference battery over every differentiable op kind, `seeds`
// random instances each. ste_one_hot is reported as skipped: its forward is
// piecewise constant, so the identity backward cannot match finite
// differences by construction.
std::vector<OpCheck> op_gradcheck_battery(int seeds, double step = 1e-5,
                                          double tol = 1e-4,
                                          std::uint64_t master_seed = 1234);

}  // namespace ctg::autodiff
