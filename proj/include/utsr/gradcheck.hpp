#pragma once

#include <string>
#include <vector>

namespace utsr {

struct GradCheckCase {
    std::string name;
    double max_rel_err = 0;
    bool pass = false;
};

// Central-difference gradient checks for every differentiable op plus the
// composite blocks and losses (including total_loss on an 11^3 pair).
// tol is the max relative error allowed per case.
std::vector<GradCheckCase> gradcheck_battery(uint64_t seed, double tol);

}  // namespace utsr
