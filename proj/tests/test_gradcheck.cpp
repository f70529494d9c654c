#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "utsr/gradcheck.hpp"
#include "utsr/tensor.hpp"

using namespace utsr;

TEST_CASE("gradient battery") {
    const double tol = sizeof(real) == 8 ? 1e-5 : 1e-2;
    auto cases = gradcheck_battery(2024, tol);
    CHECK(cases.size() > 50);
    for (const auto& c : cases) {
        INFO(c.name << " max rel err " << c.max_rel_err);
        CHECK(c.pass);
    }
}
