#include <doctest.h>

#include "gradcheck.hpp"

TEST_SUITE("gradients") {

TEST_CASE("analytic gradients match central differences") {
    const auto checks = testkit::run_gradient_checks(20, 77);
    CHECK(checks.size() == 17);
    for (const auto& c : checks) {
        INFO(c.term << " w.r.t. " << c.wrt << ": max relative error " << c.max_relative_error);
        CHECK(c.max_relative_error < 1e-4);
    }
}

}
