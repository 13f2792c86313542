#include <doctest.h>

#include "knnattn/verify.hpp"

using namespace knnattn;

TEST_CASE("verification suite passes at default tolerances") {
    verify::Options opt;
    opt.instances = 5;
    const auto results = verify::run_all(opt);
    CHECK(results.size() >= 14);
    for (const auto& r : results) {
        INFO(r.name, ": ", r.detail);
        CHECK(r.pass);
    }
    CHECK(verify::all_passed(results));
}

TEST_CASE("an impossible tolerance fails the gradient checks") {
    verify::Options opt;
    opt.instances = 2;
    opt.attention_grad_tol = 0.0;
    opt.model_grad_tol = 0.0;
    const auto results = verify::run_all(opt);
    CHECK(!verify::all_passed(results));
    bool grad_failed = false;
    for (const auto& r : results) {
        if ((r.name == "attention_backward_vs_fd" || r.name == "model_grad_vs_fd") && !r.pass) {
            grad_failed = true;
        }
    }
    CHECK(grad_failed);
}
