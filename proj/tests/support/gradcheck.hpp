#pragma once
// Analytic-vs-finite-difference gradient checks for the objective terms,
// shared by the unit tests and the acceptance runner.

#include <cstdint>
#include <string>
#include <vector>

namespace testkit {

struct GradCheck {
    std::string term;  // cross_entropy, cluster, separation, mask, remembering, l1_offclass
    std::string wrt;   // prototypes, addon, trunk, head
    int instances = 0;
    double max_relative_error = 0.0;
    int redrawn = 0;  // instances replaced because they sat within a step of a kink
};

/// Every (term, parameter group) pair the term depends on, each checked on
/// `instances` random tiny models (28x28 input, 7x7x4 latent, 2x2
/// prototypes) with central differences of step 1e-5. Instances where
/// steps 1e-5 and 5e-6 disagree straddle a non-differentiable point and are
/// redrawn, at most `instances` times per pair.
std::vector<GradCheck> run_gradient_checks(int instances, std::uint64_t seed);

}  // namespace testkit
