#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "protopart/simd.hpp"

namespace simd = protopart::simd;

namespace {

void check_tables_agree(const simd::KernelTable& ref, const simd::KernelTable& alt) {
    testkit::Rng rng(5);
    // lengths cover empty input, pure tails and several full vector widths
    for (int n = 0; n <= 67; ++n) {
        const auto a = testkit::random_vector(rng, n, -2.0, 2.0);
        const auto b = testkit::random_vector(rng, n, -2.0, 2.0);
        std::vector<std::uint8_t> m(n);
        for (int i = 0; i < n; ++i) m[i] = (i * 7 + n) % 3 == 0 ? 1 : 0;

        const double scale = 1.0 + n;
        CHECK(std::fabs(ref.dot(a.data(), b.data(), n) - alt.dot(a.data(), b.data(), n)) <= 1e-13 * scale);
        CHECK(std::fabs(ref.squared_distance(a.data(), b.data(), n) - alt.squared_distance(a.data(), b.data(), n)) <=
              1e-13 * scale);
        CHECK(std::fabs(ref.masked_sum_squares(a.data(), m.data(), n) -
                        alt.masked_sum_squares(a.data(), m.data(), n)) <= 1e-13 * scale);

        auto y1 = b, y2 = b;
        ref.axpy(0.37, a.data(), y1.data(), n);
        alt.axpy(0.37, a.data(), y2.data(), n);
        for (int i = 0; i < n; ++i) CHECK(std::fabs(y1[i] - y2[i]) <= 1e-15 * (1.0 + std::fabs(y1[i])));
    }
}

}  // namespace

TEST_SUITE("simd") {

TEST_CASE("scalar kernels match direct loops") {
    const auto& s = simd::scalar_kernels();
    testkit::Rng rng(3);
    const auto a = testkit::random_vector(rng, 13);
    const auto b = testkit::random_vector(rng, 13);
    double dot = 0.0, sq = 0.0;
    for (int i = 0; i < 13; ++i) {
        dot += a[i] * b[i];
        sq += (a[i] - b[i]) * (a[i] - b[i]);
    }
    CHECK(s.dot(a.data(), b.data(), 13) == doctest::Approx(dot).epsilon(1e-14));
    CHECK(s.squared_distance(a.data(), b.data(), 13) == doctest::Approx(sq).epsilon(1e-14));
}

TEST_CASE("avx2 kernels agree with the scalar reference") {
    const simd::KernelTable* avx = simd::avx2_kernels();
    if (avx == nullptr) {
        MESSAGE("AVX2 variant unavailable on this machine; equivalence not exercised");
        return;
    }
    check_tables_agree(simd::scalar_kernels(), *avx);
}

TEST_CASE("active table is one of the known variants") {
    const auto name = simd::active().name;
    CHECK((name == "scalar" || name == "avx2"));
}

}
