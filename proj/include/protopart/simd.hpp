#pragma once
// Data-parallel inner loops used by the model and losses.
//
// Every kernel has a scalar reference implementation. Vectorized variants are
// compiled into separate translation units with their own target flags and are
// only selected after a runtime CPU check. PROTOPART_SIMD=scalar|avx2 forces a
// particular table (unknown or unsupported values fall back to the best one).

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace protopart::simd {

struct KernelTable {
    std::string_view name;
    double (*dot)(const double* a, const double* b, std::size_t n);
    double (*squared_distance)(const double* a, const double* b, std::size_t n);
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
    // sum_i mask[i] * v[i]^2 with mask in {0,1}
    double (*masked_sum_squares)(const double* v, const std::uint8_t* mask, std::size_t n);
};

const KernelTable& scalar_kernels() noexcept;

/// nullptr when the variant was not compiled in or the CPU lacks the ISA.
const KernelTable* avx2_kernels() noexcept;

/// The table chosen for this process. Selected once, on first use.
const KernelTable& active() noexcept;

inline double dot(std::span<const double> a, std::span<const double> b) {
    return active().dot(a.data(), b.data(), a.size());
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    return active().squared_distance(a.data(), b.data(), a.size());
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    active().axpy(alpha, x.data(), y.data(), x.size());
}

inline double masked_sum_squares(std::span<const double> v, std::span<const std::uint8_t> mask) {
    return active().masked_sum_squares(v.data(), mask.data(), v.size());
}

}  // namespace protopart::simd
