#include "protopart/simd.hpp"

#include <cstdlib>
#include <string_view>

namespace protopart::simd {

#if defined(PROTOPART_HAVE_AVX2)
const KernelTable& avx2_table_unchecked() noexcept;
#endif

namespace {

bool cpu_has_avx2_fma() noexcept {
#if defined(PROTOPART_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const KernelTable& select() noexcept {
    const KernelTable* best = avx2_kernels();
    if (const char* forced = std::getenv("PROTOPART_SIMD")) {
        const std::string_view want{forced};
        if (want == "scalar") return scalar_kernels();
        if (want == "avx2" && best != nullptr) return *best;
    }
    return best != nullptr ? *best : scalar_kernels();
}

}  // namespace

const KernelTable* avx2_kernels() noexcept {
#if defined(PROTOPART_HAVE_AVX2)
    static const bool supported = cpu_has_avx2_fma();
    return supported ? &avx2_table_unchecked() : nullptr;
#else
    return nullptr;
#endif
}

const KernelTable& active() noexcept {
    static const KernelTable& table = select();
    return table;
}

}  // namespace protopart::simd
