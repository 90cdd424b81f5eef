#include "mclokd/kernels.hpp"

#include <cstdlib>
#include <string_view>

namespace mclokd::kernels {

#if defined(MCLOKD_HAVE_AVX2)
namespace avx2 { const KernelTable& table() noexcept; }
#endif
#if defined(MCLOKD_HAVE_NEON)
namespace neon { const KernelTable& table() noexcept; }
#endif

const KernelTable* simd_table() noexcept {
#if defined(MCLOKD_HAVE_AVX2)
    static const bool ok = __builtin_cpu_supports("avx2");
    return ok ? &avx2::table() : nullptr;
#elif defined(MCLOKD_HAVE_NEON)
    return &neon::table();
#else
    return nullptr;
#endif
}

const KernelTable& active() noexcept {
    static const KernelTable* chosen = [] {
        const char* env = std::getenv("MCLOKD_KERNELS");
        if (env != nullptr && std::string_view(env) == "scalar") return &scalar_table();
        const KernelTable* simd = simd_table();
        return simd != nullptr ? simd : &scalar_table();
    }();
    return *chosen;
}

void gemm_nn(const KernelTable& t, std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            if (arow[p] != 0.0) t.axpy(arow[p], b + p * n, crow, n);
        }
    }
}

void gemm_nt(const KernelTable& t, std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += t.dot(arow, b + j * k, k);
    }
}

void gemm_tn(const KernelTable& t, std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            if (arow[i] != 0.0) t.axpy(arow[i], brow, c + i * n, n);
        }
    }
}

}  // namespace mclokd::kernels
