#pragma once

// Dense double-precision inner loops used by every layer and loss.
//
// Each primitive has a scalar reference implementation and, where the target
// supports it, a SIMD variant (AVX2 on x86-64, NEON on AArch64). One table is
// selected at process start; MCLOKD_KERNELS=scalar forces the reference path.
//
// Elementwise primitives (axpy, scal, relu*) are bitwise identical across
// variants. Reductions (dot) reassociate and agree only to rounding.

#include <cstddef>
#include <string_view>

namespace mclokd::kernels {

struct KernelTable {
    std::string_view name;
    /// sum_i x[i] * y[i]
    double (*dot)(const double* x, const double* y, std::size_t n);
    /// y[i] += alpha * x[i]
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
    /// x[i] *= alpha
    void (*scal)(double alpha, double* x, std::size_t n);
    /// y[i] = max(x[i], 0)
    void (*relu_forward)(const double* x, double* y, std::size_t n);
    /// dx[i] = y[i] > 0 ? dy[i] : 0
    void (*relu_backward)(const double* y, const double* dy, double* dx, std::size_t n);
};

const KernelTable& scalar_table() noexcept;

/// nullptr when the variant is not compiled in or the CPU lacks the feature.
const KernelTable* simd_table() noexcept;

/// The table chosen for this process.
const KernelTable& active() noexcept;

// Convenience wrappers over active().
inline double dot(const double* x, const double* y, std::size_t n) { return active().dot(x, y, n); }
inline void axpy(double a, const double* x, double* y, std::size_t n) { active().axpy(a, x, y, n); }
inline void scal(double a, double* x, std::size_t n) { active().scal(a, x, n); }

// Row-major GEMM built from the table primitives. All accumulate into C.

/// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(const KernelTable& t, std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c);
/// C[m x n] += A[m x k] * B[n x k]^T
void gemm_nt(const KernelTable& t, std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c);
/// C[m x n] += A[k x m]^T * B[k x n]
void gemm_tn(const KernelTable& t, std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c);

inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    gemm_nn(active(), m, n, k, a, b, c);
}
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    gemm_nt(active(), m, n, k, a, b, c);
}
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    gemm_tn(active(), m, n, k, a, b, c);
}

}  // namespace mclokd::kernels
