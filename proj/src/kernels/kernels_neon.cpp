// AArch64 only; NEON is part of the base ISA there.
#include "mclokd/kernels.hpp"

#include <arm_neon.h>

namespace mclokd::kernels::neon {
namespace {

double dot(const double* x, const double* y, std::size_t n) {
    float64x2_t acc0 = vdupq_n_f64(0.0);
    float64x2_t acc1 = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc0 = vaddq_f64(acc0, vmulq_f64(vld1q_f64(x + i), vld1q_f64(y + i)));
        acc1 = vaddq_f64(acc1, vmulq_f64(vld1q_f64(x + i + 2), vld1q_f64(y + i + 2)));
    }
    double s = vaddvq_f64(vaddq_f64(acc0, acc1));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
    const float64x2_t a = vdupq_n_f64(alpha);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vaddq_f64(vld1q_f64(y + i), vmulq_f64(a, vld1q_f64(x + i))));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void scal(double alpha, double* x, std::size_t n) {
    const float64x2_t a = vdupq_n_f64(alpha);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(x + i, vmulq_f64(vld1q_f64(x + i), a));
    for (; i < n; ++i) x[i] *= alpha;
}

void relu_forward(const double* x, double* y, std::size_t n) {
    const float64x2_t zero = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t v = vld1q_f64(x + i);
        uint64x2_t keep = vcgtq_f64(v, zero);
        vst1q_f64(y + i, vreinterpretq_f64_u64(vandq_u64(vreinterpretq_u64_f64(v), keep)));
    }
    for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(const double* y, const double* dy, double* dx, std::size_t n) {
    const float64x2_t zero = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        uint64x2_t keep = vcgtq_f64(vld1q_f64(y + i), zero);
        vst1q_f64(dx + i, vreinterpretq_f64_u64(vandq_u64(vreinterpretq_u64_f64(vld1q_f64(dy + i)), keep)));
    }
    for (; i < n; ++i) dx[i] = y[i] > 0.0 ? dy[i] : 0.0;
}

}  // namespace

const KernelTable& table() noexcept {
    static const KernelTable t{"neon", dot, axpy, scal, relu_forward, relu_backward};
    return t;
}

}  // namespace mclokd::kernels::neon
