#pragma once

// Minimal layers with explicit forward/backward passes over NCHW batches.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mclokd/rng.hpp"

namespace mclokd {

struct Param {
    std::vector<double> value;
    std::vector<double> grad;

    explicit Param(std::size_t n = 0) : value(n, 0.0), grad(n, 0.0) {}
    std::size_t size() const noexcept { return value.size(); }
};

/// Dense NCHW activation. A feature matrix is stored with h = w = 1.
struct Activation {
    std::size_t n = 0, c = 0, h = 0, w = 0;
    std::vector<double> data;

    Activation() = default;
    Activation(std::size_t n_, std::size_t c_, std::size_t h_, std::size_t w_)
        : n(n_), c(c_), h(h_), w(w_), data(n_ * c_ * h_ * w_, 0.0) {}

    std::size_t sample_size() const noexcept { return c * h * w; }
    double* sample(std::size_t i) { return data.data() + i * sample_size(); }
    const double* sample(std::size_t i) const { return data.data() + i * sample_size(); }
    bool same_shape(const Activation& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

/// k x k convolution with zero padding, via per-sample im2col.
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride, std::size_t pad);

    std::size_t in_channels() const noexcept { return in_; }
    std::size_t out_channels() const noexcept { return out_; }
    std::size_t out_extent(std::size_t extent) const noexcept { return (extent + 2 * pad_ - kernel_) / stride_ + 1; }

    /// He-normal weights, zero bias.
    void init(Rng& rng);

    Activation forward(const Activation& in) const;

    /// Accumulates weight/bias grads. Writes the input gradient when `din` is non-null.
    void backward(const Activation& in, const Activation& dout, Activation* din);

    Param weight;  // [out, in * k * k]
    Param bias;    // [out]

private:
    void im2col(const double* x, std::size_t h, std::size_t w, std::vector<double>& col) const;
    void col2im(const std::vector<double>& col, std::size_t h, std::size_t w, double* dx) const;

    std::size_t in_ = 0, out_ = 0, kernel_ = 3, stride_ = 1, pad_ = 1;
};

/// y = x W^T + b over row-major [rows x in] inputs.
class Linear {
public:
    Linear() = default;
    Linear(std::size_t in_features, std::size_t out_features);

    std::size_t in_features() const noexcept { return in_; }
    std::size_t out_features() const noexcept { return out_; }

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) for weights and bias.
    void init(Rng& rng);

    std::vector<double> forward(std::span<const double> x, std::size_t rows) const;

    /// Accumulates grads; returns dL/dx when `want_input_grad`.
    std::vector<double> backward(std::span<const double> x, std::span<const double> dy, std::size_t rows,
                                 bool want_input_grad);

    Param weight;  // [out, in]
    Param bias;    // [out]

private:
    std::size_t in_ = 0, out_ = 0;
};

Activation relu(const Activation& x);
/// dx = dy where y > 0.
Activation relu_backward(const Activation& y, const Activation& dy);

/// Mean over spatial positions: [n, c, h, w] -> row-major [n x c].
std::vector<double> global_avg_pool(const Activation& x);
Activation global_avg_pool_backward(std::span<const double> dy, std::size_t n, std::size_t c, std::size_t h,
                                    std::size_t w);

/// Row-wise L2 normalization. Returns the norms through `norms`.
std::vector<double> l2_normalize_rows(std::span<const double> x, std::size_t dim, std::vector<double>& norms);
std::vector<double> l2_normalize_rows_backward(std::span<const double> y, std::span<const double> dy,
                                               std::span<const double> norms, std::size_t dim);

}  // namespace mclokd
