#include "mclokd/layers.hpp"

#include <algorithm>
#include <cmath>

#include "mclokd/error.hpp"
#include "mclokd/kernels.hpp"

namespace mclokd {

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
               std::size_t pad)
    : weight(out_channels * in_channels * kernel * kernel),
      bias(out_channels),
      in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      stride_(stride),
      pad_(pad) {
    if (in_ == 0 || out_ == 0 || kernel_ == 0 || stride_ == 0) throw InvalidInput("Conv2d: zero-sized configuration");
}

void Conv2d::init(Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_ * kernel_ * kernel_));
    for (double& v : weight.value) v = rng.normal(0.0, stddev);
    std::fill(bias.value.begin(), bias.value.end(), 0.0);
}

void Conv2d::im2col(const double* x, std::size_t h, std::size_t w, std::vector<double>& col) const {
    const std::size_t ho = out_extent(h), wo = out_extent(w);
    const std::size_t plane = ho * wo;
    col.assign(in_ * kernel_ * kernel_ * plane, 0.0);
    for (std::size_t ci = 0; ci < in_; ++ci) {
        const double* xc = x + ci * h * w;
        for (std::size_t ky = 0; ky < kernel_; ++ky) {
            for (std::size_t kx = 0; kx < kernel_; ++kx) {
                double* dst = col.data() + ((ci * kernel_ + ky) * kernel_ + kx) * plane;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) - static_cast<std::ptrdiff_t>(pad_);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * stride_ + kx) - static_cast<std::ptrdiff_t>(pad_);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        dst[oy * wo + ox] = xc[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)];
                    }
                }
            }
        }
    }
}

void Conv2d::col2im(const std::vector<double>& col, std::size_t h, std::size_t w, double* dx) const {
    const std::size_t ho = out_extent(h), wo = out_extent(w);
    const std::size_t plane = ho * wo;
    for (std::size_t ci = 0; ci < in_; ++ci) {
        double* dxc = dx + ci * h * w;
        for (std::size_t ky = 0; ky < kernel_; ++ky) {
            for (std::size_t kx = 0; kx < kernel_; ++kx) {
                const double* src = col.data() + ((ci * kernel_ + ky) * kernel_ + kx) * plane;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) - static_cast<std::ptrdiff_t>(pad_);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * stride_ + kx) - static_cast<std::ptrdiff_t>(pad_);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        dxc[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

Activation Conv2d::forward(const Activation& in) const {
    if (in.c != in_) throw InvalidInput("Conv2d::forward: channel mismatch");
    const std::size_t ho = out_extent(in.h), wo = out_extent(in.w);
    const std::size_t plane = ho * wo;
    const std::size_t patch = in_ * kernel_ * kernel_;
    Activation out(in.n, out_, ho, wo);
    std::vector<double> col;
    for (std::size_t s = 0; s < in.n; ++s) {
        im2col(in.sample(s), in.h, in.w, col);
        double* y = out.sample(s);
        for (std::size_t o = 0; o < out_; ++o) std::fill(y + o * plane, y + (o + 1) * plane, bias.value[o]);
        kernels::gemm_nn(out_, plane, patch, weight.value.data(), col.data(), y);
    }
    return out;
}

void Conv2d::backward(const Activation& in, const Activation& dout, Activation* din) {
    const std::size_t ho = out_extent(in.h), wo = out_extent(in.w);
    const std::size_t plane = ho * wo;
    const std::size_t patch = in_ * kernel_ * kernel_;
    if (dout.n != in.n || dout.c != out_ || dout.h != ho || dout.w != wo) {
        throw InvalidInput("Conv2d::backward: gradient shape mismatch");
    }
    if (din != nullptr) *din = Activation(in.n, in.c, in.h, in.w);
    std::vector<double> col;
    std::vector<double> dcol;
    for (std::size_t s = 0; s < in.n; ++s) {
        im2col(in.sample(s), in.h, in.w, col);
        const double* dy = dout.sample(s);
        for (std::size_t o = 0; o < out_; ++o) {
            double acc = 0.0;
            for (std::size_t p = 0; p < plane; ++p) acc += dy[o * plane + p];
            bias.grad[o] += acc;
        }
        kernels::gemm_nt(out_, patch, plane, dy, col.data(), weight.grad.data());
        if (din != nullptr) {
            dcol.assign(patch * plane, 0.0);
            kernels::gemm_tn(patch, plane, out_, weight.value.data(), dy, dcol.data());
            col2im(dcol, in.h, in.w, din->sample(s));
        }
    }
}

Linear::Linear(std::size_t in_features, std::size_t out_features)
    : weight(out_features * in_features), bias(out_features), in_(in_features), out_(out_features) {
    if (in_ == 0 || out_ == 0) throw InvalidInput("Linear: zero-sized configuration");
}

void Linear::init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    for (double& v : weight.value) v = rng.uniform(-bound, bound);
    for (double& v : bias.value) v = rng.uniform(-bound, bound);
}

std::vector<double> Linear::forward(std::span<const double> x, std::size_t rows) const {
    if (x.size() != rows * in_) throw InvalidInput("Linear::forward: input shape mismatch");
    std::vector<double> y(rows * out_);
    for (std::size_t r = 0; r < rows; ++r) std::copy(bias.value.begin(), bias.value.end(), y.begin() + r * out_);
    kernels::gemm_nt(rows, out_, in_, x.data(), weight.value.data(), y.data());
    return y;
}

std::vector<double> Linear::backward(std::span<const double> x, std::span<const double> dy, std::size_t rows,
                                     bool want_input_grad) {
    if (x.size() != rows * in_ || dy.size() != rows * out_) throw InvalidInput("Linear::backward: shape mismatch");
    for (std::size_t r = 0; r < rows; ++r) kernels::axpy(1.0, dy.data() + r * out_, bias.grad.data(), out_);
    kernels::gemm_tn(out_, in_, rows, dy.data(), x.data(), weight.grad.data());
    std::vector<double> dx;
    if (want_input_grad) {
        dx.assign(rows * in_, 0.0);
        kernels::gemm_nn(rows, in_, out_, dy.data(), weight.value.data(), dx.data());
    }
    return dx;
}

Activation relu(const Activation& x) {
    Activation y(x.n, x.c, x.h, x.w);
    kernels::active().relu_forward(x.data.data(), y.data.data(), x.data.size());
    return y;
}

Activation relu_backward(const Activation& y, const Activation& dy) {
    if (!y.same_shape(dy)) throw InvalidInput("relu_backward: shape mismatch");
    Activation dx(y.n, y.c, y.h, y.w);
    kernels::active().relu_backward(y.data.data(), dy.data.data(), dx.data.data(), y.data.size());
    return dx;
}

std::vector<double> global_avg_pool(const Activation& x) {
    const std::size_t plane = x.h * x.w;
    const double inv = 1.0 / static_cast<double>(plane);
    std::vector<double> out(x.n * x.c);
    for (std::size_t s = 0; s < x.n; ++s) {
        const double* xs = x.sample(s);
        for (std::size_t ch = 0; ch < x.c; ++ch) {
            double acc = 0.0;
            for (std::size_t p = 0; p < plane; ++p) acc += xs[ch * plane + p];
            out[s * x.c + ch] = acc * inv;
        }
    }
    return out;
}

Activation global_avg_pool_backward(std::span<const double> dy, std::size_t n, std::size_t c, std::size_t h,
                                    std::size_t w) {
    Activation dx(n, c, h, w);
    const std::size_t plane = h * w;
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t s = 0; s < n; ++s) {
        double* d = dx.sample(s);
        for (std::size_t ch = 0; ch < c; ++ch) {
            std::fill(d + ch * plane, d + (ch + 1) * plane, dy[s * c + ch] * inv);
        }
    }
    return dx;
}

std::vector<double> l2_normalize_rows(std::span<const double> x, std::size_t dim, std::vector<double>& norms) {
    const std::size_t rows = x.size() / dim;
    norms.assign(rows, 0.0);
    std::vector<double> y(x.begin(), x.end());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * dim;
        // Floor keeps an all-zero pre-projection finite; its output is then the zero vector.
        const double n = std::max(std::sqrt(kernels::dot(xr, xr, dim)), 1e-12);
        norms[r] = n;
        kernels::scal(1.0 / n, y.data() + r * dim, dim);
    }
    return y;
}

std::vector<double> l2_normalize_rows_backward(std::span<const double> y, std::span<const double> dy,
                                               std::span<const double> norms, std::size_t dim) {
    std::vector<double> dx(dy.begin(), dy.end());
    for (std::size_t r = 0; r < norms.size(); ++r) {
        const double* yr = y.data() + r * dim;
        double* dxr = dx.data() + r * dim;
        const double proj = kernels::dot(yr, dy.data() + r * dim, dim);
        kernels::axpy(-proj, yr, dxr, dim);
        kernels::scal(1.0 / norms[r], dxr, dim);
    }
    return dx;
}

}  // namespace mclokd
