#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "fdiff/tensor.hpp"

namespace fdiff {

enum class BnMode { train, eval };

namespace detail {

// Valid output range [o_begin, o_end) so that o*stride + k_off - pad stays
// inside [0, in_dim), clipped against [0, out_dim).
inline void conv_out_range(int k_off, int pad, int stride, int in_dim, int out_dim,
                           int& o_begin, int& o_end) {
    const int shift = k_off - pad;
    int lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
    int hi = (in_dim - 1 - shift) / stride; // inclusive
    if (in_dim - 1 - shift < 0) hi = -1;
    o_begin = std::max(0, lo);
    o_end = std::min(out_dim - 1, hi) + 1;
    if (o_end < o_begin) o_end = o_begin;
}

} // namespace detail

/// 3D cross-correlation. x: [C_in,D,H,W], w: [C_out,C_in,k,k,k], bias: [C_out]
/// (may be undefined for none). Cubic kernel with odd k; same stride/padding
/// on all spatial axes.
inline Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias,
                     int stride = 1, int padding = 0) {
    if (x.ndim() != 4) throw InvalidShape("conv3d: input must be [C,D,H,W], got " + shape_str(x.shape()));
    if (w.ndim() != 5) throw InvalidShape("conv3d: weight must be [Co,Ci,k,k,k], got " + shape_str(w.shape()));
    const int c_out = w.dim(0), c_in = w.dim(1), k = w.dim(2);
    if (w.dim(3) != k || w.dim(4) != k) throw InvalidShape("conv3d: kernel must be cubic");
    if (k % 2 == 0) throw InvalidShape("conv3d: kernel size must be odd");
    if (x.dim(0) != c_in)
        throw ShapeMismatch("conv3d: input channels " + std::to_string(x.dim(0)) +
                            " vs weight " + std::to_string(c_in));
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != c_out))
        throw ShapeMismatch("conv3d: bias must be [C_out]");
    if (stride < 1 || padding < 0) throw InvalidShape("conv3d: bad stride/padding");

    const int D = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Do = (D + 2 * padding - k) / stride + 1;
    const int Ho = (H + 2 * padding - k) / stride + 1;
    const int Wo = (W + 2 * padding - k) / stride + 1;
    if (Do < 1 || Ho < 1 || Wo < 1) throw InvalidShape("conv3d: output would be empty");

    auto result = detail::make_result({c_out, Do, Ho, Wo},
                                      static_cast<std::size_t>(c_out) * Do * Ho * Wo);
    const double* xv = x.data();
    const double* wv = w.data();
    double* ov = result->value.data();

    const std::int64_t out_sp = static_cast<std::int64_t>(Do) * Ho * Wo;
    for (int oc = 0; oc < c_out; ++oc) {
        const double b = bias.defined() ? bias.data()[oc] : 0.0;
        std::fill(ov + oc * out_sp, ov + (oc + 1) * out_sp, b);
    }
    for (int oc = 0; oc < c_out; ++oc) {
        for (int ic = 0; ic < c_in; ++ic) {
            const double* xc = xv + static_cast<std::int64_t>(ic) * D * H * W;
            for (int kz = 0; kz < k; ++kz) {
                int z0, z1;
                detail::conv_out_range(kz, padding, stride, D, Do, z0, z1);
                for (int ky = 0; ky < k; ++ky) {
                    int y0, y1;
                    detail::conv_out_range(ky, padding, stride, H, Ho, y0, y1);
                    for (int kx = 0; kx < k; ++kx) {
                        int x0, x1;
                        detail::conv_out_range(kx, padding, stride, W, Wo, x0, x1);
                        const double wgt = wv[(((static_cast<std::int64_t>(oc) * c_in + ic) * k + kz) * k + ky) * k + kx];
                        if (wgt == 0.0) continue;
                        for (int oz = z0; oz < z1; ++oz) {
                            const int iz = oz * stride + kz - padding;
                            for (int oy = y0; oy < y1; ++oy) {
                                const int iy = oy * stride + ky - padding;
                                double* orow = ov + ((static_cast<std::int64_t>(oc) * Do + oz) * Ho + oy) * Wo;
                                const double* xrow = xc + (static_cast<std::int64_t>(iz) * H + iy) * W + (kx - padding);
                                for (int ox = x0; ox < x1; ++ox)
                                    orow[ox] += wgt * xrow[ox * stride];
                            }
                        }
                    }
                }
            }
        }
    }

    std::vector<std::shared_ptr<detail::Node>> parents{x.node(), w.node()};
    if (bias.defined()) parents.push_back(bias.node());
    detail::attach(result, std::move(parents),
                   [c_out, c_in, k, stride, padding, D, H, W, Do, Ho, Wo](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        px.ensure_grad();
        pw.ensure_grad();
        const double* g = self.grad.data();
        const std::int64_t out_sp = static_cast<std::int64_t>(Do) * Ho * Wo;
        if (self.parents.size() > 2) {
            auto& pb = *self.parents[2];
            pb.ensure_grad();
            for (int oc = 0; oc < c_out; ++oc) {
                double acc = 0.0;
                const double* gc = g + oc * out_sp;
                for (std::int64_t i = 0; i < out_sp; ++i) acc += gc[i];
                pb.grad[oc] += acc;
            }
        }
        for (int oc = 0; oc < c_out; ++oc) {
            for (int ic = 0; ic < c_in; ++ic) {
                const double* xc = px.value.data() + static_cast<std::int64_t>(ic) * D * H * W;
                double* gxc = px.grad.data() + static_cast<std::int64_t>(ic) * D * H * W;
                for (int kz = 0; kz < k; ++kz) {
                    int z0, z1;
                    detail::conv_out_range(kz, padding, stride, D, Do, z0, z1);
                    for (int ky = 0; ky < k; ++ky) {
                        int y0, y1;
                        detail::conv_out_range(ky, padding, stride, H, Ho, y0, y1);
                        for (int kx = 0; kx < k; ++kx) {
                            int x0, x1;
                            detail::conv_out_range(kx, padding, stride, W, Wo, x0, x1);
                            const std::int64_t widx =
                                (((static_cast<std::int64_t>(oc) * c_in + ic) * k + kz) * k + ky) * k + kx;
                            const double wgt = pw.value[widx];
                            double wacc = 0.0;
                            for (int oz = z0; oz < z1; ++oz) {
                                const int iz = oz * stride + kz - padding;
                                for (int oy = y0; oy < y1; ++oy) {
                                    const int iy = oy * stride + ky - padding;
                                    const double* grow = g + ((static_cast<std::int64_t>(oc) * Do + oz) * Ho + oy) * Wo;
                                    const std::int64_t base = (static_cast<std::int64_t>(iz) * H + iy) * W + (kx - padding);
                                    const double* xrow = xc + base;
                                    double* gxrow = gxc + base;
                                    for (int ox = x0; ox < x1; ++ox) {
                                        wacc += grow[ox] * xrow[ox * stride];
                                        gxrow[ox * stride] += wgt * grow[ox];
                                    }
                                }
                            }
                            pw.grad[widx] += wacc;
                        }
                    }
                }
            }
        }
    });
    return Tensor::wrap(result);
}

/// Batch-normalization state for one [C, ...] activation site. Running stats
/// are plain (no-grad) tensors so checkpoints can carry them.
struct BatchNorm3d {
    Tensor gamma, beta;              // learnable affine, [C]
    Tensor running_mean, running_var; // state, [C]
    double eps = 1e-5;
    double momentum = 0.1;

    BatchNorm3d() = default;
    explicit BatchNorm3d(int channels)
        : gamma(Tensor::ones({channels})), beta(Tensor::zeros({channels})),
          running_mean(Tensor::zeros({channels})), running_var(Tensor::ones({channels})) {
        gamma.set_requires_grad();
        beta.set_requires_grad();
    }

    int channels() const { return gamma.dim(0); }
};

/// Per-channel normalization over all trailing dims. Train mode uses batch
/// statistics (biased variance) and updates running stats (unbiased variance,
/// momentum blend); eval mode normalizes with the running stats.
inline Tensor batchnorm3d(const Tensor& x, BatchNorm3d& bn, BnMode mode) {
    if (x.ndim() < 2) throw InvalidShape("batchnorm3d: need [C, ...], got " + shape_str(x.shape()));
    const int C = x.dim(0);
    if (C != bn.channels())
        throw ShapeMismatch("batchnorm3d: " + std::to_string(C) + " channels vs params " +
                            std::to_string(bn.channels()));
    const std::int64_t n = x.numel() / C;

    std::vector<double> mean(C), invstd(C);
    if (mode == BnMode::train) {
        if (n < 2)
            throw DegenerateBatch("batchnorm3d: variance undefined over a single element per channel");
        for (int c = 0; c < C; ++c) {
            const double* xc = x.data() + c * n;
            double m = 0.0;
            for (std::int64_t i = 0; i < n; ++i) m += xc[i];
            m /= static_cast<double>(n);
            double v = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                const double d = xc[i] - m;
                v += d * d;
            }
            v /= static_cast<double>(n);
            mean[c] = m;
            invstd[c] = 1.0 / std::sqrt(v + bn.eps);
            bn.running_mean.data()[c] =
                (1.0 - bn.momentum) * bn.running_mean.data()[c] + bn.momentum * m;
            bn.running_var.data()[c] =
                (1.0 - bn.momentum) * bn.running_var.data()[c] +
                bn.momentum * v * static_cast<double>(n) / static_cast<double>(n - 1);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[c] = bn.running_mean.data()[c];
            invstd[c] = 1.0 / std::sqrt(bn.running_var.data()[c] + bn.eps);
        }
    }

    auto result = detail::make_result(x.shape(), static_cast<std::size_t>(x.numel()));
    for (int c = 0; c < C; ++c) {
        const double* xc = x.data() + c * n;
        double* oc = result->value.data() + c * n;
        const double g = bn.gamma.data()[c], b = bn.beta.data()[c];
        const double m = mean[c], is = invstd[c];
        for (std::int64_t i = 0; i < n; ++i) oc[i] = g * (xc[i] - m) * is + b;
    }
    check_finite(Tensor::wrap(result), "batchnorm3d");

    const bool train = mode == BnMode::train;
    detail::attach(result, {x.node(), bn.gamma.node(), bn.beta.node()},
                   [C, n, mean, invstd, train](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        px.ensure_grad();
        pg.ensure_grad();
        pb.ensure_grad();
        const double* g = self.grad.data();
        for (int c = 0; c < C; ++c) {
            const double* xc = px.value.data() + c * n;
            const double* gc = g + c * n;
            double* gx = px.grad.data() + c * n;
            const double gamma = pg.value[c];
            const double m = mean[c], is = invstd[c];
            double sum_g = 0.0, sum_gx = 0.0; // sums of dy and dy*xhat
            for (std::int64_t i = 0; i < n; ++i) {
                sum_g += gc[i];
                sum_gx += gc[i] * (xc[i] - m) * is;
            }
            pg.grad[c] += sum_gx;
            pb.grad[c] += sum_g;
            if (train) {
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::int64_t i = 0; i < n; ++i) {
                    const double xhat = (xc[i] - m) * is;
                    gx[i] += gamma * is * (gc[i] - inv_n * sum_g - inv_n * xhat * sum_gx);
                }
            } else {
                const double f = gamma * is;
                for (std::int64_t i = 0; i < n; ++i) gx[i] += f * gc[i];
            }
        }
    });
    return Tensor::wrap(result);
}

/// Per-channel spatial mean, [C,D,H,W] -> [C,1,1,1].
inline Tensor global_avg_pool3d(const Tensor& x) {
    if (x.ndim() != 4) throw InvalidShape("global_avg_pool3d: need [C,D,H,W]");
    const int C = x.dim(0);
    const std::int64_t n = x.numel() / C;
    auto result = detail::make_result({C, 1, 1, 1}, static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
        const double* xc = x.data() + c * n;
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) acc += xc[i];
        result->value[c] = acc / static_cast<double>(n);
    }
    detail::attach(result, {x.node()}, [C, n](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int c = 0; c < C; ++c) {
            const double g = self.grad[c] / static_cast<double>(n);
            double* gc = p.grad.data() + c * n;
            for (std::int64_t i = 0; i < n; ++i) gc[i] += g;
        }
    });
    return Tensor::wrap(result);
}

/// Nearest-neighbor spatial upsampling by an integer factor.
inline Tensor upsample_nearest3d(const Tensor& x, int factor) {
    if (x.ndim() != 4) throw InvalidShape("upsample_nearest3d: need [C,D,H,W]");
    if (factor < 1) throw InvalidShape("upsample_nearest3d: factor must be >= 1");
    const int C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Do = D * factor, Ho = H * factor, Wo = W * factor;
    auto result = detail::make_result({C, Do, Ho, Wo},
                                      static_cast<std::size_t>(C) * Do * Ho * Wo);
    double* ov = result->value.data();
    const double* xv = x.data();
    for (int c = 0; c < C; ++c)
        for (int z = 0; z < Do; ++z)
            for (int y = 0; y < Ho; ++y) {
                const double* xrow = xv + ((static_cast<std::int64_t>(c) * D + z / factor) * H + y / factor) * W;
                double* orow = ov + ((static_cast<std::int64_t>(c) * Do + z) * Ho + y) * Wo;
                for (int xw = 0; xw < Wo; ++xw) orow[xw] = xrow[xw / factor];
            }
    detail::attach(result, {x.node()}, [C, D, H, W, factor](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const int Do = D * factor, Ho = H * factor, Wo = W * factor;
        for (int c = 0; c < C; ++c)
            for (int z = 0; z < Do; ++z)
                for (int y = 0; y < Ho; ++y) {
                    double* grow = p.grad.data() + ((static_cast<std::int64_t>(c) * D + z / factor) * H + y / factor) * W;
                    const double* sg = self.grad.data() + ((static_cast<std::int64_t>(c) * Do + z) * Ho + y) * Wo;
                    for (int xw = 0; xw < Wo; ++xw) grow[xw / factor] += sg[xw];
                }
    });
    return Tensor::wrap(result);
}

/// Channel concatenation of two [C,D,H,W] tensors with equal spatial dims.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 4 || b.ndim() != 4)
        throw InvalidShape("concat_channels: need [C,D,H,W] operands");
    for (int i = 1; i < 4; ++i)
        if (a.dim(i) != b.dim(i))
            throw ShapeMismatch("concat_channels: spatial dims differ, " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
    const int Ca = a.dim(0), Cb = b.dim(0);
    Shape out_shape{Ca + Cb, a.dim(1), a.dim(2), a.dim(3)};
    auto result = detail::make_result(out_shape, static_cast<std::size_t>(a.numel() + b.numel()));
    std::copy(a.data(), a.data() + a.numel(), result->value.begin());
    std::copy(b.data(), b.data() + b.numel(), result->value.begin() + a.numel());
    const std::int64_t na = a.numel(), nb = b.numel();
    detail::attach(result, {a.node(), b.node()}, [na, nb](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        for (std::int64_t i = 0; i < na; ++i) pa.grad[i] += self.grad[i];
        for (std::int64_t i = 0; i < nb; ++i) pb.grad[i] += self.grad[na + i];
    });
    return Tensor::wrap(result);
}

} // namespace fdiff
