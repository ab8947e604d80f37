#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "fdiff/nn_ops.hpp"
#include "fdiff/tensor.hpp"

namespace fdiff {

enum class ProductMode { automatic, direct, logspace };

/// Per-channel Gaussian membership bank with residual-fusion normalization.
/// mu and sigma are [M, C]; the membership parameters are shared by every
/// voxel of a channel and independent across channels.
struct FlmParams {
    int M = 0, C = 0;
    Tensor mu, sigma;
    BatchNorm3d bn_fuzzy, bn_identity;
    double sigma_min = 1e-3;
    ProductMode product_mode = ProductMode::automatic;

    FlmParams() = default;

    /// mu ~ N(0,1), sigma = 1 (encoder features sit near unit range).
    FlmParams(int memberships, int channels, SeededRng& rng)
        : M(memberships), C(channels),
          mu(Tensor::gaussian({memberships, channels}, rng)),
          sigma(Tensor::ones({memberships, channels})),
          bn_fuzzy(channels), bn_identity(channels) {
        if (memberships < 1) throw InvalidConfig("FLM: M must be >= 1");
        mu.set_requires_grad();
        sigma.set_requires_grad();
    }

    /// Post-update projection keeping every width at or above sigma_min.
    void clamp_sigma() {
        for (std::int64_t i = 0; i < sigma.numel(); ++i)
            sigma.data()[i] = std::max(sigma.data()[i], sigma_min);
    }
};

/// Membership degrees exp(-(F - mu)^2 / sigma^2): [C,spatial...] -> [M,C,spatial...].
inline Tensor flm_membership(const Tensor& f, const FlmParams& p) {
    if (f.ndim() < 1 || f.dim(0) != p.C)
        throw ShapeMismatch("flm_membership: input channels " +
                            std::to_string(f.ndim() ? f.dim(0) : 0) + " vs params " +
                            std::to_string(p.C));
    const int M = p.M, C = p.C;
    const std::int64_t spatial = f.numel() / C;

    Shape out_shape;
    out_shape.push_back(M);
    for (int d : f.shape()) out_shape.push_back(d);
    auto result = detail::make_result(out_shape, static_cast<std::size_t>(M) * f.numel());

    const double* fv = f.data();
    double* ov = result->value.data();
    for (int k = 0; k < M; ++k)
        for (int c = 0; c < C; ++c) {
            const double mu = p.mu.data()[k * C + c];
            const double sg = p.sigma.data()[k * C + c];
            const double inv2 = 1.0 / (sg * sg);
            const double* fc = fv + c * spatial;
            double* oc = ov + (static_cast<std::int64_t>(k) * C + c) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) {
                const double d = fc[i] - mu;
                oc[i] = std::exp(-d * d * inv2);
            }
        }

    detail::attach(result, {f.node(), p.mu.node(), p.sigma.node()},
                   [M, C, spatial](detail::Node& self) {
        auto& pf = *self.parents[0];
        auto& pm = *self.parents[1];
        auto& ps = *self.parents[2];
        pf.ensure_grad();
        pm.ensure_grad();
        ps.ensure_grad();
        const double* g = self.grad.data();
        const double* e = self.value.data();
        for (int k = 0; k < M; ++k)
            for (int c = 0; c < C; ++c) {
                const double mu = pm.value[k * C + c];
                const double sg = ps.value[k * C + c];
                const double inv2 = 1.0 / (sg * sg);
                const double inv3 = inv2 / sg;
                const double* fc = pf.value.data() + c * spatial;
                double* gf = pf.grad.data() + c * spatial;
                const std::int64_t base = (static_cast<std::int64_t>(k) * C + c) * spatial;
                double dmu = 0.0, dsg = 0.0;
                for (std::int64_t i = 0; i < spatial; ++i) {
                    const double d = fc[i] - mu;
                    const double ge = g[base + i] * e[base + i];
                    const double two_d = 2.0 * d;
                    gf[i] += ge * (-two_d * inv2);
                    dmu += ge * (two_d * inv2);
                    dsg += ge * (2.0 * d * d * inv3);
                }
                pm.grad[k * C + c] += dmu;
                ps.grad[k * C + c] += dsg;
            }
    });
    return Tensor::wrap(result);
}

/// Fuzzy AND: product over the membership axis, [M,C,...] -> [C,...].
/// The log-space path computes exp(sum log m) for large banks where the
/// running product would underflow progressively.
inline Tensor flm_and_rule(const Tensor& memb, ProductMode mode = ProductMode::automatic) {
    if (memb.ndim() < 2) throw InvalidShape("flm_and_rule: need [M,C,...]");
    const int M = memb.dim(0);
    if (M < 1) throw InvalidShape("flm_and_rule: M must be >= 1");
    const bool logspace =
        mode == ProductMode::logspace || (mode == ProductMode::automatic && M > 8);

    Shape out_shape(memb.shape().begin() + 1, memb.shape().end());
    const std::int64_t n = memb.numel() / M;
    auto result = detail::make_result(out_shape, static_cast<std::size_t>(n));

    const double* mv = memb.data();
    double* ov = result->value.data();
    if (logspace) {
        for (std::int64_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int k = 0; k < M; ++k) acc += std::log(mv[k * n + i]);
            ov[i] = std::exp(acc);
        }
    } else {
        for (std::int64_t i = 0; i < n; ++i) {
            double acc = mv[i];
            for (int k = 1; k < M; ++k) acc *= mv[k * n + i];
            ov[i] = acc;
        }
    }

    detail::attach(result, {memb.node()}, [M, n](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const double* g = self.grad.data();
        const double* mv = p.value.data();
        std::vector<double> pre(static_cast<std::size_t>(M) + 1);
        std::vector<double> suf(static_cast<std::size_t>(M) + 1);
        for (std::int64_t i = 0; i < n; ++i) {
            pre[0] = 1.0;
            for (int k = 0; k < M; ++k) pre[k + 1] = pre[k] * mv[k * n + i];
            suf[M] = 1.0;
            for (int k = M - 1; k >= 0; --k) suf[k] = suf[k + 1] * mv[k * n + i];
            const double gi = g[i];
            for (int k = 0; k < M; ++k)
                p.grad[k * n + i] += gi * pre[k] * suf[k + 1];
        }
    });
    return Tensor::wrap(result);
}

/// Full skip-path transform: BN(fuzzy features) + BN(identity path).
inline Tensor flm_forward(const Tensor& f, FlmParams& p, BnMode mode) {
    Tensor fuzzy = flm_and_rule(flm_membership(f, p), p.product_mode);
    return add(batchnorm3d(fuzzy, p.bn_fuzzy, mode), batchnorm3d(f, p.bn_identity, mode));
}

} // namespace fdiff
