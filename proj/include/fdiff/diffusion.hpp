#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "fdiff/tensor.hpp"

namespace fdiff {

/// Forward-process variance schedule and the derived posterior coefficients.
/// Timesteps are 1-indexed; alpha_bar(0) == 1 so the t=1 posterior variance
/// is exactly zero.
struct NoiseSchedule {
    int T = 0;
    // index t in [1, T]; slot 0 is the alpha_bar(0) = 1 sentinel
    std::vector<double> betas, alphas, alpha_bars;
    std::vector<double> posterior_variance;  // beta~_t
    std::vector<double> posterior_coef_x0;   // sqrt(abar_{t-1}) beta_t / (1 - abar_t)
    std::vector<double> posterior_coef_xt;   // sqrt(alpha_t)(1 - abar_{t-1}) / (1 - abar_t)

    double alpha_bar(int t) const {
        if (t < 0 || t > T) throw InvalidTimestep("alpha_bar: t=" + std::to_string(t));
        return alpha_bars[static_cast<std::size_t>(t)];
    }

    void check_t(int t) const {
        if (t < 1 || t > T)
            throw InvalidTimestep("timestep " + std::to_string(t) + " outside [1," +
                                  std::to_string(T) + "]");
    }
};

inline NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw InvalidSchedule("T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw InvalidSchedule("need 0 < beta_start <= beta_end < 1");
    if (T > 1 && beta_start == beta_end)
        throw InvalidSchedule("betas must be strictly increasing for T > 1");

    NoiseSchedule s;
    s.T = T;
    s.betas.assign(static_cast<std::size_t>(T) + 1, 0.0);
    s.alphas.assign(static_cast<std::size_t>(T) + 1, 1.0);
    s.alpha_bars.assign(static_cast<std::size_t>(T) + 1, 1.0);
    s.posterior_variance.assign(static_cast<std::size_t>(T) + 1, 0.0);
    s.posterior_coef_x0.assign(static_cast<std::size_t>(T) + 1, 0.0);
    s.posterior_coef_xt.assign(static_cast<std::size_t>(T) + 1, 0.0);

    for (int t = 1; t <= T; ++t) {
        const double b =
            T == 1 ? beta_start
                   : beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) /
                                      static_cast<double>(T - 1);
        s.betas[t] = b;
        s.alphas[t] = 1.0 - b;
        s.alpha_bars[t] = s.alpha_bars[t - 1] * s.alphas[t];
    }
    for (int t = 1; t <= T; ++t) {
        const double abar = s.alpha_bars[t], abar_prev = s.alpha_bars[t - 1];
        const double denom = 1.0 - abar;
        s.posterior_variance[t] = (1.0 - abar_prev) / denom * s.betas[t];
        s.posterior_coef_x0[t] = std::sqrt(abar_prev) * s.betas[t] / denom;
        s.posterior_coef_xt[t] = std::sqrt(s.alphas[t]) * (1.0 - abar_prev) / denom;
    }
    return s;
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
    s.check_t(t);
    if (!x0.same_shape(eps))
        throw ShapeMismatch("q_sample: x0 " + shape_str(x0.shape()) + " vs eps " +
                            shape_str(eps.shape()));
    const double abar = s.alpha_bar(t);
    return add(scale(x0, std::sqrt(abar)), scale(eps, std::sqrt(1.0 - abar)));
}

struct PosteriorParams {
    Tensor mean;
    double variance = 0.0;
};

/// q(x_{t-1} | x_t, x0): mean from the x0-form coefficients, variance beta~_t.
inline PosteriorParams posterior_params(const Tensor& x0, const Tensor& x_t, int t,
                                        const NoiseSchedule& s) {
    s.check_t(t);
    if (!x0.same_shape(x_t))
        throw ShapeMismatch("posterior_params: x0 vs x_t shapes differ");
    PosteriorParams p;
    p.mean = add(scale(x0, s.posterior_coef_x0[static_cast<std::size_t>(t)]),
                 scale(x_t, s.posterior_coef_xt[static_cast<std::size_t>(t)]));
    p.variance = s.posterior_variance[static_cast<std::size_t>(t)];
    return p;
}

/// Same posterior mean written in the noise parameterization:
/// (1/sqrt(alpha_t)) (x_t - (1-alpha_t)/sqrt(1-abar_t) eps)
inline Tensor posterior_mean_from_eps(const Tensor& x_t, int t, const Tensor& eps,
                                      const NoiseSchedule& s) {
    s.check_t(t);
    if (!x_t.same_shape(eps))
        throw ShapeMismatch("posterior_mean_from_eps: shape mismatch");
    const double alpha = s.alphas[static_cast<std::size_t>(t)];
    const double abar = s.alpha_bar(t);
    const double c = (1.0 - alpha) / std::sqrt(1.0 - abar);
    return scale(sub(x_t, scale(eps, c)), 1.0 / std::sqrt(alpha));
}

enum class ConvertDirection { eps_to_x0, x0_to_eps };

/// Algebraic interchange x0 <-> eps at a fixed (x_t, t); the directions are
/// mutual inverses.
inline Tensor x0_eps_convert(ConvertDirection dir, const Tensor& x_t, int t,
                             const Tensor& value, const NoiseSchedule& s) {
    s.check_t(t);
    if (!x_t.same_shape(value))
        throw ShapeMismatch("x0_eps_convert: shape mismatch");
    const double abar = s.alpha_bar(t);
    if (abar < 1e-30) throw NumericalFailure("x0_eps_convert: alpha_bar underflow");
    const double sa = std::sqrt(abar), sn = std::sqrt(1.0 - abar);
    if (dir == ConvertDirection::eps_to_x0)
        return scale(sub(x_t, scale(value, sn)), 1.0 / sa); // value is eps
    return scale(sub(x_t, scale(value, sa)), 1.0 / sn);     // value is x0
}

/// One ancestral step: posterior mean from the predicted noise plus
/// sqrt(beta~_t) z for t > 1; the final step is deterministic.
inline Tensor ddpm_step(const Tensor& x_t, int t, const Tensor& eps_hat,
                        const NoiseSchedule& s, SeededRng& rng) {
    s.check_t(t);
    Tensor mean = posterior_mean_from_eps(x_t, t, eps_hat, s);
    if (t == 1) return mean;
    const double sigma = std::sqrt(s.posterior_variance[static_cast<std::size_t>(t)]);
    Tensor z = Tensor::gaussian(x_t.shape(), rng);
    return add(mean, scale(z, sigma));
}

struct SamplerPlan {
    enum class Kind { ddpm, ddim };
    Kind kind = Kind::ddim;
    std::vector<int> timesteps; // strictly decreasing, within [1, T]
    double eta = 0.0;
};

/// S timesteps with uniform stride floor(T/S) walking down from T; the last
/// entry later pairs with alpha_bar(0) = 1.
inline SamplerPlan ddim_plan(int T, int S) {
    if (S < 1 || S > T) throw InvalidPlan("ddim_plan: need 1 <= S <= T");
    SamplerPlan plan;
    plan.kind = SamplerPlan::Kind::ddim;
    const int stride = T / S;
    plan.timesteps.reserve(static_cast<std::size_t>(S));
    for (int i = 0; i < S; ++i) plan.timesteps.push_back(T - i * stride);
    return plan;
}

/// Deterministic (eta = 0) DDIM update from t to t_prev given the model's x0
/// estimate; eta > 0 interpolates toward the DDPM posterior noise level.
inline Tensor ddim_step(const Tensor& x_t, int t, int t_prev, const Tensor& x0_hat,
                        const NoiseSchedule& s, double eta = 0.0, SeededRng* rng = nullptr) {
    s.check_t(t);
    if (t_prev < 0 || t_prev >= t) throw InvalidPlan("ddim_step: need t > t_prev >= 0");
    if (!x_t.same_shape(x0_hat)) throw ShapeMismatch("ddim_step: shape mismatch");

    Tensor eps_hat = x0_eps_convert(ConvertDirection::x0_to_eps, x_t, t, x0_hat, s);
    const double abar_t = s.alpha_bar(t);
    const double abar_p = s.alpha_bar(t_prev);
    double sigma = 0.0;
    if (eta > 0.0 && t_prev >= 1)
        sigma = eta * std::sqrt((1.0 - abar_p) / (1.0 - abar_t)) *
                std::sqrt(1.0 - abar_t / abar_p);
    const double dir = std::sqrt(std::max(0.0, 1.0 - abar_p - sigma * sigma));
    if (t_prev == 0 && sigma == 0.0) return x0_hat.detach(); // abar_p == 1 exactly

    Tensor out = add(scale(x0_hat, std::sqrt(abar_p)), scale(eps_hat, dir));
    if (sigma > 0.0) {
        if (rng == nullptr) throw InvalidPlan("ddim_step: eta > 0 requires an rng");
        out = add(out, scale(Tensor::gaussian(x_t.shape(), *rng), sigma));
    }
    return out;
}

} // namespace fdiff
