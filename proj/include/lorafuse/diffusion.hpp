#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "lorafuse/tensor.hpp"

namespace lorafuse {

/// Linear beta schedule with cached alpha products. alpha_bar(-1) is defined
/// as 1 (the clean-image endpoint of the reverse process).
struct NoiseSchedule {
    int t_train = 1000;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    static NoiseSchedule linear(int t_train = 1000, double beta_start = 1e-4,
                                double beta_end = 0.02) {
        if (t_train < 2) throw ContractError("schedule: t_train too small");
        NoiseSchedule s;
        s.t_train = t_train;
        s.betas.resize(t_train);
        s.alphas.resize(t_train);
        s.alpha_bars.resize(t_train);
        double prod = 1.0;
        for (int t = 0; t < t_train; ++t) {
            s.betas[t] = beta_start + (beta_end - beta_start) * t / (t_train - 1.0);
            s.alphas[t] = 1.0 - s.betas[t];
            prod *= s.alphas[t];
            s.alpha_bars[t] = prod;
        }
        return s;
    }

    double alpha_bar(int t) const {
        if (t == -1) return 1.0;
        if (t < 0 || t >= t_train) throw ContractError("schedule: timestep out of range");
        return alpha_bars[t];
    }
};

/// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) noise.
inline Tensor q_sample(const NoiseSchedule& sched, const Tensor& x0, int t,
                       const Tensor& noise) {
    if (!x0.same_shape(noise)) throw DimError("q_sample: noise shape mismatch");
    const double ab = sched.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor out = x0;
    out.node = -1;
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = a * x0.data[i] + b * noise.data[i];
    require_finite(out, "q_sample");
    return out;
}

/// x0_hat = (x_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t). No clipping.
inline Tensor predict_x0(const NoiseSchedule& sched, const Tensor& x_t,
                         const Tensor& eps_hat, int t, GradientTrace* tr = nullptr) {
    if (!x_t.same_shape(eps_hat)) throw DimError("predict_x0: shape mismatch");
    const double ab = sched.alpha_bar(t);
    return scale(sub(x_t, scale(eps_hat, std::sqrt(1.0 - ab), tr), tr),
                 1.0 / std::sqrt(ab), tr);
}

/// Deterministic (eta = 0) reverse step:
/// x_{t_prev} = sqrt(abar_prev) x0_hat + sqrt(1-abar_prev) eps_hat.
inline Tensor ddim_step(const NoiseSchedule& sched, const Tensor& x_t,
                        const Tensor& eps_hat, int t, int t_prev,
                        GradientTrace* tr = nullptr) {
    if (t_prev >= t) throw ContractError("ddim_step: t_prev must be < t");
    const Tensor x0 = predict_x0(sched, x_t, eps_hat, t, tr);
    const double abp = sched.alpha_bar(t_prev);
    return add(scale(x0, std::sqrt(abp), tr), scale(eps_hat, std::sqrt(1.0 - abp), tr), tr);
}

/// Descending timestep sequence with uniform stride over [0, t_train):
/// {t_train-1, t_train-1-s, ...} with s = t_train/num_steps; the step after
/// the last entry is -1 (alpha_bar = 1).
inline std::vector<int> sampling_timesteps(int t_train, int num_steps) {
    if (num_steps < 1 || num_steps > t_train)
        throw ContractError("sampling_timesteps: bad num_steps");
    const int stride = t_train / num_steps;
    std::vector<int> ts;
    for (int i = 0; i < num_steps; ++i) ts.push_back(t_train - 1 - i * stride);
    return ts;
}

}  // namespace lorafuse
