#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lorafuse/dataset.hpp"
#include "lorafuse/diffusion.hpp"
#include "lorafuse/model.hpp"

namespace lorafuse {

struct TrainConfig {
    std::size_t steps = 2000;
    double lr = 1e-3;
    std::size_t batch = 16;
    std::uint64_t seed = 0;

    void validate() const {
        if (lr <= 0 || batch == 0) throw ContractError("train: bad config");
    }
};

/// Adam with standard defaults (beta1 0.9, beta2 0.999, eps 1e-8) and bias
/// correction.
class Adam {
public:
    Adam(double lr, std::size_t n_params) : lr_(lr), m_(n_params), v_(n_params) {}

    void step(std::vector<double*> params, const std::vector<std::vector<double>>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(kBeta1, t_);
        const double bc2 = 1.0 - std::pow(kBeta2, t_);
        std::size_t pi = 0;
        for (std::size_t g = 0; g < grads.size(); ++g)
            for (std::size_t i = 0; i < grads[g].size(); ++i, ++pi) {
                m_[pi] = kBeta1 * m_[pi] + (1.0 - kBeta1) * grads[g][i];
                v_[pi] = kBeta2 * v_[pi] + (1.0 - kBeta2) * grads[g][i] * grads[g][i];
                *(params[g] + i) -=
                    lr_ * (m_[pi] / bc1) / (std::sqrt(v_[pi] / bc2) + kEps);
            }
    }

private:
    static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    double lr_;
    int t_ = 0;
    std::vector<double> m_, v_;
};

namespace detail {

// One epsilon-prediction loss sample: x_t from q_sample, forward through
// watched parameters, mean squared error against the true noise.
struct TrainSample {
    const Tensor* x0;
    int t;
    Tensor noise;
};

inline TrainSample draw_sample(const std::vector<LabeledImage>& data,
                               const NoiseSchedule& sched, Rng& rng) {
    TrainSample s;
    s.x0 = &data[rng.below(data.size())].image;
    s.t = static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.t_train)));
    s.noise = rng.gauss_tensor(s.x0->shape);
    return s;
}

}  // namespace detail

/// Train the base denoiser from scratch on the epsilon-prediction objective.
/// Returns the per-step mean batch loss.
inline std::vector<double> train_base(DenoiserModel& model,
                                      const std::vector<LabeledImage>& data,
                                      const NoiseSchedule& sched, const TrainConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw ContractError("train_base: empty dataset");
    const std::size_t L = model.layers.size();
    std::size_t n_params = 0;
    for (const auto& l : model.layers) n_params += l.w0.size() + l.bias.size();
    Adam opt(cfg.lr, n_params);
    Rng rng(cfg.seed);
    std::vector<double> history;
    history.reserve(cfg.steps);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<std::vector<double>> acc(2 * L);
        for (std::size_t i = 0; i < L; ++i) {
            acc[2 * i].assign(model.layers[i].w0.size(), 0.0);
            acc[2 * i + 1].assign(model.layers[i].bias.size(), 0.0);
        }
        double loss_sum = 0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const detail::TrainSample s = detail::draw_sample(data, sched, rng);
            const Tensor x_t = q_sample(sched, *s.x0, s.t, s.noise);

            GradientTrace tr;
            std::vector<Tensor> w(L), bias(L);
            for (std::size_t i = 0; i < L; ++i) {
                w[i] = tr.watch(model.layers[i].w0);
                bias[i] = tr.watch(model.layers[i].bias);
            }
            Tensor h = concat(x_t, time_embedding(s.t, model.time_embed_dim));
            for (std::size_t i = 0; i < L; ++i) {
                h = add(matmul(w[i], h, &tr), bias[i], &tr);
                if (i + 1 < L) h = silu(h, &tr);
            }
            Tensor diff = sub(h, s.noise, &tr);
            Tensor loss = scale(dot(diff, diff, &tr), 1.0 / static_cast<double>(diff.size()), &tr);
            if (!std::isfinite(loss.item()))
                throw NumericError("train_base: NaN loss at step " + std::to_string(step));
            loss_sum += loss.item();

            std::vector<const Tensor*> wrts;
            for (std::size_t i = 0; i < L; ++i) {
                wrts.push_back(&w[i]);
                wrts.push_back(&bias[i]);
            }
            std::vector<Tensor> grads = tr.gradients(loss, wrts);
            for (std::size_t g = 0; g < grads.size(); ++g)
                for (std::size_t i = 0; i < grads[g].size(); ++i)
                    acc[g][i] += grads[g].data[i] / static_cast<double>(cfg.batch);
        }
        std::vector<double*> params;
        for (std::size_t i = 0; i < L; ++i) {
            params.push_back(model.layers[i].w0.data.data());
            params.push_back(model.layers[i].bias.data.data());
        }
        opt.step(params, acc);
        history.push_back(loss_sum / static_cast<double>(cfg.batch));
    }
    return history;
}

/// Fine-tune one adapter on a data subset. Base weights are never touched;
/// only the adapter's down/up factors receive updates.
inline std::vector<double> train_adapter(const DenoiserModel& model, LoRAAdapter& adapter,
                                         const std::vector<LabeledImage>& data,
                                         const NoiseSchedule& sched, const TrainConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw ContractError("train_adapter: empty dataset");
    const std::size_t L = model.layers.size();
    std::vector<std::size_t> adapted;
    for (std::size_t i = 0; i < L; ++i)
        if (adapter.has(i)) adapted.push_back(i);
    std::size_t n_params = 0;
    for (std::size_t i : adapted)
        n_params += adapter.layers[i].down.size() + adapter.layers[i].up.size();
    Adam opt(cfg.lr, n_params);
    Rng rng(cfg.seed);
    std::vector<double> history;
    history.reserve(cfg.steps);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<std::vector<double>> acc(2 * adapted.size());
        for (std::size_t j = 0; j < adapted.size(); ++j) {
            acc[2 * j].assign(adapter.layers[adapted[j]].down.size(), 0.0);
            acc[2 * j + 1].assign(adapter.layers[adapted[j]].up.size(), 0.0);
        }
        double loss_sum = 0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const detail::TrainSample s = detail::draw_sample(data, sched, rng);
            const Tensor x_t = q_sample(sched, *s.x0, s.t, s.noise);

            GradientTrace tr;
            std::vector<Tensor> down(adapted.size()), up(adapted.size());
            for (std::size_t j = 0; j < adapted.size(); ++j) {
                down[j] = tr.watch(adapter.layers[adapted[j]].down);
                up[j] = tr.watch(adapter.layers[adapted[j]].up);
            }
            Tensor h = concat(x_t, time_embedding(s.t, model.time_embed_dim));
            std::size_t j = 0;
            for (std::size_t i = 0; i < L; ++i) {
                Tensor base = add(matmul(model.layers[i].w0, h, &tr), model.layers[i].bias, &tr);
                if (j < adapted.size() && adapted[j] == i) {
                    const LoRALayer& ll = adapter.layers[i];
                    Tensor contrib = matmul(up[j], matmul(down[j], h, &tr), &tr);
                    base = add(base,
                               scale(contrib, ll.alpha / static_cast<double>(ll.rank()), &tr),
                               &tr);
                    ++j;
                }
                h = (i + 1 < L) ? silu(base, &tr) : base;
            }
            Tensor diff = sub(h, s.noise, &tr);
            Tensor loss = scale(dot(diff, diff, &tr), 1.0 / static_cast<double>(diff.size()), &tr);
            if (!std::isfinite(loss.item()))
                throw NumericError("train_adapter: NaN loss at step " + std::to_string(step));
            loss_sum += loss.item();

            std::vector<const Tensor*> wrts;
            for (std::size_t jj = 0; jj < adapted.size(); ++jj) {
                wrts.push_back(&down[jj]);
                wrts.push_back(&up[jj]);
            }
            std::vector<Tensor> grads = tr.gradients(loss, wrts);
            for (std::size_t g = 0; g < grads.size(); ++g)
                for (std::size_t i = 0; i < grads[g].size(); ++i)
                    acc[g][i] += grads[g].data[i] / static_cast<double>(cfg.batch);
        }
        std::vector<double*> params;
        for (std::size_t jj : adapted) {
            params.push_back(adapter.layers[jj].down.data.data());
            params.push_back(adapter.layers[jj].up.data.data());
        }
        opt.step(params, acc);
        history.push_back(loss_sum / static_cast<double>(cfg.batch));
    }
    return history;
}

}  // namespace lorafuse
