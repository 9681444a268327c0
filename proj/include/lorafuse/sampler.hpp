#pragma once

#include <cstdint>
#include <utility>

#include "lorafuse/diffusion.hpp"
#include "lorafuse/fusion.hpp"
#include "lorafuse/guidance.hpp"
#include "lorafuse/rng.hpp"

namespace lorafuse {

struct SamplerConfig {
    int num_steps = 50;
    std::uint64_t seed = 0;
};

struct SampleResult {
    Tensor image;  // final x0 estimate
    SelectionTrace trace;
    bool guided = false;
    double final_residual = 0.0;
};

/// Full reverse trajectory: seeded standard-normal start, deterministic DDIM
/// steps, per-step fusion decisions, optional metric-guided correction.
inline SampleResult sample(const DenoiserModel& model, const LoRAAdapter* content,
                           const LoRAAdapter* style, const FusionPolicy& policy,
                           const GuidanceContext* guidance, const NoiseSchedule& sched,
                           const SamplerConfig& cfg) {
    const std::vector<int> ts = sampling_timesteps(sched.t_train, cfg.num_steps);
    Rng rng(cfg.seed);
    Tensor x = rng.gauss_tensor({model.input_dim});

    SampleResult res;
    res.trace.layer_indices = model.adapted_layers;
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const int t = ts[k];
        const int t_prev = (k + 1 < ts.size()) ? ts[k + 1] : -1;
        const bool guide_now =
            guidance && guidance->stride > 0 && (k % static_cast<std::size_t>(guidance->stride) == 0);
        if (guide_now) {
            GuidedStepResult step =
                guided_step(*guidance, sched, model, content, style, policy, x, t, t_prev);
            x = std::move(step.x_prev);
            res.trace.rows.push_back(std::move(step.row));
            res.guided = true;
            res.final_residual = step.residual;
        } else {
            TraceRow row;
            Tensor eps = fused_forward(model, content, style, policy, x, t, &row);
            x = ddim_step(sched, x, eps, t, t_prev);
            res.trace.rows.push_back(std::move(row));
        }
        require_finite(x, "sample");
    }
    res.image = std::move(x);
    return res;
}

/// Reference images for guidance: one ContentOnly and one StyleOnly sample,
/// no guidance, seeds derived from the base seed.
inline std::pair<Tensor, Tensor> generate_references(const DenoiserModel& model,
                                                     const LoRAAdapter& content,
                                                     const LoRAAdapter& style,
                                                     const NoiseSchedule& sched,
                                                     const SamplerConfig& cfg) {
    SamplerConfig c = cfg;
    c.seed = mix_seed(cfg.seed, 1);
    Tensor ref_c = sample(model, &content, nullptr, FusionPolicy::content_only(), nullptr,
                          sched, c).image;
    c.seed = mix_seed(cfg.seed, 2);
    Tensor ref_s = sample(model, nullptr, &style, FusionPolicy::style_only(), nullptr,
                          sched, c).image;
    return {ref_c, ref_s};
}

}  // namespace lorafuse
