#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "lorafuse/diffusion.hpp"
#include "lorafuse/model.hpp"
#include "lorafuse/sampler.hpp"

using namespace lorafuse;

TEST_CASE("schedule invariants") {
    NoiseSchedule s = NoiseSchedule::linear();
    CHECK(s.alpha_bar(0) >= 0.999);
    for (int t = 1; t < s.t_train; ++t) {
        CHECK(s.betas[t] > s.betas[t - 1]);
        CHECK(s.betas[t] > 0.0);
        CHECK(s.betas[t] < 1.0);
        CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
        CHECK(s.alpha_bar(t) > 0.0);
    }
    for (int t = 0; t < s.t_train; ++t) {
        const double a = std::sqrt(s.alpha_bar(t)), b = std::sqrt(1.0 - s.alpha_bar(t));
        CHECK(std::abs(a * a + b * b - 1.0) < 1e-12);
    }
    CHECK(s.alpha_bar(-1) == 1.0);
    CHECK_THROWS_AS(s.alpha_bar(1000), ContractError);
}

TEST_CASE("q_sample") {
    NoiseSchedule s = NoiseSchedule::linear();
    Rng rng(3);
    Tensor x0 = rng.gauss_tensor({8});
    for (double& v : x0.data) v = std::clamp(v, -1.0, 1.0);
    Tensor noise = rng.gauss_tensor({8});

    // near-identity at t = 0 for unit-scale inputs
    Tensor xt0 = q_sample(s, x0, 0, noise);
    double m = 0;
    for (std::size_t i = 0; i < 8; ++i) m = std::max(m, std::abs(xt0.data[i] - x0.data[i]));
    CHECK(m < 0.03);

    // zero noise: exact rescale
    Tensor zn = Tensor::zeros({8});
    Tensor xt = q_sample(s, x0, 500, zn);
    for (std::size_t i = 0; i < 8; ++i)
        CHECK(xt.data[i] == std::sqrt(s.alpha_bar(500)) * x0.data[i]);

    CHECK_THROWS_AS(q_sample(s, x0, 1000, noise), ContractError);
}

TEST_CASE("predict_x0 inverts q_sample under oracle noise") {
    NoiseSchedule s = NoiseSchedule::linear();
    Rng rng(5);
    Tensor x0 = rng.gauss_tensor({16});
    for (int t : {0, 250, 500, 999}) {
        Tensor eps = rng.gauss_tensor({16});
        Tensor xt = q_sample(s, x0, t, eps);
        Tensor rec = predict_x0(s, xt, eps, t);
        CHECK(max_abs_diff(rec, x0) < 1e-10);
    }
}

TEST_CASE("predict_x0 is homogeneous in its inputs") {
    NoiseSchedule s = NoiseSchedule::linear();
    Rng rng(7);
    Tensor xt = rng.gauss_tensor({6}), eps = rng.gauss_tensor({6});
    Tensor a = predict_x0(s, xt, eps, 300);
    Tensor b = predict_x0(s, scale(xt, 2.0), scale(eps, 2.0), 300);
    CHECK(max_abs_diff(scale(a, 2.0), b) < 1e-12);
}

TEST_CASE("ddim_step") {
    NoiseSchedule s = NoiseSchedule::linear();
    Rng rng(9);
    Tensor xt = rng.gauss_tensor({6});

    // eps = 0: pure rescale by sqrt(abar_prev / abar_t)
    Tensor zeps = Tensor::zeros({6});
    Tensor out = ddim_step(s, xt, zeps, 500, 400);
    const double f = std::sqrt(s.alpha_bar(400) / s.alpha_bar(500));
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(out.data[i] == Catch::Approx(f * xt.data[i]).epsilon(1e-14));

    // final step to abar = 1 with oracle noise returns x0
    Tensor x0 = rng.gauss_tensor({6}), eps = rng.gauss_tensor({6});
    Tensor noisy = q_sample(s, x0, 19, eps);
    Tensor final = ddim_step(s, noisy, eps, 19, -1);
    CHECK(max_abs_diff(final, x0) < 1e-8);

    // determinism
    CHECK(ddim_step(s, xt, eps, 500, 400).data == ddim_step(s, xt, eps, 500, 400).data);

    CHECK_THROWS_AS(ddim_step(s, xt, eps, 400, 400), ContractError);
    CHECK_THROWS_AS(ddim_step(s, xt, eps, 400, 500), ContractError);
}

TEST_CASE("sampling timesteps are a strictly decreasing uniform stride") {
    std::vector<int> ts = sampling_timesteps(1000, 50);
    REQUIRE(ts.size() == 50);
    CHECK(ts.front() == 999);
    CHECK(ts.back() == 999 - 49 * 20);
    for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] == ts[i - 1] - 20);
    CHECK_THROWS_AS(sampling_timesteps(1000, 0), ContractError);
    CHECK_THROWS_AS(sampling_timesteps(10, 11), ContractError);
}

TEST_CASE("sampler determinism and smoke") {
    Rng mrng(11);
    DenoiserModel m = make_denoiser(16, 12, 2, 4, mrng);
    NoiseSchedule s = NoiseSchedule::linear();
    SamplerConfig cfg{20, 77};

    SampleResult a = sample(m, nullptr, nullptr, FusionPolicy::base_only(), nullptr, s, cfg);
    SampleResult b = sample(m, nullptr, nullptr, FusionPolicy::base_only(), nullptr, s, cfg);
    CHECK(a.image.data == b.image.data);  // bit identical
    CHECK(a.image.all_finite());
    REQUIRE(a.trace.rows.size() == 20);
    for (const auto& row : a.trace.rows) CHECK(row.empty());  // no adapter selections
}

TEST_CASE("guided trajectory with m = 0 equals unguided at every step") {
    Rng mrng(13);
    DenoiserModel m = make_denoiser(16, 12, 2, 4, mrng);
    LoRAAdapter c = make_random_adapter(m, 2, mrng);
    LoRAAdapter st = make_random_adapter(m, 2, mrng);
    NoiseSchedule s = NoiseSchedule::linear();
    SamplerConfig cfg{15, 5};

    auto [rc, rs] = generate_references(m, c, st, s, cfg);
    GuidanceContext ctx = GuidanceContext::make(rc, rs, 0.0);

    // step-by-step equality of the two trajectories
    std::vector<int> ts = sampling_timesteps(s.t_train, cfg.num_steps);
    Rng noise(cfg.seed);
    Tensor x = noise.gauss_tensor({m.input_dim});
    Tensor xg = x;
    FusionPolicy policy = FusionPolicy::kl_select();
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const int t = ts[k], tp = (k + 1 < ts.size()) ? ts[k + 1] : -1;
        TraceRow row;
        Tensor eps = fused_forward(m, &c, &st, policy, x, t, &row);
        x = ddim_step(s, x, eps, t, tp);
        xg = guided_step(ctx, s, m, &c, &st, policy, xg, t, tp).x_prev;
        CHECK(x.data == xg.data);
    }

    SampleResult guided = sample(m, &c, &st, policy, &ctx, s, cfg);
    SampleResult plain = sample(m, &c, &st, policy, nullptr, s, cfg);
    CHECK(guided.image.data == plain.image.data);
}
