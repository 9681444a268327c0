#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lorafuse/diffusion.hpp"
#include "lorafuse/fusion.hpp"
#include "lorafuse/rng.hpp"
#include "lorafuse/weights.hpp"

namespace lorafuse {

/// Pixel-index groups for non-overlapping 4x4 patches of a square image
/// stored row-major.
inline std::vector<std::vector<std::size_t>> square_patches(std::size_t dim) {
    const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(double(dim))));
    if (side * side != dim || side % 4 != 0)
        throw ContractError("square_patches: dim must be a square with side divisible by 4");
    std::vector<std::vector<std::size_t>> patches;
    for (std::size_t py = 0; py < side; py += 4)
        for (std::size_t px = 0; px < side; px += 4) {
            std::vector<std::size_t> idx;
            for (std::size_t y = py; y < py + 4; ++y)
                for (std::size_t x = px; x < px + 4; ++x) idx.push_back(y * side + x);
            patches.push_back(std::move(idx));
        }
    return patches;
}

/// Deterministic stand-in image encoder: a fixed seeded random projection.
/// The content flavor sees raw pixels; the style flavor sees per-patch
/// (mean, std) statistics, so it reacts to texture but not to where a shape
/// sits.
struct MetricEncoder {
    enum class Kind { Content, Style };

    Kind kind = Kind::Content;
    Tensor projection;  // [e x f]
    std::vector<std::vector<std::size_t>> patches;  // style only

    std::size_t embed_dim() const { return projection.shape[0]; }

    /// Unnormalized projected features; cosine handles normalization.
    Tensor project(const Tensor& x, GradientTrace* tr = nullptr) const {
        if (kind == Kind::Content) return matmul(projection, x, tr);
        return matmul(projection, patch_stats(x, patches, tr), tr);
    }

    /// Unit-norm embedding.
    Tensor embed(const Tensor& x) const {
        Tensor p = project(x);
        const double n = norm2(p);
        if (n <= 0.0) throw DegenerateInputError("encoder: zero-norm embedding");
        return scale(p, 1.0 / n);
    }
};

inline constexpr std::uint64_t kContentEncoderSeed = 0xC0DE0001ULL;
inline constexpr std::uint64_t kStyleEncoderSeed = 0xC0DE0002ULL;

inline MetricEncoder make_content_encoder(std::size_t input_dim, std::size_t embed_dim = 32,
                                          std::uint64_t seed = kContentEncoderSeed) {
    MetricEncoder e;
    e.kind = MetricEncoder::Kind::Content;
    Rng rng(seed);
    e.projection = rng.gauss_tensor({embed_dim, input_dim});
    const double s = 1.0 / std::sqrt(static_cast<double>(input_dim));
    for (double& v : e.projection.data) v *= s;
    return e;
}

inline MetricEncoder make_style_encoder(std::size_t input_dim, std::size_t embed_dim = 32,
                                        std::uint64_t seed = kStyleEncoderSeed) {
    MetricEncoder e;
    e.kind = MetricEncoder::Kind::Style;
    e.patches = square_patches(input_dim);
    const std::size_t f = 2 * e.patches.size();
    Rng rng(seed);
    e.projection = rng.gauss_tensor({embed_dim, f});
    const double s = 1.0 / std::sqrt(static_cast<double>(f));
    for (double& v : e.projection.data) v *= s;
    return e;
}

/// Everything the guided step needs: the two references, their cached
/// unit-norm embeddings, the encoders, and the scaling factor m.
struct GuidanceContext {
    Tensor ref_content;  // I_c^ref
    Tensor ref_style;    // I_s^ref
    MetricEncoder content_encoder;
    MetricEncoder style_encoder;
    Tensor emb_ref_content_c;  // content encoder of I_c^ref (unit norm)
    Tensor emb_ref_style_c;    // content encoder of I_s^ref
    Tensor emb_ref_style_s;    // style encoder of I_s^ref
    double m = 10.0;
    int stride = 1;  // apply guidance every n-th step

    static GuidanceContext make(const Tensor& ref_content, const Tensor& ref_style,
                                double m = 10.0, int stride = 1) {
        GuidanceContext ctx;
        ctx.ref_content = ref_content;
        ctx.ref_style = ref_style;
        ctx.content_encoder = make_content_encoder(ref_content.size());
        ctx.style_encoder = make_style_encoder(ref_content.size());
        ctx.emb_ref_content_c = ctx.content_encoder.embed(ref_content);
        ctx.emb_ref_style_c = ctx.content_encoder.embed(ref_style);
        ctx.emb_ref_style_s = ctx.style_encoder.embed(ref_style);
        ctx.m = m;
        ctx.stride = stride;
        return ctx;
    }

    /// Load precomputed reference embeddings (e.g. from a real external
    /// encoder) from a weight file; the stand-in encoders still embed the
    /// running prediction.
    static GuidanceContext from_embedding_file(const std::string& path,
                                               std::size_t input_dim, double m = 10.0,
                                               int stride = 1) {
        NamedTensors t = load_weights(path);
        GuidanceContext ctx;
        ctx.content_encoder = make_content_encoder(input_dim);
        ctx.style_encoder = make_style_encoder(input_dim);
        auto unit = [](Tensor e) {
            const double n = norm2(e);
            if (n <= 0.0) throw FormatError("embedding file: zero-norm embedding");
            return scale(e, 1.0 / n);
        };
        ctx.emb_ref_content_c = unit(t.at("ref_content.content"));
        ctx.emb_ref_style_c = unit(t.at("ref_style.content"));
        ctx.emb_ref_style_s = unit(t.at("ref_style.style"));
        ctx.m = m;
        ctx.stride = stride;
        return ctx;
    }
};

/// R(x0_hat) = 1 - (S1 + S2 + S3)/3 with the three reference similarities.
inline Tensor residual(const GuidanceContext& ctx, const Tensor& x0_hat,
                       GradientTrace* tr = nullptr) {
    const Tensor s1 = unit_cosine(ctx.emb_ref_content_c, ctx.content_encoder.project(x0_hat, tr), tr);
    const Tensor s2 = unit_cosine(ctx.emb_ref_style_c, ctx.content_encoder.project(x0_hat, tr), tr);
    const Tensor s3 = unit_cosine(ctx.emb_ref_style_s, ctx.style_encoder.project(x0_hat, tr), tr);
    const Tensor total = add(add(s1, s2, tr), s3, tr);
    return sub(Tensor::scalar(1.0), scale(total, 1.0 / 3.0, tr), tr);
}

inline double residual_value(const GuidanceContext& ctx, const Tensor& x0_hat) {
    return residual(ctx, x0_hat).item();
}

/// The three similarities individually (for reports).
struct SimilarityScores {
    double content_sim_c;  // content encoder vs content reference
    double content_sim_s;  // content encoder vs style reference
    double style_sim;      // style encoder vs style reference
    double combined() const { return (content_sim_c + content_sim_s + style_sim) / 3.0; }
};

inline SimilarityScores score_image(const GuidanceContext& ctx, const Tensor& img) {
    SimilarityScores s;
    s.content_sim_c = unit_cosine(ctx.emb_ref_content_c, ctx.content_encoder.project(img)).item();
    s.content_sim_s = unit_cosine(ctx.emb_ref_style_c, ctx.content_encoder.project(img)).item();
    s.style_sim = unit_cosine(ctx.emb_ref_style_s, ctx.style_encoder.project(img)).item();
    return s;
}

struct GuidedStepResult {
    Tensor x_prev;
    double residual = 0.0;
    double grad_norm = 0.0;
    TraceRow row;
    Tensor gradient;  // d residual / d x_t
};

/// Residual of the frozen-selection pipeline at an arbitrary latent (used by
/// descent probes and finite-difference checks).
inline double frozen_residual(const GuidanceContext& ctx, const NoiseSchedule& sched,
                              const DenoiserModel& model, const LoRAAdapter* content,
                              const LoRAAdapter* style, const FusionPolicy& policy,
                              const std::vector<Branch>& frozen, const Tensor& x, int t) {
    Tensor eps = fused_forward(model, content, style, policy, x, t, nullptr, nullptr,
                               frozen.empty() ? nullptr : &frozen);
    return residual_value(ctx, predict_x0(sched, x, eps, t));
}

inline std::vector<Branch> row_choices(const TraceRow& row) {
    std::vector<Branch> out;
    out.reserve(row.size());
    for (const auto& r : row) out.push_back(r.choice);
    return out;
}

/// One metric-guided reverse step: x_{t-1} = x_{t-1}^ori - m * dR/dx_t, with
/// the layer selections of the value pass frozen on the gradient tape.
inline GuidedStepResult guided_step(const GuidanceContext& ctx, const NoiseSchedule& sched,
                                    const DenoiserModel& model, const LoRAAdapter* content,
                                    const LoRAAdapter* style, const FusionPolicy& policy,
                                    const Tensor& x_t, int t, int t_prev) {
    GuidedStepResult res;
    Tensor eps_val = fused_forward(model, content, style, policy, x_t, t, &res.row);
    res.x_prev = ddim_step(sched, x_t, eps_val, t, t_prev);
    if (ctx.m == 0.0) {
        res.gradient = Tensor::zeros(x_t.shape);
        res.residual = residual_value(ctx, predict_x0(sched, x_t, eps_val, t));
        return res;
    }

    const std::vector<Branch> frozen = row_choices(res.row);
    GradientTrace trace;
    Tensor xw = trace.watch(x_t);
    TraceRow grad_row;
    Tensor eps = fused_forward(model, content, style, policy, xw, t, &grad_row, &trace,
                               frozen.empty() ? nullptr : &frozen);
    Tensor x0_hat = predict_x0(sched, xw, eps, t, &trace);
    Tensor r = residual(ctx, x0_hat, &trace);
    Tensor g = trace.gradient(r, xw);

    if (grad_row.size() != res.row.size())
        throw ContractError("guided_step: selection rows diverged between passes");
    for (std::size_t i = 0; i < grad_row.size(); ++i)
        if (grad_row[i].choice != res.row[i].choice)
            throw ContractError("guided_step: frozen selection violated at layer record " +
                                std::to_string(i));

    res.residual = r.item();
    res.grad_norm = norm2(g);
    res.gradient = g;
    if (!g.all_finite())
        throw NumericError("guided_step: non-finite gradient at t=" + std::to_string(t) +
                           " (R=" + std::to_string(res.residual) + ")");
    res.x_prev = sub(res.x_prev, scale(g, ctx.m));
    return res;
}

}  // namespace lorafuse
