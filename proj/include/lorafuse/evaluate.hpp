#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lorafuse/sampler.hpp"

namespace lorafuse {

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

/// One policy under evaluation, optionally with guidance.
struct EvalPolicy {
    std::string name;
    FusionPolicy fusion;
    bool guide = false;
    double m = 10.0;
    int stride = 1;
};

struct PolicyScores {
    std::string name;
    std::vector<SimilarityScores> per_seed;

    SimilarityScores mean() const {
        SimilarityScores m{0, 0, 0};
        for (const auto& s : per_seed) {
            m.content_sim_c += s.content_sim_c;
            m.content_sim_s += s.content_sim_s;
            m.style_sim += s.style_sim;
        }
        const double n = static_cast<double>(per_seed.size());
        return {m.content_sim_c / n, m.content_sim_s / n, m.style_sim / n};
    }
    double combined_mean() const { return mean().combined(); }
    double combined_std() const {
        const double mu = combined_mean();
        double v = 0;
        for (const auto& s : per_seed) v += (s.combined() - mu) * (s.combined() - mu);
        return std::sqrt(v / static_cast<double>(per_seed.size()));
    }
};

struct ScoreReport {
    std::vector<PolicyScores> policies;
    std::vector<std::uint64_t> seeds;
    std::string criterion_name;
    std::uint64_t config_hash = 0;

    const PolicyScores& find(const std::string& name) const {
        for (const auto& p : policies)
            if (p.name == name) return p;
        throw ContractError("report: unknown policy " + name);
    }

    void write_csv(std::ostream& os) const {
        os << "# config_hash=" << config_hash << " seeds=" << seeds.size()
           << " criterion=" << criterion_name << '\n';
        os << "policy,seed,style_sim,content_sim_c,content_sim_s,combined\n";
        for (const auto& p : policies) {
            for (std::size_t i = 0; i < p.per_seed.size(); ++i) {
                const auto& s = p.per_seed[i];
                os << p.name << ',' << seeds[i] << ',' << fmt_double(s.style_sim) << ','
                   << fmt_double(s.content_sim_c) << ',' << fmt_double(s.content_sim_s)
                   << ',' << fmt_double(s.combined()) << '\n';
            }
            const SimilarityScores m = p.mean();
            os << p.name << ",mean," << fmt_double(m.style_sim) << ','
               << fmt_double(m.content_sim_c) << ',' << fmt_double(m.content_sim_s) << ','
               << fmt_double(m.combined()) << '\n';
            os << p.name << ",std,,,," << fmt_double(p.combined_std()) << '\n';
        }
    }
    void write_csv(const std::string& path) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw FormatError("report: cannot open " + path);
        write_csv(f);
    }
};

inline const char* to_string(Criterion c) {
    switch (c) {
        case Criterion::KL: return "KL";
        case Criterion::JS: return "JS";
        case Criterion::Cosine: return "Cosine";
        case Criterion::DotProduct: return "DotProduct";
    }
    return "?";
}

/// Run every policy over n_seeds seeded trajectories; references (and thus
/// the scoring context) are regenerated per seed so each run is scored
/// against its own anchors.
inline ScoreReport evaluate(const DenoiserModel& model, const LoRAAdapter& content,
                            const LoRAAdapter& style, const NoiseSchedule& sched,
                            const std::vector<EvalPolicy>& policies, int n_seeds,
                            std::uint64_t base_seed, int num_steps = 50) {
    ScoreReport report;
    report.criterion_name = "KL";
    for (const auto& p : policies) report.policies.push_back({p.name, {}});
    for (int s = 0; s < n_seeds; ++s) {
        const std::uint64_t seed = mix_seed(base_seed, 100 + static_cast<std::uint64_t>(s));
        report.seeds.push_back(seed);
        SamplerConfig cfg{num_steps, seed};
        auto [ref_c, ref_s] = generate_references(model, content, style, sched, cfg);
        for (std::size_t pi = 0; pi < policies.size(); ++pi) {
            const EvalPolicy& p = policies[pi];
            GuidanceContext ctx = GuidanceContext::make(ref_c, ref_s, p.m, p.stride);
            SampleResult r = sample(model, &content, &style, p.fusion,
                                    p.guide ? &ctx : nullptr, sched, cfg);
            report.policies[pi].per_seed.push_back(score_image(ctx, r.image));
        }
    }
    return report;
}

/// Table-3 style grid: KlSelect under each selection criterion, guidance off.
inline std::string criterion_ablation(const DenoiserModel& model, const LoRAAdapter& content,
                                      const LoRAAdapter& style, const NoiseSchedule& sched,
                                      int n_seeds, std::uint64_t base_seed,
                                      int num_steps = 50) {
    std::ostringstream os;
    os << "criterion,style_sim,content_sim,combined\n";
    for (Criterion c : {Criterion::KL, Criterion::JS, Criterion::Cosine, Criterion::DotProduct}) {
        ScoreReport r = evaluate(model, content, style, sched,
                                 {{to_string(c), FusionPolicy::kl_select(c), false}},
                                 n_seeds, base_seed, num_steps);
        const SimilarityScores m = r.policies[0].mean();
        os << to_string(c) << ',' << fmt_double(m.style_sim) << ','
           << fmt_double(m.content_sim_c) << ',' << fmt_double(m.combined()) << '\n';
    }
    return os.str();
}

/// Table-4 style grid: KlSelect + guidance over a range of scaling factors.
inline std::string scaling_ablation(const DenoiserModel& model, const LoRAAdapter& content,
                                    const LoRAAdapter& style, const NoiseSchedule& sched,
                                    int n_seeds, std::uint64_t base_seed,
                                    const std::vector<double>& ms = {0, 1, 5, 10, 20},
                                    int num_steps = 50) {
    std::ostringstream os;
    os << "m,style_sim,content_sim,combined\n";
    for (double m : ms) {
        ScoreReport r = evaluate(model, content, style, sched,
                                 {{"m", FusionPolicy::kl_select(), true, m}}, n_seeds,
                                 base_seed, num_steps);
        const SimilarityScores s = r.policies[0].mean();
        os << fmt_double(m) << ',' << fmt_double(s.style_sim) << ','
           << fmt_double(s.content_sim_c) << ',' << fmt_double(s.combined()) << '\n';
    }
    return os.str();
}

}  // namespace lorafuse
