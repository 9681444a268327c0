#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lorafuse/model.hpp"
#include "lorafuse/tensor.hpp"

namespace lorafuse {

enum class Branch { Content, Style };
enum class Criterion { KL, JS, Cosine, DotProduct };

struct FusionPolicy {
    enum class Kind { BaseOnly, ContentOnly, StyleOnly, DirectMerge, KlSelect, MagnitudeTopK };

    Kind kind = Kind::BaseOnly;
    Criterion criterion = Criterion::KL;
    double temperature = 1.0;
    double lambda_c = 1.0, lambda_s = 1.0;  // DirectMerge coefficients
    std::size_t topk = 0;                   // 0 = auto: max(8, elements/100)

    bool selects() const { return kind == Kind::KlSelect || kind == Kind::MagnitudeTopK; }

    static FusionPolicy base_only() { return {}; }
    static FusionPolicy content_only() { return {Kind::ContentOnly}; }
    static FusionPolicy style_only() { return {Kind::StyleOnly}; }
    static FusionPolicy direct_merge(double lc = 1.0, double ls = 1.0) {
        FusionPolicy p{Kind::DirectMerge};
        p.lambda_c = lc;
        p.lambda_s = ls;
        return p;
    }
    static FusionPolicy kl_select(Criterion c = Criterion::KL, double temp = 1.0) {
        FusionPolicy p{Kind::KlSelect};
        p.criterion = c;
        p.temperature = temp;
        return p;
    }
    static FusionPolicy magnitude_topk(std::size_t k = 0) {
        FusionPolicy p{Kind::MagnitudeTopK};
        p.topk = k;
        return p;
    }
};

struct SelectionRecord {
    Branch choice;
    double d_c = 0.0;
    double d_s = 0.0;
};

/// One row per sampling step; one record per adapted layer. Policies that do
/// not select produce empty rows.
using TraceRow = std::vector<SelectionRecord>;

struct SelectionTrace {
    std::vector<std::size_t> layer_indices;
    std::vector<TraceRow> rows;

    void write_csv(std::ostream& os) const {
        os << "step,layer,choice,d_c,d_s\n";
        char buf[64];
        for (std::size_t s = 0; s < rows.size(); ++s)
            for (std::size_t j = 0; j < rows[s].size(); ++j) {
                const SelectionRecord& r = rows[s][j];
                os << s << ',' << layer_indices[j] << ','
                   << (r.choice == Branch::Content ? 'C' : 'S') << ',';
                std::snprintf(buf, sizeof buf, "%.17g,%.17g", r.d_c, r.d_s);
                os << buf << '\n';
            }
    }
    void write_csv(const std::string& path) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw FormatError("trace: cannot open " + path);
        write_csv(f);
    }
};

struct TraceEntry {
    std::size_t step, layer;
    Branch choice;
    double d_c, d_s;
};

inline std::vector<TraceEntry> read_trace_csv(std::istream& is) {
    std::vector<TraceEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (lineno == 1) {
            if (line != "step,layer,choice,d_c,d_s")
                throw FormatError("trace: bad header at line 1");
            continue;
        }
        std::istringstream ss(line);
        std::string f[5];
        for (int i = 0; i < 5; ++i)
            if (!std::getline(ss, f[i], ','))
                throw FormatError("trace: malformed row at line " + std::to_string(lineno));
        try {
            TraceEntry e;
            e.step = std::stoul(f[0]);
            e.layer = std::stoul(f[1]);
            if (f[2] == "C") e.choice = Branch::Content;
            else if (f[2] == "S") e.choice = Branch::Style;
            else throw FormatError("bad choice");
            e.d_c = std::stod(f[3]);
            e.d_s = std::stod(f[4]);
            out.push_back(e);
        } catch (const std::exception&) {
            throw FormatError("trace: malformed row at line " + std::to_string(lineno));
        }
    }
    return out;
}

namespace detail {

/// log(softmax(v / temperature)) evaluated in the log domain, so entries that
/// would underflow to 0.0 as probabilities stay finite as log-probabilities.
inline Tensor log_softmax(const Tensor& v, double temperature) {
    Tensor out = Tensor::zeros(v.shape);
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v.data) mx = std::max(mx, x / temperature);
    double z = 0;
    for (double x : v.data) z += std::exp(x / temperature - mx);
    const double lz = std::log(z);
    for (std::size_t i = 0; i < v.size(); ++i) out.data[i] = v.data[i] / temperature - mx - lz;
    return out;
}

}  // namespace detail

/// Feature-change score between an adapted feature and the base feature.
/// All criteria are oriented so that a larger value means a larger change.
/// KL and JS over softmax distributions are computed in the log domain:
/// softmax probabilities are strictly positive mathematically, but the naive
/// probability-space evaluation underflows to hard zeros for large logits.
inline double divergence(Criterion c, const Tensor& f_hat, const Tensor& f,
                         double temperature = 1.0) {
    if (!f_hat.all_finite() || !f.all_finite())
        throw NumericError("divergence: non-finite features");
    switch (c) {
        case Criterion::KL: {
            const Tensor lp = detail::log_softmax(f_hat, temperature);
            const Tensor lq = detail::log_softmax(f, temperature);
            double d = 0;
            for (std::size_t i = 0; i < lp.size(); ++i)
                d += std::exp(lp.data[i]) * (lp.data[i] - lq.data[i]);
            return d;
        }
        case Criterion::JS: {
            const Tensor lp = detail::log_softmax(f_hat, temperature);
            const Tensor lq = detail::log_softmax(f, temperature);
            double d = 0;
            for (std::size_t i = 0; i < lp.size(); ++i) {
                const double p = std::exp(lp.data[i]), q = std::exp(lq.data[i]);
                // log m via the max side to keep log(p/2 + q/2) stable
                const double lm = std::max(lp.data[i], lq.data[i]) +
                                  std::log1p(std::exp(-std::abs(lp.data[i] - lq.data[i]))) -
                                  std::log(2.0);
                d += 0.5 * p * (lp.data[i] - lm) + 0.5 * q * (lq.data[i] - lm);
            }
            return d;
        }
        case Criterion::Cosine:
            return 1.0 - cosine_similarity(f_hat, f);
        case Criterion::DotProduct:
            return -dot(f_hat, f).item();
    }
    throw ContractError("divergence: unknown criterion");
}

/// Content if d_c >= d_s (ties go to content).
inline Branch select_layer(double d_c, double d_s) {
    if (std::isnan(d_c) || std::isnan(d_s))
        throw ContractError("select_layer: NaN divergence");
    return d_c >= d_s ? Branch::Content : Branch::Style;
}

/// Mean the per-sample scores over a batch, then select once.
inline Branch batch_decision(const std::vector<std::pair<double, double>>& divergences) {
    if (divergences.empty()) throw ContractError("batch_decision: empty batch");
    double dc = 0, ds = 0;
    for (const auto& [c, s] : divergences) {
        dc += c;
        ds += s;
    }
    const double n = static_cast<double>(divergences.size());
    return select_layer(dc / n, ds / n);
}

namespace detail {
inline const LoRALayer* adapter_layer(const LoRAAdapter* a, std::size_t i) {
    if (!a) return nullptr;
    auto it = a->layers.find(i);
    return it == a->layers.end() ? nullptr : &it->second;
}

/// W0 x + b + s * (alpha/r) B (A x), via the cheap low-rank route.
inline Tensor lora_forward(const LinearLayer& layer, const LoRALayer* lora,
                           const Tensor& x, double s = 1.0, GradientTrace* tr = nullptr) {
    Tensor base = forward_layer(layer, nullptr, x, tr);
    if (!lora || s == 0.0) return base;
    Tensor contrib = matmul(lora->up, matmul(lora->down, x, tr), tr);
    contrib = scale(contrib, s * lora->alpha / static_cast<double>(lora->rank()), tr);
    return add(base, contrib, tr);
}

inline double topk_abs_sum(const Tensor& delta, std::size_t k) {
    std::vector<double> mags(delta.size());
    for (std::size_t i = 0; i < delta.size(); ++i) mags[i] = std::abs(delta.data[i]);
    k = std::min(k, mags.size());
    std::partial_sort(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(k),
                      mags.end(), std::greater<double>());
    double s = 0;
    for (std::size_t i = 0; i < k; ++i) s += mags[i];
    return s;
}
}  // namespace detail

/// Base, content-adapted and style-adapted features of one layer, all from
/// the same incoming activation.
inline void branch_features(const LinearLayer& layer, const LoRALayer* lora_c,
                            const LoRALayer* lora_s, const Tensor& x, Tensor& f,
                            Tensor& f_c, Tensor& f_s) {
    f = forward_layer(layer, nullptr, x);
    f_c = detail::lora_forward(layer, lora_c, x);
    f_s = detail::lora_forward(layer, lora_s, x);
}

/// One denoiser forward pass under a fusion policy. For selecting policies a
/// record per adapted layer is appended to `row`. With `frozen` set, branch
/// choices are taken from it instead of being re-decided (used by the guided
/// gradient pass; score values are still recomputed for the row).
inline Tensor fused_forward(const DenoiserModel& model, const LoRAAdapter* content,
                            const LoRAAdapter* style, const FusionPolicy& policy,
                            const Tensor& x_t, int t, TraceRow* row = nullptr,
                            GradientTrace* tr = nullptr,
                            const std::vector<Branch>* frozen = nullptr) {
    using Kind = FusionPolicy::Kind;
    const std::set<std::size_t> adapted(model.adapted_layers.begin(),
                                        model.adapted_layers.end());
    Tensor h = concat(x_t, time_embedding(t, model.time_embed_dim), tr);
    std::size_t sel = 0;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const LinearLayer& layer = model.layers[i];
        const bool is_adapted = adapted.count(i) != 0;
        const LoRALayer* lc = is_adapted ? detail::adapter_layer(content, i) : nullptr;
        const LoRALayer* ls = is_adapted ? detail::adapter_layer(style, i) : nullptr;
        Tensor next;
        switch (policy.kind) {
            case Kind::BaseOnly:
                next = forward_layer(layer, nullptr, h, tr);
                break;
            case Kind::ContentOnly:
                next = detail::lora_forward(layer, lc, h, 1.0, tr);
                break;
            case Kind::StyleOnly:
                next = detail::lora_forward(layer, ls, h, 1.0, tr);
                break;
            case Kind::DirectMerge: {
                next = forward_layer(layer, nullptr, h, tr);
                if (lc && policy.lambda_c != 0.0) {
                    Tensor c = matmul(lc->up, matmul(lc->down, h, tr), tr);
                    next = add(next,
                               scale(c, policy.lambda_c * lc->alpha /
                                            static_cast<double>(lc->rank()), tr), tr);
                }
                if (ls && policy.lambda_s != 0.0) {
                    Tensor s = matmul(ls->up, matmul(ls->down, h, tr), tr);
                    next = add(next,
                               scale(s, policy.lambda_s * ls->alpha /
                                            static_cast<double>(ls->rank()), tr), tr);
                }
                break;
            }
            case Kind::KlSelect: {
                if (!is_adapted || (!lc && !ls)) {
                    next = forward_layer(layer, nullptr, h, tr);
                    break;
                }
                // Score computation is value-only; selections are hard.
                Tensor h_val = h;
                h_val.node = -1;
                Tensor f, f_c, f_s;
                branch_features(layer, lc, ls, h_val, f, f_c, f_s);
                const double d_c = divergence(policy.criterion, f_c, f, policy.temperature);
                const double d_s = divergence(policy.criterion, f_s, f, policy.temperature);
                const Branch ch = frozen ? (*frozen)[sel] : select_layer(d_c, d_s);
                if (row) row->push_back({ch, d_c, d_s});
                if (tr)
                    next = detail::lora_forward(layer, ch == Branch::Content ? lc : ls,
                                                h, 1.0, tr);
                else
                    next = ch == Branch::Content ? f_c : f_s;
                break;
            }
            case Kind::MagnitudeTopK: {
                if (!is_adapted || (!lc && !ls)) {
                    next = forward_layer(layer, nullptr, h, tr);
                    break;
                }
                const std::size_t k =
                    policy.topk > 0 ? policy.topk
                                    : std::max<std::size_t>(8, layer.w0.size() / 100);
                const double s_c =
                    lc ? detail::topk_abs_sum(lc->effective_delta(), k) : 0.0;
                const double s_s =
                    ls ? detail::topk_abs_sum(ls->effective_delta(), k) : 0.0;
                const Branch ch = frozen ? (*frozen)[sel] : select_layer(s_c, s_s);
                if (row) row->push_back({ch, s_c, s_s});
                next = detail::lora_forward(layer, ch == Branch::Content ? lc : ls,
                                            h, 1.0, tr);
                break;
            }
        }
        if (is_adapted && policy.selects() && (lc || ls)) ++sel;
        h = (i + 1 < model.layers.size()) ? silu(next, tr) : next;
    }
    return h;
}

}  // namespace lorafuse
