#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "lorafuse/errors.hpp"

namespace lorafuse {

/// Dense row-major tensor of doubles. Immutable by convention once built;
/// `node` is the tensor's handle on an active GradientTrace (-1 = untraced).
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    int node = -1;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (element_count(shape) != data.size())
            throw DimError("tensor: shape/data size mismatch");
    }

    static std::size_t element_count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> s) {
        std::size_t n = element_count(s);
        return Tensor(std::move(s), std::vector<double>(n, 0.0));
    }
    static Tensor full(std::vector<std::size_t> s, double v) {
        std::size_t n = element_count(s);
        return Tensor(std::move(s), std::vector<double>(n, v));
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor vec(std::vector<double> d) {
        std::size_t n = d.size();
        return Tensor({n}, std::move(d));
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    bool is_scalar() const { return size() == 1; }
    double item() const {
        if (!is_scalar()) throw ContractError("item() on non-scalar tensor");
        return data[0];
    }
    double operator[](std::size_t i) const { return data[i]; }
    double& operator[](std::size_t i) { return data[i]; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline void require_finite(const Tensor& t, const char* op) {
    if (!t.all_finite())
        throw NumericError(std::string(op) + ": non-finite value in result");
}

inline double norm2(const Tensor& t) {
    double s = 0;
    for (double v : t.data) s += v * v;
    return std::sqrt(s);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw DimError("max_abs_diff: shape mismatch");
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

/// Reverse-mode tape. Single-owner, explicitly passed; ops record onto it
/// only when an operand already lives on it (or via watch()).
class GradientTrace {
public:
    using BackwardFn =
        std::function<void(const std::vector<double>& grad_out,
                           const std::vector<std::vector<double>*>& grad_parents)>;

    /// Register a tensor as a traced input (leaf). Returns a copy carrying
    /// the new node id.
    Tensor watch(const Tensor& t) {
        Tensor out = t;
        out.node = add_node({}, t.shape, nullptr);
        return out;
    }

    int add_node(std::vector<int> parents, std::vector<std::size_t> shape,
                 BackwardFn back) {
        nodes_.push_back(Node{std::move(parents), std::move(shape), std::move(back)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::size_t num_nodes() const { return nodes_.size(); }

    /// d(output)/d(wrt). `output` must be scalar; `wrt` must have been
    /// registered via watch(). A trace holding no nodes (or an untraced
    /// output) yields a zero gradient.
    Tensor gradient(const Tensor& output, const Tensor& wrt) const {
        return gradients(output, {&wrt}).front();
    }

    /// One backward sweep, many inputs.
    std::vector<Tensor> gradients(const Tensor& output,
                                  const std::vector<const Tensor*>& wrts) const {
        if (!output.is_scalar())
            throw ContractError("gradient: output is not a scalar");
        std::vector<Tensor> out;
        if (nodes_.empty()) {
            for (const Tensor* w : wrts) out.push_back(Tensor::zeros(w->shape));
            return out;
        }
        for (const Tensor* w : wrts)
            if (w->node < 0 || w->node >= static_cast<int>(nodes_.size()))
                throw UnknownInputError("gradient: wrt tensor is not on this trace");
        if (output.node < 0) {
            for (const Tensor* w : wrts) out.push_back(Tensor::zeros(w->shape));
            return out;
        }

        std::vector<std::vector<double>> grads(nodes_.size());
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            grads[i].assign(Tensor::element_count(nodes_[i].shape), 0.0);
        grads[output.node].assign(1, 1.0);

        for (int i = output.node; i >= 0; --i) {
            const Node& n = nodes_[i];
            if (!n.back) continue;
            std::vector<std::vector<double>*> pg;
            pg.reserve(n.parents.size());
            for (int p : n.parents) pg.push_back(&grads[p]);
            n.back(grads[i], pg);
        }
        for (const Tensor* w : wrts) {
            Tensor g(w->shape, grads[w->node]);
            require_finite(g, "gradient");
            out.push_back(std::move(g));
        }
        return out;
    }

private:
    struct Node {
        std::vector<int> parents;
        std::vector<std::size_t> shape;
        BackwardFn back;
    };
    std::vector<Node> nodes_;
};

namespace detail {
inline bool traced(const GradientTrace* tr, std::initializer_list<const Tensor*> ts) {
    if (!tr) return false;
    for (const Tensor* t : ts)
        if (t->node >= 0) return true;
    return false;
}
}  // namespace detail

/// Matrix product. Accepts [m x k]*[k x n] -> [m x n] and [m x k]*[k] -> [m].
inline Tensor matmul(const Tensor& a, const Tensor& b, GradientTrace* tr = nullptr) {
    if (a.rank() != 2) throw DimError("matmul: lhs must be a matrix");
    const std::size_t m = a.shape[0], k = a.shape[1];
    const bool vec_rhs = (b.rank() == 1);
    const std::size_t kb = vec_rhs ? b.shape[0] : b.shape[0];
    const std::size_t n = vec_rhs ? 1 : b.shape[1];
    if (b.rank() != 1 && b.rank() != 2)
        throw DimError("matmul: rhs must be a matrix or vector");
    if (k != kb) throw DimError("matmul: inner dimensions disagree");

    Tensor out = vec_rhs ? Tensor::zeros({m}) : Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.data[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j)
                out.data[i * n + j] += av * b.data[p * n + j];
        }
    require_finite(out, "matmul");

    if (detail::traced(tr, {&a, &b})) {
        std::vector<int> parents;
        int ia = -1, ib = -1;
        if (a.node >= 0) { ia = static_cast<int>(parents.size()); parents.push_back(a.node); }
        if (b.node >= 0) { ib = static_cast<int>(parents.size()); parents.push_back(b.node); }
        std::vector<double> av = a.data, bv = b.data;
        out.node = tr->add_node(
            parents, out.shape,
            [m, k, n, ia, ib, av, bv](const std::vector<double>& g,
                                      const std::vector<std::vector<double>*>& pg) {
                if (ia >= 0)  // dA = G * B^T
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                            double s = 0;
                            for (std::size_t j = 0; j < n; ++j)
                                s += g[i * n + j] * bv[p * n + j];
                            (*pg[ia])[i * k + p] += s;
                        }
                if (ib >= 0)  // dB = A^T * G
                    for (std::size_t p = 0; p < k; ++p)
                        for (std::size_t j = 0; j < n; ++j) {
                            double s = 0;
                            for (std::size_t i = 0; i < m; ++i)
                                s += av[i * k + p] * g[i * n + j];
                            (*pg[ib])[p * n + j] += s;
                        }
            });
    }
    return out;
}

namespace detail {
// Elementwise binary op with per-operand grad sign.
inline Tensor ewise2(const Tensor& a, const Tensor& b, double sb, const char* name,
                     GradientTrace* tr) {
    if (!a.same_shape(b)) throw DimError(std::string(name) + ": shape mismatch");
    Tensor out = a;
    out.node = -1;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += sb * b.data[i];
    require_finite(out, name);
    if (traced(tr, {&a, &b})) {
        std::vector<int> parents;
        int ia = -1, ib = -1;
        if (a.node >= 0) { ia = static_cast<int>(parents.size()); parents.push_back(a.node); }
        if (b.node >= 0) { ib = static_cast<int>(parents.size()); parents.push_back(b.node); }
        out.node = tr->add_node(
            parents, out.shape,
            [ia, ib, sb](const std::vector<double>& g,
                         const std::vector<std::vector<double>*>& pg) {
                if (ia >= 0)
                    for (std::size_t i = 0; i < g.size(); ++i) (*pg[ia])[i] += g[i];
                if (ib >= 0)
                    for (std::size_t i = 0; i < g.size(); ++i) (*pg[ib])[i] += sb * g[i];
            });
    }
    return out;
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b, GradientTrace* tr = nullptr) {
    return detail::ewise2(a, b, 1.0, "add", tr);
}
inline Tensor sub(const Tensor& a, const Tensor& b, GradientTrace* tr = nullptr) {
    return detail::ewise2(a, b, -1.0, "sub", tr);
}

/// Multiply by a plain (untraced) scalar constant.
inline Tensor scale(const Tensor& a, double c, GradientTrace* tr = nullptr) {
    Tensor out = a;
    out.node = -1;
    for (double& v : out.data) v *= c;
    require_finite(out, "scale");
    if (detail::traced(tr, {&a})) {
        out.node = tr->add_node(
            {a.node}, out.shape,
            [c](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
                for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += c * g[i];
            });
    }
    return out;
}

/// Concatenate two 1-D tensors.
inline Tensor concat(const Tensor& a, const Tensor& b, GradientTrace* tr = nullptr) {
    if (a.rank() != 1 || b.rank() != 1) throw DimError("concat: operands must be 1-D");
    std::vector<double> d = a.data;
    d.insert(d.end(), b.data.begin(), b.data.end());
    Tensor out({a.size() + b.size()}, std::move(d));
    if (detail::traced(tr, {&a, &b})) {
        std::vector<int> parents;
        int ia = -1, ib = -1;
        if (a.node >= 0) { ia = static_cast<int>(parents.size()); parents.push_back(a.node); }
        if (b.node >= 0) { ib = static_cast<int>(parents.size()); parents.push_back(b.node); }
        const std::size_t na = a.size();
        out.node = tr->add_node(
            parents, out.shape,
            [ia, ib, na](const std::vector<double>& g,
                         const std::vector<std::vector<double>*>& pg) {
                if (ia >= 0)
                    for (std::size_t i = 0; i < na; ++i) (*pg[ia])[i] += g[i];
                if (ib >= 0)
                    for (std::size_t i = na; i < g.size(); ++i) (*pg[ib])[i - na] += g[i];
            });
    }
    return out;
}

/// Elementwise x * sigmoid(x).
inline Tensor silu(const Tensor& a, GradientTrace* tr = nullptr) {
    Tensor out = a;
    out.node = -1;
    for (double& v : out.data) v = v / (1.0 + std::exp(-v));
    require_finite(out, "silu");
    if (detail::traced(tr, {&a})) {
        std::vector<double> x = a.data;
        out.node = tr->add_node(
            {a.node}, out.shape,
            [x](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double s = 1.0 / (1.0 + std::exp(-x[i]));
                    (*pg[0])[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                }
            });
    }
    return out;
}

inline Tensor sum(const Tensor& a, GradientTrace* tr = nullptr) {
    double s = std::accumulate(a.data.begin(), a.data.end(), 0.0);
    Tensor out = Tensor::scalar(s);
    require_finite(out, "sum");
    if (detail::traced(tr, {&a})) {
        out.node = tr->add_node(
            {a.node}, out.shape,
            [](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
                for (double& v : *pg[0]) v += g[0];
            });
    }
    return out;
}

inline Tensor dot(const Tensor& a, const Tensor& b, GradientTrace* tr = nullptr) {
    if (!a.same_shape(b)) throw DimError("dot: shape mismatch");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    Tensor out = Tensor::scalar(s);
    require_finite(out, "dot");
    if (detail::traced(tr, {&a, &b})) {
        std::vector<int> parents;
        int ia = -1, ib = -1;
        if (a.node >= 0) { ia = static_cast<int>(parents.size()); parents.push_back(a.node); }
        if (b.node >= 0) { ib = static_cast<int>(parents.size()); parents.push_back(b.node); }
        std::vector<double> av = a.data, bv = b.data;
        out.node = tr->add_node(
            parents, out.shape,
            [ia, ib, av, bv](const std::vector<double>& g,
                             const std::vector<std::vector<double>*>& pg) {
                if (ia >= 0)
                    for (std::size_t i = 0; i < av.size(); ++i) (*pg[ia])[i] += g[0] * bv[i];
                if (ib >= 0)
                    for (std::size_t i = 0; i < bv.size(); ++i) (*pg[ib])[i] += g[0] * av[i];
            });
    }
    return out;
}

/// cos(ref, x) for a constant unit-norm reference; single custom node so the
/// normalization of x stays inside the op.
inline Tensor unit_cosine(const Tensor& ref_unit, const Tensor& x,
                          GradientTrace* tr = nullptr) {
    if (!ref_unit.same_shape(x)) throw DimError("unit_cosine: shape mismatch");
    const double nx = norm2(x);
    if (nx <= 0.0) throw DegenerateInputError("unit_cosine: zero-norm input");
    double d = 0;
    for (std::size_t i = 0; i < x.size(); ++i) d += ref_unit.data[i] * x.data[i];
    Tensor out = Tensor::scalar(d / nx);
    require_finite(out, "unit_cosine");
    if (detail::traced(tr, {&x})) {
        std::vector<double> c = ref_unit.data, xv = x.data;
        const double cos_v = out.item();
        out.node = tr->add_node(
            {x.node}, out.shape,
            [c, xv, nx, cos_v](const std::vector<double>& g,
                               const std::vector<std::vector<double>*>& pg) {
                // d cos / dx = c/|x| - cos * x/|x|^2
                for (std::size_t i = 0; i < xv.size(); ++i)
                    (*pg[0])[i] += g[0] * (c[i] / nx - cos_v * xv[i] / (nx * nx));
            });
    }
    return out;
}

/// Per-patch mean and standard deviation over fixed index groups; output is
/// [2P]: means first, then stds. A small epsilon keeps the sqrt smooth for
/// constant patches.
inline Tensor patch_stats(const Tensor& x,
                          const std::vector<std::vector<std::size_t>>& patches,
                          GradientTrace* tr = nullptr) {
    constexpr double kEps = 1e-12;
    const std::size_t P = patches.size();
    Tensor out = Tensor::zeros({2 * P});
    std::vector<double> mu(P), sd(P);
    for (std::size_t p = 0; p < P; ++p) {
        const auto& idx = patches[p];
        if (idx.empty()) throw ContractError("patch_stats: empty patch");
        double m = 0;
        for (std::size_t i : idx) m += x.data[i];
        m /= static_cast<double>(idx.size());
        double v = 0;
        for (std::size_t i : idx) v += (x.data[i] - m) * (x.data[i] - m);
        v /= static_cast<double>(idx.size());
        mu[p] = m;
        sd[p] = std::sqrt(v + kEps);
        out.data[p] = mu[p];
        out.data[P + p] = sd[p];
    }
    require_finite(out, "patch_stats");
    if (detail::traced(tr, {&x})) {
        std::vector<double> xv = x.data;
        out.node = tr->add_node(
            {x.node}, out.shape,
            [patches, xv, mu, sd, P](const std::vector<double>& g,
                                     const std::vector<std::vector<double>*>& pg) {
                for (std::size_t p = 0; p < P; ++p) {
                    const auto& idx = patches[p];
                    const double n = static_cast<double>(idx.size());
                    for (std::size_t i : idx) {
                        (*pg[0])[i] += g[p] / n;
                        (*pg[0])[i] += g[P + p] * (xv[i] - mu[p]) / (n * sd[p]);
                    }
                }
            });
    }
    return out;
}

/// Numerically stable softmax over a 1-D tensor (value-only; selection
/// decisions are hard, so no gradient path is needed here).
inline Tensor softmax(const Tensor& v) {
    if (v.rank() != 1 || v.size() == 0) throw DimError("softmax: expects non-empty 1-D input");
    if (!v.all_finite()) throw NumericError("softmax: non-finite input");
    const double mx = *std::max_element(v.data.begin(), v.data.end());
    Tensor out = v;
    out.node = -1;
    double z = 0;
    for (double& x : out.data) {
        x = std::exp(x - mx);
        z += x;
    }
    for (double& x : out.data) x /= z;
    return out;
}

/// KL(p || q) for probability vectors, with 0*ln(0/q) = 0.
inline double kl_divergence(const Tensor& p, const Tensor& q) {
    if (!p.same_shape(q) || p.rank() != 1) throw DimError("kl_divergence: shape mismatch");
    double sp = 0, sq = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p.data[i] < 0 || q.data[i] < 0)
            throw PreconditionError("kl_divergence: negative entry");
        sp += p.data[i];
        sq += q.data[i];
    }
    if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9)
        throw PreconditionError("kl_divergence: input is not normalized");
    double kl = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p.data[i] == 0.0) continue;
        if (q.data[i] == 0.0)
            throw DivergenceUndefinedError("kl_divergence: q has zero mass where p > 0");
        kl += p.data[i] * std::log(p.data[i] / q.data[i]);
    }
    return kl;
}

inline double cosine_similarity(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw DimError("cosine_similarity: shape mismatch");
    const double na = norm2(a), nb = norm2(b);
    if (na <= 0.0 || nb <= 0.0)
        throw DegenerateInputError("cosine_similarity: zero-norm input");
    double d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += a.data[i] * b.data[i];
    return std::clamp(d / (na * nb), -1.0, 1.0);
}

}  // namespace lorafuse
