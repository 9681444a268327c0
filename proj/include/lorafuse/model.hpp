#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <vector>

#include "lorafuse/rng.hpp"
#include "lorafuse/tensor.hpp"

namespace lorafuse {

/// Sinusoidal timestep embedding: entry 2k = sin(t*w_k), 2k+1 = cos(t*w_k),
/// w_k = 10000^(-2k/dim).
inline Tensor time_embedding(int t, std::size_t dim) {
    if (dim == 0 || dim % 2 != 0)
        throw ContractError("time_embedding: dim must be even and positive");
    if (t < 0) throw ContractError("time_embedding: negative timestep");
    Tensor e = Tensor::zeros({dim});
    for (std::size_t k = 0; k < dim / 2; ++k) {
        const double w = std::pow(10000.0, -2.0 * static_cast<double>(k) /
                                               static_cast<double>(dim));
        e.data[2 * k] = std::sin(t * w);
        e.data[2 * k + 1] = std::cos(t * w);
    }
    return e;
}

struct LinearLayer {
    Tensor w0;    // [m x n]
    Tensor bias;  // [m]

    std::size_t out_dim() const { return w0.shape[0]; }
    std::size_t in_dim() const { return w0.shape[1]; }
};

/// y = (W0 + dW) x + b. Pass delta = nullptr for the base path.
inline Tensor forward_layer(const LinearLayer& layer, const Tensor* delta,
                            const Tensor& x, GradientTrace* tr = nullptr) {
    if (x.rank() != 1 || x.size() != layer.in_dim())
        throw DimError("forward_layer: input dimension mismatch");
    if (delta) {
        if (!delta->same_shape(layer.w0))
            throw DimError("forward_layer: delta shape mismatch");
        Tensor w = add(layer.w0, *delta);
        return add(matmul(w, x, tr), layer.bias, tr);
    }
    return add(matmul(layer.w0, x, tr), layer.bias, tr);
}

/// Low-rank update for one layer: dW = (alpha/r) * up * down.
struct LoRALayer {
    Tensor down;  // A: [r x n]
    Tensor up;    // B: [m x r]
    double alpha = 0.0;

    std::size_t rank() const { return down.shape[0]; }

    Tensor effective_delta() const {
        if (up.shape[1] != down.shape[0])
            throw DimError("lora: up/down rank mismatch");
        return scale(matmul(up, down), alpha / static_cast<double>(rank()));
    }
};

struct LoRAAdapter {
    std::map<std::size_t, LoRALayer> layers;  // host layer index -> pair

    bool has(std::size_t i) const { return layers.count(i) != 0; }
    bool is_zero() const {
        for (const auto& [i, l] : layers)
            for (double v : l.up.data)
                if (v != 0.0) return false;
        return true;
    }
};

struct DenoiserModel {
    std::vector<LinearLayer> layers;
    std::size_t input_dim = 0;
    std::size_t time_embed_dim = 16;
    std::vector<std::size_t> adapted_layers;  // indices eligible for adapters

    std::size_t num_layers() const { return layers.size(); }

    void validate() const {
        if (layers.empty()) throw ContractError("model: no layers");
        std::size_t d = input_dim + time_embed_dim;
        for (const auto& l : layers) {
            if (l.in_dim() != d) throw DimError("model: layer chain broken");
            d = l.out_dim();
        }
        if (d != input_dim) throw DimError("model: output dim != input dim");
        for (std::size_t i : adapted_layers)
            if (i >= layers.size()) throw ContractError("model: bad adapted layer index");
    }

    /// Base forward pass (no adapters): concat time embedding, silu between
    /// hidden layers, linear output layer.
    Tensor forward(const Tensor& x_t, int t, GradientTrace* tr = nullptr) const {
        Tensor h = concat(x_t, time_embedding(t, time_embed_dim), tr);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            h = forward_layer(layers[i], nullptr, h, tr);
            if (i + 1 < layers.size()) h = silu(h, tr);
        }
        return h;
    }
};

/// Toy denoiser: input_dim -> hidden^n_hidden -> input_dim, all layers
/// adapter-eligible. Weights ~ N(0, 1/fan_in), biases zero.
inline DenoiserModel make_denoiser(std::size_t input_dim, std::size_t hidden_dim,
                                   std::size_t n_hidden, std::size_t time_embed_dim,
                                   Rng& rng) {
    DenoiserModel m;
    m.input_dim = input_dim;
    m.time_embed_dim = time_embed_dim;
    std::size_t in = input_dim + time_embed_dim;
    std::vector<std::size_t> outs(n_hidden, hidden_dim);
    outs.push_back(input_dim);
    for (std::size_t li = 0; li < outs.size(); ++li) {
        const std::size_t out = outs[li];
        LinearLayer l;
        l.w0 = rng.gauss_tensor({out, in});
        const double s = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& v : l.w0.data) v *= s;
        l.bias = Tensor::zeros({out});
        m.layers.push_back(std::move(l));
        m.adapted_layers.push_back(li);
        in = out;
    }
    m.validate();
    return m;
}

/// Fresh adapter for every adapted layer: A ~ N(0, 0.02), B = 0, so the
/// adapter starts as an exact no-op. Default alpha = r (scale 1).
inline LoRAAdapter make_adapter(const DenoiserModel& model, std::size_t rank, Rng& rng,
                                double alpha = -1.0) {
    LoRAAdapter a;
    for (std::size_t i : model.adapted_layers) {
        const auto& l = model.layers[i];
        if (rank > std::min(l.out_dim(), l.in_dim()))
            throw ContractError("adapter: rank exceeds layer dimensions");
        LoRALayer ll;
        ll.down = rng.gauss_tensor({rank, l.in_dim()});
        for (double& v : ll.down.data) v *= 0.02;
        ll.up = Tensor::zeros({l.out_dim(), rank});
        ll.alpha = alpha > 0 ? alpha : static_cast<double>(rank);
        a.layers[i] = std::move(ll);
    }
    return a;
}

/// Random non-zero adapter (for tests and synthetic instances).
inline LoRAAdapter make_random_adapter(const DenoiserModel& model, std::size_t rank,
                                       Rng& rng, double magnitude = 0.1) {
    LoRAAdapter a = make_adapter(model, rank, rng);
    for (auto& [i, l] : a.layers)
        for (double& v : l.up.data) v = rng.gauss() * magnitude;
    return a;
}

}  // namespace lorafuse
