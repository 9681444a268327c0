#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorafuse/model.hpp"
#include "lorafuse/tensor.hpp"

namespace lorafuse {

using NamedTensors = std::map<std::string, Tensor>;

// File layout: 8-byte little-endian manifest length N, N bytes of JSON
// manifest {name: {dtype, shape, data_offsets}}, then the raw LE f32 payload.

inline void save_weights(const std::string& path, const NamedTensors& tensors) {
    static_assert(sizeof(float) == 4);
    nlohmann::ordered_json manifest = nlohmann::ordered_json::object();
    std::vector<float> payload;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        if (!t.all_finite())
            throw NumericError("save_weights: non-finite tensor '" + name + "'");
        const std::uint64_t bytes = t.size() * 4;
        manifest[name] = {{"dtype", "f32"},
                          {"shape", t.shape},
                          {"data_offsets", {offset, offset + bytes}}};
        for (double v : t.data) payload.push_back(static_cast<float>(v));
        offset += bytes;
    }
    const std::string mtext = manifest.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("save_weights: cannot open " + path);
    const std::uint64_t mlen = mtext.size();
    char hdr[8];
    for (int i = 0; i < 8; ++i) hdr[i] = static_cast<char>((mlen >> (8 * i)) & 0xff);
    f.write(hdr, 8);
    f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    if (!payload.empty())
        f.write(reinterpret_cast<const char*>(payload.data()),
                static_cast<std::streamsize>(payload.size() * 4));
    if (!f) throw FormatError("save_weights: write failed for " + path);
}

inline NamedTensors load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("load_weights: cannot open " + path);
    std::vector<char> raw((std::istreambuf_iterator<char>(f)),
                          std::istreambuf_iterator<char>());
    if (raw.size() < 8) throw FormatError("load_weights: file shorter than header");
    std::uint64_t mlen = 0;
    for (int i = 0; i < 8; ++i)
        mlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(raw[i])) << (8 * i);
    if (8 + mlen > raw.size()) throw FormatError("load_weights: truncated manifest");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(raw.begin() + 8, raw.begin() + 8 + static_cast<std::ptrdiff_t>(mlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("load_weights: bad manifest: ") + e.what());
    }
    const char* payload = raw.data() + 8 + mlen;
    const std::uint64_t payload_size = raw.size() - 8 - mlen;

    // Overlap check: collect [start,end) ranges.
    std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
    NamedTensors out;
    for (auto it = manifest.begin(); it != manifest.end(); ++it) {
        const std::string& name = it.key();
        const auto& desc = it.value();
        if (desc.value("dtype", "") != std::string("f32"))
            throw FormatError("load_weights: unknown dtype for tensor '" + name + "'");
        std::vector<std::size_t> shape = desc.at("shape").get<std::vector<std::size_t>>();
        const std::uint64_t s = desc.at("data_offsets").at(0).get<std::uint64_t>();
        const std::uint64_t e = desc.at("data_offsets").at(1).get<std::uint64_t>();
        const std::uint64_t count = Tensor::element_count(shape);
        if (e < s || e - s != count * 4)
            throw FormatError("load_weights: offsets disagree with shape for '" + name + "'");
        if (e > payload_size)
            throw FormatError("load_weights: payload truncated at tensor '" + name + "'");
        ranges.emplace_back(s, e);
        std::vector<double> data(count);
        for (std::uint64_t i = 0; i < count; ++i) {
            float v;
            std::memcpy(&v, payload + s + i * 4, 4);
            data[i] = static_cast<double>(v);
        }
        out.emplace(name, Tensor(std::move(shape), std::move(data)));
    }
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i)
        if (ranges[i].first < ranges[i - 1].second)
            throw FormatError("load_weights: overlapping tensor offsets");
    return out;
}

// --- model / adapter (de)serialization on top of the tensor file ---

inline void save_model(const std::string& path, const DenoiserModel& m) {
    NamedTensors t;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        t["layers." + std::to_string(i) + ".weight"] = m.layers[i].w0;
        t["layers." + std::to_string(i) + ".bias"] = m.layers[i].bias;
    }
    t["meta.input_dim"] = Tensor::scalar(static_cast<double>(m.input_dim));
    t["meta.time_embed_dim"] = Tensor::scalar(static_cast<double>(m.time_embed_dim));
    Tensor adapted = Tensor::zeros({std::max<std::size_t>(m.adapted_layers.size(), 1)});
    adapted.data.assign(m.adapted_layers.begin(), m.adapted_layers.end());
    if (adapted.data.empty()) adapted = Tensor::zeros({0});
    adapted.shape = {adapted.data.size()};
    t["meta.adapted_layers"] = adapted;
    save_weights(path, t);
}

inline DenoiserModel load_model(const std::string& path) {
    NamedTensors t = load_weights(path);
    DenoiserModel m;
    m.input_dim = static_cast<std::size_t>(t.at("meta.input_dim").item());
    m.time_embed_dim = static_cast<std::size_t>(t.at("meta.time_embed_dim").item());
    for (std::size_t i = 0;; ++i) {
        auto wi = t.find("layers." + std::to_string(i) + ".weight");
        if (wi == t.end()) break;
        LinearLayer l;
        l.w0 = wi->second;
        l.bias = t.at("layers." + std::to_string(i) + ".bias");
        m.layers.push_back(std::move(l));
    }
    for (double v : t.at("meta.adapted_layers").data)
        m.adapted_layers.push_back(static_cast<std::size_t>(v));
    m.validate();
    return m;
}

inline void save_adapter(const std::string& path, const LoRAAdapter& a) {
    NamedTensors t;
    for (const auto& [i, l] : a.layers) {
        const std::string p = "layers." + std::to_string(i) + ".";
        t[p + "lora_down"] = l.down;
        t[p + "lora_up"] = l.up;
        t[p + "alpha"] = Tensor::scalar(l.alpha);
    }
    save_weights(path, t);
}

inline LoRAAdapter load_adapter(const std::string& path) {
    NamedTensors t = load_weights(path);
    LoRAAdapter a;
    for (const auto& [name, tensor] : t) {
        if (name.rfind("layers.", 0) != 0) continue;
        const std::size_t dot = name.find('.', 7);
        const std::size_t i = std::stoul(name.substr(7, dot - 7));
        const std::string field = name.substr(dot + 1);
        LoRALayer& l = a.layers[i];
        if (field == "lora_down") l.down = tensor;
        else if (field == "lora_up") l.up = tensor;
        else if (field == "alpha") l.alpha = tensor.item();
        else throw FormatError("load_adapter: unknown field '" + name + "'");
    }
    for (const auto& [i, l] : a.layers)
        if (l.down.size() == 0 || l.up.size() == 0 || l.alpha <= 0)
            throw FormatError("load_adapter: incomplete layer " + std::to_string(i));
    return a;
}

}  // namespace lorafuse
