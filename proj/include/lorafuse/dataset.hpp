#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lorafuse/rng.hpp"
#include "lorafuse/tensor.hpp"

namespace lorafuse {

enum class ContentClass { Disk, Cross };
enum class StyleClass { Plain, Stripes, Checker };

inline const char* to_string(ContentClass c) {
    return c == ContentClass::Disk ? "disk" : "cross";
}
inline const char* to_string(StyleClass s) {
    switch (s) {
        case StyleClass::Plain: return "plain";
        case StyleClass::Stripes: return "stripes";
        case StyleClass::Checker: return "checker";
    }
    return "?";
}

struct SyntheticSpec {
    std::size_t side = 16;
    double noise = 0.05;
    std::uint64_t seed = 0;
};

struct LabeledImage {
    Tensor image;
    ContentClass content;
    StyleClass style;
    std::size_t index;
};

/// Deterministic toy image: a shape on a dark background, a texture overlay,
/// seeded pixel noise, clamped to [-1, 1].
inline Tensor make_image(const SyntheticSpec& spec, ContentClass content,
                         StyleClass style, std::size_t index) {
    const std::size_t side = spec.side;
    Tensor img = Tensor::full({side * side}, -0.7);
    const double c = (static_cast<double>(side) - 1.0) / 2.0;
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            bool fg = false;
            if (content == ContentClass::Disk) {
                const double dx = static_cast<double>(x) - c, dy = static_cast<double>(y) - c;
                fg = dx * dx + dy * dy <= 25.0;  // radius 5
            } else {
                // two 3-px bars through the center
                const std::size_t lo = side / 2 - 2, hi = side / 2;
                fg = (y >= lo && y <= hi) || (x >= lo && x <= hi);
            }
            if (fg) img.data[y * side + x] = 0.7;
        }
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            double mod = 0.0;
            if (style == StyleClass::Stripes) mod = (y % 2 == 0) ? 0.5 : -0.5;
            else if (style == StyleClass::Checker) mod = ((x / 4 + y / 4) % 2 == 0) ? 0.5 : -0.5;
            img.data[y * side + x] += mod;
        }
    Rng rng(mix_seed(spec.seed, (static_cast<std::uint64_t>(content) << 32) ^
                                    (static_cast<std::uint64_t>(style) << 16) ^ index));
    for (double& v : img.data) {
        v += spec.noise * rng.gauss();
        v = std::clamp(v, -1.0, 1.0);
    }
    return img;
}

inline std::vector<LabeledImage> make_dataset(const SyntheticSpec& spec,
                                              std::size_t n_per_cell) {
    std::vector<LabeledImage> out;
    for (ContentClass c : {ContentClass::Disk, ContentClass::Cross})
        for (StyleClass s : {StyleClass::Plain, StyleClass::Stripes, StyleClass::Checker})
            for (std::size_t i = 0; i < n_per_cell; ++i)
                out.push_back({make_image(spec, c, s, i), c, s, i});
    return out;
}

/// Cells the content adapter trains on: {Cross x Plain}.
inline bool content_cell(ContentClass c, StyleClass s) {
    return c == ContentClass::Cross && s == StyleClass::Plain;
}
/// Cells the style adapter trains on: {Disk, Cross} x {Stripes}.
inline bool style_cell(ContentClass, StyleClass s) { return s == StyleClass::Stripes; }

inline std::vector<LabeledImage> filter_cells(const std::vector<LabeledImage>& data,
                                              bool (*pred)(ContentClass, StyleClass)) {
    std::vector<LabeledImage> out;
    for (const auto& d : data)
        if (pred(d.content, d.style)) out.push_back(d);
    return out;
}

}  // namespace lorafuse
