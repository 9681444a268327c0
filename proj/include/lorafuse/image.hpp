#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include "lorafuse/tensor.hpp"

namespace lorafuse {

/// Binary PGM ("P5"), pixel = round(clamp((x+1)/2, 0, 1) * 255), row-major.
inline void write_pgm(std::ostream& os, const Tensor& img, std::size_t width,
                      std::size_t height) {
    if (img.size() != width * height) throw DimError("write_pgm: size mismatch");
    os << "P5\n" << width << ' ' << height << "\n255\n";
    for (double v : img.data) {
        const double u = std::clamp((v + 1.0) / 2.0, 0.0, 1.0);
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(u * 255.0))));
    }
}

inline void write_pgm(const std::string& path, const Tensor& img, std::size_t width,
                      std::size_t height) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("write_pgm: cannot open " + path);
    write_pgm(f, img, width, height);
    if (!f) throw FormatError("write_pgm: write failed for " + path);
}

/// Reads a binary PGM back into [-1, 1] (inverse of write_pgm up to
/// quantization).
inline Tensor read_pgm(const std::string& path, std::size_t& width, std::size_t& height) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("read_pgm: cannot open " + path);
    std::string magic;
    std::size_t maxval = 0;
    f >> magic >> width >> height >> maxval;
    if (magic != "P5" || maxval != 255) throw FormatError("read_pgm: not an 8-bit P5 file");
    f.get();  // single whitespace after header
    Tensor img = Tensor::zeros({width * height});
    for (double& v : img.data) {
        const int c = f.get();
        if (c == EOF) throw FormatError("read_pgm: truncated pixel data");
        v = static_cast<double>(c) / 255.0 * 2.0 - 1.0;
    }
    return img;
}

}  // namespace lorafuse
