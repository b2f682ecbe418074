#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace protopart {

/// 8-bit raster, interleaved channels (1 = gray, 3 = RGB).
struct Raster {
    int width = 0;
    int height = 0;
    int channels = 3;
    std::vector<std::uint8_t> pixels;

    Raster() = default;
    Raster(int w, int h, int c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

    std::uint8_t* at(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * channels; }
    const std::uint8_t* at(int x, int y) const {
        return pixels.data() + (static_cast<std::size_t>(y) * width + x) * channels;
    }
};

/// Decodes a PNG. Palette, 16-bit and alpha inputs are converted; the result
/// has 1 (gray) or 3 (RGB) channels. Throws IoError.
Raster read_png(const std::string& path);

/// Throws IoError.
void write_png(const std::string& path, const Raster& image);

/// Encodes to an in-memory PNG (used for HTTP responses).
std::vector<std::uint8_t> encode_png(const Raster& image);

Raster to_rgb(const Raster& image);
Raster to_gray(const Raster& image);

}  // namespace protopart
