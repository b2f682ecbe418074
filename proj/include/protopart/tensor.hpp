#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace protopart {

/// Height x width x channels, row-major with channels innermost, so the
/// channel vector of one spatial cell is contiguous.
struct Tensor3 {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> values;

    Tensor3() = default;
    Tensor3(int h, int w, int c, double fill = 0.0)
        : height(h), width(w), channels(c), values(static_cast<std::size_t>(h) * w * c, fill) {}

    std::size_t cells() const noexcept { return static_cast<std::size_t>(height) * width; }
    std::size_t index(int r, int c, int ch = 0) const noexcept {
        return (static_cast<std::size_t>(r) * width + c) * channels + ch;
    }
    double& at(int r, int c, int ch) noexcept { return values[index(r, c, ch)]; }
    double at(int r, int c, int ch) const noexcept { return values[index(r, c, ch)]; }

    std::span<double> cell(int r, int c) noexcept {
        return {values.data() + index(r, c), static_cast<std::size_t>(channels)};
    }
    std::span<const double> cell(int r, int c) const noexcept {
        return {values.data() + index(r, c), static_cast<std::size_t>(channels)};
    }
    std::span<const double> cell(std::size_t flat) const noexcept {
        return {values.data() + flat * channels, static_cast<std::size_t>(channels)};
    }
    std::span<double> cell(std::size_t flat) noexcept {
        return {values.data() + flat * channels, static_cast<std::size_t>(channels)};
    }

    bool same_shape(const Tensor3& o) const noexcept {
        return height == o.height && width == o.width && channels == o.channels;
    }
    friend bool operator==(const Tensor3&, const Tensor3&) = default;
};

/// Latent feature map z: H_z x W_z x D.
using FeatureMap = Tensor3;

/// Dense 2-D grid of reals (activation maps, PAMs).
struct Grid {
    int rows = 0;
    int cols = 0;
    std::vector<double> values;

    Grid() = default;
    Grid(int r, int c, double fill = 0.0)
        : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, fill) {}

    double& at(int r, int c) noexcept { return values[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const noexcept { return values[static_cast<std::size_t>(r) * cols + c]; }
    std::size_t size() const noexcept { return values.size(); }
    friend bool operator==(const Grid&, const Grid&) = default;
};

/// Per-patch prototype similarity at latent resolution.
using ActivationMap = Grid;

/// Row-major matrix.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> values;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0)
        : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, fill) {}

    double& at(int r, int c) noexcept { return values[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const noexcept { return values[static_cast<std::size_t>(r) * cols + c]; }
    std::span<double> row(int r) noexcept {
        return {values.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
    }
    std::span<const double> row(int r) const noexcept {
        return {values.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
    }
    friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// Binary relevance grid: 0 = lesion (relevant), 1 = not relevant.
struct LesionMask {
    enum class Provenance { dataset, auto_segmented, synthetic };

    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> values;
    Provenance provenance = Provenance::dataset;

    LesionMask() = default;
    LesionMask(int r, int c, std::uint8_t fill = 0)
        : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, fill) {}

    std::uint8_t at(int r, int c) const noexcept { return values[static_cast<std::size_t>(r) * cols + c]; }
    std::uint8_t& at(int r, int c) noexcept { return values[static_cast<std::size_t>(r) * cols + c]; }
};

/// RGB image with pixels in [0,1], stored as a height x width x 3 tensor.
struct InputImage {
    std::string id;
    Tensor3 pixels;
    std::optional<int> label;
};

}  // namespace protopart
