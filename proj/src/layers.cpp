#include "protopart/layers.hpp"

#include <algorithm>
#include <cmath>

#include "protopart/errors.hpp"
#include "protopart/simd.hpp"

namespace protopart {

Conv2d::Conv2d(int in, int out, int k, int s, int p)
    : in_channels(in), out_channels(out), kernel(k), stride(s), pad(p),
      weight(static_cast<std::size_t>(out) * k * k * in, 0.0), bias(out, 0.0),
      grad_weight(weight.size(), 0.0), grad_bias(out, 0.0) {}

void Conv2d::init_he(std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / patch_size()));
    for (auto& w : weight) w = normal(rng);
    std::fill(bias.begin(), bias.end(), 0.0);
}

namespace {

// Copies the receptive field of output pixel (oy, ox) into col, zero padded.
void gather_patch(const Conv2d& conv, const Tensor3& x, int oy, int ox, double* col) {
    const int c = conv.in_channels;
    const int y0 = oy * conv.stride - conv.pad;
    const int x0 = ox * conv.stride - conv.pad;
    for (int ky = 0; ky < conv.kernel; ++ky) {
        const int iy = y0 + ky;
        for (int kx = 0; kx < conv.kernel; ++kx) {
            const int ix = x0 + kx;
            double* dst = col + (ky * conv.kernel + kx) * c;
            if (iy < 0 || iy >= x.height || ix < 0 || ix >= x.width) {
                std::fill(dst, dst + c, 0.0);
            } else {
                const double* src = x.values.data() + x.index(iy, ix);
                std::copy(src, src + c, dst);
            }
        }
    }
}

void scatter_patch(const Conv2d& conv, Tensor3& dx, int oy, int ox, const double* dcol) {
    const int c = conv.in_channels;
    const int y0 = oy * conv.stride - conv.pad;
    const int x0 = ox * conv.stride - conv.pad;
    for (int ky = 0; ky < conv.kernel; ++ky) {
        const int iy = y0 + ky;
        if (iy < 0 || iy >= dx.height) continue;
        for (int kx = 0; kx < conv.kernel; ++kx) {
            const int ix = x0 + kx;
            if (ix < 0 || ix >= dx.width) continue;
            const double* src = dcol + (ky * conv.kernel + kx) * c;
            double* dst = dx.values.data() + dx.index(iy, ix);
            for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
        }
    }
}

bool is_pointwise(const Conv2d& conv) { return conv.kernel == 1 && conv.stride == 1 && conv.pad == 0; }

}  // namespace

Tensor3 Conv2d::forward(const Tensor3& x, std::vector<double>* cols) const {
    if (x.channels != in_channels) {
        throw ConfigError("conv expects " + std::to_string(in_channels) + " input channels, got " +
                          std::to_string(x.channels));
    }
    const int oh = output_side(x.height);
    const int ow = output_side(x.width);
    Tensor3 y(oh, ow, out_channels);
    const auto& k = simd::active();
    const std::size_t ps = static_cast<std::size_t>(patch_size());
    const bool pointwise = is_pointwise(*this);

    std::vector<double> scratch;
    if (cols != nullptr && !pointwise) {
        cols->assign(static_cast<std::size_t>(oh) * ow * ps, 0.0);
    } else if (cols != nullptr) {
        cols->clear();
    }
    if (!pointwise) scratch.resize(ps);

    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            const std::size_t p = static_cast<std::size_t>(oy) * ow + ox;
            const double* col;
            if (pointwise) {
                col = x.values.data() + x.index(oy, ox);
            } else {
                double* dst = cols != nullptr ? cols->data() + p * ps : scratch.data();
                gather_patch(*this, x, oy, ox, dst);
                col = dst;
            }
            double* out = y.values.data() + p * out_channels;
            for (int oc = 0; oc < out_channels; ++oc) {
                out[oc] = bias[oc] + k.dot(weight.data() + oc * ps, col, ps);
            }
        }
    }
    return y;
}

void Conv2d::backward(const Tensor3& x, const std::vector<double>& cols, const Tensor3& dy, Tensor3* dx) {
    const auto& k = simd::active();
    const std::size_t ps = static_cast<std::size_t>(patch_size());
    const bool pointwise = is_pointwise(*this);
    if (dx != nullptr) *dx = Tensor3(x.height, x.width, x.channels);
    std::vector<double> dcol(ps);

    for (int oy = 0; oy < dy.height; ++oy) {
        for (int ox = 0; ox < dy.width; ++ox) {
            const std::size_t p = static_cast<std::size_t>(oy) * dy.width + ox;
            const double* col = pointwise ? x.values.data() + x.index(oy, ox) : cols.data() + p * ps;
            const double* g = dy.values.data() + p * out_channels;
            if (dx != nullptr) std::fill(dcol.begin(), dcol.end(), 0.0);
            for (int oc = 0; oc < out_channels; ++oc) {
                if (g[oc] == 0.0) continue;
                grad_bias[oc] += g[oc];
                k.axpy(g[oc], col, grad_weight.data() + oc * ps, ps);
                if (dx != nullptr) k.axpy(g[oc], weight.data() + oc * ps, dcol.data(), ps);
            }
            if (dx != nullptr) scatter_patch(*this, *dx, oy, ox, dcol.data());
        }
    }
}

namespace {

void check_finite(const Tensor3& t, const std::string& layer) {
    for (double v : t.values) {
        if (!std::isfinite(v)) throw NumericError("non-finite activation after layer '" + layer + "'");
    }
}

}  // namespace

Tensor3 Sequential::forward(const Tensor3& x, SequentialTape* tape) const {
    if (tape != nullptr) {
        tape->activations.clear();
        tape->cols.assign(layers.size(), {});
        tape->activations.reserve(layers.size() + 1);
        tape->activations.push_back(x);
    }
    Tensor3 cur = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Layer& layer = layers[i];
        switch (layer.kind) {
            case LayerKind::conv:
                cur = layer.conv.forward(cur, tape != nullptr ? &tape->cols[i] : nullptr);
                break;
            case LayerKind::relu:
                for (auto& v : cur.values) v = v > 0.0 ? v : 0.0;
                break;
            case LayerKind::sigmoid:
                for (auto& v : cur.values) v = 1.0 / (1.0 + std::exp(-v));
                break;
        }
        check_finite(cur, layer.name);
        if (tape != nullptr) tape->activations.push_back(cur);
    }
    return cur;
}

void Sequential::backward(const SequentialTape& tape, const Tensor3& dy, Tensor3* dx) {
    Tensor3 grad = dy;
    for (std::size_t ri = layers.size(); ri-- > 0;) {
        Layer& layer = layers[ri];
        const Tensor3& in = tape.activations[ri];
        const Tensor3& out = tape.activations[ri + 1];
        const bool need_input_grad = ri > 0 || dx != nullptr;
        switch (layer.kind) {
            case LayerKind::conv: {
                Tensor3 next;
                layer.conv.backward(in, tape.cols[ri], grad, need_input_grad ? &next : nullptr);
                grad = std::move(next);
                break;
            }
            case LayerKind::relu:
                for (std::size_t i = 0; i < grad.values.size(); ++i) {
                    if (!(in.values[i] > 0.0)) grad.values[i] = 0.0;
                }
                break;
            case LayerKind::sigmoid:
                for (std::size_t i = 0; i < grad.values.size(); ++i) {
                    const double s = out.values[i];
                    grad.values[i] *= s * (1.0 - s);
                }
                break;
        }
        if (!need_input_grad) return;
    }
    if (dx != nullptr) *dx = std::move(grad);
}

std::vector<ParamBlock> Sequential::parameters() {
    std::vector<ParamBlock> out;
    for (auto& layer : layers) {
        if (layer.kind != LayerKind::conv) continue;
        out.push_back({layer.name + ".weight", layer.conv.weight, layer.conv.grad_weight});
        out.push_back({layer.name + ".bias", layer.conv.bias, layer.conv.grad_bias});
    }
    return out;
}

void Sequential::zero_grads() {
    for (auto& layer : layers) {
        if (layer.kind != LayerKind::conv) continue;
        std::fill(layer.conv.grad_weight.begin(), layer.conv.grad_weight.end(), 0.0);
        std::fill(layer.conv.grad_bias.begin(), layer.conv.grad_bias.end(), 0.0);
    }
}

int Sequential::output_channels() const {
    for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
        if (it->kind == LayerKind::conv) return it->conv.out_channels;
    }
    return 0;
}

}  // namespace protopart
