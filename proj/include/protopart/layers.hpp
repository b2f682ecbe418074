#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "protopart/tensor.hpp"

namespace protopart {

/// A named view of a parameter tensor and its gradient accumulator.
struct ParamBlock {
    std::string name;
    std::span<double> values;
    std::span<double> grads;
};

/// 2-D convolution over HWC tensors, evaluated as im2col + per-pixel dot
/// products. Weight layout: [out][ky][kx][in].
struct Conv2d {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 1;
    int stride = 1;
    int pad = 0;
    std::vector<double> weight;
    std::vector<double> bias;
    std::vector<double> grad_weight;
    std::vector<double> grad_bias;

    Conv2d() = default;
    Conv2d(int in, int out, int k, int s, int p);

    int patch_size() const noexcept { return kernel * kernel * in_channels; }
    int output_side(int in_side) const noexcept { return (in_side + 2 * pad - kernel) / stride + 1; }

    /// He-normal weights, zero bias.
    void init_he(std::mt19937_64& rng);

    /// cols (optional) receives the im2col matrix needed by backward().
    Tensor3 forward(const Tensor3& x, std::vector<double>* cols) const;

    /// Accumulates parameter gradients and, when dx is non-null, writes the
    /// input gradient (shape of the forward input).
    void backward(const Tensor3& x, const std::vector<double>& cols, const Tensor3& dy, Tensor3* dx);
};

enum class LayerKind { conv, relu, sigmoid };

struct Layer {
    LayerKind kind = LayerKind::relu;
    std::string name;
    Conv2d conv;  // used when kind == conv
};

/// Cached activations of one Sequential forward pass.
struct SequentialTape {
    std::vector<Tensor3> activations;        // input of layer i; back() is the output
    std::vector<std::vector<double>> cols;   // im2col per layer (empty for non-conv)
};

class Sequential {
public:
    std::vector<Layer> layers;

    /// Throws NumericError naming the layer if any activation is non-finite.
    Tensor3 forward(const Tensor3& x, SequentialTape* tape) const;

    /// Back-propagates dy through the recorded pass. Parameter gradients are
    /// accumulated; dx (optional) receives the gradient w.r.t. the input.
    void backward(const SequentialTape& tape, const Tensor3& dy, Tensor3* dx);

    std::vector<ParamBlock> parameters();
    void zero_grads();
    int output_channels() const;
};

}  // namespace protopart
