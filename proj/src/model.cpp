#include "protopart/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "protopart/errors.hpp"
#include "protopart/simd.hpp"

namespace protopart {

PixelBox cell_box(const ModelConfig& config, int row, int col) {
    const int cell = config.cell_size();
    return {col * cell, row * cell, cell, cell};
}

ModelState::ModelState(const ModelState& other)
    : config(other.config),
      trunk(other.trunk ? other.trunk->clone() : nullptr),
      addon(other.addon),
      prototypes(other.prototypes),
      head(other.head),
      head_grad(other.head_grad) {}

ModelState& ModelState::operator=(const ModelState& other) {
    if (this != &other) {
        ModelState copy(other);
        *this = std::move(copy);
    }
    return *this;
}

void init_head(Matrix& head, const std::vector<int>& prototype_classes, double on, double off) {
    for (int k = 0; k < head.rows; ++k) {
        for (int j = 0; j < head.cols; ++j) head.at(k, j) = prototype_classes[j] == k ? on : off;
    }
}

ModelState ModelState::initialize(const ModelConfig& config) {
    config.validate();
    ModelState m;
    m.config = config;
    std::mt19937_64 rng(config.init_seed);
    m.trunk = make_backbone(config, rng);
    m.addon = make_addon(m.trunk->output_channels(), config.latent_depth, rng);

    const int count = config.num_prototypes();
    m.prototypes.vectors = Matrix(count, config.latent_depth);
    m.prototypes.grads = Matrix(count, config.latent_depth);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (auto& v : m.prototypes.vectors.values) v = unit(rng);
    m.prototypes.classes.resize(count);
    for (int j = 0; j < count; ++j) m.prototypes.classes[j] = config.prototype_class(j);
    m.prototypes.sources.assign(count, std::nullopt);

    m.head = Matrix(config.num_classes, count);
    m.head_grad = Matrix(config.num_classes, count);
    init_head(m.head, m.prototypes.classes);
    return m;
}

void ModelState::zero_grads() {
    if (trunk) trunk->zero_grads();
    addon.zero_grads();
    std::fill(prototypes.grads.values.begin(), prototypes.grads.values.end(), 0.0);
    std::fill(head_grad.values.begin(), head_grad.values.end(), 0.0);
}

bool ModelState::has_sources() const {
    return !prototypes.sources.empty() &&
           std::all_of(prototypes.sources.begin(), prototypes.sources.end(),
                       [](const auto& s) { return s.has_value(); });
}

FeatureMap embed(const ModelState& model, const InputImage& image, EmbedTape* tape) {
    const auto& cfg = model.config;
    const auto& px = image.pixels;
    if (px.height != cfg.input_size || px.width != cfg.input_size || px.channels != 3) {
        throw ConfigError("image '" + image.id + "' is " + std::to_string(px.height) + "x" +
                          std::to_string(px.width) + "x" + std::to_string(px.channels) + ", model expects " +
                          std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size) + "x3");
    }
    Tensor3 x = px;
    for (std::size_t i = 0; i < x.values.size(); i += 3) {
        for (int c = 0; c < 3; ++c) x.values[i + c] = (x.values[i + c] - cfg.channel_mean[c]) / cfg.channel_std[c];
    }
    Tensor3 trunk_out = model.trunk->forward(x, tape != nullptr ? &tape->trunk : nullptr);
    return model.addon.forward(trunk_out, tape != nullptr ? &tape->addon : nullptr);
}

void backward_embed(ModelState& model, const EmbedTape& tape, const FeatureMap& dz, bool into_trunk) {
    if (!into_trunk) {
        model.addon.backward(tape.addon, dz, nullptr);
        return;
    }
    Tensor3 d_trunk;
    model.addon.backward(tape.addon, dz, &d_trunk);
    model.trunk->backward(*tape.trunk, d_trunk);
}

double similarity_from_distance(double d, double epsilon) { return std::log((d + 1.0) / (d + epsilon)); }

double similarity_derivative(double d, double epsilon) { return 1.0 / (d + 1.0) - 1.0 / (d + epsilon); }

std::vector<double> patch_distances(const FeatureMap& z, std::span<const double> prototype) {
    const auto& k = simd::active();
    std::vector<double> out(z.cells());
    for (std::size_t p = 0; p < out.size(); ++p) {
        out[p] = std::sqrt(k.squared_distance(z.values.data() + p * z.channels, prototype.data(), prototype.size()));
    }
    return out;
}

ActivationMap similarity_map(const FeatureMap& z, const PrototypeView& p, double epsilon) {
    if (static_cast<int>(p.vector.size()) != z.channels) {
        throw ConfigError("prototype " + std::to_string(p.id) + " has length " + std::to_string(p.vector.size()) +
                          " but the feature map depth is " + std::to_string(z.channels));
    }
    ActivationMap a(z.height, z.width);
    const auto d = patch_distances(z, p.vector);
    for (std::size_t i = 0; i < d.size(); ++i) a.values[i] = similarity_from_distance(d[i], epsilon);
    return a;
}

namespace {

std::vector<int> select_k(std::span<const double> values, int k, bool largest) {
    if (k < 1 || k > static_cast<int>(values.size())) {
        throw ConfigError("k=" + std::to_string(k) + " outside [1, " + std::to_string(values.size()) + "]");
    }
    std::vector<int> idx(values.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto before = [&](int a, int b) {
        if (values[a] != values[b]) return largest ? values[a] > values[b] : values[a] < values[b];
        return a < b;
    };
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), before);
    idx.resize(k);
    return idx;
}

}  // namespace

std::vector<int> top_k_indices(std::span<const double> values, int k) { return select_k(values, k, true); }

std::vector<int> bottom_k_indices(std::span<const double> values, int k) { return select_k(values, k, false); }

double topk_pool(const ActivationMap& a, int k) {
    const auto idx = top_k_indices(a.values, k);
    double sum = 0.0;
    for (int i : idx) sum += a.values[i];
    return sum / k;
}

std::vector<double> head_scores(const Matrix& head, std::span<const double> similarity_vector) {
    std::vector<double> scores(head.rows, 0.0);
    for (int k = 0; k < head.rows; ++k) {
        double acc = 0.0;
        for (int j = 0; j < head.cols; ++j) acc += head.at(k, j) * similarity_vector[j];
        scores[k] = acc;
    }
    return scores;
}

ForwardResult forward_features(const ModelState& model, FeatureMap z) {
    ForwardResult r;
    const int m = model.prototypes.count();
    r.activation_maps.reserve(m);
    r.logits.similarity_vector.resize(m);
    for (int j = 0; j < m; ++j) {
        r.activation_maps.push_back(similarity_map(z, model.prototypes.view(j), model.config.epsilon));
        r.logits.similarity_vector[j] = topk_pool(r.activation_maps.back(), model.config.top_k);
    }
    r.logits.scores = head_scores(model.head, r.logits.similarity_vector);
    r.features = std::move(z);
    return r;
}

ForwardResult forward(const ModelState& model, const InputImage& image) {
    return forward_features(model, embed(model, image));
}

int predicted_class(std::span<const double> scores) {
    int best = 0;
    for (int k = 1; k < static_cast<int>(scores.size()); ++k) {
        if (scores[k] > scores[best]) best = k;
    }
    return best;
}

AxisBins adaptive_bins(int out_size, int in_size) {
    AxisBins b;
    b.start.resize(out_size);
    b.end.resize(out_size);
    for (int i = 0; i < out_size; ++i) {
        const long long lo = static_cast<long long>(i) * in_size;
        const long long hi = static_cast<long long>(i + 1) * in_size;
        b.start[i] = static_cast<int>(lo / out_size);
        b.end[i] = static_cast<int>((hi + out_size - 1) / out_size);
    }
    return b;
}

// Both directions are separable: average along columns into an
// rows x width intermediate, then along rows.
Grid scale_up(const ActivationMap& a, int height, int width) {
    if (height < a.rows || width < a.cols) {
        throw ConfigError("scale_up target " + std::to_string(height) + "x" + std::to_string(width) +
                          " is smaller than the map " + std::to_string(a.rows) + "x" + std::to_string(a.cols));
    }
    const AxisBins rb = adaptive_bins(height, a.rows);
    const AxisBins cb = adaptive_bins(width, a.cols);
    Grid wide(a.rows, width);
    for (int i = 0; i < a.rows; ++i) {
        for (int c = 0; c < width; ++c) {
            double sum = 0.0;
            for (int j = cb.start[c]; j < cb.end[c]; ++j) sum += a.at(i, j);
            wide.at(i, c) = sum / (cb.end[c] - cb.start[c]);
        }
    }
    Grid out(height, width);
    for (int r = 0; r < height; ++r) {
        double* dst = &out.at(r, 0);
        const double inv = 1.0 / (rb.end[r] - rb.start[r]);
        if (rb.end[r] - rb.start[r] == 1) {
            const double* src = &wide.at(rb.start[r], 0);
            std::copy(src, src + width, dst);
            continue;
        }
        for (int i = rb.start[r]; i < rb.end[r]; ++i) {
            const double* src = &wide.at(i, 0);
            for (int c = 0; c < width; ++c) dst[c] += src[c];
        }
        for (int c = 0; c < width; ++c) dst[c] *= inv;
    }
    return out;
}

Grid scale_up_adjoint(const Grid& g, int latent_rows, int latent_cols) {
    const AxisBins rb = adaptive_bins(g.rows, latent_rows);
    const AxisBins cb = adaptive_bins(g.cols, latent_cols);
    Grid wide(latent_rows, g.cols);
    for (int r = 0; r < g.rows; ++r) {
        const double inv = 1.0 / (rb.end[r] - rb.start[r]);
        const double* src = g.values.data() + static_cast<std::size_t>(r) * g.cols;
        for (int i = rb.start[r]; i < rb.end[r]; ++i) {
            double* dst = &wide.at(i, 0);
            for (int c = 0; c < g.cols; ++c) dst[c] += src[c] * inv;
        }
    }
    Grid out(latent_rows, latent_cols);
    for (int i = 0; i < latent_rows; ++i) {
        for (int c = 0; c < g.cols; ++c) {
            const double share = wide.at(i, c) / (cb.end[c] - cb.start[c]);
            for (int j = cb.start[c]; j < cb.end[c]; ++j) out.at(i, j) += share;
        }
    }
    return out;
}

}  // namespace protopart
