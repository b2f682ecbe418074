#include "protopart/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "protopart/errors.hpp"
#include "protopart/simd.hpp"

namespace protopart {

LossGradients LossGradients::zeros(std::span<const FeatureMap> maps, const PrototypeLayer& protos,
                                   const Matrix& head, std::span<const std::vector<double>> valid) {
    LossGradients g;
    g.maps.reserve(maps.size());
    for (const auto& z : maps) g.maps.emplace_back(z.height, z.width, z.channels);
    g.prototypes = Matrix(protos.vectors.rows, protos.vectors.cols);
    g.head = Matrix(head.rows, head.cols);
    for (const auto& v : valid) g.valid.emplace_back(v.size(), 0.0);
    return g;
}

namespace {

// d||z_cell - p_j|| chained with upstream dd into dz and dp.
void push_distance_grad(const FeatureMap& z, FeatureMap& dz, std::size_t cell, std::span<const double> p,
                        std::span<double> dp, double d, double dd) {
    if (!(d > 0.0) || dd == 0.0) return;
    const auto zc = z.cell(cell);
    auto gz = dz.cell(cell);
    const double s = dd / d;
    for (std::size_t k = 0; k < p.size(); ++k) {
        const double diff = s * (zc[k] - p[k]);
        gz[k] += diff;
        dp[k] -= diff;
    }
}

void require_depth(const FeatureMap& z, const PrototypeLayer& protos) {
    if (z.channels != protos.depth()) {
        throw ConfigError("feature depth " + std::to_string(z.channels) + " does not match prototype depth " +
                          std::to_string(protos.depth()));
    }
}

// Mean of the kappa smallest distances of prototype j to the cells of z.
struct MinkTerm {
    double value = 0.0;
    std::vector<double> distances;
    std::vector<int> cells;
};

MinkTerm mink_term(const FeatureMap& z, std::span<const double> p, int kappa) {
    MinkTerm t;
    t.distances = patch_distances(z, p);
    t.cells = bottom_k_indices(t.distances, kappa);
    double sum = 0.0;
    for (int c : t.cells) sum += t.distances[c];
    t.value = sum / kappa;
    return t;
}

// Shared body of the cluster and separation terms: for each image, the
// minimum mink term over the selected prototypes.
double min_mink_loss(const BatchFeatures& batch, const PrototypeLayer& protos, int kappa, bool same_class,
                     double sign, double floor, GradSink sink) {
    if (batch.maps.size() != batch.labels.size()) throw ConfigError("maps and labels differ in length");
    const double n = batch.norm();
    double total = 0.0;
    for (std::size_t i = 0; i < batch.maps.size(); ++i) {
        const FeatureMap& z = batch.maps[i];
        require_depth(z, protos);
        const int y = batch.labels[i];
        int best = -1;
        MinkTerm best_term;
        for (int j = 0; j < protos.count(); ++j) {
            if ((protos.classes[j] == y) != same_class) continue;
            MinkTerm t = mink_term(z, protos.vectors.row(j), kappa);
            if (best < 0 || t.value < best_term.value) {
                best = j;
                best_term = std::move(t);
            }
        }
        if (best < 0) {
            throw ConfigError(std::string(same_class ? "no prototype of class " : "no prototype outside class ") +
                              std::to_string(y) + " for image " + batch.id(i));
        }
        double contribution = sign * best_term.value;
        const bool clamped = contribution < floor;
        if (clamped) contribution = floor;
        total += contribution;
        if (sink.grads != nullptr && !clamped) {
            const double dd = sink.scale * sign / (n * kappa);
            for (int c : best_term.cells) {
                push_distance_grad(z, sink.grads->maps[i], c, protos.vectors.row(best),
                                   sink.grads->prototypes.row(best), best_term.distances[c], dd);
            }
        }
    }
    return total / n;
}

}  // namespace

double cross_entropy(std::span<const double> logits, int label, std::span<double> d_logits) {
    const int k = static_cast<int>(logits.size());
    if (k < 2) throw ConfigError("cross_entropy needs at least 2 classes");
    if (label < 0 || label >= k) {
        throw ValidationError("label " + std::to_string(label) + " outside [0, " + std::to_string(k - 1) + "]");
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double l : logits) sum += std::exp(l - mx);
    const double lse = mx + std::log(sum);
    if (!d_logits.empty()) {
        for (int c = 0; c < k; ++c) d_logits[c] = std::exp(logits[c] - lse) - (c == label ? 1.0 : 0.0);
    }
    return lse - logits[label];
}

std::vector<double> inverse_frequency_weights(std::span<const int> labels, int num_classes) {
    std::vector<double> counts(num_classes, 0.0);
    for (int y : labels) counts.at(y) += 1.0;
    std::vector<double> w(num_classes, 1.0);
    for (int k = 0; k < num_classes; ++k) {
        if (counts[k] > 0.0) w[k] = static_cast<double>(labels.size()) / (num_classes * counts[k]);
    }
    return w;
}

double cross_entropy_loss(const BatchFeatures& batch, const PrototypeLayer& protos, const Matrix& head,
                          double epsilon, int top_k, std::span<const double> class_weights, GradSink sink) {
    const double n = batch.norm();
    const int m = protos.count();
    double total = 0.0;
    std::vector<double> d_logits(head.rows);
    for (std::size_t i = 0; i < batch.maps.size(); ++i) {
        const FeatureMap& z = batch.maps[i];
        require_depth(z, protos);
        std::vector<std::vector<double>> dist(m);
        std::vector<std::vector<int>> top(m);
        std::vector<double> pooled(m);
        for (int j = 0; j < m; ++j) {
            dist[j] = patch_distances(z, protos.vectors.row(j));
            std::vector<double> sim(dist[j].size());
            for (std::size_t c = 0; c < sim.size(); ++c) sim[c] = similarity_from_distance(dist[j][c], epsilon);
            top[j] = top_k_indices(sim, top_k);
            double s = 0.0;
            for (int c : top[j]) s += sim[c];
            pooled[j] = s / top_k;
        }
        const auto logits = head_scores(head, pooled);
        const int y = batch.labels[i];
        const double weight = class_weights.empty() ? 1.0 : class_weights[y];
        total += weight * cross_entropy(logits, y, sink.grads != nullptr ? std::span<double>(d_logits) : std::span<double>{});
        if (sink.grads == nullptr) continue;

        const double f = sink.scale * weight / n;
        for (int k = 0; k < head.rows; ++k) {
            for (int j = 0; j < m; ++j) sink.grads->head.at(k, j) += f * d_logits[k] * pooled[j];
        }
        for (int j = 0; j < m; ++j) {
            double d_pooled = 0.0;
            for (int k = 0; k < head.rows; ++k) d_pooled += head.at(k, j) * d_logits[k];
            d_pooled *= f / top_k;
            if (d_pooled == 0.0) continue;
            for (int c : top[j]) {
                const double d = dist[j][c];
                push_distance_grad(z, sink.grads->maps[i], c, protos.vectors.row(j), sink.grads->prototypes.row(j), d,
                                   d_pooled * similarity_derivative(d, epsilon));
            }
        }
    }
    return total / n;
}

double cluster_loss(const BatchFeatures& batch, const PrototypeLayer& protos, int kappa, GradSink sink) {
    return min_mink_loss(batch, protos, kappa, true, 1.0, -std::numeric_limits<double>::infinity(), sink);
}

double separation_loss(const BatchFeatures& batch, const PrototypeLayer& protos, int kappa, double floor,
                       GradSink sink) {
    return min_mink_loss(batch, protos, kappa, false, -1.0, floor, sink);
}

namespace {

void check_mask(const LesionMask* mask, const std::string& id, int h, int w) {
    if (mask == nullptr) throw ValidationError("missing mask for image " + id);
    if (mask->rows != h || mask->cols != w) {
        throw ValidationError("mask for image " + id + " is " + std::to_string(mask->rows) + "x" +
                              std::to_string(mask->cols) + ", expected " + std::to_string(h) + "x" + std::to_string(w));
    }
    for (auto v : mask->values) {
        if (v > 1) throw ValidationError("mask for image " + id + " is not binary");
    }
}

}  // namespace

double mask_loss_from_pams(const std::vector<std::vector<Grid>>& pams, std::span<const LesionMask* const> masks,
                           std::span<const int> prototype_classes, std::span<const int> labels) {
    if (pams.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < pams.size(); ++i) {
        for (std::size_t j = 0; j < prototype_classes.size(); ++j) {
            if (prototype_classes[j] != labels[i]) continue;
            const Grid& pam = pams[i][j];
            check_mask(masks[i], "#" + std::to_string(i), pam.rows, pam.cols);
            total += std::sqrt(simd::masked_sum_squares(pam.values, masks[i]->values));
        }
    }
    return total / static_cast<double>(pams.size());
}

double mask_loss(const BatchFeatures& batch, const PrototypeLayer& protos, std::span<const LesionMask* const> masks,
                 double epsilon, int input_height, int input_width, GradSink sink) {
    const double n = batch.norm();
    double total = 0.0;
    for (std::size_t i = 0; i < batch.maps.size(); ++i) {
        const FeatureMap& z = batch.maps[i];
        require_depth(z, protos);
        const LesionMask* mask = i < masks.size() ? masks[i] : nullptr;
        check_mask(mask, batch.id(i), input_height, input_width);
        for (int j = 0; j < protos.count(); ++j) {
            if (protos.classes[j] != batch.labels[i]) continue;
            const auto dist = patch_distances(z, protos.vectors.row(j));
            ActivationMap a(z.height, z.width);
            for (std::size_t c = 0; c < dist.size(); ++c) a.values[c] = similarity_from_distance(dist[c], epsilon);
            Grid pam = scale_up(a, input_height, input_width);
            const double norm = std::sqrt(simd::masked_sum_squares(pam.values, mask->values));
            total += norm;
            if (sink.grads == nullptr || !(norm > 0.0)) continue;

            // d||M.PAM|| / dPAM = M.PAM / ||M.PAM||  (M is binary)
            for (std::size_t p = 0; p < pam.values.size(); ++p) {
                pam.values[p] = mask->values[p] ? pam.values[p] / norm : 0.0;
            }
            const Grid da = scale_up_adjoint(pam, z.height, z.width);
            const double f = sink.scale / n;
            for (std::size_t c = 0; c < dist.size(); ++c) {
                push_distance_grad(z, sink.grads->maps[i], c, protos.vectors.row(j), sink.grads->prototypes.row(j),
                                   dist[c], f * da.values[c] * similarity_derivative(dist[c], epsilon));
            }
        }
    }
    return total / n;
}

double remembering_loss(std::span<const std::vector<double>> valid, std::span<const int> valid_classes,
                        const PrototypeLayer& protos, double epsilon, GradSink sink) {
    if (valid.empty()) throw ConfigError("remembering loss needs a non-empty valid prototype set");
    if (valid.size() != valid_classes.size()) throw ConfigError("valid embeddings and classes differ in length");
    const double n = static_cast<double>(valid.size());
    const auto& k = simd::active();
    double total = 0.0;
    for (std::size_t i = 0; i < valid.size(); ++i) {
        const auto& v = valid[i];
        if (static_cast<int>(v.size()) != protos.depth()) {
            throw ConfigError("valid patch " + std::to_string(i) + " has depth " + std::to_string(v.size()));
        }
        bool any = false;
        for (int j = 0; j < protos.count(); ++j) {
            if (protos.classes[j] != valid_classes[i]) continue;
            any = true;
            const auto p = protos.vectors.row(j);
            const double d = std::sqrt(k.squared_distance(p.data(), v.data(), v.size()));
            total -= similarity_from_distance(d, epsilon);
            if (sink.grads == nullptr || !(d > 0.0)) continue;
            const double s = -sink.scale / n * similarity_derivative(d, epsilon) / d;
            auto gp = sink.grads->prototypes.row(j);
            auto& gv = sink.grads->valid[i];
            for (std::size_t c = 0; c < v.size(); ++c) {
                const double diff = s * (p[c] - v[c]);
                gp[c] += diff;
                gv[c] -= diff;
            }
        }
        if (!any) throw ConfigError("valid patch " + std::to_string(i) + " has a class without prototypes");
    }
    return total / n;
}

double l1_offclass(const Matrix& head, std::span<const int> prototype_classes, GradSink sink) {
    double total = 0.0;
    for (int k = 0; k < head.rows; ++k) {
        for (int j = 0; j < head.cols; ++j) {
            if (prototype_classes[j] == k) continue;
            const double w = head.at(k, j);
            total += std::abs(w);
            if (sink.grads != nullptr && w != 0.0) sink.grads->head.at(k, j) += sink.scale * (w > 0.0 ? 1.0 : -1.0);
        }
    }
    return total;
}

Objective objective_for(TrainMode mode) {
    switch (mode) {
        case TrainMode::lp: return Objective::lp;
        case TrainMode::lp_lm: return Objective::lp_lm;
        case TrainMode::lp_lr: return Objective::lp_lr;
    }
    return Objective::lp;
}

std::string to_string(Objective o) {
    switch (o) {
        case Objective::lp: return "lp";
        case Objective::lp_lm: return "lp+lm";
        case Objective::lp_lr: return "lp+lr";
        case Objective::last_layer: return "last_layer";
    }
    return "lp";
}

LossReport& LossReport::operator+=(const LossReport& o) {
    total += o.total;
    for (const auto& [name, v] : o.terms) terms[name] += v;
    return *this;
}

void to_json(nlohmann::json& j, const LossReport& r) {
    j = nlohmann::json::object();
    for (const auto& [name, v] : r.terms) j[name] = v;
    j["total"] = r.total;
}

LossReport total_objective(const ObjectiveInputs& in, const LossWeights& w, Objective objective,
                           LossGradients* grads) {
    if (in.prototypes == nullptr || in.head == nullptr) throw std::logic_error("objective inputs incomplete");
    const auto& protos = *in.prototypes;
    LossReport r;
    auto add = [&](const std::string& name, double weight, double value) {
        r.terms[name] = value;
        r.total += weight * value;
    };

    const double ce = cross_entropy_loss(in.batch, protos, *in.head, in.epsilon, in.top_k, in.class_weights,
                                         {grads, 1.0});
    add("cross_entropy", 1.0, ce);

    if (objective == Objective::last_layer) {
        add("l1_offclass", w.lambda5, l1_offclass(*in.head, protos.classes, {grads, w.lambda5}));
        return r;
    }

    add("cluster", w.lambda1, cluster_loss(in.batch, protos, in.kappa, {grads, w.lambda1}));
    add("separation", w.lambda2,
        separation_loss(in.batch, protos, in.kappa, w.separation_floor, {grads, w.lambda2}));

    if (objective == Objective::lp_lm) {
        add("mask", w.lambda3,
            mask_loss(in.batch, protos, in.masks, in.epsilon, in.input_height, in.input_width, {grads, w.lambda3}));
    }
    if (objective == Objective::lp_lr && in.include_remembering) {
        add("remembering", w.lambda4,
            remembering_loss(in.valid, in.valid_classes, protos, in.epsilon, {grads, w.lambda4}));
    }
    return r;
}

}  // namespace protopart
