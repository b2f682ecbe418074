#pragma once
// Objective terms of the prototype network. Every feature-level term can
// accumulate its gradient w.r.t. the latent maps, prototype vectors, head
// weights and valid-patch embeddings into a LossGradients sink.

#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "protopart/config.hpp"
#include "protopart/model.hpp"
#include "protopart/tensor.hpp"

namespace protopart {

struct LossGradients {
    std::vector<FeatureMap> maps;             // same shapes as the batch maps
    Matrix prototypes;                        // m x D
    Matrix head;                              // K x m
    std::vector<std::vector<double>> valid;   // one per valid embedding

    static LossGradients zeros(std::span<const FeatureMap> maps, const PrototypeLayer& protos,
                               const Matrix& head, std::span<const std::vector<double>> valid = {});
};

/// Where (and how strongly) a term writes its gradient. A null sink means
/// value-only evaluation.
struct GradSink {
    LossGradients* grads = nullptr;
    double scale = 1.0;
};

/// Latent maps of a batch with their labels. Per-image terms are summed and
/// divided by `normalizer` (0 means the number of maps), so a batch can be
/// streamed through in pieces.
struct BatchFeatures {
    std::span<const FeatureMap> maps;
    std::span<const int> labels;
    std::span<const std::string> ids;  // optional, used in error messages
    double normalizer = 0.0;

    double norm() const noexcept { return normalizer > 0.0 ? normalizer : static_cast<double>(maps.size()); }
    std::string id(std::size_t i) const { return i < ids.size() ? ids[i] : "#" + std::to_string(i); }
};

/// Softmax cross-entropy of one logit vector. When d_logits is non-empty it
/// receives dCE/dlogits.
double cross_entropy(std::span<const double> logits, int label, std::span<double> d_logits = {});

/// Inverse-frequency class weights n / (K * n_k).
std::vector<double> inverse_frequency_weights(std::span<const int> labels, int num_classes);

/// Mean cross-entropy of h(g_p(z)) over the batch; class_weights (optional)
/// scale each image's term by the weight of its label.
double cross_entropy_loss(const BatchFeatures& batch, const PrototypeLayer& protos, const Matrix& head,
                          double epsilon, int top_k, std::span<const double> class_weights = {},
                          GradSink sink = {});

/// Per image: min over same-class prototypes of the mean of the kappa
/// smallest patch distances; averaged over the batch.
double cluster_loss(const BatchFeatures& batch, const PrototypeLayer& protos, int kappa, GradSink sink = {});

/// Negated analogue of cluster_loss over prototypes of other classes. Each
/// image's contribution is clamped below at `floor`.
double separation_loss(const BatchFeatures& batch, const PrototypeLayer& protos, int kappa,
                       double floor = -1e3, GradSink sink = {});

/// Mask loss from precomputed PAMs: pams[i][j] is the input-resolution
/// activation map of prototype j on image i (only same-class prototypes are
/// read). Sum of ||M_i * PAM_ij||_2, divided by the number of images.
double mask_loss_from_pams(const std::vector<std::vector<Grid>>& pams, std::span<const LesionMask* const> masks,
                           std::span<const int> prototype_classes, std::span<const int> labels);

/// Same quantity computed from latent maps (PAM = scale_up(similarity map)).
/// Throws ValidationError for a non-binary or missing mask, naming the image.
double mask_loss(const BatchFeatures& batch, const PrototypeLayer& protos, std::span<const LesionMask* const> masks,
                 double epsilon, int input_height, int input_width, GradSink sink = {});

/// -(1/n) sum_i sum_{j in class(v_i)} similarity(||p_j - v_i||).
double remembering_loss(std::span<const std::vector<double>> valid, std::span<const int> valid_classes,
                        const PrototypeLayer& protos, double epsilon, GradSink sink = {});

/// Sum of |w_h(k, j)| over prototypes j not of class k.
double l1_offclass(const Matrix& head, std::span<const int> prototype_classes, GradSink sink = {});

enum class Objective { lp, lp_lm, lp_lr, last_layer };

Objective objective_for(TrainMode mode);
std::string to_string(Objective o);

struct LossReport {
    double total = 0.0;
    std::map<std::string, double> terms;  // raw (unweighted) values of the active terms

    LossReport& operator+=(const LossReport& o);
};

void to_json(nlohmann::json& j, const LossReport& r);

struct ObjectiveInputs {
    BatchFeatures batch;
    const PrototypeLayer* prototypes = nullptr;
    const Matrix* head = nullptr;
    double epsilon = 1e-4;
    int top_k = 1;
    int kappa = 1;
    std::span<const LesionMask* const> masks;
    int input_height = 0;
    int input_width = 0;
    std::span<const std::vector<double>> valid;
    std::span<const int> valid_classes;
    std::span<const double> class_weights;
    bool include_remembering = true;  // false when the caller adds L_R separately
};

/// CE + l1*cluster + l2*separation (+ l3*mask | + l4*remembering), or
/// CE + l5*l1_offclass for the last-layer objective.
LossReport total_objective(const ObjectiveInputs& in, const LossWeights& w, Objective objective,
                           LossGradients* grads = nullptr);

}  // namespace protopart
