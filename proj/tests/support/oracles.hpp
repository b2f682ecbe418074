#pragma once
// Brute-force reference computations used by the unit and acceptance tests.
// Nothing in here calls into the library's math; each function is a direct
// loop over the defining formula so that it can catch mistakes in the
// optimized code paths.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "protopart/model.hpp"
#include "protopart/tensor.hpp"

namespace oracle {

using protopart::FeatureMap;
using protopart::Grid;
using protopart::LesionMask;
using protopart::Matrix;

double distance(std::span<const double> a, std::span<const double> b);
double similarity(double d, double eps);

/// Row-major latent map of similarities to one prototype.
std::vector<double> similarity_map(const FeatureMap& z, std::span<const double> p, double eps);

/// Mean of the k largest values, via a full descending sort.
double topk_mean(std::vector<double> values, int k);
/// Mean of the k smallest values, via a full ascending sort.
double bottomk_mean(std::vector<double> values, int k);

/// Adaptive-bin upscaling computed with a 2-D double loop per output pixel.
Grid scale_up(const std::vector<double>& latent, int rows, int cols, int height, int width);

double cross_entropy(std::span<const double> logits, int label);

/// Per-class prototype sets given as (vectors, classes).
struct Prototypes {
    std::vector<std::vector<double>> vectors;
    std::vector<int> classes;
};

double cluster(const std::vector<FeatureMap>& maps, const std::vector<int>& labels, const Prototypes& p, int kappa);
double separation(const std::vector<FeatureMap>& maps, const std::vector<int>& labels, const Prototypes& p,
                  int kappa, double floor);
double mask(const std::vector<FeatureMap>& maps, const std::vector<int>& labels, const Prototypes& p,
            const std::vector<LesionMask>& masks, double eps, int height, int width);
double remembering(const std::vector<std::vector<double>>& valid, const std::vector<int>& valid_classes,
                   const Prototypes& p, double eps);
double l1_offclass(const Matrix& head, const std::vector<int>& classes);

/// Class scores of one map: head * topk-pooled similarities.
std::vector<double> logits(const FeatureMap& z, const Prototypes& p, const Matrix& head, double eps, int top_k);
double mean_cross_entropy(const std::vector<FeatureMap>& maps, const std::vector<int>& labels,
                          const Prototypes& p, const Matrix& head, double eps, int top_k);

/// Optimal (minimum total distance) per-class assignment of prototypes to
/// distinct images, by enumerating permutations. Returns per prototype the
/// chosen image index and flat cell index.
struct Assignment {
    std::vector<int> image;
    std::vector<int> cell;
    double total = 0.0;
};
Assignment exhaustive_projection(const std::vector<FeatureMap>& maps, const std::vector<int>& labels,
                                 const Prototypes& p);

/// Confusion matrix [true][predicted] by counting.
std::vector<std::vector<long>> confusion(const std::vector<int>& labels, const std::vector<int>& predicted, int k);

}  // namespace oracle

namespace testkit {

using Rng = std::mt19937_64;

protopart::FeatureMap random_map(Rng& rng, int rows, int cols, int depth, double lo = 0.0, double hi = 1.0);
std::vector<double> random_vector(Rng& rng, int n, double lo = 0.0, double hi = 1.0);
protopart::LesionMask random_mask(Rng& rng, int rows, int cols, double p_one = 0.5);
protopart::Matrix random_matrix(Rng& rng, int rows, int cols, double lo = -1.0, double hi = 1.0);

/// Prototype layer with m_k prototypes per class, uniform entries.
protopart::PrototypeLayer random_prototypes(Rng& rng, int classes, int per_class, int depth);
oracle::Prototypes to_oracle(const protopart::PrototypeLayer& layer);

/// Central differences of f over every entry of `params` (restored after).
std::vector<double> numeric_gradient(const std::function<double()>& f, std::span<double> params, double step = 1e-5);

/// ||a - b|| / max(||a||, ||b||), or the absolute difference when both are
/// tiny.
double relative_error(std::span<const double> a, std::span<const double> b);

/// 28x28 input, one 4x4/4 trunk block, 7x7 latent of depth `depth`.
protopart::ModelConfig tiny_model_config(int depth = 4, int per_class = 2, int top_k = 3);

/// Deterministic pseudo-image of the given side with values in [0, 1].
protopart::InputImage random_image(Rng& rng, int side, const std::string& id = "img");

/// Fresh directory under the system temp dir, removed by the destructor.
class TempDir {
public:
    explicit TempDir(const std::string& tag);
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::string& path() const noexcept { return path_; }
    std::string operator/(const std::string& name) const { return path_ + "/" + name; }

private:
    std::string path_;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

}  // namespace testkit
