#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protopart/config.hpp"
#include "protopart/image_io.hpp"
#include "protopart/model.hpp"
#include "protopart/tensor.hpp"

namespace protopart {

inline constexpr int kClassNv = 0;
inline constexpr int kClassMel = 1;

/// "NV" / "MEL" for the binary task, "class<k>" otherwise.
std::string class_name(int k);

// --- manifests ----------------------------------------------------------------

struct ManifestRow {
    std::string image_id;  // file stem of the image path
    std::string image_path;
    int label = 0;
    std::optional<std::string> mask_path;
    std::string split;  // empty when the manifest has no split column
};

struct Manifest {
    std::string source;
    std::vector<ManifestRow> rows;
    std::vector<std::string> warnings;

    /// Rows of one split, order preserved.
    Manifest select_split(const std::string& split) const;
    bool has_split(const std::string& split) const;
    std::vector<int> labels() const;
    std::map<int, int> class_counts() const;
    const ManifestRow* find(const std::string& image_id) const;
};

/// CSV with header image,label,mask[,split]. Relative paths resolve against
/// the manifest's directory. Labels are integers in [0, num_classes) or the
/// names NV / MEL. Throws ValidationError with one item per bad row.
Manifest load_manifest(const std::string& path, int num_classes = 2, bool check_files = true);

/// Writes paths relative to the manifest's directory when possible.
void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows, bool with_split);

// --- images and masks ---------------------------------------------------------

/// RGB in [0,1]. Gray files are replicated to three channels.
InputImage load_image(const std::string& path, const std::string& id = {});
InputImage raster_to_image(const Raster& raster, const std::string& id);
Raster image_to_raster(const Tensor3& pixels);

/// Nearest-neighbor resize to height x width, threshold at 0.5, then polarity
/// normalization so that lesion = 0. An all-one result (no lesion) is
/// accepted with a warning appended to `warnings`.
LesionMask load_mask(const std::string& path, int height, int width, MaskPolarity polarity,
                     std::vector<std::string>* warnings = nullptr);
LesionMask mask_from_raster(const Raster& raster, int height, int width, MaskPolarity polarity,
                            std::vector<std::string>* warnings = nullptr);

/// Per-channel mean and standard deviation over all pixels.
std::pair<std::array<double, 3>, std::array<double, 3>> channel_statistics(std::span<const InputImage> images);

// --- synthetic data -----------------------------------------------------------

struct SynthConfig {
    int n_per_class = 100;
    unsigned long long seed = 0;
    double confound_fraction = 0.5;
    int size = 224;
    double train_fraction = 0.6;
    double val_fraction = 0.2;
};

struct SyntheticSample {
    std::string id;
    int label = 0;
    std::string split;
    Raster image;        // RGB
    LesionMask mask;     // lesion = 0, exact ellipse
    bool confound = false;
    double interior_mean = 0.0;  // mean intensity inside the lesion
};

/// Elliptical lesion whose interior brightness and texture encode the class,
/// plus a black corner in a `confound_fraction` of MEL images. Pure function
/// of the config.
std::vector<SyntheticSample> generate_synthetic(const SynthConfig& config);

/// Writes images/, masks/ (lesion-white PNGs), manifest.csv with a split
/// column and train.csv / val.csv / test.csv. Returns the full manifest.
Manifest write_synthetic(const std::vector<SyntheticSample>& samples, const std::string& out_dir);

// --- valid prototype set -------------------------------------------------------

struct ValidEntry {
    int class_id = 0;
    std::string image_id;
    PixelBox bbox;
    std::string note;
    std::string thumbnail;  // optional
    friend bool operator==(const ValidEntry&, const ValidEntry&) = default;
};

struct ValidPrototypeSet {
    std::vector<ValidEntry> entries;

    std::map<int, int> per_class_counts() const;
    friend bool operator==(const ValidPrototypeSet&, const ValidPrototypeSet&) = default;
};

inline constexpr int kDefaultValidPerClass = 25;

nlohmann::json valid_set_to_json(const ValidPrototypeSet& set);
/// Validates classes and that every bbox lies within image_size^2.
ValidPrototypeSet valid_set_from_json(const nlohmann::json& j, int image_size = 224, int num_classes = 2);

ValidPrototypeSet read_valid_set(const std::string& path, int image_size = 224, int num_classes = 2);

/// Holds an exclusive advisory lock on `path + ".lock"` while writing; throws
/// IoError if another writer holds it. Write is temp file + rename.
void write_valid_set(const std::string& path, const ValidPrototypeSet& set);

/// Crash-safe text write: temp file in the same directory, then rename.
void atomic_write(const std::string& path, const std::string& contents);

}  // namespace protopart
