#pragma once
// "protopart-v1" checkpoint archive.
//
// Layout: the line "protopart-v1\n", then a sequence of sections, each
//   u32 name length | name bytes | u64 payload length | payload bytes
// with little-endian integers. Tensors are stored as raw little-endian
// doubles. Sections:
//   config        ModelConfig JSON
//   tensor:<name> one per parameter block of the trunk and add-on layers
//   prototypes    m x D matrix
//   head          K x m matrix
//   sources       JSON array, one entry (or null) per prototype
//   meta          free-form JSON (epoch, stage, mode, ...)
//   train_state   optional, opaque to this module (trainer resume data)

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "protopart/model.hpp"

namespace protopart {

inline constexpr const char* kCheckpointFormat = "protopart-v1";

/// Ordered named byte blobs.
struct Archive {
    std::vector<std::pair<std::string, std::string>> sections;

    void put(std::string name, std::string payload);
    const std::string* find(const std::string& name) const;
    /// Throws IoError naming the missing section.
    const std::string& get(const std::string& name) const;

    std::string serialize() const;
    static Archive parse(const std::string& bytes, const std::string& origin = "<memory>");
};

std::string encode_doubles(std::span<const double> values);
/// Throws IoError if the payload does not hold exactly `count` doubles.
void decode_doubles(const std::string& payload, std::span<double> out, const std::string& what);

struct Checkpoint {
    ModelState model;
    nlohmann::json meta = nlohmann::json::object();
    std::optional<std::string> train_state;
    std::string id;  // fnv1a-64 of the file bytes, hex
};

Archive model_to_archive(const ModelState& model, const nlohmann::json& meta);
ModelState model_from_archive(const Archive& archive);

/// Atomic (temp + rename). Returns the checkpoint id.
std::string save_checkpoint(const std::string& path, const ModelState& model,
                            const nlohmann::json& meta = nlohmann::json::object(),
                            const std::optional<std::string>& train_state = std::nullopt);

/// Throws IoError for unreadable, truncated or foreign files.
Checkpoint load_checkpoint(const std::string& path);

std::string checkpoint_id_of_bytes(const std::string& bytes);

}  // namespace protopart
