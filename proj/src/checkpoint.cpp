#include "protopart/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "protopart/data.hpp"
#include "protopart/errors.hpp"
#include "protopart/hash.hpp"

namespace protopart {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename T>
void put_int(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get_int(const std::string& in, std::size_t& pos, const std::string& origin) {
    if (pos + sizeof(T) > in.size()) throw IoError("checkpoint '" + origin + "' is truncated");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace

void Archive::put(std::string name, std::string payload) {
    for (auto& [n, p] : sections) {
        if (n == name) {
            p = std::move(payload);
            return;
        }
    }
    sections.emplace_back(std::move(name), std::move(payload));
}

const std::string* Archive::find(const std::string& name) const {
    for (const auto& [n, p] : sections) {
        if (n == name) return &p;
    }
    return nullptr;
}

const std::string& Archive::get(const std::string& name) const {
    const auto* p = find(name);
    if (p == nullptr) throw IoError("checkpoint has no '" + name + "' section");
    return *p;
}

std::string Archive::serialize() const {
    std::string out = std::string(kCheckpointFormat) + "\n";
    for (const auto& [name, payload] : sections) {
        put_int<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put_int<std::uint64_t>(out, payload.size());
        out += payload;
    }
    return out;
}

Archive Archive::parse(const std::string& bytes, const std::string& origin) {
    const std::string magic = std::string(kCheckpointFormat) + "\n";
    if (bytes.compare(0, magic.size(), magic) != 0) {
        throw IoError("'" + origin + "' is not a " + kCheckpointFormat + " checkpoint");
    }
    Archive a;
    std::size_t pos = magic.size();
    while (pos < bytes.size()) {
        const auto name_len = get_int<std::uint32_t>(bytes, pos, origin);
        if (pos + name_len > bytes.size()) throw IoError("checkpoint '" + origin + "' is truncated");
        std::string name = bytes.substr(pos, name_len);
        pos += name_len;
        const auto len = get_int<std::uint64_t>(bytes, pos, origin);
        if (pos + len > bytes.size()) throw IoError("checkpoint '" + origin + "' is truncated in '" + name + "'");
        a.sections.emplace_back(std::move(name), bytes.substr(pos, len));
        pos += len;
    }
    return a;
}

std::string encode_doubles(std::span<const double> values) {
    return std::string(reinterpret_cast<const char*>(values.data()), values.size_bytes());
}

void decode_doubles(const std::string& payload, std::span<double> out, const std::string& what) {
    if (payload.size() != out.size_bytes()) {
        throw IoError("checkpoint tensor '" + what + "' holds " + std::to_string(payload.size() / sizeof(double)) +
                      " values, expected " + std::to_string(out.size()));
    }
    std::memcpy(out.data(), payload.data(), payload.size());
}

Archive model_to_archive(const ModelState& model, const nlohmann::json& meta) {
    Archive a;
    a.put("config", nlohmann::json(model.config).dump());
    auto& mutable_model = const_cast<ModelState&>(model);  // parameters() hands out mutable views
    for (const auto& block : mutable_model.trunk->parameters()) a.put("tensor:" + block.name, encode_doubles(block.values));
    for (const auto& block : mutable_model.addon.parameters()) a.put("tensor:" + block.name, encode_doubles(block.values));
    a.put("prototypes", encode_doubles(model.prototypes.vectors.values));
    a.put("head", encode_doubles(model.head.values));

    nlohmann::json sources = nlohmann::json::array();
    for (const auto& s : model.prototypes.sources) {
        if (s) {
            sources.push_back({{"image", s->image_id}, {"path", s->image_path}, {"row", s->row}, {"col", s->col}});
        } else {
            sources.push_back(nullptr);
        }
    }
    a.put("sources", sources.dump());
    a.put("meta", meta.dump());
    return a;
}

ModelState model_from_archive(const Archive& archive) {
    ModelConfig config;
    try {
        config = nlohmann::json::parse(archive.get("config")).get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint config is malformed: ") + e.what());
    }
    ModelState m = ModelState::initialize(config);
    for (auto& block : m.trunk->parameters()) decode_doubles(archive.get("tensor:" + block.name), block.values, block.name);
    for (auto& block : m.addon.parameters()) decode_doubles(archive.get("tensor:" + block.name), block.values, block.name);
    decode_doubles(archive.get("prototypes"), m.prototypes.vectors.values, "prototypes");
    decode_doubles(archive.get("head"), m.head.values, "head");

    try {
        const auto sources = nlohmann::json::parse(archive.get("sources"));
        if (!sources.is_array() || static_cast<int>(sources.size()) != m.prototypes.count()) {
            throw IoError("checkpoint source table does not list every prototype");
        }
        for (std::size_t j = 0; j < sources.size(); ++j) {
            const auto& s = sources[j];
            if (s.is_null()) continue;
            m.prototypes.sources[j] = PrototypeSource{s.at("image").get<std::string>(), s.value("path", std::string{}),
                                                      s.at("row").get<int>(), s.at("col").get<int>()};
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint source table is malformed: ") + e.what());
    }
    return m;
}

std::string checkpoint_id_of_bytes(const std::string& bytes) { return to_hex(fnv1a(bytes)); }

std::string save_checkpoint(const std::string& path, const ModelState& model, const nlohmann::json& meta,
                            const std::optional<std::string>& train_state) {
    Archive a = model_to_archive(model, meta);
    if (train_state) a.put("train_state", *train_state);
    const std::string bytes = a.serialize();
    atomic_write(path, bytes);
    return checkpoint_id_of_bytes(bytes);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();
    const Archive a = Archive::parse(bytes, path);
    Checkpoint c;
    c.model = model_from_archive(a);
    if (const auto* meta = a.find("meta")) {
        try {
            c.meta = nlohmann::json::parse(*meta);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("checkpoint '" + path + "' has malformed meta: " + e.what());
        }
    }
    if (const auto* ts = a.find("train_state")) c.train_state = *ts;
    c.id = checkpoint_id_of_bytes(bytes);
    return c;
}

}  // namespace protopart
