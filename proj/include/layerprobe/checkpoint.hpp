#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "layerprobe/io.hpp"
#include "layerprobe/model.hpp"

namespace layerprobe {

// Checkpoint file layout: 8-byte magic "LPCKPT01", u32 little-endian manifest
// length L, L bytes of UTF-8 JSON manifest, then contiguous little-endian f32
// tensor payloads in manifest order.

inline constexpr char kCheckpointMagic[8] = {'L', 'P', 'C', 'K', 'P', 'T', '0', '1'};

inline nlohmann::json layer_spec_to_json(const LayerSpec& l) {
    nlohmann::json j;
    j["kind"] = layer_kind_name(l.kind);
    switch (l.kind) {
        case LayerKind::Conv:
            j["name"] = l.name;
            j["out_channels"] = l.out_channels;
            j["kernel"] = l.kernel;
            j["stride"] = l.stride;
            j["padding"] = l.padding;
            break;
        case LayerKind::Dense:
            j["name"] = l.name;
            j["units"] = l.units;
            break;
        default:
            break;
    }
    return j;
}

inline LayerSpec layer_spec_from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "conv") {
        return LayerSpec::conv(j.at("name").get<std::string>(), j.at("out_channels").get<int>(),
                               j.at("kernel").get<int>(), j.at("stride").get<int>(),
                               j.at("padding").get<int>());
    }
    if (kind == "relu") return LayerSpec::relu();
    if (kind == "maxpool") return LayerSpec::maxpool();
    if (kind == "flatten") return LayerSpec::flatten();
    if (kind == "dense") return LayerSpec::dense(j.at("name").get<std::string>(), j.at("units").get<int>());
    throw FormatError("unknown layer kind '" + kind + "' in model spec");
}

inline nlohmann::json model_spec_to_json(const ModelSpec& spec) {
    nlohmann::json j;
    j["input_shape"] = spec.input_shape;
    j["num_classes"] = spec.num_classes;
    j["layers"] = nlohmann::json::array();
    for (const LayerSpec& l : spec.layers) j["layers"].push_back(layer_spec_to_json(l));
    return j;
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
    ModelSpec spec;
    const auto in = j.at("input_shape");
    spec.input_shape = {in.at(0).get<int>(), in.at(1).get<int>(), in.at(2).get<int>()};
    spec.num_classes = j.at("num_classes").get<int>();
    for (const auto& lj : j.at("layers")) spec.layers.push_back(layer_spec_from_json(lj));
    return spec;
}

inline std::string checkpoint_bytes(const Model& model, const std::string& config_hash = {}) {
    nlohmann::json manifest;
    manifest["spec"] = model_spec_to_json(model.spec);
    manifest["training"] = {{"epochs", model.training.epochs},
                            {"final_train_accuracy", model.training.final_train_accuracy},
                            {"final_heldout_accuracy", model.training.final_heldout_accuracy},
                            {"seed", model.training.seed}};
    if (!config_hash.empty()) manifest["config_hash"] = config_hash;
    manifest["tensors"] = nlohmann::json::array();
    std::string payload;
    std::uint64_t offset = 0;
    model.for_each_param([&](const std::string& name, const Tensor& t) {
        nlohmann::json tj;
        tj["name"] = name;
        tj["shape"] = t.shape;
        tj["offset"] = offset;
        tj["bytes"] = t.numel() * 4;
        manifest["tensors"].push_back(tj);
        for (float v : t.data) put_f32_le(payload, v);
        offset += t.numel() * 4;
    });

    const std::string mtext = manifest.dump();
    std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
    put_u32_le(out, static_cast<std::uint32_t>(mtext.size()));
    out += mtext;
    out += payload;
    return out;
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path,
                            const std::string& config_hash = {}) {
    write_file_atomic(path, checkpoint_bytes(model, config_hash));
}

inline Model checkpoint_from_bytes(const std::string& bytes) {
    if (bytes.size() < 12) {
        throw FormatError("checkpoint truncated: " + std::to_string(bytes.size()) +
                          " bytes, need at least 12 (magic + manifest length)");
    }
    if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
        throw FormatError("bad checkpoint magic at offset 0");
    }
    const unsigned char* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint32_t mlen = get_u32_le(raw + 8);
    if (bytes.size() < 12 + static_cast<std::size_t>(mlen)) {
        throw FormatError("checkpoint truncated inside manifest at offset " + std::to_string(bytes.size()));
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(12, mlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
    }

    Model model;
    try {
        model.spec = model_spec_from_json(manifest.at("spec"));
        const auto& t = manifest.at("training");
        model.training = {t.at("epochs").get<int>(), t.at("final_train_accuracy").get<double>(),
                          t.at("final_heldout_accuracy").get<double>(),
                          t.at("seed").get<std::uint64_t>()};
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint manifest is missing fields: ") + e.what());
    }
    model.spec.validate();
    model.params.resize(model.spec.layers.size());

    const std::size_t payload_base = 12 + mlen;
    std::size_t ti = 0;
    const auto& tensors = manifest.at("tensors");
    std::uint64_t expected_offset = 0;
    auto load_tensor = [&](const std::string& name) -> Tensor {
        if (ti >= tensors.size()) throw FormatError("checkpoint manifest lacks tensor '" + name + "'");
        const auto& tj = tensors.at(ti++);
        if (tj.at("name").get<std::string>() != name) {
            throw FormatError("checkpoint tensor order mismatch: expected '" + name + "', found '" +
                              tj.at("name").get<std::string>() + "'");
        }
        const std::vector<int> shape = tj.at("shape").get<std::vector<int>>();
        const std::uint64_t offset = tj.at("offset").get<std::uint64_t>();
        const std::uint64_t nbytes = tj.at("bytes").get<std::uint64_t>();
        const std::size_t n = Tensor::checked_numel(shape);
        if (nbytes != n * 4) {
            throw FormatError("checkpoint tensor '" + name + "' declares " + std::to_string(nbytes) +
                              " bytes but its shape needs " + std::to_string(n * 4));
        }
        if (offset != expected_offset) {
            throw FormatError("checkpoint tensor '" + name + "' at offset " + std::to_string(offset) +
                              ", expected " + std::to_string(expected_offset));
        }
        expected_offset += nbytes;
        const std::size_t start = payload_base + offset;
        if (start + nbytes > bytes.size()) {
            throw FormatError("checkpoint truncated: tensor '" + name + "' needs bytes up to offset " +
                              std::to_string(start + nbytes) + ", file has " +
                              std::to_string(bytes.size()));
        }
        Tensor t(shape);
        for (std::size_t i = 0; i < n; ++i) t.data[i] = get_f32_le(raw + start + i * 4);
        return t;
    };

    for (std::size_t li = 0; li < model.spec.layers.size(); ++li) {
        const LayerSpec& l = model.spec.layers[li];
        if (l.kind != LayerKind::Conv && l.kind != LayerKind::Dense) continue;
        model.params[li].weight = load_tensor(l.name + ".weight");
        model.params[li].bias = load_tensor(l.name + ".bias");
    }
    if (ti != tensors.size()) throw FormatError("checkpoint manifest lists unexpected extra tensors");
    if (payload_base + expected_offset != bytes.size()) {
        throw FormatError("checkpoint has " + std::to_string(bytes.size() - payload_base) +
                          " payload bytes, manifest declares " + std::to_string(expected_offset));
    }
    return model;
}

inline Model load_checkpoint(const std::filesystem::path& path) {
    return checkpoint_from_bytes(read_file(path));
}

}  // namespace layerprobe
