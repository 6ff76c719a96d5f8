#pragma once

// Model checkpoints: "DMMC" | u16 version | u32 header length | JSON header |
// u64 parameter count | float64 values (little-endian, declaration order).

#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynmm/config.hpp"
#include "dynmm/data.hpp"

namespace dynmm {

inline constexpr std::array<char, 4> kCheckpointMagic{'D', 'M', 'M', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct CheckpointInfo {
    ModelSpec model;
    TrainConfig train;
    std::string variant = "dynamic";
    std::optional<std::size_t> static_branch;
    std::optional<SyntheticSpec> data;
};

struct LoadedCheckpoint {
    CheckpointInfo info;
    AnyModel model;
};

inline std::vector<unsigned char> encode_checkpoint(const CheckpointInfo& info, const AnyModel& model) {
    const auto params = model_parameters(model);
    nlohmann::json header;
    header["architecture"] = info.model.architecture;
    header["model"] = model_json(info.model);
    header["train"] = info.train;
    header["variant"] = info.variant;
    header["static_branch"] = info.static_branch ? nlohmann::json(*info.static_branch) : nlohmann::json(nullptr);
    if (info.data) header["data"] = *info.data;
    auto& shapes = header["parameters"] = nlohmann::json::array();
    std::uint64_t count = 0;
    for (const auto& p : params) {
        shapes.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
        count += p.tensor.numel();
    }
    const std::string text = header.dump();
    detail::ByteWriter w;
    w.raw(kCheckpointMagic.data(), kCheckpointMagic.size());
    w.uint(kCheckpointVersion);
    w.uint(static_cast<std::uint32_t>(text.size()));
    w.raw(text.data(), text.size());
    w.uint(count);
    for (const auto& p : params) {
        for (double v : p.tensor.data()) w.f64(v);
    }
    return w.bytes();
}

// Rebuilds the architecture from the header, then overwrites its
// parameters with the stored values.
inline LoadedCheckpoint decode_checkpoint(std::vector<unsigned char> bytes) {
    try {
        detail::ByteReader r(std::move(bytes));
        if (r.str(4, "magic") != std::string(kCheckpointMagic.data(), 4)) throw CheckpointError("not a checkpoint file");
        if (r.uint<std::uint16_t>("version") != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version");
        const auto len = r.uint<std::uint32_t>("header length");
        const auto header = nlohmann::json::parse(r.str(len, "header"));

        CheckpointInfo info;
        info.model = model_spec_from_json(header.at("architecture").get<Architecture>(), header.at("model"));
        info.train = header.at("train").get<TrainConfig>();
        info.variant = header.at("variant").get<std::string>();
        if (!header.at("static_branch").is_null()) info.static_branch = header.at("static_branch").get<std::size_t>();
        if (header.contains("data")) info.data = header.at("data").get<SyntheticSpec>();

        LoadedCheckpoint out{info, build_model(info.model)};
        const auto params = model_parameters(out.model);
        const auto& listed = header.at("parameters");
        if (listed.size() != params.size()) throw CheckpointError("parameter list does not match architecture");
        for (std::size_t k = 0; k < params.size(); ++k) {
            if (listed[k].at("name").get<std::string>() != params[k].name ||
                listed[k].at("shape").get<Shape>() != params[k].tensor.shape()) {
                throw CheckpointError("parameter '" + params[k].name + "' does not match stored layout");
            }
        }
        const auto count = r.uint<std::uint64_t>("parameter count");
        std::uint64_t expected = 0;
        for (const auto& p : params) expected += p.tensor.numel();
        if (count != expected) throw CheckpointError("parameter count mismatch");
        for (const auto& p : params) {
            Tensor t = p.tensor;
            for (auto& v : t.mutable_data()) v = r.f64("parameters");
        }
        if (!r.at_end()) throw CheckpointError("unexpected trailing bytes");
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    } catch (const DatasetFormatError& e) {
        throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const std::string& path, const CheckpointInfo& info, const AnyModel& model) {
    const auto bytes = encode_checkpoint(info, model);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("failed writing '" + path + "'");
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(std::move(bytes));
}

}  // namespace dynmm
