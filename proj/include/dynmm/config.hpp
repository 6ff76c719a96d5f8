#pragma once

// JSON conversions for model and training configuration, plus a
// type-erased model handle used by checkpoints and the harness.

#include <initializer_list>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynmm/fusion_net.hpp"
#include "dynmm/modality_moe.hpp"
#include "dynmm/trainer.hpp"

namespace dynmm {

class ConfigError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

NLOHMANN_JSON_SERIALIZE_ENUM(GateInput, {{GateInput::raw, "raw"}, {GateInput::encoded, "encoded"}})
NLOHMANN_JSON_SERIALIZE_ENUM(FusionOpKind, {{FusionOpKind::identity, "identity"},
                                            {FusionOpKind::add, "add"},
                                            {FusionOpKind::weighted_add, "weighted_add"},
                                            {FusionOpKind::se_fuse, "se_fuse"}})
NLOHMANN_JSON_SERIALIZE_ENUM(OptimizerKind, {{OptimizerKind::sgd_momentum, "sgd_momentum"},
                                             {OptimizerKind::adaptive_moments, "adaptive_moments"}})
NLOHMANN_JSON_SERIALIZE_ENUM(GateTraining, {{GateTraining::straight_through, "straight_through"},
                                            {GateTraining::annealed_soft, "annealed_soft"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Ablation, {{Ablation::full, "full"},
                                        {Ablation::one_stage, "one_stage"},
                                        {Ablation::frozen_backbone, "frozen_backbone"}})
NLOHMANN_JSON_SERIALIZE_ENUM(InferenceGate, {{InferenceGate::hard, "hard"}, {InferenceGate::soft, "soft"}})
NLOHMANN_JSON_SERIALIZE_ENUM(TaskLossKind, {{TaskLossKind::cross_entropy, "cross_entropy"},
                                            {TaskLossKind::binary_cross_entropy, "binary_cross_entropy"},
                                            {TaskLossKind::mse, "mse"},
                                            {TaskLossKind::mae, "mae"}})
NLOHMANN_JSON_SERIALIZE_ENUM(CostNormalization, {{CostNormalization::none, "none"},
                                                 {CostNormalization::cheapest_expert, "cheapest_expert"}})
NLOHMANN_JSON_SERIALIZE_ENUM(AnnealSchedule::Kind, {{AnnealSchedule::Kind::constant, "constant"},
                                                    {AnnealSchedule::Kind::exponential, "exponential"}})

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const char* context) {
    if (!j.is_object()) throw ConfigError(std::string(context) + ": expected a JSON object");
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || item.key() == a;
        if (!ok) throw ConfigError(std::string(context) + ": unknown key '" + item.key() + "'");
    }
}

// Enum strings that do not match any mapping silently become the first
// enumerator in nlohmann's macro; reject them instead.
template <typename E>
E enum_value(const nlohmann::json& j, const char* key, E fallback) {
    if (!j.contains(key)) return fallback;
    const E e = j.at(key).get<E>();
    if (nlohmann::json(e) != j.at(key)) {
        throw ConfigError(std::string("invalid value for '") + key + "': " + j.at(key).dump());
    }
    return e;
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const AnnealSchedule& a) {
    j = {{"tau0", a.tau0}, {"tau_final", a.tau_final}, {"total_epochs", a.total_epochs}, {"kind", a.kind}};
}

inline void from_json(const nlohmann::json& j, AnnealSchedule& a) {
    detail::check_keys(j, {"tau0", "tau_final", "total_epochs", "kind"}, "anneal");
    const AnnealSchedule d;
    a.tau0 = j.value("tau0", d.tau0);
    a.tau_final = j.value("tau_final", a.tau0);
    a.total_epochs = j.value("total_epochs", d.total_epochs);
    a.kind = detail::enum_value(j, "kind", d.kind);
}

inline void to_json(nlohmann::json& j, const ModalityMoeConfig& c) {
    j = {{"modality_dims", c.modality_dims}, {"dominant_modality", c.dominant_modality},
         {"cheap_hidden", c.cheap_hidden},   {"full_hidden", c.full_hidden},
         {"gate_hidden", c.gate_hidden},     {"num_outputs", c.num_outputs},
         {"gate_input", c.gate_input},       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModalityMoeConfig& c) {
    detail::check_keys(j,
                       {"modality_dims", "dominant_modality", "cheap_hidden", "full_hidden", "gate_hidden",
                        "num_outputs", "gate_input", "seed", "experts"},
                       "model");
    const ModalityMoeConfig d;
    c.modality_dims = j.value("modality_dims", d.modality_dims);
    c.dominant_modality = j.value("dominant_modality", d.dominant_modality);
    c.cheap_hidden = j.value("cheap_hidden", d.cheap_hidden);
    c.full_hidden = j.value("full_hidden", d.full_hidden);
    c.gate_hidden = j.value("gate_hidden", d.gate_hidden);
    c.num_outputs = j.value("num_outputs", d.num_outputs);
    c.gate_input = detail::enum_value(j, "gate_input", d.gate_input);
    c.seed = j.value("seed", d.seed);
}

inline void to_json(nlohmann::json& j, const FusionNetConfig& c) {
    j = {{"input_dims", c.input_dims},   {"dim", c.dim},
         {"cells", c.cells},             {"ops", c.ops},
         {"se_reduction", c.se_reduction}, {"gate_hidden", c.gate_hidden},
         {"head_hidden", c.head_hidden}, {"num_outputs", c.num_outputs},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, FusionNetConfig& c) {
    detail::check_keys(j,
                       {"input_dims", "dim", "cells", "ops", "se_reduction", "gate_hidden", "head_hidden",
                        "num_outputs", "seed"},
                       "model");
    const FusionNetConfig d;
    c.input_dims = j.value("input_dims", d.input_dims);
    c.dim = j.value("dim", d.dim);
    c.cells = j.value("cells", d.cells);
    c.ops = d.ops;
    if (j.contains("ops")) {
        c.ops.clear();
        for (const auto& o : j.at("ops")) {
            const auto k = o.get<FusionOpKind>();
            if (nlohmann::json(k) != o) throw ConfigError("invalid fusion op " + o.dump());
            c.ops.push_back(k);
        }
    }
    c.se_reduction = j.value("se_reduction", d.se_reduction);
    c.gate_hidden = j.value("gate_hidden", d.gate_hidden);
    c.head_hidden = j.value("head_hidden", d.head_hidden);
    c.num_outputs = j.value("num_outputs", d.num_outputs);
    c.seed = j.value("seed", d.seed);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"stage1_epochs", c.stage1_epochs},
         {"stage2_epochs", c.stage2_epochs},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"weight_decay", c.weight_decay},
         {"momentum", c.momentum},
         {"optimizer", c.optimizer},
         {"lambda", c.lambda},
         {"normalization", c.normalization},
         {"gate_training", c.gate_training},
         {"anneal", c.anneal},
         {"inference", c.inference},
         {"ablation", c.ablation},
         {"seed", c.seed}};
    if (c.task_loss) j["task_loss"] = *c.task_loss;
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    detail::check_keys(j,
                       {"stage1_epochs", "stage2_epochs", "batch_size", "learning_rate", "weight_decay", "momentum",
                        "optimizer", "lambda", "normalization", "gate_training", "anneal", "inference", "task_loss",
                        "ablation", "seed"},
                       "train");
    const TrainConfig d;
    c.stage1_epochs = j.value("stage1_epochs", d.stage1_epochs);
    c.stage2_epochs = j.value("stage2_epochs", d.stage2_epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.momentum = j.value("momentum", d.momentum);
    c.optimizer = detail::enum_value(j, "optimizer", d.optimizer);
    c.lambda = j.value("lambda", d.lambda);
    c.normalization = detail::enum_value(j, "normalization", d.normalization);
    c.gate_training = detail::enum_value(j, "gate_training", d.gate_training);
    c.anneal = j.contains("anneal") ? j.at("anneal").get<AnnealSchedule>() : d.anneal;
    c.inference = detail::enum_value(j, "inference", d.inference);
    c.task_loss = d.task_loss;
    if (j.contains("task_loss")) c.task_loss = detail::enum_value(j, "task_loss", TaskLossKind::cross_entropy);
    c.ablation = detail::enum_value(j, "ablation", d.ablation);
    c.seed = j.value("seed", d.seed);
    if (c.stage1_epochs < 0 || c.stage2_epochs < 0) throw ConfigError("train: epochs must be non-negative");
    if (c.batch_size == 0) throw ConfigError("train: batch_size must be positive");
}

// --- architecture-erased model ---

enum class Architecture { modality_moe, fusion_net };
NLOHMANN_JSON_SERIALIZE_ENUM(Architecture, {{Architecture::modality_moe, "modality_moe"},
                                            {Architecture::fusion_net, "fusion_net"}})

struct ModelSpec {
    Architecture architecture = Architecture::modality_moe;
    ModalityMoeConfig moe;
    std::optional<std::vector<std::vector<std::size_t>>> experts;  // subset experts; default two-expert
    FusionNetConfig fusion;
};

inline nlohmann::json model_json(const ModelSpec& s) {
    if (s.architecture == Architecture::fusion_net) return s.fusion;
    nlohmann::json j = s.moe;
    if (s.experts) j["experts"] = *s.experts;
    return j;
}

inline ModelSpec model_spec_from_json(Architecture arch, const nlohmann::json& j) {
    ModelSpec s;
    s.architecture = arch;
    if (arch == Architecture::fusion_net) {
        s.fusion = j.get<FusionNetConfig>();
    } else {
        s.moe = j.get<ModalityMoeConfig>();
        if (j.contains("experts")) s.experts = j.at("experts").get<std::vector<std::vector<std::size_t>>>();
    }
    return s;
}

using AnyModel = std::variant<ModalityMoe, FusionNetwork>;

inline ModelSpec with_seed(ModelSpec s, std::uint64_t seed) {
    s.moe.seed = seed;
    s.fusion.seed = seed;
    return s;
}

inline AnyModel build_model(const ModelSpec& s) {
    if (s.architecture == Architecture::fusion_net) return build_fusion_network(s.fusion);
    if (s.experts) return build_subset_model(s.moe, *s.experts);
    return build_two_expert_model(s.moe);
}

inline ParameterList model_parameters(const AnyModel& m) {
    return std::visit([](const auto& x) { return x.parameters(); }, m);
}

// Overwrites dst's parameter values with src's (same architecture).
inline void copy_parameters(const ParameterList& src, const ParameterList& dst) {
    if (src.size() != dst.size()) throw DimensionError("copy_parameters: parameter count mismatch");
    for (std::size_t k = 0; k < src.size(); ++k) {
        if (src[k].tensor.shape() != dst[k].tensor.shape()) {
            throw DimensionError("copy_parameters: shape mismatch for '" + dst[k].name + "'");
        }
        Tensor t = dst[k].tensor;
        auto out = t.mutable_data();
        const auto in = src[k].tensor.data();
        std::copy(in.begin(), in.end(), out.begin());
    }
}

// Independent copy with its own parameter storage.
inline AnyModel clone_model(const ModelSpec& spec, const AnyModel& model) {
    AnyModel copy = build_model(spec);
    copy_parameters(model_parameters(model), model_parameters(copy));
    return copy;
}

// Dimension consistency between a model spec and a dataset.
inline void check_model_matches_data(const ModelSpec& s, const Dataset& d) {
    const auto& dims = s.architecture == Architecture::fusion_net ? s.fusion.input_dims : s.moe.modality_dims;
    const std::size_t outputs = s.architecture == Architecture::fusion_net ? s.fusion.num_outputs : s.moe.num_outputs;
    if (dims != d.dims) throw ConfigError("model input dims do not match dataset modality dims");
    if (outputs != d.num_outputs()) {
        throw ConfigError("model num_outputs " + std::to_string(outputs) + " does not match dataset (" +
                          std::to_string(d.num_outputs()) + ")");
    }
}

}  // namespace dynmm
