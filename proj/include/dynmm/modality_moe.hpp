#pragma once

// Modality-level dynamic network: B experts over modality subsets and a
// gate that activates exactly one expert per sample at inference.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynmm/cost.hpp"
#include "dynmm/gating.hpp"
#include "dynmm/nn.hpp"
#include "dynmm/ops.hpp"

namespace dynmm {

// One encoder per modality in the subset; encodings are relu'd and
// concatenated, then decoded.
struct ExpertSpec {
    int id = 0;
    std::vector<std::size_t> modality_subset;
    std::vector<Mlp> encoders;
    Mlp decoder;
    std::uint64_t cost_madds = 0;

    std::uint64_t analytic_madds() const {
        std::uint64_t total = decoder.madds();
        for (const auto& e : encoders) total += e.madds();
        return total;
    }

    Tensor forward(const std::vector<Tensor>& inputs) const {
        std::vector<Tensor> encoded;
        encoded.reserve(modality_subset.size());
        for (std::size_t k = 0; k < modality_subset.size(); ++k) {
            encoded.push_back(relu(encoders[k].forward(inputs.at(modality_subset[k]))));
        }
        Tensor h = encoded.size() == 1 ? encoded.front() : concat(encoded, 1);
        return decoder.forward(h);
    }

    void collect(ParameterList& out, const std::string& prefix) const {
        for (std::size_t k = 0; k < encoders.size(); ++k) {
            encoders[k].collect(out, prefix + ".enc" + std::to_string(modality_subset[k]));
        }
        decoder.collect(out, prefix + ".dec");
    }
};

enum class GateInput { raw, encoded };

struct ModalityMoe {
    std::vector<ExpertSpec> experts;
    GateNetwork gate;
    std::vector<Mlp> gate_encoders;  // only for GateInput::encoded
    std::vector<std::size_t> modality_dims;
    GateInput gate_input = GateInput::raw;
    std::size_t num_outputs = 2;

    std::size_t num_modalities() const { return modality_dims.size(); }
    std::size_t num_experts() const { return experts.size(); }

    std::uint64_t gate_madds() const {
        std::uint64_t total = gate.madds();
        for (const auto& e : gate_encoders) total += e.madds();
        return total;
    }

    CostTable cost_table() const {
        CostTable t;
        for (const auto& e : experts) t.expert_costs.push_back(e.cost_madds);
        t.gate_cost = gate_madds();
        return t;
    }

    ParameterList gate_parameters() const {
        ParameterList p;
        for (std::size_t m = 0; m < gate_encoders.size(); ++m) gate_encoders[m].collect(p, "gate.enc" + std::to_string(m));
        gate.collect(p, "gate");
        return p;
    }

    ParameterList backbone_parameters() const {
        ParameterList p;
        for (const auto& e : experts) e.collect(p, "expert" + std::to_string(e.id));
        return p;
    }

    // Declaration order: experts, then gate.
    ParameterList parameters() const {
        auto p = backbone_parameters();
        auto g = gate_parameters();
        p.insert(p.end(), g.begin(), g.end());
        return p;
    }
};

struct MoeOutput {
    Tensor y;
    GateDecision decision;
    std::vector<std::uint64_t> cost;  // per sample, MAdds actually executed
};

namespace detail {

inline std::size_t check_moe_inputs(const ModalityMoe& model, const std::vector<Tensor>& x) {
    if (x.size() != model.num_modalities()) {
        throw DimensionError("moe_forward: expected " + std::to_string(model.num_modalities()) + " modalities, got " +
                             std::to_string(x.size()));
    }
    const std::size_t batch = x.front().dim(0);
    for (std::size_t m = 0; m < x.size(); ++m) {
        if (x[m].rank() != 2 || x[m].dim(0) != batch || x[m].dim(1) != model.modality_dims[m]) {
            throw DimensionError("moe_forward: modality " + std::to_string(m) + " has shape " +
                                 shape_str(x[m].shape()) + ", expected (" + std::to_string(batch) + "," +
                                 std::to_string(model.modality_dims[m]) + ")");
        }
    }
    return batch;
}

inline std::vector<Tensor> gate_features(const ModalityMoe& model, const std::vector<Tensor>& x) {
    if (model.gate_input == GateInput::raw) return x;
    std::vector<Tensor> f;
    for (std::size_t m = 0; m < x.size(); ++m) f.push_back(relu(model.gate_encoders[m].forward(x[m])));
    return f;
}

}  // namespace detail

// Runs expert selected[i] on sample i only. Samples are grouped per expert
// into sub-batches and scattered back into batch order. No gate cost.
inline MoeOutput execute_selected_experts(const ModalityMoe& model, const std::vector<Tensor>& x,
                                          const std::vector<std::size_t>& selected) {
    const std::size_t batch = detail::check_moe_inputs(model, x);
    if (selected.size() != batch) throw DimensionError("execute_selected_experts: one selection per sample required");
    MoeOutput out;
    out.cost.assign(batch, 0);
    Tensor y = Tensor::zeros({batch, model.num_outputs});
    for (std::size_t e = 0; e < model.num_experts(); ++e) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < batch; ++i) {
            if (selected[i] >= model.num_experts()) throw DimensionError("expert index out of range");
            if (selected[i] == e) rows.push_back(i);
        }
        if (rows.empty()) continue;
        if (rows.size() == batch) {
            y = model.experts[e].forward(x);
        } else {
            std::vector<Tensor> sub;
            for (const auto& t : x) sub.push_back(gather_rows(t, rows));
            y = scatter_rows(y, rows, model.experts[e].forward(sub));
        }
        for (auto i : rows) out.cost[i] = model.experts[e].cost_madds;
    }
    out.y = y;
    return out;
}

// Soft mode mixes every expert with g~; hard_st evaluates every expert
// and mixes with the one-hot straight-through weights (so each branch
// output is available to the gate gradient); hard_inference runs the
// gate, then only the selected expert per sample.
inline MoeOutput moe_forward(const ModalityMoe& model, const std::vector<Tensor>& x, GateMode mode, double tau,
                             Rng* rng) {
    const std::size_t batch = detail::check_moe_inputs(model, x);
    GateDecision decision = gate_forward(model.gate, detail::gate_features(model, x), mode, tau, rng);
    const std::uint64_t gate_cost = model.gate_madds();

    if (mode == GateMode::hard_inference) {
        MoeOutput out = execute_selected_experts(model, x, decision.selected.front());
        for (auto& c : out.cost) c += gate_cost;
        out.decision = std::move(decision);
        return out;
    }

    std::vector<Tensor> branch_out;
    std::uint64_t all_cost = gate_cost;
    for (const auto& e : model.experts) {
        branch_out.push_back(e.forward(x));
        all_cost += e.cost_madds;
    }
    MoeOutput out;
    out.y = mix_rows(branch_out, decision.weights.front());
    out.cost.assign(batch, all_cost);
    out.decision = std::move(decision);
    return out;
}

struct ModalityMoeConfig {
    std::vector<std::size_t> modality_dims{32, 32};
    std::size_t dominant_modality = 0;
    std::size_t cheap_hidden = 16;
    std::size_t full_hidden = 32;
    std::size_t gate_hidden = 16;
    std::size_t num_outputs = 2;
    GateInput gate_input = GateInput::raw;
    std::uint64_t seed = 0;
};

namespace detail {

inline ExpertSpec make_expert(int id, const std::vector<std::size_t>& subset, const std::vector<std::size_t>& dims,
                              std::size_t hidden, std::size_t outputs, Rng& rng) {
    ExpertSpec e;
    e.id = id;
    e.modality_subset = subset;
    for (auto m : subset) {
        if (m >= dims.size()) throw DimensionError("expert modality index out of range");
        e.encoders.emplace_back(std::vector<std::size_t>{dims[m], hidden, hidden});
        init_parameters(e.encoders.back(), rng);
    }
    e.decoder = Mlp({subset.size() * hidden, hidden, outputs});
    init_parameters(e.decoder, rng);
    e.cost_madds = e.analytic_madds();
    return e;
}

inline void attach_gate(ModalityMoe& model, const ModalityMoeConfig& cfg, Rng& rng) {
    std::size_t gate_in = 0;
    if (cfg.gate_input == GateInput::encoded) {
        for (auto d : cfg.modality_dims) {
            model.gate_encoders.emplace_back(std::vector<std::size_t>{d, cfg.gate_hidden});
            init_parameters(model.gate_encoders.back(), rng);
            gate_in += cfg.gate_hidden;
        }
    } else {
        for (auto d : cfg.modality_dims) gate_in += d;
    }
    model.gate = GateNetwork({gate_in, cfg.gate_hidden}, 1, model.experts.size());
    init_parameters(model.gate.body, rng);
}

}  // namespace detail

// All non-empty modality subsets in increasing bitmask order (2^M - 1).
inline std::vector<std::vector<std::size_t>> enumerate_modality_subsets(std::size_t num_modalities) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t mask = 1; mask < (std::size_t{1} << num_modalities); ++mask) {
        std::vector<std::size_t> s;
        for (std::size_t m = 0; m < num_modalities; ++m) {
            if (mask & (std::size_t{1} << m)) s.push_back(m);
        }
        out.push_back(std::move(s));
    }
    return out;
}

// Expert 0: cheap unimodal network on the dominant modality. Expert 1:
// late fusion over every modality. Gate: 2-layer MLP on the inputs.
inline ModalityMoe build_two_expert_model(const ModalityMoeConfig& cfg) {
    if (cfg.modality_dims.empty() || cfg.dominant_modality >= cfg.modality_dims.size()) {
        throw DimensionError("build_two_expert_model: invalid modality configuration");
    }
    if (cfg.cheap_hidden == 0 || cfg.full_hidden == 0 || cfg.gate_hidden == 0 || cfg.num_outputs == 0) {
        throw DimensionError("build_two_expert_model: dims must be positive");
    }
    Rng rng(cfg.seed);
    ModalityMoe model;
    model.modality_dims = cfg.modality_dims;
    model.num_outputs = cfg.num_outputs;
    model.gate_input = cfg.gate_input;
    std::vector<std::size_t> all(cfg.modality_dims.size());
    for (std::size_t m = 0; m < all.size(); ++m) all[m] = m;
    model.experts.push_back(
        detail::make_expert(0, {cfg.dominant_modality}, cfg.modality_dims, cfg.cheap_hidden, cfg.num_outputs, rng));
    model.experts.push_back(detail::make_expert(1, all, cfg.modality_dims, cfg.full_hidden, cfg.num_outputs, rng));
    detail::attach_gate(model, cfg, rng);
    return model;
}

// One expert per listed subset; hidden width grows with subset size.
inline ModalityMoe build_subset_model(const ModalityMoeConfig& cfg, const std::vector<std::vector<std::size_t>>& subsets) {
    if (subsets.size() < 2) throw DimensionError("build_subset_model: need at least two experts");
    Rng rng(cfg.seed);
    ModalityMoe model;
    model.modality_dims = cfg.modality_dims;
    model.num_outputs = cfg.num_outputs;
    model.gate_input = cfg.gate_input;
    for (std::size_t i = 0; i < subsets.size(); ++i) {
        if (subsets[i].empty()) throw DimensionError("build_subset_model: empty modality subset");
        const std::size_t hidden = subsets[i].size() == 1 ? cfg.cheap_hidden : cfg.full_hidden;
        model.experts.push_back(
            detail::make_expert(static_cast<int>(i), subsets[i], cfg.modality_dims, hidden, cfg.num_outputs, rng));
    }
    detail::attach_gate(model, cfg, rng);
    return model;
}

}  // namespace dynmm
