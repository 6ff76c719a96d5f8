#pragma once

// Gate networks with Gumbel-softmax relaxation and straight-through
// hardening. The gate body emits unnormalised logits that stand in for
// log G(x); each decision slot owns B consecutive logit columns.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynmm/nn.hpp"
#include "dynmm/ops.hpp"

namespace dynmm {

enum class GateMode {
    soft,            // mix all branches with g~
    hard_st,         // one-hot forward, g~ gradient backward
    hard_inference,  // noise-free argmax, one branch executed
};

inline constexpr double kGumbelClampLow = 1e-12;
inline constexpr double kGumbelClampHigh = 1.0 - 1e-12;

inline double gumbel_from_uniform(double u) {
    u = std::clamp(u, kGumbelClampLow, kGumbelClampHigh);
    return -std::log(-std::log(u));
}

inline Tensor sample_gumbel(const Shape& shape, Rng& rng) {
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = gumbel_from_uniform(dist(rng));
    return Tensor(shape, std::move(values));
}

struct AnnealSchedule {
    enum class Kind { constant, exponential };
    double tau0 = 1.0;
    double tau_final = 1.0;
    int total_epochs = 1;
    Kind kind = Kind::constant;
};

inline double anneal_tau(const AnnealSchedule& schedule, int epoch) {
    if (epoch < 0 || epoch > schedule.total_epochs) {
        throw std::out_of_range("anneal_tau: epoch " + std::to_string(epoch) + " outside [0, " +
                                std::to_string(schedule.total_epochs) + "]");
    }
    if (schedule.kind == AnnealSchedule::Kind::constant || epoch == 0) return schedule.tau0;
    if (epoch == schedule.total_epochs) return schedule.tau_final;
    const double frac = static_cast<double>(epoch) / static_cast<double>(schedule.total_epochs);
    return schedule.tau0 * std::pow(schedule.tau_final / schedule.tau0, frac);
}

struct GateNetwork {
    Mlp body;
    std::size_t slots = 1;
    std::size_t branches = 2;

    GateNetwork() = default;
    GateNetwork(std::vector<std::size_t> dims_without_output, std::size_t num_slots, std::size_t num_branches)
        : slots(num_slots), branches(num_branches) {
        if (num_slots == 0 || num_branches < 2) throw DimensionError("gate needs >= 1 slot and >= 2 branches");
        dims_without_output.push_back(num_slots * num_branches);
        body = Mlp(dims_without_output);
    }

    std::size_t in_dim() const { return body.in_dim(); }
    std::uint64_t madds() const { return body.madds(); }

    void collect(ParameterList& out, const std::string& prefix) const { body.collect(out, prefix + ".body"); }
};

// Batched gate output. soft[j], weights[j] are [batch x B] for slot j;
// selected[j][i] is the branch chosen for sample i in slot j.
struct GateDecision {
    GateMode mode = GateMode::hard_inference;
    std::vector<Tensor> soft;
    std::vector<Tensor> weights;  // what multiplies branch outputs / costs
    std::vector<std::vector<std::size_t>> selected;

    std::size_t slots() const { return selected.size(); }
    std::size_t batch() const { return selected.empty() ? 0 : selected.front().size(); }
};

// Computes logits from the concatenated features and turns each slot into
// a decision. Gumbel noise is drawn only when `rng` is given and the mode
// is a training mode; inference is noise-free.
inline GateDecision gate_forward(const GateNetwork& gate, const std::vector<Tensor>& features, GateMode mode,
                                 double tau, Rng* rng) {
    if (features.empty()) throw DimensionError("gate_forward: no features");
    Tensor input = features.size() == 1 ? features.front() : concat(features, 1);
    if (input.dim(1) != gate.in_dim()) {
        throw DimensionError("gate_forward: gate expects " + std::to_string(gate.in_dim()) + " input features, got " +
                             std::to_string(input.dim(1)));
    }
    const Tensor logits = gate.body.forward(input);
    const std::size_t batch = input.dim(0);
    const std::size_t B = gate.branches;

    GateDecision d;
    d.mode = mode;
    for (std::size_t j = 0; j < gate.slots; ++j) {
        const Tensor slot_logits = gate.slots == 1 ? logits : slice_cols(logits, j * B, (j + 1) * B);
        Tensor noise = (rng != nullptr && mode != GateMode::hard_inference) ? sample_gumbel({batch, B}, *rng)
                                                                             : Tensor::zeros({batch, B});
        Tensor soft = soft_gate(slot_logits, noise, tau);
        Tensor weights;
        switch (mode) {
            case GateMode::soft: weights = soft; break;
            case GateMode::hard_st: weights = straight_through(soft); break;
            case GateMode::hard_inference: weights = hard_one_hot(soft); break;
        }
        d.selected.push_back(max_index(soft, 1));
        d.soft.push_back(std::move(soft));
        d.weights.push_back(std::move(weights));
    }
    return d;
}

// Decision with fixed choices (one per slot, applied to every sample).
inline GateDecision fixed_decision(const std::vector<std::size_t>& choice, std::size_t batch, std::size_t branches) {
    GateDecision d;
    d.mode = GateMode::hard_inference;
    for (auto c : choice) {
        if (c >= branches) throw DimensionError("fixed_decision: branch index out of range");
        std::vector<double> w(batch * branches, 0.0);
        for (std::size_t i = 0; i < batch; ++i) w[i * branches + c] = 1.0;
        Tensor t({batch, branches}, std::move(w));
        d.soft.push_back(t);
        d.weights.push_back(t);
        d.selected.emplace_back(batch, c);
    }
    return d;
}

// Per-slot selection ratios over a batch decision.
inline std::vector<std::vector<double>> selection_ratios(const GateDecision& d, std::size_t branches) {
    std::vector<std::vector<double>> out;
    for (const auto& slot : d.selected) {
        std::vector<double> r(branches, 0.0);
        for (auto s : slot) r[s] += 1.0;
        for (auto& v : r) v /= static_cast<double>(slot.size());
        out.push_back(std::move(r));
    }
    return out;
}

// Shannon entropy (nats) of a distribution; 0 log 0 = 0.
inline double entropy_nats(const std::vector<double>& p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

}  // namespace dynmm
