#pragma once

// MAdds accounting and the resource-aware loss.
//
// Counting rule: a linear layer costs in*out per sample (bias excluded),
// an elementwise add/mul over d values costs d, identity/activations/
// softmax cost nothing.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynmm/gating.hpp"
#include "dynmm/nn.hpp"
#include "dynmm/ops.hpp"

namespace dynmm {

inline std::uint64_t count_madds(const LinearLayer& layer) { return layer.madds(); }
inline std::uint64_t count_madds(const Mlp& net) { return net.madds(); }
inline std::uint64_t count_madds(const SeFusionBlock& block) { return block.madds(); }
inline std::uint64_t count_madds(const GateNetwork& gate) { return gate.madds(); }
inline std::uint64_t count_elementwise_madds(std::size_t d) { return d; }

struct CostTable {
    std::vector<std::uint64_t> expert_costs;               // modality-level C(E_i)
    std::vector<std::vector<std::uint64_t>> op_costs;      // fusion-level C(O_{i,j}), [cell][op]
    std::vector<std::vector<std::uint64_t>> block_costs;   // [modality][block]
    std::uint64_t gate_cost = 0;
    std::uint64_t head_cost = 0;
};

enum class CostNormalization { none, cheapest_expert };

struct ResourceLossConfig {
    double lambda = 0.0;
    CostNormalization normalization = CostNormalization::cheapest_expert;
};

namespace detail {

inline double smallest_positive(const std::vector<std::uint64_t>& costs) {
    std::uint64_t best = std::numeric_limits<std::uint64_t>::max();
    for (auto c : costs) {
        if (c > 0) best = std::min(best, c);
    }
    return best == std::numeric_limits<std::uint64_t>::max() ? 1.0 : static_cast<double>(best);
}

// Per-row dot product with a constant cost vector: out[i] = sum_b w[i,b] c[b].
inline Tensor row_dot_costs(const Tensor& weights, std::vector<double> costs) {
    require_matrix(weights, "resource loss");
    const auto rows = weights.dim(0), cols = weights.dim(1);
    if (costs.size() != cols) {
        throw DimensionError("resource loss: decision has " + std::to_string(cols) + " branches but " +
                             std::to_string(costs.size()) + " costs");
    }
    std::vector<double> out(rows, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t b = 0; b < cols; ++b) out[i] += weights[i * cols + b] * costs[b];
    }
    return make_result({rows}, std::move(out), {weights}, [costs, rows, cols](Node& node) {
        auto& g = node.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t b = 0; b < cols; ++b) g[i * cols + b] += node.grad[i] * costs[b];
        }
    });
}

inline std::vector<double> normalized(const std::vector<std::uint64_t>& costs, double divisor) {
    std::vector<double> out;
    out.reserve(costs.size());
    for (auto c : costs) out.push_back(static_cast<double>(c) / divisor);
    return out;
}

}  // namespace detail

// Normalised expert costs C^(E_i); with cheapest_expert the cheapest costs 1.
inline std::vector<double> normalized_expert_costs(const CostTable& table, CostNormalization norm) {
    const double div = norm == CostNormalization::cheapest_expert ? detail::smallest_positive(table.expert_costs) : 1.0;
    return detail::normalized(table.expert_costs, div);
}

// Normalised op costs per cell; with cheapest_expert, divided by the
// smallest positive op cost in the table.
inline std::vector<std::vector<double>> normalized_op_costs(const CostTable& table, CostNormalization norm) {
    double div = 1.0;
    if (norm == CostNormalization::cheapest_expert) {
        std::vector<std::uint64_t> all;
        for (const auto& cell : table.op_costs) all.insert(all.end(), cell.begin(), cell.end());
        div = detail::smallest_positive(all);
    }
    std::vector<std::vector<double>> out;
    for (const auto& cell : table.op_costs) out.push_back(detail::normalized(cell, div));
    return out;
}

namespace detail {

inline Tensor as_rows(const Tensor& w) { return w.rank() == 1 ? reshape(w, {1, w.numel()}) : w; }

}  // namespace detail

// Per-sample lambda * sum_i g_i C^(E_i) for a [batch x B] (or [B]) decision.
inline Tensor resource_loss_modality_per_sample(const Tensor& gate_weights, const CostTable& table,
                                                const ResourceLossConfig& cfg) {
    if (cfg.lambda < 0.0) throw std::invalid_argument("resource loss: lambda must be non-negative");
    auto costs = normalized_expert_costs(table, cfg.normalization);
    for (auto& c : costs) c *= cfg.lambda;
    return detail::row_dot_costs(detail::as_rows(gate_weights), std::move(costs));
}

// Batch mean of the per-sample modality-level resource loss.
inline Tensor resource_loss_modality(const Tensor& gate_weights, const CostTable& table,
                                     const ResourceLossConfig& cfg) {
    return mean(resource_loss_modality_per_sample(gate_weights, table, cfg));
}

inline Tensor resource_loss_modality(const GateDecision& decision, const CostTable& table,
                                     const ResourceLossConfig& cfg) {
    if (decision.slots() != 1) throw DimensionError("modality-level resource loss expects one decision slot");
    return resource_loss_modality(decision.weights.front(), table, cfg);
}

// Batch mean of lambda * sum_j sum_i g_i^(j) C^(O_{i,j}). Skipped-block
// savings are not part of this surrogate.
inline Tensor resource_loss_fusion(const std::vector<Tensor>& slot_weights, const CostTable& table,
                                   const ResourceLossConfig& cfg) {
    if (cfg.lambda < 0.0) throw std::invalid_argument("resource loss: lambda must be non-negative");
    if (slot_weights.size() != table.op_costs.size()) {
        throw DimensionError("fusion resource loss: " + std::to_string(slot_weights.size()) + " slots vs " +
                             std::to_string(table.op_costs.size()) + " cells");
    }
    const auto costs = normalized_op_costs(table, cfg.normalization);
    Tensor total;
    for (std::size_t j = 0; j < slot_weights.size(); ++j) {
        auto c = costs[j];
        for (auto& v : c) v *= cfg.lambda;
        Tensor term = detail::row_dot_costs(detail::as_rows(slot_weights[j]), std::move(c));
        total = total.defined() ? add(total, term) : term;
    }
    return mean(total);
}

inline Tensor resource_loss_fusion(const GateDecision& decision, const CostTable& table,
                                   const ResourceLossConfig& cfg) {
    return resource_loss_fusion(decision.weights, table, cfg);
}

inline Tensor total_loss(const Tensor& task_loss, const Tensor& resource_loss) {
    if (task_loss.numel() != 1 || resource_loss.numel() != 1) {
        throw DimensionError("total_loss: both terms must be scalars");
    }
    return add(task_loss, resource_loss);
}

}  // namespace dynmm
