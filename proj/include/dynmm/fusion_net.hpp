#pragma once

// Fusion-level dynamic network: two chains of feature-extraction blocks
// interleaved with F fusion cells, all driven by one global gate that
// reads both modalities after block 1. Fused output continues on the
// modality-1 chain; modality-2 blocks whose outputs no later cell uses
// are skipped at inference.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dynmm/cost.hpp"
#include "dynmm/gating.hpp"
#include "dynmm/nn.hpp"
#include "dynmm/ops.hpp"

namespace dynmm {

enum class FusionOpKind { identity, add, weighted_add, se_fuse };

inline const char* to_string(FusionOpKind k) {
    switch (k) {
        case FusionOpKind::identity: return "identity";
        case FusionOpKind::add: return "add";
        case FusionOpKind::weighted_add: return "weighted_add";
        case FusionOpKind::se_fuse: return "se_fuse";
    }
    return "?";
}

struct FusionCellSpec {
    std::vector<FusionOpKind> ops;
    std::vector<std::optional<Tensor>> mix_weights;       // weighted_add only
    std::vector<std::optional<SeFusionBlock>> se_blocks;  // se_fuse only
    std::vector<std::uint64_t> cost_madds;

    std::size_t size() const { return ops.size(); }

    Tensor apply(std::size_t op, const Tensor& x1, const Tensor& x2) const {
        switch (ops.at(op)) {
            case FusionOpKind::identity: return x1;
            case FusionOpKind::add: return add(x1, x2);
            case FusionOpKind::weighted_add: return weighted_add(*mix_weights[op], x1, x2);
            case FusionOpKind::se_fuse: return se_fuse(*se_blocks[op], x1, x2);
        }
        throw std::logic_error("unknown fusion op");
    }

    static std::uint64_t analytic_cost(FusionOpKind kind, std::size_t dim, const SeFusionBlock* se) {
        switch (kind) {
            case FusionOpKind::identity: return 0;
            case FusionOpKind::add: return count_elementwise_madds(dim);
            case FusionOpKind::weighted_add: return 3 * count_elementwise_madds(dim);
            case FusionOpKind::se_fuse: return se->madds();
        }
        return 0;
    }

    void collect(ParameterList& out, const std::string& prefix) const {
        for (std::size_t i = 0; i < ops.size(); ++i) {
            if (mix_weights[i]) out.push_back({prefix + ".op" + std::to_string(i) + ".w", *mix_weights[i]});
            if (se_blocks[i]) se_blocks[i]->collect(out, prefix + ".op" + std::to_string(i) + ".se");
        }
    }
};

struct FusionNetwork {
    std::vector<std::size_t> input_dims;  // per modality
    std::size_t dim = 32;
    std::size_t num_outputs = 2;
    std::vector<Mlp> blocks_1;
    std::vector<Mlp> blocks_2;
    std::vector<FusionCellSpec> cells;
    GateNetwork global_gate;
    Mlp head;

    std::size_t num_cells() const { return cells.size(); }
    std::size_t num_ops() const { return cells.front().size(); }

    CostTable cost_table() const {
        CostTable t;
        for (const auto& c : cells) t.op_costs.push_back(c.cost_madds);
        t.block_costs.resize(2);
        for (const auto& b : blocks_1) t.block_costs[0].push_back(b.madds());
        for (const auto& b : blocks_2) t.block_costs[1].push_back(b.madds());
        t.gate_cost = global_gate.madds();
        t.head_cost = head.madds();
        return t;
    }

    ParameterList gate_parameters() const {
        ParameterList p;
        global_gate.collect(p, "gate");
        return p;
    }

    ParameterList backbone_parameters() const {
        ParameterList p;
        for (std::size_t j = 0; j < blocks_1.size(); ++j) blocks_1[j].collect(p, "m1.block" + std::to_string(j));
        for (std::size_t j = 0; j < blocks_2.size(); ++j) blocks_2[j].collect(p, "m2.block" + std::to_string(j));
        for (std::size_t j = 0; j < cells.size(); ++j) cells[j].collect(p, "cell" + std::to_string(j));
        head.collect(p, "head");
        return p;
    }

    ParameterList parameters() const {
        auto p = backbone_parameters();
        auto g = gate_parameters();
        p.insert(p.end(), g.begin(), g.end());
        return p;
    }
};

// What a single sample executes: the op per cell and whether each
// modality-2 block runs.
struct ExecutionPlan {
    std::vector<std::size_t> ops;
    std::vector<bool> run_block_2;
};

// Modality-2 block j runs iff some cell k >= j uses a non-identity op;
// block 0 always runs because it feeds the gate.
inline ExecutionPlan decision_to_architecture(const std::vector<std::size_t>& chosen,
                                              const std::vector<FusionCellSpec>& cells) {
    if (chosen.size() != cells.size()) {
        throw DimensionError("decision_to_architecture: " + std::to_string(chosen.size()) + " decisions for " +
                             std::to_string(cells.size()) + " cells");
    }
    const std::size_t F = cells.size();
    ExecutionPlan plan;
    plan.ops = chosen;
    plan.run_block_2.assign(F, false);
    bool needed = false;
    for (std::size_t j = F; j-- > 0;) {
        if (chosen[j] >= cells[j].size()) throw DimensionError("decision_to_architecture: op index out of range");
        needed = needed || cells[j].ops[chosen[j]] != FusionOpKind::identity;
        plan.run_block_2[j] = needed;
    }
    if (F > 0) plan.run_block_2[0] = true;
    return plan;
}

inline ExecutionPlan decision_to_architecture(const GateDecision& decision, std::size_t sample,
                                              const std::vector<FusionCellSpec>& cells) {
    std::vector<std::size_t> chosen;
    for (const auto& slot : decision.selected) chosen.push_back(slot.at(sample));
    return decision_to_architecture(chosen, cells);
}

// Per-sample MAdds of a plan (gate excluded).
inline std::uint64_t plan_cost(const FusionNetwork& net, const ExecutionPlan& plan) {
    std::uint64_t c = net.head.madds();
    for (std::size_t j = 0; j < net.num_cells(); ++j) {
        c += net.blocks_1[j].madds();
        if (plan.run_block_2[j]) c += net.blocks_2[j].madds();
        c += net.cells[j].cost_madds[plan.ops[j]];
    }
    return c;
}

struct FusionForwardOptions {
    bool skip_dead_blocks = true;
    // Fixed op per cell for every sample; bypasses the gate entirely.
    std::optional<std::vector<std::size_t>> forced_path;
};

struct FusionOutput {
    Tensor y;
    GateDecision decision;
    std::vector<std::uint64_t> cost;
};

namespace detail {

inline Tensor run_block(const Mlp& block, const Tensor& x) { return relu(block.forward(x)); }

inline std::size_t check_fusion_inputs(const FusionNetwork& net, const Tensor& x1, const Tensor& x2) {
    if (x1.rank() != 2 || x2.rank() != 2 || x1.dim(0) != x2.dim(0) || x1.dim(1) != net.input_dims.at(0) ||
        x2.dim(1) != net.input_dims.at(1)) {
        throw DimensionError("fusion_forward: inputs " + shape_str(x1.shape()) + ", " + shape_str(x2.shape()) +
                             " do not match network input dims");
    }
    return x1.dim(0);
}

// Hard execution of per-sample plans with row grouping.
inline Tensor execute_plans(const FusionNetwork& net, Tensor s1, Tensor s2, const GateDecision& decision,
                            const std::vector<ExecutionPlan>& plans, bool skip) {
    const std::size_t batch = s1.dim(0);
    std::vector<std::size_t> rows2(batch);
    for (std::size_t i = 0; i < batch; ++i) rows2[i] = i;
    for (std::size_t j = 0; j < net.num_cells(); ++j) {
        if (j > 0) {
            s1 = run_block(net.blocks_1[j], s1);
            if (skip) {
                std::vector<std::size_t> keep_pos, keep_rows;
                for (std::size_t p = 0; p < rows2.size(); ++p) {
                    if (plans[rows2[p]].run_block_2[j]) {
                        keep_pos.push_back(p);
                        keep_rows.push_back(rows2[p]);
                    }
                }
                if (keep_rows.size() != rows2.size()) {
                    s2 = keep_rows.empty() ? Tensor() : gather_rows(s2, keep_pos);
                    rows2 = std::move(keep_rows);
                }
            }
            if (!rows2.empty()) s2 = run_block(net.blocks_2[j], s2);
        }
        std::vector<std::size_t> pos2(batch, static_cast<std::size_t>(-1));
        for (std::size_t p = 0; p < rows2.size(); ++p) pos2[rows2[p]] = p;
        const auto& cell = net.cells[j];
        for (std::size_t op = 0; op < cell.size(); ++op) {
            if (cell.ops[op] == FusionOpKind::identity) continue;
            std::vector<std::size_t> rows, rows_in_2;
            for (std::size_t i = 0; i < batch; ++i) {
                if (decision.selected[j][i] == op) {
                    rows.push_back(i);
                    rows_in_2.push_back(pos2[i]);
                }
            }
            if (rows.empty()) continue;
            if (rows.size() == batch && rows2.size() == batch) {
                s1 = cell.apply(op, s1, s2);
            } else {
                Tensor fused = cell.apply(op, gather_rows(s1, rows), gather_rows(s2, rows_in_2));
                s1 = scatter_rows(s1, rows, fused);
            }
        }
    }
    return net.head.forward(s1);
}

}  // namespace detail

inline FusionOutput fusion_forward(const FusionNetwork& net, const Tensor& x1, const Tensor& x2, GateMode mode,
                                   double tau, Rng* rng, const FusionForwardOptions& options = {}) {
    const std::size_t batch = detail::check_fusion_inputs(net, x1, x2);
    Tensor s1 = detail::run_block(net.blocks_1[0], x1);
    Tensor s2 = detail::run_block(net.blocks_2[0], x2);

    FusionOutput out;
    std::uint64_t gate_cost = 0;
    if (options.forced_path) {
        out.decision = fixed_decision(*options.forced_path, batch, net.num_ops());
        mode = GateMode::hard_inference;
    } else {
        out.decision = gate_forward(net.global_gate, {s1, s2}, mode, tau, rng);
        gate_cost = net.global_gate.madds();
    }

    if (mode == GateMode::hard_inference) {
        std::vector<ExecutionPlan> plans;
        out.cost.reserve(batch);
        for (std::size_t i = 0; i < batch; ++i) {
            plans.push_back(decision_to_architecture(out.decision, i, net.cells));
            if (!options.skip_dead_blocks) plans.back().run_block_2.assign(net.num_cells(), true);
            out.cost.push_back(gate_cost + plan_cost(net, plans.back()));
        }
        out.y = detail::execute_plans(net, s1, s2, out.decision, plans, options.skip_dead_blocks);
        return out;
    }

    // soft / hard_st: every block and op runs, outputs mixed per cell
    std::uint64_t all = gate_cost + net.head.madds();
    for (std::size_t j = 0; j < net.num_cells(); ++j) {
        if (j > 0) {
            s1 = detail::run_block(net.blocks_1[j], s1);
            s2 = detail::run_block(net.blocks_2[j], s2);
        }
        all += net.blocks_1[j].madds() + net.blocks_2[j].madds();
        std::vector<Tensor> branch;
        for (std::size_t op = 0; op < net.cells[j].size(); ++op) {
            branch.push_back(net.cells[j].apply(op, s1, s2));
            all += net.cells[j].cost_madds[op];
        }
        s1 = mix_rows(branch, out.decision.weights[j]);
    }
    out.y = net.head.forward(s1);
    out.cost.assign(batch, all);
    return out;
}

// Independent uniform op per cell.
inline std::vector<std::size_t> sample_random_path(std::size_t cells, std::size_t ops, Rng& rng) {
    std::uniform_int_distribution<std::size_t> dist(0, ops - 1);
    std::vector<std::size_t> path(cells);
    for (auto& p : path) p = dist(rng);
    return path;
}

struct FusionNetConfig {
    std::vector<std::size_t> input_dims{32, 32};
    std::size_t dim = 32;
    std::size_t cells = 4;
    std::vector<FusionOpKind> ops{FusionOpKind::identity, FusionOpKind::se_fuse};
    std::size_t se_reduction = 4;
    std::size_t gate_hidden = 16;
    std::size_t head_hidden = 16;
    std::size_t num_outputs = 2;
    std::uint64_t seed = 0;
};

inline FusionNetwork build_fusion_network(const FusionNetConfig& cfg) {
    if (cfg.input_dims.size() != 2) throw DimensionError("fusion network takes exactly two modalities");
    if (cfg.cells == 0 || cfg.ops.size() < 2) throw DimensionError("fusion network needs >= 1 cell and >= 2 ops");
    Rng rng(cfg.seed);
    FusionNetwork net;
    net.input_dims = cfg.input_dims;
    net.dim = cfg.dim;
    net.num_outputs = cfg.num_outputs;
    for (std::size_t j = 0; j < cfg.cells; ++j) {
        net.blocks_1.emplace_back(std::vector<std::size_t>{j == 0 ? cfg.input_dims[0] : cfg.dim, cfg.dim});
        net.blocks_2.emplace_back(std::vector<std::size_t>{j == 0 ? cfg.input_dims[1] : cfg.dim, cfg.dim});
        init_parameters(net.blocks_1.back(), rng);
        init_parameters(net.blocks_2.back(), rng);
    }
    for (std::size_t j = 0; j < cfg.cells; ++j) {
        FusionCellSpec cell;
        cell.ops = cfg.ops;
        for (auto kind : cfg.ops) {
            cell.mix_weights.emplace_back();
            cell.se_blocks.emplace_back();
            if (kind == FusionOpKind::weighted_add) cell.mix_weights.back() = Tensor::vector({1.0, 1.0}, true);
            if (kind == FusionOpKind::se_fuse) {
                cell.se_blocks.back() = SeFusionBlock(cfg.dim, cfg.se_reduction);
                init_parameters(*cell.se_blocks.back(), rng);
            }
            cell.cost_madds.push_back(FusionCellSpec::analytic_cost(
                kind, cfg.dim, cell.se_blocks.back() ? &*cell.se_blocks.back() : nullptr));
        }
        net.cells.push_back(std::move(cell));
    }
    net.global_gate = GateNetwork({2 * cfg.dim, cfg.gate_hidden}, cfg.cells, cfg.ops.size());
    init_parameters(net.global_gate.body, rng);
    net.head = Mlp({cfg.dim, cfg.head_hidden, cfg.num_outputs});
    init_parameters(net.head, rng);
    return net;
}

}  // namespace dynmm
