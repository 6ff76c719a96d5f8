#pragma once

// Two-stage training, optimizers, task losses and evaluation for both
// dynamic model families.
//
// Stage I trains the branches without the gate (modality level: every
// expert on every batch with summed losses; fusion level: one uniformly
// random path per batch). Stage II optimises task + resource loss end to
// end through the relaxed gate.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynmm/cost.hpp"
#include "dynmm/data.hpp"
#include "dynmm/fusion_net.hpp"
#include "dynmm/gating.hpp"
#include "dynmm/metrics.hpp"
#include "dynmm/modality_moe.hpp"

namespace dynmm {

enum class OptimizerKind { sgd_momentum, adaptive_moments };
enum class GateTraining { straight_through, annealed_soft };
enum class Ablation { full, one_stage, frozen_backbone };
enum class InferenceGate { hard, soft };
enum class TaskLossKind { cross_entropy, binary_cross_entropy, mse, mae };

struct TrainConfig {
    int stage1_epochs = 8;
    int stage2_epochs = 8;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    double momentum = 0.9;
    OptimizerKind optimizer = OptimizerKind::adaptive_moments;
    double lambda = 0.01;
    CostNormalization normalization = CostNormalization::cheapest_expert;
    GateTraining gate_training = GateTraining::straight_through;
    AnnealSchedule anneal{};  // constant tau 1 by default
    InferenceGate inference = InferenceGate::hard;
    std::optional<TaskLossKind> task_loss;  // defaults from the dataset task
    Ablation ablation = Ablation::full;
    std::uint64_t seed = 0;

    int effective_stage1_epochs() const { return ablation == Ablation::one_stage ? 0 : stage1_epochs; }
};

class TrainingError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// --- optimizers ---

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adaptive_moments;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline OptimizerConfig optimizer_config(const TrainConfig& cfg) {
    OptimizerConfig o;
    o.kind = cfg.optimizer;
    o.learning_rate = cfg.learning_rate;
    o.weight_decay = cfg.weight_decay;
    o.momentum = cfg.momentum;
    return o;
}

// sgd_momentum: v = m v + g; p -= lr (v + wd p).
// adaptive_moments: bias-corrected first/second moments with decoupled decay.
// Parameters that never received a gradient are left untouched.
class Optimizer {
   public:
    Optimizer(ParameterList params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            first_.emplace_back(p.tensor.numel(), 0.0);
            second_.emplace_back(cfg.kind == OptimizerKind::adaptive_moments ? p.tensor.numel() : 0, 0.0);
        }
    }

    void step() {
        for (const auto& p : params_) {
            for (double g : p.tensor.grad()) {
                if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
            }
        }
        ++steps_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Tensor t = params_[k].tensor;
            if (!t.has_grad()) continue;
            auto p = t.mutable_data();
            const auto g = t.grad();
            auto& m = first_[k];
            if (cfg_.kind == OptimizerKind::sgd_momentum) {
                for (std::size_t i = 0; i < p.size(); ++i) {
                    m[i] = cfg_.momentum * m[i] + g[i];
                    p[i] -= cfg_.learning_rate * (m[i] + cfg_.weight_decay * p[i]);
                }
            } else {
                auto& v = second_[k];
                for (std::size_t i = 0; i < p.size(); ++i) {
                    m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                    v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                    const double mhat = m[i] / bc1;
                    const double vhat = v[i] / bc2;
                    p[i] -= cfg_.learning_rate * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
                }
            }
        }
    }

    void zero_grad() { zero_grads(params_); }

    const ParameterList& parameters() const { return params_; }

   private:
    ParameterList params_;
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
    std::uint64_t steps_ = 0;
};

// --- task losses ---

inline TaskLossKind default_task_loss(TaskKind task) {
    return task == TaskKind::regression ? TaskLossKind::mse : TaskLossKind::cross_entropy;
}

inline Tensor task_loss(TaskLossKind kind, const Tensor& y, const Batch& batch) {
    switch (kind) {
        case TaskLossKind::cross_entropy: return cross_entropy(y, batch.classes);
        case TaskLossKind::binary_cross_entropy: {
            const std::size_t k = y.dim(1);
            std::vector<double> targets(y.numel(), 0.0);
            for (std::size_t i = 0; i < batch.classes.size(); ++i) targets[i * k + batch.classes[i]] = 1.0;
            return bce_with_logits(y, targets);
        }
        case TaskLossKind::mse: return mse(y, batch.targets);
        case TaskLossKind::mae: return mae(y, batch.targets);
    }
    throw std::logic_error("unknown task loss");
}

// --- model adapters ---

struct ForwardResult {
    Tensor y;
    GateDecision decision;
    std::vector<std::uint64_t> cost;
};

inline ForwardResult model_forward(const ModalityMoe& model, const Batch& batch, GateMode mode, double tau, Rng* rng,
                                   std::optional<std::size_t> static_branch = std::nullopt) {
    if (static_branch) {
        auto out = execute_selected_experts(model, batch.features, std::vector<std::size_t>(batch.size(), *static_branch));
        return {out.y, fixed_decision({*static_branch}, batch.size(), model.num_experts()), std::move(out.cost)};
    }
    auto out = moe_forward(model, batch.features, mode, tau, rng);
    return {out.y, std::move(out.decision), std::move(out.cost)};
}

inline ForwardResult model_forward(const FusionNetwork& net, const Batch& batch, GateMode mode, double tau, Rng* rng,
                                   std::optional<std::size_t> static_branch = std::nullopt) {
    FusionForwardOptions opts;
    if (static_branch) opts.forced_path = std::vector<std::size_t>(net.num_cells(), *static_branch);
    auto out = fusion_forward(net, batch.features.at(0), batch.features.at(1), mode, tau, rng, opts);
    return {out.y, std::move(out.decision), std::move(out.cost)};
}

inline Tensor model_resource_loss(const ModalityMoe& model, const GateDecision& d, const ResourceLossConfig& cfg) {
    return resource_loss_modality(d, model.cost_table(), cfg);
}

inline Tensor model_resource_loss(const FusionNetwork& net, const GateDecision& d, const ResourceLossConfig& cfg) {
    return resource_loss_fusion(d, net.cost_table(), cfg);
}

inline std::size_t model_branches(const ModalityMoe& model) { return model.num_experts(); }
inline std::size_t model_branches(const FusionNetwork& net) { return net.num_ops(); }
inline std::size_t model_slots(const ModalityMoe&) { return 1; }
inline std::size_t model_slots(const FusionNetwork& net) { return net.num_cells(); }

// Stage-I objective for one batch.
inline Tensor stage1_loss(const ModalityMoe& model, const Batch& batch, TaskLossKind kind, Rng&) {
    Tensor total;
    for (const auto& e : model.experts) {
        Tensor l = task_loss(kind, e.forward(batch.features), batch);
        total = total.defined() ? add(total, l) : l;
    }
    return total;
}

inline Tensor stage1_loss(const FusionNetwork& net, const Batch& batch, TaskLossKind kind, Rng& rng) {
    FusionForwardOptions opts;
    opts.forced_path = sample_random_path(net.num_cells(), net.num_ops(), rng);
    auto out = fusion_forward(net, batch.features.at(0), batch.features.at(1), GateMode::hard_inference, 1.0, nullptr, opts);
    return task_loss(kind, out.y, batch);
}

// --- loops ---

namespace detail {

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += batch_size) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    }
    return out;
}

inline void require_data(const Dataset& data, const TrainConfig& cfg) {
    if (data.size() == 0) throw TrainingError("training data is empty");
    if (cfg.batch_size == 0) throw TrainingError("batch_size must be positive");
}

inline void log_line(std::ostream* log, const nlohmann::json& j) {
    if (log) *log << j.dump() << '\n';
}

}  // namespace detail

template <typename Model>
void stage1_pretrain(Model& model, const Dataset& data, const TrainConfig& cfg, Rng& rng, std::ostream* log = nullptr) {
    detail::require_data(data, cfg);
    const auto kind = cfg.task_loss.value_or(default_task_loss(data.task));
    Optimizer opt(model.backbone_parameters(), optimizer_config(cfg));
    for (int epoch = 0; epoch < cfg.effective_stage1_epochs(); ++epoch) {
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (const auto& idx : detail::epoch_batches(data.size(), cfg.batch_size, rng)) {
            const Batch batch = make_batch(data, idx);
            opt.zero_grad();
            Tensor loss = stage1_loss(model, batch, kind, rng);
            loss.backward();
            opt.step();
            loss_sum += loss.item();
            ++steps;
        }
        detail::log_line(log, {{"stage", 1}, {"epoch", epoch}, {"task_loss", loss_sum / static_cast<double>(steps)}});
    }
}

template <typename Model>
void stage2_finetune(Model& model, const Dataset& data, const TrainConfig& cfg, Rng& rng, std::ostream* log = nullptr) {
    detail::require_data(data, cfg);
    const auto kind = cfg.task_loss.value_or(default_task_loss(data.task));
    const ParameterList trainable =
        cfg.ablation == Ablation::frozen_backbone ? model.gate_parameters() : model.parameters();
    Optimizer opt(trainable, optimizer_config(cfg));
    const ResourceLossConfig rcfg{cfg.lambda, cfg.normalization};
    const GateMode mode = cfg.gate_training == GateTraining::straight_through ? GateMode::hard_st : GateMode::soft;
    const std::size_t B = model_branches(model);
    for (int epoch = 0; epoch < cfg.stage2_epochs; ++epoch) {
        const double tau = anneal_tau(cfg.anneal, std::min(epoch, cfg.anneal.total_epochs));
        double task_sum = 0.0, res_sum = 0.0;
        std::size_t steps = 0;
        std::vector<std::vector<double>> counts(model_slots(model), std::vector<double>(B, 0.0));
        std::size_t seen = 0;
        for (const auto& idx : detail::epoch_batches(data.size(), cfg.batch_size, rng)) {
            const Batch batch = make_batch(data, idx);
            opt.zero_grad();
            auto out = model_forward(model, batch, mode, tau, &rng);
            Tensor task = task_loss(kind, out.y, batch);
            Tensor res = model_resource_loss(model, out.decision, rcfg);
            Tensor loss = total_loss(task, res);
            loss.backward();
            opt.step();
            task_sum += task.item();
            res_sum += res.item();
            ++steps;
            for (std::size_t j = 0; j < counts.size(); ++j) {
                for (auto s : out.decision.selected[j]) counts[j][s] += 1.0;
            }
            seen += batch.size();
        }
        for (auto& slot : counts) {
            for (auto& c : slot) c /= static_cast<double>(seen);
        }
        detail::log_line(log, {{"stage", 2},
                               {"epoch", epoch},
                               {"task_loss", task_sum / static_cast<double>(steps)},
                               {"resource_loss", res_sum / static_cast<double>(steps)},
                               {"tau", tau},
                               {"selection_ratio", counts}});
    }
}

// Stage II draws from its own stream so a stage-I model can be shared
// across several stage-II runs without changing their results.
inline std::uint64_t stage2_seed(std::uint64_t seed) { return seed ^ 0x9E3779B97F4A7C15ULL; }

template <typename Model>
void train_dynamic(Model& model, const Dataset& data, const TrainConfig& cfg, std::ostream* log = nullptr) {
    Rng rng1(cfg.seed);
    stage1_pretrain(model, data, cfg, rng1, log);
    Rng rng2(stage2_seed(cfg.seed));
    stage2_finetune(model, data, cfg, rng2, log);
}

// Trains a single fixed branch (static baseline) on the task loss for
// stage1 + stage2 epochs.
template <typename Model>
void train_static(Model& model, const Dataset& data, const TrainConfig& cfg, std::size_t branch,
                  std::ostream* log = nullptr) {
    detail::require_data(data, cfg);
    Rng rng(cfg.seed);
    const auto kind = cfg.task_loss.value_or(default_task_loss(data.task));
    Optimizer opt(model.backbone_parameters(), optimizer_config(cfg));
    const int epochs = cfg.stage1_epochs + cfg.stage2_epochs;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (const auto& idx : detail::epoch_batches(data.size(), cfg.batch_size, rng)) {
            const Batch batch = make_batch(data, idx);
            opt.zero_grad();
            auto out = model_forward(model, batch, GateMode::hard_inference, 1.0, nullptr, branch);
            Tensor loss = task_loss(kind, out.y, batch);
            loss.backward();
            opt.step();
            loss_sum += loss.item();
            ++steps;
        }
        detail::log_line(log, {{"stage", "static"},
                               {"branch", branch},
                               {"epoch", epoch},
                               {"task_loss", loss_sum / static_cast<double>(steps)}});
    }
}

// --- evaluation ---

struct EvalOptions {
    InferenceGate gate = InferenceGate::hard;
    double tau = 1.0;
    std::optional<std::size_t> static_branch;
    std::size_t chunk = 500;
};

struct Evaluation {
    MetricsRecord metrics;
    std::vector<std::vector<std::size_t>> selected;  // [slot][sample]
    std::vector<std::uint64_t> cost;
    std::vector<double> predictions;  // class index or regression output
};

// Noise-free inference over the whole set (hard gates unless told otherwise).
template <typename Model>
Evaluation evaluate(const Model& model, const Dataset& data, const EvalOptions& opts = {}) {
    Evaluation ev;
    const std::size_t slots = model_slots(model);
    const std::size_t B = model_branches(model);
    ev.selected.assign(slots, {});
    const GateMode mode = opts.gate == InferenceGate::hard ? GateMode::hard_inference : GateMode::soft;
    std::vector<std::size_t> pred_cls, true_cls;
    std::vector<double> pred_reg, true_reg;
    for (std::size_t start = 0; start < data.size(); start += opts.chunk) {
        std::vector<std::size_t> idx(std::min(opts.chunk, data.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const Batch batch = make_batch(data, idx);
        auto out = model_forward(model, batch, mode, opts.tau, nullptr, opts.static_branch);
        for (std::size_t j = 0; j < slots; ++j) {
            ev.selected[j].insert(ev.selected[j].end(), out.decision.selected[j].begin(), out.decision.selected[j].end());
        }
        ev.cost.insert(ev.cost.end(), out.cost.begin(), out.cost.end());
        if (data.task == TaskKind::regression) {
            for (std::size_t i = 0; i < batch.size(); ++i) {
                pred_reg.push_back(out.y[i]);
                true_reg.push_back(batch.targets[i]);
            }
        } else {
            const auto p = max_index(out.y, 1);
            pred_cls.insert(pred_cls.end(), p.begin(), p.end());
            true_cls.insert(true_cls.end(), batch.classes.begin(), batch.classes.end());
        }
    }

    auto& m = ev.metrics;
    if (data.task == TaskKind::regression) {
        m.mae = mean_absolute_error(pred_reg, true_reg);
        m.accuracy = sign_accuracy(pred_reg, true_reg);
        ev.predictions = pred_reg;
    } else {
        m.accuracy = accuracy(pred_cls, true_cls);
        const auto f1 = f1_scores(pred_cls, true_cls, data.num_classes);
        m.f1_micro = f1.micro;
        m.f1_macro = f1.macro;
        ev.predictions.assign(pred_cls.begin(), pred_cls.end());
    }
    double total_cost = 0.0;
    for (auto c : ev.cost) total_cost += static_cast<double>(c);
    m.mean_madds = data.size() ? total_cost / static_cast<double>(data.size()) : 0.0;

    m.selection_ratio.assign(slots, std::vector<double>(B, 0.0));
    double min_entropy = std::numeric_limits<double>::infinity();
    double easy_cheap = 0, easy_n = 0, hard_cheap = 0, hard_n = 0;
    for (std::size_t j = 0; j < slots; ++j) {
        for (std::size_t i = 0; i < data.size(); ++i) {
            const auto s = ev.selected[j][i];
            m.selection_ratio[j][s] += 1.0;
            const bool cheap = s == 0;
            if (data.samples[i].difficulty == Difficulty::easy) {
                easy_cheap += cheap;
                easy_n += 1;
            } else {
                hard_cheap += cheap;
                hard_n += 1;
            }
        }
        for (auto& r : m.selection_ratio[j]) r /= static_cast<double>(data.size());
        min_entropy = std::min(min_entropy, entropy_nats(m.selection_ratio[j]));
    }
    m.gate_entropy = opts.static_branch ? 0.0 : min_entropy;
    m.degenerate_gate = !opts.static_branch && min_entropy < kDegenerateEntropy;
    m.easy_cheap_ratio = easy_n > 0 ? easy_cheap / easy_n : kNaN;
    m.hard_cheap_ratio = hard_n > 0 ? hard_cheap / hard_n : kNaN;
    return ev;
}

}  // namespace dynmm
