#pragma once

// Experiment runner: lambda sweeps with paired static baselines, noise
// robustness curves, training ablations, and CSV/JSON result files.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynmm/checkpoint.hpp"
#include "dynmm/config.hpp"
#include "dynmm/data.hpp"
#include "dynmm/metrics.hpp"
#include "dynmm/trainer.hpp"

namespace dynmm {

struct NoiseSweep {
    NoiseTarget target = NoiseTarget::modality_2;
    double prob = 1.0 / 3.0;
    std::vector<double> sigmas{0.0, 1.0, 2.0, 4.0};
};

struct ExperimentConfig {
    int schema = 1;
    ModelSpec model;
    SyntheticSpec data;
    TrainConfig train;
    std::vector<double> lambda_values;
    std::vector<std::uint64_t> seeds;
    std::optional<NoiseSweep> noise;
    std::optional<double> robustness_lambda;  // defaults to the middle swept value
    std::optional<double> ablation_lambda;    // same
    std::string output_dir = "out";
    bool save_checkpoints = true;

    double middle_lambda() const { return lambda_values.at(lambda_values.size() / 2); }
};

inline void validate(const ExperimentConfig& cfg) {
    if (cfg.schema != 1) throw ConfigError("unsupported config schema " + std::to_string(cfg.schema));
    if (cfg.lambda_values.empty()) throw ConfigError("lambda_values must be non-empty");
    if (cfg.seeds.empty()) throw ConfigError("seeds must be non-empty");
    for (double l : cfg.lambda_values) {
        if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("lambda values must be finite and non-negative");
    }
    validate(cfg.data);
    Dataset proto = empty_like(cfg.data);
    check_model_matches_data(cfg.model, proto);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = {{"schema", c.schema},
         {"architecture", c.model.architecture},
         {"model", model_json(c.model)},
         {"data", c.data},
         {"train", c.train},
         {"lambda_values", c.lambda_values},
         {"seeds", c.seeds},
         {"output_dir", c.output_dir},
         {"save_checkpoints", c.save_checkpoints}};
    if (c.noise) {
        j["noise_sweep"] = {{"target", to_string(c.noise->target)}, {"prob", c.noise->prob}, {"sigmas", c.noise->sigmas}};
    }
    if (c.robustness_lambda) j["robustness_lambda"] = *c.robustness_lambda;
    if (c.ablation_lambda) j["ablation_lambda"] = *c.ablation_lambda;
}

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    detail::check_keys(j,
                       {"schema", "architecture", "model", "data", "train", "lambda_values", "seeds", "noise_sweep",
                        "robustness_lambda", "ablation_lambda", "output_dir", "save_checkpoints"},
                       "config");
    ExperimentConfig c;
    try {
        c.schema = j.value("schema", 1);
        const auto arch = detail::enum_value(j, "architecture", Architecture::modality_moe);
        c.model = model_spec_from_json(arch, j.value("model", nlohmann::json::object()));
        c.data = j.value("data", nlohmann::json::object()).get<SyntheticSpec>();
        c.train = j.value("train", nlohmann::json::object()).get<TrainConfig>();
        c.lambda_values = j.at("lambda_values").get<std::vector<double>>();
        c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        if (j.contains("noise_sweep")) {
            const auto& n = j.at("noise_sweep");
            detail::check_keys(n, {"target", "prob", "sigmas"}, "noise_sweep");
            NoiseSweep s;
            s.target = noise_target_from_string(n.value("target", std::string(to_string(s.target))));
            s.prob = n.value("prob", s.prob);
            s.sigmas = n.value("sigmas", s.sigmas);
            c.noise = s;
        }
        if (j.contains("robustness_lambda")) c.robustness_lambda = j.at("robustness_lambda").get<double>();
        if (j.contains("ablation_lambda")) c.ablation_lambda = j.at("ablation_lambda").get<double>();
        c.output_dir = j.value("output_dir", c.output_dir);
        c.save_checkpoints = j.value("save_checkpoints", c.save_checkpoints);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    validate(c);
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    return parse_experiment_config(j);
}

// --- run helpers ---

inline const char* static_variant_name(std::size_t branch, std::size_t branches) {
    return branch == 0 ? "static_cheap" : branch + 1 == branches ? "static_full" : "static_mid";
}

// lambda = 0 runs use soft gates for training and inference.
inline TrainConfig cell_train_config(TrainConfig base, double lambda, std::uint64_t seed) {
    base.lambda = lambda;
    base.seed = seed;
    if (lambda == 0.0) {
        base.gate_training = GateTraining::annealed_soft;
        base.inference = InferenceGate::soft;
    }
    return base;
}

inline EvalOptions eval_options_for(const TrainConfig& cfg, std::optional<std::size_t> static_branch = std::nullopt) {
    EvalOptions o;
    o.gate = cfg.inference;
    o.tau = anneal_tau(cfg.anneal, cfg.anneal.total_epochs);
    o.static_branch = static_branch;
    return o;
}

inline Evaluation evaluate_any(const AnyModel& model, const Dataset& data, const EvalOptions& opts) {
    return std::visit([&](const auto& m) { return evaluate(m, data, opts); }, model);
}

inline std::size_t branch_count(const AnyModel& model) {
    return std::visit([](const auto& m) { return model_branches(m); }, model);
}

inline double median(std::vector<double> v) {
    std::erase_if(v, [](double x) { return std::isnan(x); });
    if (v.empty()) return kNaN;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Runs fn(0..n-1) on up to `jobs` threads. Exceptions escape only from
// the calling thread's view after all workers finish.
inline void run_parallel(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

struct RunFailure {
    std::string variant;
    double lambda = kNaN;
    std::uint64_t seed = 0;
    std::string message;
};

namespace detail {

struct Task {
    std::string log;
    std::optional<std::string> error;
};

inline nlohmann::json run_header(const std::string& variant, double lambda, std::uint64_t seed) {
    nlohmann::json j{{"event", "run"}, {"variant", variant}, {"seed", seed}};
    j["lambda"] = std::isnan(lambda) ? nlohmann::json(nullptr) : nlohmann::json(lambda);
    return j;
}

inline std::string checkpoint_path(const ExperimentConfig& cfg, const std::string& stem) {
    return (std::filesystem::path(cfg.output_dir) / "checkpoints" / (stem + ".ckpt")).string();
}

inline std::string lambda_tag(double lambda) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), lambda);
    return std::string(buf, res.ptr);
}

// Stage-I model for one seed, plus per-branch test accuracy logged as a
// sanity signal that every branch learned something.
inline AnyModel pretrain(const ExperimentConfig& cfg, const DatasetSplit& data, std::uint64_t seed, std::ostream& log) {
    AnyModel model = build_model(with_seed(cfg.model, seed));
    TrainConfig tc = cell_train_config(cfg.train, cfg.train.lambda, seed);
    log << run_header("stage1", kNaN, seed).dump() << '\n';
    std::visit(
        [&](auto& m) {
            Rng rng(seed);
            stage1_pretrain(m, data.train, tc, rng, &log);
            nlohmann::json acc = nlohmann::json::array();
            for (std::size_t b = 0; b < model_branches(m); ++b) {
                EvalOptions o;
                o.static_branch = b;
                acc.push_back(evaluate(m, data.test, o).metrics.accuracy);
            }
            log << nlohmann::json{{"event", "stage1_branch_accuracy"}, {"seed", seed}, {"accuracy", acc}}.dump()
                << '\n';
        },
        model);
    return model;
}

inline MetricsRecord finetune_and_evaluate(const ExperimentConfig& cfg, const DatasetSplit& data, const AnyModel& stage1,
                                           const TrainConfig& tc, const std::string& variant, std::ostream& log,
                                           const std::string& checkpoint_stem) {
    const auto t0 = std::chrono::steady_clock::now();
    const ModelSpec spec = with_seed(cfg.model, tc.seed);
    AnyModel model = clone_model(spec, stage1);
    log << run_header(variant, tc.lambda, tc.seed).dump() << '\n';
    std::visit(
        [&](auto& m) {
            Rng rng(stage2_seed(tc.seed));
            stage2_finetune(m, data.train, tc, rng, &log);
        },
        model);
    Evaluation ev = evaluate_any(model, data.test, eval_options_for(tc));
    ev.metrics.variant = variant;
    ev.metrics.lambda = tc.lambda;
    ev.metrics.seed = tc.seed;
    ev.metrics.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (cfg.save_checkpoints && !checkpoint_stem.empty()) {
        save_checkpoint(checkpoint_path(cfg, checkpoint_stem), CheckpointInfo{spec, tc, variant, std::nullopt, cfg.data},
                        model);
    }
    return ev.metrics;
}

struct StaticRun {
    AnyModel model;
    MetricsRecord metrics;
};

inline StaticRun train_static_baseline(const ExperimentConfig& cfg, const DatasetSplit& data, std::uint64_t seed,
                                       std::size_t branch, std::ostream& log, const std::string& variant_name = "") {
    const auto t0 = std::chrono::steady_clock::now();
    const ModelSpec spec = with_seed(cfg.model, seed);
    AnyModel model = build_model(spec);
    const std::size_t branches = branch_count(model);
    const std::string variant = variant_name.empty() ? static_variant_name(branch, branches) : variant_name;
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    tc.lambda = 0.0;
    log << run_header(variant, kNaN, seed).dump() << '\n';
    std::visit([&](auto& m) { train_static(m, data.train, tc, branch, &log); }, model);
    Evaluation ev = evaluate_any(model, data.test, eval_options_for(tc, branch));
    ev.metrics.variant = variant;
    ev.metrics.lambda = kNaN;
    ev.metrics.seed = seed;
    ev.metrics.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (cfg.save_checkpoints) {
        save_checkpoint(checkpoint_path(cfg, variant + "_seed" + std::to_string(seed)),
                        CheckpointInfo{spec, tc, variant, branch, cfg.data}, model);
    }
    return {std::move(model), ev.metrics};
}

inline void prepare_output_dir(const ExperimentConfig& cfg) {
    std::filesystem::create_directories(std::filesystem::path(cfg.output_dir) / "checkpoints");
}

inline std::string run_guarded(std::ostringstream& log, const std::function<void()>& fn, std::optional<std::string>& err) {
    try {
        fn();
    } catch (const std::exception& e) {
        err = e.what();
        log << nlohmann::json{{"event", "error"}, {"message", e.what()}}.dump() << '\n';
    }
    return log.str();
}

inline void fill_reduction(MetricsRecord& r, double static_full_madds) {
    r.madds_reduction_vs_static = static_full_madds > 0 ? 1.0 - r.mean_madds / static_full_madds : kNaN;
}

}  // namespace detail

struct SweepResult {
    std::vector<MetricsRecord> records;  // dynamic rows (lambda-major, then seed), then static rows per seed
    std::vector<RunFailure> failures;
    std::string log;
};

// For every seed: one stage-I model shared by all lambda values, one
// stage-II run per lambda, and the always-cheap / always-full baselines.
inline SweepResult run_lambda_sweep(const ExperimentConfig& cfg, const DatasetSplit& data, std::size_t jobs = 1) {
    validate(cfg);
    if (cfg.save_checkpoints) detail::prepare_output_dir(cfg);
    const std::size_t S = cfg.seeds.size();
    const std::size_t L = cfg.lambda_values.size();
    const std::size_t branches = branch_count(build_model(cfg.model));

    // phase 1: stage-I models and static baselines
    std::vector<std::optional<AnyModel>> stage1(S);
    std::vector<std::optional<MetricsRecord>> statics(S * 2);
    std::vector<detail::Task> p1(S * 3);
    run_parallel(S * 3, jobs, [&](std::size_t t) {
        const std::size_t s = t / 3, kind = t % 3;
        const auto seed = cfg.seeds[s];
        std::ostringstream log;
        p1[t].log = detail::run_guarded(
            log,
            [&] {
                if (kind == 0) {
                    stage1[s] = detail::pretrain(cfg, data, seed, log);
                } else {
                    const std::size_t branch = kind == 1 ? 0 : branches - 1;
                    statics[s * 2 + kind - 1] = detail::train_static_baseline(cfg, data, seed, branch, log).metrics;
                }
            },
            p1[t].error);
    });

    // phase 2: stage-II cells
    std::vector<std::optional<MetricsRecord>> cells(L * S);
    std::vector<detail::Task> p2(L * S);
    run_parallel(L * S, jobs, [&](std::size_t t) {
        const std::size_t l = t / S, s = t % S;
        const auto seed = cfg.seeds[s];
        std::ostringstream log;
        p2[t].log = detail::run_guarded(
            log,
            [&] {
                if (!stage1[s]) throw TrainingError("stage-1 pretraining failed for this seed");
                const TrainConfig tc = cell_train_config(cfg.train, cfg.lambda_values[l], seed);
                cells[t] = detail::finetune_and_evaluate(
                    cfg, data, *stage1[s], tc, "dynamic", log,
                    "dynamic_lambda" + detail::lambda_tag(tc.lambda) + "_seed" + std::to_string(seed));
            },
            p2[t].error);
    });

    SweepResult out;
    for (const auto& t : p1) out.log += t.log;
    for (const auto& t : p2) out.log += t.log;
    for (std::size_t t = 0; t < p1.size(); ++t) {
        if (!p1[t].error) continue;
        const char* names[] = {"stage1", "static_cheap", "static_full"};
        out.failures.push_back({names[t % 3], kNaN, cfg.seeds[t / 3], *p1[t].error});
    }
    for (std::size_t t = 0; t < p2.size(); ++t) {
        if (p2[t].error) out.failures.push_back({"dynamic", cfg.lambda_values[t / S], cfg.seeds[t % S], *p2[t].error});
    }
    for (std::size_t t = 0; t < cells.size(); ++t) {
        if (!cells[t]) continue;
        const auto& full = statics[(t % S) * 2 + 1];
        detail::fill_reduction(*cells[t], full ? full->mean_madds : kNaN);
        out.records.push_back(*cells[t]);
    }
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t k = 0; k < 2; ++k) {
            auto& r = statics[s * 2 + k];
            if (!r) continue;
            detail::fill_reduction(*r, statics[s * 2 + 1] ? statics[s * 2 + 1]->mean_madds : kNaN);
            out.records.push_back(*r);
        }
    }
    return out;
}

// --- robustness ---

struct RobustnessRecord {
    double sigma = 0.0;
    std::uint64_t seed = 0;
    double dynamic_clean = kNaN;
    double dynamic_noisy = kNaN;
    double dynamic_drop = kNaN;
    double static_clean = kNaN;
    double static_noisy = kNaN;
    double static_drop = kNaN;
    double dynamic_mean_madds = kNaN;

    bool operator==(const RobustnessRecord&) const = default;
};

struct RobustnessResult {
    double lambda = 0.0;
    std::vector<RobustnessRecord> records;  // seed-major, then sigma
    std::vector<RunFailure> failures;
    std::string log;
};

inline std::uint64_t noise_seed(std::uint64_t seed, std::size_t sigma_index) {
    return (seed + 1) * 0x2545F4914F6CDD1DULL + sigma_index;
}

// Trains the dynamic model (at the robustness lambda) and the static
// late-fusion baseline per seed, then evaluates both on identically
// corrupted copies of the test set.
inline RobustnessResult run_robustness(const ExperimentConfig& cfg, const DatasetSplit& data, std::size_t jobs = 1) {
    validate(cfg);
    if (cfg.save_checkpoints) detail::prepare_output_dir(cfg);
    const NoiseSweep sweep = cfg.noise.value_or(NoiseSweep{});
    RobustnessResult out;
    out.lambda = cfg.robustness_lambda.value_or(cfg.middle_lambda());
    const std::size_t S = cfg.seeds.size();
    const std::size_t branches = branch_count(build_model(cfg.model));
    std::vector<std::vector<RobustnessRecord>> per_seed(S);
    std::vector<detail::Task> tasks(S);
    run_parallel(S, jobs, [&](std::size_t s) {
        const auto seed = cfg.seeds[s];
        std::ostringstream log;
        tasks[s].log = detail::run_guarded(
            log,
            [&] {
                const TrainConfig tc = cell_train_config(cfg.train, out.lambda, seed);
                AnyModel stage1 = detail::pretrain(cfg, data, seed, log);
                AnyModel dyn = clone_model(with_seed(cfg.model, seed), stage1);
                log << detail::run_header("robustness_dynamic", tc.lambda, seed).dump() << '\n';
                std::visit(
                    [&](auto& m) {
                        Rng rng(stage2_seed(seed));
                        stage2_finetune(m, data.train, tc, rng, &log);
                    },
                    dyn);
                auto base = detail::train_static_baseline(cfg, data, seed, branches - 1, log);
                TrainConfig stc = cfg.train;
                const auto dyn_opts = eval_options_for(tc);
                const auto static_opts = eval_options_for(stc, branches - 1);
                const auto dyn_clean = evaluate_any(dyn, data.test, dyn_opts);
                const double static_clean = base.metrics.accuracy;
                for (std::size_t k = 0; k < sweep.sigmas.size(); ++k) {
                    Rng nrng(noise_seed(seed, k));
                    const Dataset noisy = inject_noise(data.test, {sweep.target, sweep.sigmas[k], sweep.prob}, nrng);
                    const auto d = evaluate_any(dyn, noisy, dyn_opts);
                    const auto st = evaluate_any(base.model, noisy, static_opts);
                    RobustnessRecord r;
                    r.sigma = sweep.sigmas[k];
                    r.seed = seed;
                    r.dynamic_clean = dyn_clean.metrics.accuracy;
                    r.dynamic_noisy = d.metrics.accuracy;
                    r.dynamic_drop = r.dynamic_clean - r.dynamic_noisy;
                    r.static_clean = static_clean;
                    r.static_noisy = st.metrics.accuracy;
                    r.static_drop = r.static_clean - r.static_noisy;
                    r.dynamic_mean_madds = d.metrics.mean_madds;
                    per_seed[s].push_back(r);
                }
            },
            tasks[s].error);
    });
    for (std::size_t s = 0; s < S; ++s) {
        out.log += tasks[s].log;
        if (tasks[s].error) out.failures.push_back({"robustness", out.lambda, cfg.seeds[s], *tasks[s].error});
        out.records.insert(out.records.end(), per_seed[s].begin(), per_seed[s].end());
    }
    return out;
}

// --- ablation ---

struct AblationRow {
    std::string method;
    double accuracy = kNaN;    // median over seeds
    double mean_madds = kNaN;  // median over seeds
    double madds_reduction_vs_static = kNaN;
    double gate_entropy = kNaN;
    std::size_t degenerate_runs = 0;
    std::size_t runs = 0;
    bool degenerate_median = false;  // majority of seeds flagged
};

struct AblationResult {
    double lambda = 0.0;
    std::vector<MetricsRecord> records;  // per (method, seed)
    std::vector<AblationRow> table;      // baseline, full, one_stage, frozen_backbone
    std::vector<RunFailure> failures;
    std::string log;
};

inline const char* to_string(Ablation a) {
    switch (a) {
        case Ablation::full: return "full";
        case Ablation::one_stage: return "one_stage";
        case Ablation::frozen_backbone: return "frozen_backbone";
    }
    return "?";
}

inline AblationResult run_ablation(const ExperimentConfig& cfg, const DatasetSplit& data, std::size_t jobs = 1) {
    validate(cfg);
    if (cfg.save_checkpoints) detail::prepare_output_dir(cfg);
    AblationResult out;
    out.lambda = cfg.ablation_lambda.value_or(cfg.middle_lambda());
    const std::size_t S = cfg.seeds.size();
    const std::size_t branches = branch_count(build_model(cfg.model));
    const std::vector<std::string> methods{"baseline", "full", "one_stage", "frozen_backbone"};
    std::vector<std::vector<std::optional<MetricsRecord>>> rec(S, std::vector<std::optional<MetricsRecord>>(4));
    std::vector<detail::Task> tasks(S);
    run_parallel(S, jobs, [&](std::size_t s) {
        const auto seed = cfg.seeds[s];
        std::ostringstream log;
        tasks[s].log = detail::run_guarded(
            log,
            [&] {
                rec[s][0] = detail::train_static_baseline(cfg, data, seed, branches - 1, log, "baseline").metrics;
                const AnyModel stage1 = detail::pretrain(cfg, data, seed, log);
                const AnyModel fresh = build_model(with_seed(cfg.model, seed));
                const Ablation kinds[] = {Ablation::full, Ablation::one_stage, Ablation::frozen_backbone};
                for (std::size_t k = 0; k < 3; ++k) {
                    TrainConfig tc = cell_train_config(cfg.train, out.lambda, seed);
                    tc.ablation = kinds[k];
                    const AnyModel& start = kinds[k] == Ablation::one_stage ? fresh : stage1;
                    rec[s][k + 1] = detail::finetune_and_evaluate(
                        cfg, data, start, tc, methods[k + 1], log,
                        std::string("ablation_") + to_string(kinds[k]) + "_seed" + std::to_string(seed));
                }
            },
            tasks[s].error);
    });
    for (std::size_t s = 0; s < S; ++s) {
        out.log += tasks[s].log;
        if (tasks[s].error) out.failures.push_back({"ablation", out.lambda, cfg.seeds[s], *tasks[s].error});
    }
    for (std::size_t m = 0; m < 4; ++m) {
        AblationRow row;
        row.method = methods[m];
        std::vector<double> acc, madds, red, ent;
        for (std::size_t s = 0; s < S; ++s) {
            auto& r = rec[s][m];
            if (!r) continue;
            detail::fill_reduction(*r, rec[s][0] ? rec[s][0]->mean_madds : kNaN);
            out.records.push_back(*r);
            acc.push_back(r->accuracy);
            madds.push_back(r->mean_madds);
            red.push_back(r->madds_reduction_vs_static);
            ent.push_back(r->gate_entropy);
            row.degenerate_runs += r->degenerate_gate;
            ++row.runs;
        }
        row.accuracy = median(acc);
        row.mean_madds = median(madds);
        row.madds_reduction_vs_static = median(red);
        row.gate_entropy = median(ent);
        row.degenerate_median = row.runs > 0 && 2 * row.degenerate_runs > row.runs;
        out.table.push_back(row);
    }
    return out;
}

// --- serialization ---

inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
    if (s == "nan") return kNaN;
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::invalid_argument("bad number '" + s + "'");
    return v;
}

// "p00|p01;p10|p11" for [slot][branch].
inline std::string format_selection(const std::vector<std::vector<double>>& sel) {
    std::string out;
    for (std::size_t j = 0; j < sel.size(); ++j) {
        if (j) out += ';';
        for (std::size_t b = 0; b < sel[j].size(); ++b) {
            if (b) out += '|';
            out += format_double(sel[j][b]);
        }
    }
    return out;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline std::vector<std::vector<double>> parse_selection(const std::string& s) {
    std::vector<std::vector<double>> out;
    if (s.empty()) return out;
    for (const auto& slot : split(s, ';')) {
        out.emplace_back();
        for (const auto& v : split(slot, '|')) out.back().push_back(parse_double(v));
    }
    return out;
}

inline constexpr const char* kMetricsCsvHeader =
    "variant,lambda,seed,accuracy,f1_micro,f1_macro,mae,mean_madds,madds_reduction_vs_static,selection_ratio,"
    "gate_entropy,easy_cheap_ratio,hard_cheap_ratio,degenerate_gate";

// Wall time is left out so the file is reproducible byte for byte.
inline void write_metrics_csv(const std::vector<MetricsRecord>& records, std::ostream& os) {
    os << kMetricsCsvHeader << '\n';
    for (const auto& r : records) {
        os << r.variant << ',' << format_double(r.lambda) << ',' << r.seed << ',' << format_double(r.accuracy) << ','
           << format_double(r.f1_micro) << ',' << format_double(r.f1_macro) << ',' << format_double(r.mae) << ','
           << format_double(r.mean_madds) << ',' << format_double(r.madds_reduction_vs_static) << ','
           << format_selection(r.selection_ratio) << ',' << format_double(r.gate_entropy) << ','
           << format_double(r.easy_cheap_ratio) << ',' << format_double(r.hard_cheap_ratio) << ','
           << (r.degenerate_gate ? "true" : "false") << '\n';
    }
}

inline std::vector<MetricsRecord> parse_metrics_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kMetricsCsvHeader) throw std::invalid_argument("metrics csv: bad header");
    std::vector<MetricsRecord> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 14) throw std::invalid_argument("metrics csv: expected 14 fields, got " + std::to_string(f.size()));
        MetricsRecord r;
        r.variant = f[0];
        r.lambda = parse_double(f[1]);
        r.seed = std::stoull(f[2]);
        r.accuracy = parse_double(f[3]);
        r.f1_micro = parse_double(f[4]);
        r.f1_macro = parse_double(f[5]);
        r.mae = parse_double(f[6]);
        r.mean_madds = parse_double(f[7]);
        r.madds_reduction_vs_static = parse_double(f[8]);
        r.selection_ratio = parse_selection(f[9]);
        r.gate_entropy = parse_double(f[10]);
        r.easy_cheap_ratio = parse_double(f[11]);
        r.hard_cheap_ratio = parse_double(f[12]);
        if (f[13] != "true" && f[13] != "false") throw std::invalid_argument("metrics csv: bad degenerate_gate");
        r.degenerate_gate = f[13] == "true";
        out.push_back(std::move(r));
    }
    return out;
}

inline nlohmann::json json_number(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

inline nlohmann::json to_json_value(const MetricsRecord& r) {
    return {{"variant", r.variant},
            {"lambda", json_number(r.lambda)},
            {"seed", r.seed},
            {"accuracy", json_number(r.accuracy)},
            {"f1_micro", json_number(r.f1_micro)},
            {"f1_macro", json_number(r.f1_macro)},
            {"mae", json_number(r.mae)},
            {"mean_madds", r.mean_madds},
            {"madds_reduction_vs_static", json_number(r.madds_reduction_vs_static)},
            {"selection_ratio", r.selection_ratio},
            {"gate_entropy", r.gate_entropy},
            {"easy_cheap_ratio", json_number(r.easy_cheap_ratio)},
            {"hard_cheap_ratio", json_number(r.hard_cheap_ratio)},
            {"wall_time_s", r.wall_time_s},
            {"degenerate_gate", r.degenerate_gate}};
}

inline nlohmann::json to_json_value(const RunFailure& f) {
    return {{"variant", f.variant}, {"lambda", json_number(f.lambda)}, {"seed", f.seed}, {"message", f.message}};
}

inline nlohmann::json to_json_value(const RobustnessRecord& r) {
    return {{"sigma", r.sigma},
            {"seed", r.seed},
            {"dynamic_clean", r.dynamic_clean},
            {"dynamic_noisy", r.dynamic_noisy},
            {"dynamic_drop", r.dynamic_drop},
            {"static_clean", r.static_clean},
            {"static_noisy", r.static_noisy},
            {"static_drop", r.static_drop},
            {"dynamic_mean_madds", r.dynamic_mean_madds}};
}

inline nlohmann::json to_json_value(const AblationRow& r) {
    return {{"method", r.method},
            {"accuracy", json_number(r.accuracy)},
            {"mean_madds", json_number(r.mean_madds)},
            {"madds_reduction_vs_static", json_number(r.madds_reduction_vs_static)},
            {"gate_entropy", json_number(r.gate_entropy)},
            {"degenerate_runs", r.degenerate_runs},
            {"runs", r.runs},
            {"degenerate", r.degenerate_median}};
}

template <typename T>
nlohmann::json to_json_array(const std::vector<T>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& x : v) a.push_back(to_json_value(x));
    return a;
}

inline void write_robustness_csv(const std::vector<RobustnessRecord>& records, std::ostream& os) {
    os << "sigma,seed,dynamic_clean,dynamic_noisy,dynamic_drop,static_clean,static_noisy,static_drop,dynamic_mean_madds\n";
    for (const auto& r : records) {
        os << format_double(r.sigma) << ',' << r.seed << ',' << format_double(r.dynamic_clean) << ','
           << format_double(r.dynamic_noisy) << ',' << format_double(r.dynamic_drop) << ','
           << format_double(r.static_clean) << ',' << format_double(r.static_noisy) << ','
           << format_double(r.static_drop) << ',' << format_double(r.dynamic_mean_madds) << '\n';
    }
}

inline void write_ablation_table_csv(const std::vector<AblationRow>& rows, std::ostream& os) {
    os << "method,accuracy,mean_madds,madds_reduction_vs_static,gate_entropy,degenerate_runs,runs,degenerate\n";
    for (const auto& r : rows) {
        os << r.method << ',' << format_double(r.accuracy) << ',' << format_double(r.mean_madds) << ','
           << format_double(r.madds_reduction_vs_static) << ',' << format_double(r.gate_entropy) << ','
           << r.degenerate_runs << ',' << r.runs << ',' << (r.degenerate_median ? "true" : "false") << '\n';
    }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    f << text;
    if (!f) throw std::runtime_error("failed writing '" + path.string() + "'");
}

// metrics.csv, metrics.json, log.ndjson under dir.
inline void write_sweep_outputs(const std::string& dir, const SweepResult& r, const ExperimentConfig& cfg) {
    std::ostringstream csv;
    write_metrics_csv(r.records, csv);
    write_text_file(std::filesystem::path(dir) / "metrics.csv", csv.str());
    nlohmann::json j{{"config", cfg}, {"records", to_json_array(r.records)}, {"failures", to_json_array(r.failures)}};
    write_text_file(std::filesystem::path(dir) / "metrics.json", j.dump(2) + "\n");
    write_text_file(std::filesystem::path(dir) / "log.ndjson", r.log);
}

}  // namespace dynmm
