// dynmm: command-line experiment runner.
//
//   dynmm generate   --config spec.json --out data.dmmd
//   dynmm train      --config exp.json --out model.ckpt [--lambda L] [--seed S]
//   dynmm evaluate   --checkpoint model.ckpt [--data data.dmmd]
//   dynmm sweep      --config exp.json [--out dir] [--jobs N] [--format csv]
//   dynmm robustness --config exp.json [--out dir]
//   dynmm ablate     --config exp.json [--out dir]
//   dynmm inspect    --checkpoint model.ckpt [--data data.dmmd]
//
// Exit status: 0 success, 1 usage error, 2 run failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dynmm/dynmm.hpp"

namespace {

using dynmm::AnyModel;
using dynmm::DatasetSplit;
using dynmm::ExperimentConfig;
using nlohmann::json;

constexpr int kUsage = 1;
constexpr int kFailure = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string config;
    std::string out;
    std::string data;
    std::string checkpoint;
    std::string format = "json";
    std::optional<std::uint64_t> seed;
    std::optional<double> lambda;
    std::size_t jobs = 1;
};

json read_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw UsageError("cannot open '" + path + "'");
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw dynmm::ConfigError("'" + path + "' is not valid JSON: " + e.what());
    }
}

ExperimentConfig experiment_config(const Options& o) {
    if (o.config.empty()) throw UsageError("--config is required");
    auto cfg = dynmm::parse_experiment_config(read_json(o.config));
    if (o.seed) cfg.seeds = {*o.seed};
    if (o.lambda) cfg.lambda_values = {*o.lambda};
    if (!o.out.empty()) cfg.output_dir = o.out;
    return cfg;
}

DatasetSplit dataset_for(const ExperimentConfig& cfg, const std::string& path) {
    if (path.empty()) return dynmm::generate(cfg.data);
    return dynmm::load_dataset(path);
}

void print_records(const std::vector<dynmm::MetricsRecord>& records, const std::string& format) {
    if (format == "csv") {
        dynmm::write_metrics_csv(records, std::cout);
    } else {
        std::cout << dynmm::to_json_array(records).dump(2) << '\n';
    }
}

void report_failures(const std::vector<dynmm::RunFailure>& failures) {
    for (const auto& f : failures) {
        std::cerr << "run failed: " << f.variant << " lambda=" << dynmm::format_double(f.lambda) << " seed=" << f.seed
                  << ": " << f.message << '\n';
    }
}

int cmd_generate(const Options& o) {
    if (o.config.empty() || o.out.empty()) throw UsageError("generate needs --config and --out");
    const json j = read_json(o.config);
    dynmm::SyntheticSpec spec = j.contains("data") ? j.at("data").get<dynmm::SyntheticSpec>()
                                                   : j.get<dynmm::SyntheticSpec>();
    if (o.seed) spec.seed = *o.seed;
    const auto split = dynmm::generate(spec);
    dynmm::save_dataset(split, o.out);
    if (o.format == "csv") {
        const std::filesystem::path base(o.out);
        for (const auto& [name, set] : {std::pair{"train", &split.train}, std::pair{"test", &split.test}}) {
            auto p = base;
            p.replace_extension(std::string(".") + name + ".csv");
            std::ofstream f(p);
            dynmm::export_csv(*set, f);
        }
    }
    std::cout << json{{"path", o.out}, {"train", split.train.size()}, {"test", split.test.size()}, {"spec", spec}}.dump(2)
              << '\n';
    return 0;
}

int cmd_train(const Options& o) {
    if (o.out.empty()) throw UsageError("train needs --out <checkpoint>");
    Options oo = o;
    oo.out.clear();
    auto cfg = experiment_config(oo);
    const auto split = dataset_for(cfg, o.data);
    if (!o.data.empty()) cfg.data = split.spec;
    const std::uint64_t seed = cfg.seeds.front();
    const double lambda = o.lambda.value_or(cfg.middle_lambda());
    const auto tc = dynmm::cell_train_config(cfg.train, lambda, seed);
    const auto spec = dynmm::with_seed(cfg.model, seed);
    dynmm::check_model_matches_data(spec, split.train);
    AnyModel model = dynmm::build_model(spec);
    std::ostringstream log;
    std::visit([&](auto& m) { dynmm::train_dynamic(m, split.train, tc, &log); }, model);
    std::filesystem::path ckpt(o.out);
    dynmm::save_checkpoint(ckpt.string(), {spec, tc, "dynamic", std::nullopt, cfg.data}, model);
    auto log_path = ckpt;
    log_path.replace_extension(".ndjson");
    dynmm::write_text_file(log_path, log.str());
    auto ev = dynmm::evaluate_any(model, split.test, dynmm::eval_options_for(tc));
    ev.metrics.lambda = lambda;
    ev.metrics.seed = seed;
    print_records({ev.metrics}, o.format);
    return 0;
}

struct Loaded {
    dynmm::LoadedCheckpoint ckpt;
    DatasetSplit data;
};

Loaded load_for_eval(const Options& o) {
    if (o.checkpoint.empty()) throw UsageError("--checkpoint is required");
    auto ckpt = dynmm::load_checkpoint(o.checkpoint);
    DatasetSplit data;
    if (!o.data.empty()) {
        data = dynmm::load_dataset(o.data);
    } else if (ckpt.info.data) {
        data = dynmm::generate(*ckpt.info.data);
    } else {
        throw UsageError("checkpoint has no data spec; pass --data");
    }
    dynmm::check_model_matches_data(ckpt.info.model, data.test);
    return {std::move(ckpt), std::move(data)};
}

int cmd_evaluate(const Options& o) {
    auto [ckpt, data] = load_for_eval(o);
    auto ev = dynmm::evaluate_any(ckpt.model, data.test, dynmm::eval_options_for(ckpt.info.train, ckpt.info.static_branch));
    ev.metrics.variant = ckpt.info.variant;
    ev.metrics.lambda = ckpt.info.static_branch ? dynmm::kNaN : ckpt.info.train.lambda;
    ev.metrics.seed = ckpt.info.train.seed;
    print_records({ev.metrics}, o.format);
    return 0;
}

int cmd_inspect(const Options& o) {
    auto [ckpt, data] = load_for_eval(o);
    const auto ev =
        dynmm::evaluate_any(ckpt.model, data.test, dynmm::eval_options_for(ckpt.info.train, ckpt.info.static_branch));
    const std::size_t slots = ev.selected.size();
    auto path_of = [&](std::size_t i) {
        std::string s;
        for (std::size_t j = 0; j < slots; ++j) s += (j ? "-" : "") + std::to_string(ev.selected[j][i]);
        return s;
    };
    // cross-tab of difficulty vs branch chosen in slot 0
    const std::size_t branches = dynmm::branch_count(ckpt.model);
    std::vector<std::vector<std::size_t>> tab(2, std::vector<std::size_t>(branches, 0));
    for (std::size_t i = 0; i < data.test.size(); ++i) {
        tab[static_cast<std::size_t>(data.test.samples[i].difficulty)][ev.selected[0][i]] += 1;
    }
    if (o.format == "csv") {
        std::cout << "index,difficulty,selected,label,prediction,madds\n";
        for (std::size_t i = 0; i < data.test.size(); ++i) {
            const auto& s = data.test.samples[i];
            std::cout << i << ',' << (s.difficulty == dynmm::Difficulty::hard ? "hard" : "easy") << ',' << path_of(i)
                      << ',' << dynmm::format_double(s.label) << ',' << dynmm::format_double(ev.predictions[i]) << ','
                      << ev.cost[i] << '\n';
        }
        return 0;
    }
    json samples = json::array();
    for (std::size_t i = 0; i < data.test.size(); ++i) {
        const auto& s = data.test.samples[i];
        samples.push_back({{"index", i},
                           {"difficulty", s.difficulty == dynmm::Difficulty::hard ? "hard" : "easy"},
                           {"selected", path_of(i)},
                           {"label", s.label},
                           {"prediction", ev.predictions[i]},
                           {"madds", ev.cost[i]}});
    }
    json out{{"samples", samples},
             {"crosstab", {{"easy", tab[0]}, {"hard", tab[1]}}},
             {"easy_cheap_ratio", dynmm::json_number(ev.metrics.easy_cheap_ratio)},
             {"hard_cheap_ratio", dynmm::json_number(ev.metrics.hard_cheap_ratio)}};
    std::cout << out.dump(2) << '\n';
    return 0;
}

int cmd_sweep(const Options& o) {
    auto cfg = experiment_config(o);
    const auto data = dataset_for(cfg, o.data);
    if (!o.data.empty()) cfg.data = data.spec;
    const auto r = dynmm::run_lambda_sweep(cfg, data, o.jobs);
    dynmm::write_sweep_outputs(cfg.output_dir, r, cfg);
    print_records(r.records, o.format);
    report_failures(r.failures);
    return r.failures.empty() ? 0 : kFailure;
}

int cmd_robustness(const Options& o) {
    auto cfg = experiment_config(o);
    const auto data = dataset_for(cfg, o.data);
    if (!o.data.empty()) cfg.data = data.spec;
    const auto r = dynmm::run_robustness(cfg, data, o.jobs);
    std::ostringstream csv;
    dynmm::write_robustness_csv(r.records, csv);
    const std::filesystem::path dir(cfg.output_dir);
    dynmm::write_text_file(dir / "robustness.csv", csv.str());
    const json j{{"config", cfg}, {"lambda", r.lambda}, {"records", dynmm::to_json_array(r.records)},
                 {"failures", dynmm::to_json_array(r.failures)}};
    dynmm::write_text_file(dir / "robustness.json", j.dump(2) + "\n");
    dynmm::write_text_file(dir / "log.ndjson", r.log);
    if (o.format == "csv") {
        std::cout << csv.str();
    } else {
        std::cout << j.at("records").dump(2) << '\n';
    }
    report_failures(r.failures);
    return r.failures.empty() ? 0 : kFailure;
}

int cmd_ablate(const Options& o) {
    auto cfg = experiment_config(o);
    const auto data = dataset_for(cfg, o.data);
    if (!o.data.empty()) cfg.data = data.spec;
    const auto r = dynmm::run_ablation(cfg, data, o.jobs);
    const std::filesystem::path dir(cfg.output_dir);
    std::ostringstream runs, table;
    dynmm::write_metrics_csv(r.records, runs);
    dynmm::write_ablation_table_csv(r.table, table);
    dynmm::write_text_file(dir / "metrics.csv", runs.str());
    dynmm::write_text_file(dir / "ablation.csv", table.str());
    const json j{{"config", cfg},
                 {"lambda", r.lambda},
                 {"table", dynmm::to_json_array(r.table)},
                 {"records", dynmm::to_json_array(r.records)},
                 {"failures", dynmm::to_json_array(r.failures)}};
    dynmm::write_text_file(dir / "metrics.json", j.dump(2) + "\n");
    dynmm::write_text_file(dir / "log.ndjson", r.log);
    if (o.format == "csv") {
        std::cout << table.str();
    } else {
        std::cout << j.at("table").dump(2) << '\n';
    }
    report_failures(r.failures);
    return r.failures.empty() ? 0 : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dynmm: dynamic multimodal fusion experiments"};
    app.require_subcommand(1);
    Options o;

    auto add_format = [&](CLI::App* c) {
        c->add_option("--format", o.format, "Output format")->check(CLI::IsMember({"json", "csv"}));
    };
    auto add_run = [&](CLI::App* c) {
        c->add_option("--config", o.config, "Experiment config (JSON)")->required();
        c->add_option("--out", o.out, "Output directory");
        c->add_option("--data", o.data, "Use this .dmmd dataset instead of generating one");
        c->add_option("--seed", o.seed, "Run a single seed");
        c->add_option("--lambda", o.lambda, "Run a single lambda");
        c->add_option("--jobs", o.jobs, "Parallel runs")->check(CLI::PositiveNumber);
        add_format(c);
    };

    auto* gen = app.add_subcommand("generate", "Generate a synthetic dataset");
    gen->add_option("--config", o.config, "Synthetic spec or experiment config (JSON)")->required();
    gen->add_option("--out", o.out, "Output .dmmd path")->required();
    gen->add_option("--seed", o.seed, "Override the data seed");
    add_format(gen);

    auto* train = app.add_subcommand("train", "Train one dynamic model and save a checkpoint");
    train->add_option("--config", o.config, "Experiment config (JSON)")->required();
    train->add_option("--out", o.out, "Checkpoint path")->required();
    train->add_option("--data", o.data, "Dataset (.dmmd)");
    train->add_option("--seed", o.seed, "Run seed (default: first configured seed)");
    train->add_option("--lambda", o.lambda, "Resource weight (default: middle swept value)");
    add_format(train);

    auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint on the test split");
    eval->add_option("--checkpoint", o.checkpoint, "Checkpoint path")->required();
    eval->add_option("--data", o.data, "Dataset (.dmmd); default regenerates from the checkpoint");
    add_format(eval);

    auto* inspect = app.add_subcommand("inspect", "Per-sample gate decisions with difficulty labels");
    inspect->add_option("--checkpoint", o.checkpoint, "Checkpoint path")->required();
    inspect->add_option("--data", o.data, "Dataset (.dmmd)");
    add_format(inspect);

    auto* sweep = app.add_subcommand("sweep", "Lambda sweep with static baselines");
    add_run(sweep);
    auto* robust = app.add_subcommand("robustness", "Noise robustness of dynamic vs static");
    add_run(robust);
    auto* ablate = app.add_subcommand("ablate", "Training-strategy ablation");
    add_run(ablate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*gen) return cmd_generate(o);
        if (*train) return cmd_train(o);
        if (*eval) return cmd_evaluate(o);
        if (*inspect) return cmd_inspect(o);
        if (*sweep) return cmd_sweep(o);
        if (*robust) return cmd_robustness(o);
        if (*ablate) return cmd_ablate(o);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n' << app.help();
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
    return kUsage;
}
