// exitaudit: train multi-exit classifiers, mount membership-inference
// attacks (with and without exit knowledge), steal exit hyperparameters
// over a timing channel, and evaluate the TimeGuard defense.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "exitaudit/analysis.hpp"
#include "exitaudit/config.hpp"
#include "exitaudit/pipeline.hpp"
#include "exitaudit/sha512.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace exitaudit;

namespace {

struct MissingArtifact : std::runtime_error {
    MissingArtifact(const std::string& path, const std::string& prior_command)
        : std::runtime_error("missing artifact " + path + "; run `exitaudit " + prior_command +
                             "` first") {}
};

void require_artifact(const fs::path& path, const std::string& prior_command) {
    if (!fs::exists(path)) throw MissingArtifact(path.string(), prior_command);
}

std::string sha512_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot hash " + path.string());
    Sha512 hasher;
    std::vector<std::uint8_t> buf(1 << 16);
    while (in) {
        in.read(reinterpret_cast<char*>(buf.data()), buf.size());
        hasher.update({buf.data(), static_cast<std::size_t>(in.gcount())});
    }
    return hex_digest(hasher.finish());
}

// Manifest: every artifact a command writes, with a content hash, plus the
// resolved config and seeds that produced it.
void record_artifacts(const fs::path& out_dir, const std::string& command, const json& config_json,
                      std::uint64_t master_seed, const std::vector<std::string>& files) {
    const fs::path manifest_path = out_dir / "manifest.json";
    json manifest;
    if (fs::exists(manifest_path)) {
        std::ifstream in(manifest_path);
        in >> manifest;
    } else {
        manifest["artifacts"] = json::object();
        manifest["commands"] = json::array();
    }
    manifest["config"] = config_json;
    manifest["master_seed"] = master_seed;
    if (!manifest["commands"].empty() && manifest["commands"].back() == command) {
        // re-run of the same step: keep a single entry
    } else {
        manifest["commands"].push_back(command);
    }
    for (const auto& f : files) manifest["artifacts"][f] = sha512_file(out_dir / f);
    std::ofstream out(manifest_path);
    out << manifest.dump(2) << '\n';
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    json j;
    in >> j;
    return j;
}

TimeGuardConfig timeguard_config(const ExperimentConfig& cfg) {
    TimeGuardConfig guard;
    guard.sigma_ms = cfg.defense_sigma_ms;
    guard.mode = cfg.defense_mode == "max_delay" ? DefenseMode::max_delay
                                                 : DefenseMode::gaussian_delay;
    const char* env = std::getenv(cfg.seed_env.c_str());
    if (env && *env) {
        const auto digest = Sha512::hash(std::string_view(env));
        std::copy_n(digest.begin(), guard.secret_seed.size(), guard.secret_seed.begin());
    } else {
        // no secret in the environment: derive one from the run seed so the
        // simulation stays reproducible
        Rng rng(derive_seed(cfg.master_seed, "timeguard-secret"));
        for (auto& b : guard.secret_seed) b = static_cast<std::uint8_t>(rng.next_u64() & 0xff);
    }
    return guard;
}

struct LoadedWorld {
    PreparedData prepared;
    ExperimentConfig cfg;
};

// Rebuild the in-memory world from the gen-data artifacts. The split is
// re-derived from the master seed (documented stream splitting).
LoadedWorld load_world(const ExperimentConfig& cfg) {
    const fs::path out_dir(cfg.output_dir);
    require_artifact(out_dir / "dataset.csv", "gen-data");
    LoadedWorld world;
    world.cfg = cfg;
    world.prepared.data = load_csv((out_dir / "dataset.csv").string(), cfg.label_column);
    world.prepared.data.name = cfg.task_name;
    if (cfg.shadow_shifted) {
        require_artifact(out_dir / "shadow_dataset.csv", "gen-data");
        world.prepared.shadow_data =
            load_csv((out_dir / "shadow_dataset.csv").string(), cfg.label_column);
    } else {
        world.prepared.shadow_data = world.prepared.data;
    }
    world.prepared.split = split_four(world.prepared.data.n(), derive_seed(cfg.master_seed, "split"));
    return world;
}

ModelSet load_models(const ExperimentConfig& cfg) {
    const fs::path out_dir(cfg.output_dir);
    require_artifact(out_dir / "target.model", "train");
    require_artifact(out_dir / "shadow.model", "train");
    require_artifact(out_dir / "train.json", "train");
    ModelSet ms;
    ms.target = load_model((out_dir / "target.model").string());
    ms.shadow = load_model((out_dir / "shadow.model").string());
    const json t = read_json(out_dir / "train.json");
    ms.tau = t.at("tau").get<double>();
    ms.tau_fallback = t.value("tau_fallback", false);
    ms.vanilla_ref_accuracy = t.value("vanilla_ref_accuracy", -1.0);
    return ms;
}

int cmd_gen_data(const ExperimentConfig& cfg, const json& cfg_json) {
    const fs::path out_dir(cfg.output_dir);
    fs::create_directories(out_dir);
    const auto prepared = prepare_data(cfg);
    write_csv(prepared.data, (out_dir / "dataset.csv").string(), cfg.label_column);
    std::vector<std::string> files = {"dataset.csv", "split.json"};
    if (cfg.shadow_shifted) {
        write_csv(prepared.shadow_data, (out_dir / "shadow_dataset.csv").string(),
                  cfg.label_column);
        files.push_back("shadow_dataset.csv");
    }
    json split_json = {{"target_train", prepared.split.target_train},
                       {"target_test", prepared.split.target_test},
                       {"shadow_train", prepared.split.shadow_train},
                       {"shadow_test", prepared.split.shadow_test}};
    write_json(out_dir / "split.json", split_json);
    record_artifacts(out_dir, "gen-data", cfg_json, cfg.master_seed, files);
    std::cout << "gen-data: " << prepared.data.n() << " samples, " << prepared.data.dim()
              << " features, " << prepared.data.n_classes << " classes -> "
              << (out_dir / "dataset.csv").string() << "\n";
    return 0;
}

int cmd_train(const ExperimentConfig& cfg, const json& cfg_json) {
    auto world = load_world(cfg);
    const fs::path out_dir(cfg.output_dir);
    const auto models = train_models(cfg, world.prepared);
    save_model(models.target, (out_dir / "target.model").string());
    save_model(models.shadow, (out_dir / "shadow.model").string());

    const Matrix train_x = rows(world.prepared.data.features, world.prepared.split.target_train);
    const auto train_y = gather(world.prepared.data.labels, world.prepared.split.target_train);
    const Matrix test_x = rows(world.prepared.data.features, world.prepared.split.target_test);
    const auto test_y = gather(world.prepared.data.labels, world.prepared.split.target_test);
    json t = {{"tau", models.tau},
              {"tau_fallback", models.tau_fallback},
              {"train_accuracy", early_exit_accuracy(models.target, train_x, train_y)},
              {"test_accuracy", early_exit_accuracy(models.target, test_x, test_y)},
              {"ops_per_exit", models.target.ops_per_exit}};
    if (models.vanilla_ref_accuracy >= 0.0) t["vanilla_ref_accuracy"] = models.vanilla_ref_accuracy;
    write_json(out_dir / "train.json", t);
    record_artifacts(out_dir, "train", cfg_json, cfg.master_seed,
                     {"target.model", "shadow.model", "train.json"});
    std::cout << "train: n_exits=" << cfg.n_exits << " tau=" << models.tau << " train/test acc "
              << t["train_accuracy"] << "/" << t["test_accuracy"] << "\n";
    return 0;
}

int cmd_audit(const ExperimentConfig& cfg, const json& cfg_json) {
    auto world = load_world(cfg);
    auto models = load_models(cfg);
    const fs::path out_dir(cfg.output_dir);
    const auto outcome = run_audit(cfg, world.prepared, models);
    const auto report = make_report(cfg, models, outcome);
    save_report(report, (out_dir / "audit.json").string());
    write_loss_hist_csv(outcome.loss_hist, (out_dir / "fig3_loss_hist.csv").string());
    write_js_per_exit_csv(outcome.per_exit, (out_dir / "fig6_js_per_exit.csv").string());
    write_ratio_csv(outcome.ratio, (out_dir / "fig8_ratio.csv").string());
    std::vector<std::string> files = {"audit.json", "fig3_loss_hist.csv", "fig6_js_per_exit.csv",
                                      "fig8_ratio.csv"};
    if (outcome.timing_info) {
        write_trace_csv(outcome.timing_info->trace, (out_dir / "trace.csv").string());
        files.push_back("trace.csv");
    }
    record_artifacts(out_dir, "audit", cfg_json, cfg.master_seed, files);
    std::cout << "audit:";
    for (const auto& [name, value] : outcome.asr) std::cout << ' ' << name << '=' << value;
    std::cout << "\n";
    return 0;
}

int cmd_steal(const ExperimentConfig& cfg, const json& cfg_json) {
    auto world = load_world(cfg);
    auto models = load_models(cfg);
    const fs::path out_dir(cfg.output_dir);
    const auto info = steal_eval_exits(cfg, models.target, world.prepared);
    write_trace_csv(info.trace, (out_dir / "trace.csv").string());
    json s = {{"stolen_n_exits", info.stolen_n_exits},
              {"steal_accuracy", info.steal_accuracy},
              {"all_exits_observed", info.all_exits_observed},
              {"n_queries", cfg.n_queries},
              {"noise_sigma_ms", cfg.noise_sigma_ms}};
    write_json(out_dir / "steal.json", s);
    record_artifacts(out_dir, "steal", cfg_json, cfg.master_seed, {"trace.csv", "steal.json"});
    std::cout << "steal: predicted n_exits=" << info.stolen_n_exits
              << " accuracy=" << info.steal_accuracy << "\n";
    if (!info.all_exits_observed)
        std::cout << "steal: warning: some exits never fired in the probe set\n";
    return 0;
}

int cmd_defend(const ExperimentConfig& cfg, const json& cfg_json) {
    if (cfg.defense_mode == "none")
        throw ConfigError("config: defense.mode: set gaussian_delay or max_delay for `defend`");
    auto world = load_world(cfg);
    auto models = load_models(cfg);
    const fs::path out_dir(cfg.output_dir);
    const auto guard = timeguard_config(cfg);
    const auto tm = TimingModel::from_model(models.target, cfg.base_time_ms, cfg.time_per_op_ms,
                                            cfg.noise_mu_ms, cfg.noise_sigma_ms);

    // defended response times over the balanced evaluation set
    const auto& split = world.prepared.split;
    const int m = static_cast<int>(std::min(split.target_train.size(), split.target_test.size()));
    std::vector<double> delays;
    delays.reserve(2 * m);
    for (int i = 0; i < 2 * m; ++i) {
        const int idx = i < m ? split.target_train[i] : split.target_test[i - m];
        delays.push_back(
            timeguard_delay(world.prepared.data.features.row(idx), models.target, tm, guard)
                .delay_ms);
    }
    const auto kde = kde_cluster(delays);
    json d = {{"mode", cfg.defense_mode},
              {"sigma_ms", cfg.defense_sigma_ms},
              {"mean_response_ms", mean(delays)},
              {"max_delay_response_ms", tm.clean_times.back()},
              {"predicted_n_exits_under_defense", kde.n_clusters()}};
    write_json(out_dir / "defend.json", d);
    record_artifacts(out_dir, "defend", cfg_json, cfg.master_seed, {"defend.json"});
    std::cout << "defend: mode=" << cfg.defense_mode << " mean response " << mean(delays)
              << " ms, adversary sees " << kde.n_clusters() << " cluster(s)\n";
    return 0;
}

int cmd_sweep(const ExperimentConfig& cfg, const json& cfg_json) {
    auto world = load_world(cfg);
    auto models = load_models(cfg);
    if (models.target.n_exits() < 2)
        throw ConfigError("config: model.n_exits: the defense sweep needs a multi-exit target");
    const fs::path out_dir(cfg.output_dir);
    const auto guard = timeguard_config(cfg);
    const auto sweep = run_defense_sweep(cfg, world.prepared, models, guard);
    write_tradeoff_csv(sweep, (out_dir / "fig16_tradeoff.csv").string());
    json s = {{"epsilon", sweep.epsilon},
              {"max_delay_response_ms", sweep.max_delay_response_ms}};
    if (sweep.crossing_sigma) {
        s["crossing_sigma"] = *sweep.crossing_sigma;
        s["crossing_mean_response_ms"] = sweep.crossing_mean_response_ms;
    }
    json points = json::array();
    for (const auto& p : sweep.points)
        points.push_back({{"sigma", p.sigma},
                          {"hybrid_asr", p.hybrid_asr},
                          {"original_asr", p.original_asr},
                          {"mean_response_ms", p.mean_response_ms},
                          {"steal_accuracy", p.steal_accuracy},
                          {"predicted_n_exits", p.predicted_n_exits}});
    s["points"] = points;
    write_json(out_dir / "sweep.json", s);
    record_artifacts(out_dir, "sweep", cfg_json, cfg.master_seed,
                     {"fig16_tradeoff.csv", "sweep.json"});
    std::cout << "sweep: " << sweep.points.size() << " sigma values";
    if (sweep.crossing_sigma) std::cout << ", crossing at sigma=" << *sweep.crossing_sigma;
    std::cout << "\n";
    return 0;
}

int cmd_report(const ExperimentConfig& cfg, const json& cfg_json) {
    const fs::path out_dir(cfg.output_dir);
    require_artifact(out_dir / "audit.json", "audit");
    auto report = load_report((out_dir / "audit.json").string());
    if (fs::exists(out_dir / "steal.json")) {
        const json s = read_json(out_dir / "steal.json");
        report.exit_steal_accuracy = s.at("steal_accuracy").get<double>();
        report.stolen_n_exits = s.at("stolen_n_exits").get<int>();
    }
    if (fs::exists(out_dir / "sweep.json")) {
        const json s = read_json(out_dir / "sweep.json");
        TradeoffResult sweep;
        sweep.epsilon = s.at("epsilon").get<double>();
        sweep.max_delay_response_ms = s.at("max_delay_response_ms").get<double>();
        if (s.contains("crossing_sigma")) {
            sweep.crossing_sigma = s["crossing_sigma"].get<double>();
            sweep.crossing_mean_response_ms = s["crossing_mean_response_ms"].get<double>();
        }
        for (const auto& v : s.at("points")) {
            TradeoffPoint p;
            p.sigma = v.at("sigma").get<double>();
            p.hybrid_asr = v.at("hybrid_asr").get<double>();
            p.original_asr = v.at("original_asr").get<double>();
            p.mean_response_ms = v.at("mean_response_ms").get<double>();
            p.steal_accuracy = v.at("steal_accuracy").get<double>();
            p.predicted_n_exits = v.at("predicted_n_exits").get<int>();
            sweep.points.push_back(p);
        }
        report.defense_sweep = sweep;
    }
    save_report(report, (out_dir / "report.json").string());
    record_artifacts(out_dir, "report", cfg_json, cfg.master_seed, {"report.json"});
    std::cout << "report: wrote " << (out_dir / "report.json").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"membership-leakage auditor for multi-exit networks"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_override;
    std::uint64_t seed_override = 0;
    bool seed_set = false;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "experiment config (json)")->required();
    app.add_option("--out", out_override, "output directory (overrides config)");
    app.add_option("--seed", seed_override, "master seed (overrides config)")
        ->check(CLI::NonNegativeNumber)
        ->each([&](const std::string&) { seed_set = true; });
    app.add_option("--override", overrides, "KEY=VALUE config override, dotted path, repeatable");

    for (const char* name : {"gen-data", "train", "audit", "steal", "defend", "sweep", "report"})
        app.add_subcommand(name);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        std::ifstream in(config_path);
        if (!in) throw ConfigError("config: cannot open " + config_path);
        json cfg_json;
        try {
            in >> cfg_json;
        } catch (const json::exception& e) {
            throw ConfigError("config: " + config_path + ": " + e.what());
        }
        for (const auto& spec : overrides) apply_override(cfg_json, spec);
        if (!out_override.empty()) cfg_json["output_dir"] = out_override;
        if (seed_set) cfg_json["master_seed"] = seed_override;
        const ExperimentConfig cfg = config_from_json(cfg_json);

        const std::string command = app.get_subcommands().front()->get_name();
        if (command == "gen-data") return cmd_gen_data(cfg, cfg_json);
        if (command == "train") return cmd_train(cfg, cfg_json);
        if (command == "audit") return cmd_audit(cfg, cfg_json);
        if (command == "steal") return cmd_steal(cfg, cfg_json);
        if (command == "defend") return cmd_defend(cfg, cfg_json);
        if (command == "sweep") return cmd_sweep(cfg, cfg_json);
        if (command == "report") return cmd_report(cfg, cfg_json);
        std::cerr << "unknown command " << command << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
