#pragma once

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "exitaudit/dataset.hpp"
#include "exitaudit/mlp.hpp"
#include "exitaudit/nn.hpp"
#include "exitaudit/rng.hpp"

namespace exitaudit {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class AdversaryKind { A1_direct_exit, A2_timing_exit, A3_mismatched };

// One experiment, one file. Flags override individual keys by dotted path.
struct ExperimentConfig {
    // dataset section: synthetic parameters or an external CSV
    std::string task_name = "purchases";
    std::string csv_path;  // non-empty: load instead of generating
    std::string label_column = "label";
    int n_classes = 100;
    int n_features = 600;
    int samples_per_class = 80;
    double flip_prob = 0.30;

    // model section
    int n_blocks = 5;
    int hidden_width = 128;
    int head_hidden = 64;
    int n_exits = 4;
    std::optional<double> tau;  // absent: select on the grid vs the vanilla reference
    double tau_slack = 0.005;

    // training section
    int epochs = 12;
    int batch_size = 128;
    double learning_rate = 1e-3;

    // attack section
    int attack_epochs = 40;
    int attack_batch_size = 128;
    double attack_learning_rate = 5e-4;
    int perturb_directions = 10;
    int perturb_bisection_steps = 20;
    double perturb_s_max_stds = 5.0;

    // adversary section
    AdversaryKind adversary = AdversaryKind::A1_direct_exit;
    int shadow_hidden_width = 0;  // 0: same architecture as the target
    bool shadow_shifted = false;  // shadow data from a shifted distribution

    // timing section
    double base_time_ms = 5.0;
    double time_per_op_ms = 1e-4;
    double noise_mu_ms = 0.0;
    double noise_sigma_ms = 0.0;
    int n_queries = 10;

    // defense section
    std::string defense_mode = "none";  // none | gaussian_delay | max_delay
    double defense_sigma_ms = 2.0;
    std::vector<double> sweep_sigmas = {0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0};
    std::string seed_env = "EXITAUDIT_TIMEGUARD_SEED";

    // run section
    std::string output_dir = "out";
    std::uint64_t master_seed = 1;

    SynthConfig synth_config() const {
        SynthConfig sc;
        sc.n_classes = n_classes;
        sc.n_features = n_features;
        sc.samples_per_class = samples_per_class;
        sc.prototype_flip_prob = flip_prob;
        sc.seed = derive_seed(master_seed, "dataset");
        sc.name = task_name;
        return sc;
    }

    ModelConfig model_config(int exits, int width = 0) const {
        ModelConfig mc;
        mc.input_dim = n_features;
        mc.n_classes = n_classes;
        mc.n_blocks = n_blocks;
        mc.hidden_width = width > 0 ? width : hidden_width;
        mc.head_hidden = head_hidden;
        mc.n_exits = exits;
        mc.tau = tau.value_or(1.0);
        return mc;
    }

    TrainConfig train_config(const std::string& seed_tag) const {
        TrainConfig tc;
        tc.epochs = epochs;
        tc.batch_size = batch_size;
        tc.learning_rate = learning_rate;
        tc.seed = derive_seed(master_seed, seed_tag);
        return tc;
    }

    ClassifierTrainConfig attack_config(const std::string& seed_tag) const {
        ClassifierTrainConfig cc;
        cc.epochs = attack_epochs;
        cc.batch_size = attack_batch_size;
        cc.learning_rate = attack_learning_rate;
        cc.seed = derive_seed(master_seed, seed_tag);
        return cc;
    }

    void validate() const {
        auto fail = [](const std::string& path, const std::string& why) {
            throw ConfigError("config: " + path + ": " + why);
        };
        if (csv_path.empty()) {
            if (n_classes < 2) fail("dataset.n_classes", "must be at least 2");
            if (n_features < 1) fail("dataset.n_features", "must be positive");
            if (samples_per_class < 4) fail("dataset.samples_per_class", "must be at least 4");
            if (!(flip_prob >= 0.0 && flip_prob < 0.5))
                fail("dataset.flip_prob", "must be in [0, 0.5)");
        }
        if (n_blocks < 1) fail("model.n_blocks", "must be positive");
        if (n_exits < 1 || n_exits > n_blocks + 1)
            fail("model.n_exits", "must be in [1, n_blocks + 1]");
        if (hidden_width < 1 || head_hidden < 1) fail("model.hidden_width", "must be positive");
        if (tau && (*tau < 0.0)) fail("model.tau", "must be nonnegative");
        if (epochs < 1) fail("training.epochs", "must be at least 1");
        if (batch_size < 1) fail("training.batch_size", "must be positive");
        if (learning_rate <= 0.0) fail("training.learning_rate", "must be positive");
        if (attack_epochs < 1) fail("attack.epochs", "must be at least 1");
        if (perturb_directions < 1) fail("attack.perturb_directions", "must be positive");
        if (perturb_bisection_steps < 1) fail("attack.perturb_bisection_steps", "must be positive");
        if (noise_sigma_ms < 0.0) fail("timing.noise_sigma_ms", "must be nonnegative");
        if (n_queries < 1) fail("timing.n_queries", "must be at least 1");
        if (time_per_op_ms <= 0.0) fail("timing.time_per_op_ms", "must be positive");
        if (defense_mode != "none" && defense_mode != "gaussian_delay" &&
            defense_mode != "max_delay")
            fail("defense.mode", "must be none, gaussian_delay or max_delay");
        if (defense_sigma_ms < 0.0) fail("defense.sigma_ms", "must be nonnegative");
        if (sweep_sigmas.empty()) fail("defense.sweep_sigmas", "must not be empty");
        if (shadow_hidden_width < 0) fail("adversary.shadow_hidden_width", "must be nonnegative");
        if (output_dir.empty()) fail("output_dir", "must not be empty");
    }
};

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const std::string& section, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + section + "." + key + ": " + e.what());
    }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;
    using detail::read_field;
    if (j.contains("dataset")) {
        const auto& d = j["dataset"];
        read_field(d, "dataset", "task_name", cfg.task_name);
        read_field(d, "dataset", "csv_path", cfg.csv_path);
        read_field(d, "dataset", "label_column", cfg.label_column);
        read_field(d, "dataset", "n_classes", cfg.n_classes);
        read_field(d, "dataset", "n_features", cfg.n_features);
        read_field(d, "dataset", "samples_per_class", cfg.samples_per_class);
        read_field(d, "dataset", "flip_prob", cfg.flip_prob);
    }
    if (j.contains("model")) {
        const auto& m = j["model"];
        read_field(m, "model", "n_blocks", cfg.n_blocks);
        read_field(m, "model", "hidden_width", cfg.hidden_width);
        read_field(m, "model", "head_hidden", cfg.head_hidden);
        read_field(m, "model", "n_exits", cfg.n_exits);
        if (m.contains("tau") && !m["tau"].is_null()) {
            if (m["tau"].is_string()) {
                if (m["tau"].get<std::string>() != "auto")
                    throw ConfigError("config: model.tau: must be a number or \"auto\"");
            } else {
                cfg.tau = m["tau"].get<double>();
            }
        }
        read_field(m, "model", "tau_slack", cfg.tau_slack);
    }
    if (j.contains("training")) {
        const auto& t = j["training"];
        read_field(t, "training", "epochs", cfg.epochs);
        read_field(t, "training", "batch_size", cfg.batch_size);
        read_field(t, "training", "learning_rate", cfg.learning_rate);
    }
    if (j.contains("attack")) {
        const auto& a = j["attack"];
        read_field(a, "attack", "epochs", cfg.attack_epochs);
        read_field(a, "attack", "batch_size", cfg.attack_batch_size);
        read_field(a, "attack", "learning_rate", cfg.attack_learning_rate);
        read_field(a, "attack", "perturb_directions", cfg.perturb_directions);
        read_field(a, "attack", "perturb_bisection_steps", cfg.perturb_bisection_steps);
        read_field(a, "attack", "perturb_s_max_stds", cfg.perturb_s_max_stds);
    }
    if (j.contains("adversary")) {
        const auto& a = j["adversary"];
        std::string kind = "A1_direct_exit";
        read_field(a, "adversary", "kind", kind);
        if (kind == "A1_direct_exit")
            cfg.adversary = AdversaryKind::A1_direct_exit;
        else if (kind == "A2_timing_exit")
            cfg.adversary = AdversaryKind::A2_timing_exit;
        else if (kind == "A3_mismatched")
            cfg.adversary = AdversaryKind::A3_mismatched;
        else
            throw ConfigError("config: adversary.kind: unknown value '" + kind + "'");
        read_field(a, "adversary", "shadow_hidden_width", cfg.shadow_hidden_width);
        read_field(a, "adversary", "shadow_shifted", cfg.shadow_shifted);
    }
    if (j.contains("timing")) {
        const auto& t = j["timing"];
        read_field(t, "timing", "base_time_ms", cfg.base_time_ms);
        read_field(t, "timing", "time_per_op_ms", cfg.time_per_op_ms);
        read_field(t, "timing", "noise_mu_ms", cfg.noise_mu_ms);
        read_field(t, "timing", "noise_sigma_ms", cfg.noise_sigma_ms);
        read_field(t, "timing", "n_queries", cfg.n_queries);
    }
    if (j.contains("defense")) {
        const auto& d = j["defense"];
        read_field(d, "defense", "mode", cfg.defense_mode);
        read_field(d, "defense", "sigma_ms", cfg.defense_sigma_ms);
        read_field(d, "defense", "sweep_sigmas", cfg.sweep_sigmas);
        read_field(d, "defense", "seed_env", cfg.seed_env);
    }
    detail::read_field(j, "(root)", "output_dir", cfg.output_dir);
    detail::read_field(j, "(root)", "master_seed", cfg.master_seed);
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + path + ": " + e.what());
    }
    return config_from_json(j);
}

// KEY=VALUE with dotted paths, e.g. training.epochs=30; VALUE parsed as JSON
// when possible, as a string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override '" + spec + "': expected KEY=VALUE");
    const std::string key = spec.substr(0, eq);
    const std::string value = spec.substr(eq + 1);
    nlohmann::json parsed;
    try {
        parsed = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception&) {
        parsed = value;
    }
    nlohmann::json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot - start);
        if (part.empty()) throw ConfigError("override '" + spec + "': empty key segment");
        if (dot == std::string::npos) {
            (*node)[part] = parsed;
            break;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

}  // namespace exitaudit
