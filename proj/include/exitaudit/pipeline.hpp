#pragma once

#include <atomic>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "exitaudit/analysis.hpp"
#include "exitaudit/attacks.hpp"
#include "exitaudit/config.hpp"
#include "exitaudit/defense.hpp"
#include "exitaudit/timing.hpp"

namespace exitaudit {

struct PreparedData {
    TabularDataset data;         // the target's world
    TabularDataset shadow_data;  // same as data unless the adversary's data is shifted
    FourWaySplit split;          // indices valid for both (shapes match)
};

inline PreparedData prepare_data(const ExperimentConfig& cfg) {
    PreparedData out;
    if (!cfg.csv_path.empty()) {
        if (cfg.shadow_shifted)
            throw ConfigError("config: adversary.shadow_shifted requires a synthetic dataset");
        out.data = load_csv(cfg.csv_path, cfg.label_column);
        out.shadow_data = out.data;
    } else {
        out.data = synth_generate(cfg.synth_config());
        out.shadow_data = cfg.shadow_shifted
                              ? shifted_variant(cfg.synth_config(),
                                                derive_seed(cfg.master_seed, "shadow-shift"))
                              : out.data;
    }
    out.split = split_four(out.data.n(), derive_seed(cfg.master_seed, "split"));
    return out;
}

inline MultiExitModel train_backbone(const ExperimentConfig& cfg, const TabularDataset& data,
                                     const std::vector<int>& train_idx, int n_exits, int width,
                                     const std::string& tag) {
    ModelConfig mc = cfg.model_config(n_exits, width);
    mc.input_dim = data.dim();
    mc.n_classes = data.n_classes;
    Rng rng(derive_seed(cfg.master_seed, "init-" + tag));
    MultiExitModel model(mc, rng);
    train_joint(model, rows(data.features, train_idx), gather(data.labels, train_idx),
                cfg.train_config("train-" + tag));
    return model;
}

struct ModelSet {
    MultiExitModel target;
    MultiExitModel shadow;
    double tau = 1.0;
    bool tau_fallback = false;
    double vanilla_ref_accuracy = -1.0;  // only set when tau was auto-selected
};

// Target and shadow at the configured exit count. With tau unset, the grid
// search runs against a freshly trained vanilla counterpart's accuracy. The
// shadow model reuses the target's threshold (same-architecture knowledge).
inline ModelSet train_models(const ExperimentConfig& cfg, const PreparedData& prepared) {
    ModelSet ms;
    ms.target = train_backbone(cfg, prepared.data, prepared.split.target_train, cfg.n_exits, 0,
                               "target");
    const int shadow_width =
        cfg.shadow_hidden_width > 0 ? cfg.shadow_hidden_width : cfg.hidden_width;
    ms.shadow = train_backbone(cfg, prepared.shadow_data, prepared.split.shadow_train, cfg.n_exits,
                               shadow_width, "shadow");

    if (cfg.tau) {
        ms.tau = *cfg.tau;
        ms.target.tau = ms.tau;
    } else {
        auto vanilla = train_backbone(cfg, prepared.data, prepared.split.target_train, 1, 0,
                                      "vanilla-ref");
        ms.vanilla_ref_accuracy =
            early_exit_accuracy(vanilla, rows(prepared.data.features, prepared.split.target_test),
                                gather(prepared.data.labels, prepared.split.target_test));
        const auto choice = select_threshold(
            ms.target, rows(prepared.data.features, prepared.split.target_test),
            gather(prepared.data.labels, prepared.split.target_test), ms.vanilla_ref_accuracy,
            cfg.tau_slack);
        ms.tau = choice.tau;
        ms.tau_fallback = choice.fallback;
    }
    ms.shadow.tau = ms.tau;
    return ms;
}

// Adversary 2/3: per-sample exits for the balanced target evaluation set,
// recovered from the timing channel.
struct EvalExitInfo {
    std::vector<int> member_exits;
    std::vector<int> nonmember_exits;
    int stolen_n_exits = 0;
    double steal_accuracy = 1.0;
    bool all_exits_observed = true;
    TimingTrace trace;
};

inline EvalExitInfo steal_eval_exits(const ExperimentConfig& cfg, const MultiExitModel& target,
                                     const PreparedData& prepared) {
    const auto tm = TimingModel::from_model(target, cfg.base_time_ms, cfg.time_per_op_ms,
                                            cfg.noise_mu_ms, cfg.noise_sigma_ms);
    const int m = static_cast<int>(
        std::min(prepared.split.target_train.size(), prepared.split.target_test.size()));
    Matrix probe(2 * m, prepared.data.dim());
    for (int i = 0; i < m; ++i) {
        probe.row(i) = prepared.data.features.row(prepared.split.target_train[i]);
        probe.row(m + i) = prepared.data.features.row(prepared.split.target_test[i]);
    }
    Rng rng(derive_seed(cfg.master_seed, "timing-steal"));
    const auto res = steal_exit_depths(tm, target, probe, cfg.n_queries, rng);

    EvalExitInfo info;
    info.member_exits.assign(res.per_sample_exit.begin(), res.per_sample_exit.begin() + m);
    info.nonmember_exits.assign(res.per_sample_exit.begin() + m, res.per_sample_exit.end());
    info.stolen_n_exits = res.predicted_n_exits;
    info.steal_accuracy = res.accuracy;
    info.all_exits_observed = res.all_exits_observed;
    info.trace = res.trace;
    return info;
}

// Score- or gradient-based attack: train on the shadow side, evaluate on the
// balanced target set. With exit knowledge, the shadow side always uses its
// own ground-truth exits; the target side uses direct exits (adversary 1) or
// the timing-stolen exits when provided.
inline double run_mlp_attack(const ExperimentConfig& cfg, const PreparedData& prepared,
                             const ModelSet& models, AttackMode mode, bool use_exit,
                             const EvalExitInfo* timing_info, const std::string& seed_tag) {
    AttackBuildOptions train_opts;
    train_opts.mode = mode;
    train_opts.exit_source = use_exit ? ExitSource::direct : ExitSource::none;
    train_opts.stolen_n_exits = models.shadow.n_exits();
    const auto train_ds =
        build_attack_dataset(models.shadow, prepared.shadow_data, prepared.split.shadow_train,
                             prepared.split.shadow_test, train_opts);
    const auto attack = train_attack_model(train_ds, cfg.attack_config(seed_tag));

    AttackBuildOptions eval_opts;
    eval_opts.mode = mode;
    eval_opts.stolen_n_exits = models.shadow.n_exits();
    if (use_exit) {
        if (timing_info) {
            eval_opts.exit_source = ExitSource::timing;
            eval_opts.member_exits = &timing_info->member_exits;
            eval_opts.nonmember_exits = &timing_info->nonmember_exits;
        } else {
            eval_opts.exit_source = ExitSource::direct;
        }
    }
    const auto eval_ds = build_attack_dataset(models.target, prepared.data,
                                              prepared.split.target_train,
                                              prepared.split.target_test, eval_opts);
    return run_inference_attack(attack, eval_ds);
}

struct LabelOnlyOutcome {
    double original_asr = 0.0;
    double per_exit_asr = 0.0;
    int fallback_buckets = 0;
};

inline LabelOnlyOutcome run_label_only(const ExperimentConfig& cfg, const PreparedData& prepared,
                                       const ModelSet& models, const EvalExitInfo* timing_info) {
    Rng dir_rng(derive_seed(cfg.master_seed, "perturb-directions"));
    const auto dirs =
        make_directions(prepared.data.dim(), cfg.perturb_directions, dir_rng);
    PerturbationParams params;
    params.k_directions = cfg.perturb_directions;
    params.bisection_steps = cfg.perturb_bisection_steps;
    params.s_max = cfg.perturb_s_max_stds * feature_std(prepared.data.features);

    const auto shadow_in = label_only_inputs(
        models.shadow, rows(prepared.shadow_data.features, prepared.split.shadow_train),
        rows(prepared.shadow_data.features, prepared.split.shadow_test), dirs, params);
    const auto target_in = label_only_inputs(
        models.target, rows(prepared.data.features, prepared.split.target_train),
        rows(prepared.data.features, prepared.split.target_test), dirs, params);

    const int k = models.target.n_exits();
    const auto global_dec = derive_label_only_decision(shadow_in, k, false, params);
    const auto per_exit_dec = derive_label_only_decision(shadow_in, k, true, params);

    LabelOnlyOutcome out;
    out.original_asr = evaluate_label_only(target_in, global_dec, k).asr;
    const std::vector<int>* mem_exits = timing_info ? &timing_info->member_exits : nullptr;
    const std::vector<int>* non_exits = timing_info ? &timing_info->nonmember_exits : nullptr;
    out.per_exit_asr =
        evaluate_label_only(target_in, per_exit_dec, k, mem_exits, non_exits).asr;
    for (bool fb : per_exit_dec.bucket_fallback) out.fallback_buckets += fb;
    return out;
}

struct AuditOutcome {
    double tau = 1.0;
    bool tau_fallback = false;
    double vanilla_ref_accuracy = -1.0;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    double mean_inference_ops = 0.0;
    std::map<std::string, double> asr;
    double overfitting_gap = 0.0;
    double js_overall = 0.0;
    PerExitJs per_exit;
    ExitRatio ratio;
    std::optional<EvalExitInfo> timing_info;
    int stolen_n_exits = 0;
    LossHistogramPair loss_hist;
};

// One full audit at the configured exit count and adversary: original and
// hybrid attacks, plus the diagnostic statistics.
inline AuditOutcome run_audit(const ExperimentConfig& cfg, const PreparedData& prepared,
                              const ModelSet& models, bool with_gradient_attack = true) {
    AuditOutcome out;
    out.tau = models.tau;
    out.tau_fallback = models.tau_fallback;
    out.vanilla_ref_accuracy = models.vanilla_ref_accuracy;

    const Matrix train_x = rows(prepared.data.features, prepared.split.target_train);
    const auto train_y = gather(prepared.data.labels, prepared.split.target_train);
    const Matrix test_x = rows(prepared.data.features, prepared.split.target_test);
    const auto test_y = gather(prepared.data.labels, prepared.split.target_test);

    out.train_accuracy = early_exit_accuracy(models.target, train_x, train_y);
    out.test_accuracy = early_exit_accuracy(models.target, test_x, test_y);
    out.overfitting_gap = out.train_accuracy - out.test_accuracy;

    // mean per-sample inference cost under the early-exit rule
    {
        std::vector<int> exits = taken_exits(models.target, test_x);
        double acc = 0.0;
        for (int e : exits) acc += static_cast<double>(models.target.ops_per_exit[e]);
        out.mean_inference_ops = acc / exits.size();
    }

    const bool multi_exit = models.target.n_exits() > 1;
    const EvalExitInfo* timing_info = nullptr;
    if (multi_exit && cfg.adversary != AdversaryKind::A1_direct_exit) {
        out.timing_info = steal_eval_exits(cfg, models.target, prepared);
        timing_info = &*out.timing_info;
        out.stolen_n_exits = out.timing_info->stolen_n_exits;
    } else if (multi_exit) {
        Matrix probe(static_cast<int>(prepared.split.shadow_train.size()), prepared.data.dim());
        for (std::size_t i = 0; i < prepared.split.shadow_train.size(); ++i)
            probe.row(static_cast<int>(i)) =
                prepared.data.features.row(prepared.split.shadow_train[i]);
        out.stolen_n_exits = count_exits(models.target, probe);
    }

    out.asr["score_original"] =
        run_mlp_attack(cfg, prepared, models, AttackMode::score_based, false, nullptr, "attack-score");
    if (multi_exit)
        out.asr["score_hybrid"] = run_mlp_attack(cfg, prepared, models, AttackMode::score_based,
                                                 true, timing_info, "attack-score-hybrid");
    // gradients and features are white-box knowledge: adversary 1 only
    with_gradient_attack = with_gradient_attack && cfg.adversary == AdversaryKind::A1_direct_exit;
    if (with_gradient_attack) {
        out.asr["gradient_original"] = run_mlp_attack(cfg, prepared, models,
                                                      AttackMode::gradient_based, false, nullptr,
                                                      "attack-gradient");
        if (multi_exit)
            out.asr["gradient_hybrid"] =
                run_mlp_attack(cfg, prepared, models, AttackMode::gradient_based, true,
                               timing_info, "attack-gradient-hybrid");
    }
    {
        const auto lo = run_label_only(cfg, prepared, models, timing_info);
        out.asr["label_only_original"] = lo.original_asr;
        if (multi_exit) out.asr["label_only_per_exit"] = lo.per_exit_asr;
    }

    const auto mem_losses = losses_at_taken_exit(models.target, train_x, train_y);
    const auto non_losses = losses_at_taken_exit(models.target, test_x, test_y);
    out.js_overall = js_divergence(mem_losses.losses, non_losses.losses);
    out.loss_hist = build_loss_histograms(mem_losses.losses, non_losses.losses);
    out.per_exit = per_exit_js(models.target, train_x, train_y, test_x, test_y);
    out.ratio = nonmember_ratio_per_exit(models.target, train_x, test_x);
    return out;
}

inline AuditReport make_report(const ExperimentConfig& cfg, const ModelSet& models,
                               const AuditOutcome& outcome) {
    AuditReport report;
    report.task_name = cfg.task_name;
    report.input_dim = models.target.cfg.input_dim;
    report.n_classes = models.target.cfg.n_classes;
    report.n_blocks = cfg.n_blocks;
    report.hidden_width = cfg.hidden_width;
    report.head_hidden = cfg.head_hidden;
    report.n_exits = cfg.n_exits;
    report.tau = outcome.tau;
    report.train_accuracy = outcome.train_accuracy;
    report.test_accuracy = outcome.test_accuracy;
    if (outcome.vanilla_ref_accuracy >= 0.0)
        report.vanilla_test_accuracy = outcome.vanilla_ref_accuracy;
    report.ops_per_exit = models.target.ops_per_exit;
    report.mean_inference_ops = outcome.mean_inference_ops;
    report.asr = outcome.asr;
    report.overfitting_gap = outcome.overfitting_gap;
    report.js_overall = outcome.js_overall;
    report.per_exit_js = outcome.per_exit;
    report.exit_ratio = outcome.ratio;
    if (outcome.timing_info) {
        report.exit_steal_accuracy = outcome.timing_info->steal_accuracy;
        report.stolen_n_exits = outcome.timing_info->stolen_n_exits;
    } else if (outcome.stolen_n_exits > 0) {
        report.stolen_n_exits = outcome.stolen_n_exits;
    }
    return report;
}

// Defense sweep wired from a config: retrains the score attacks, then walks
// the sigma list.
inline TradeoffResult run_defense_sweep(const ExperimentConfig& cfg, const PreparedData& prepared,
                                        const ModelSet& models,
                                        const TimeGuardConfig& guard_cfg) {
    AttackBuildOptions hybrid_opts;
    hybrid_opts.exit_source = ExitSource::direct;
    hybrid_opts.stolen_n_exits = models.shadow.n_exits();
    const auto hybrid_train =
        build_attack_dataset(models.shadow, prepared.shadow_data, prepared.split.shadow_train,
                             prepared.split.shadow_test, hybrid_opts);
    const auto original_train =
        build_attack_dataset(models.shadow, prepared.shadow_data, prepared.split.shadow_train,
                             prepared.split.shadow_test, {});
    const auto hybrid = train_attack_model(hybrid_train, cfg.attack_config("attack-score-hybrid"));
    const auto original = train_attack_model(original_train, cfg.attack_config("attack-score"));

    const auto tm = TimingModel::from_model(models.target, cfg.base_time_ms, cfg.time_per_op_ms,
                                            cfg.noise_mu_ms, cfg.noise_sigma_ms);
    return tradeoff_sweep(models.target, tm, hybrid, original, prepared.data,
                          prepared.split.target_train, prepared.split.target_test, guard_cfg,
                          cfg.sweep_sigmas);
}

// Run independent jobs over a small worker pool; results keep input order.
template <typename Job>
void parallel_for(int n_jobs, int workers, Job&& job) {
    if (workers <= 1) {
        for (int i = 0; i < n_jobs; ++i) job(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&]() {
            for (int i = next.fetch_add(1); i < n_jobs; i = next.fetch_add(1)) job(i);
        });
    for (auto& t : pool) t.join();
}

}  // namespace exitaudit
