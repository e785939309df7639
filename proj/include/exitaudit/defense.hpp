#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <optional>
#include <stdexcept>
#include <vector>

#include "exitaudit/attacks.hpp"
#include "exitaudit/nn.hpp"
#include "exitaudit/rng.hpp"
#include "exitaudit/sha512.hpp"
#include "exitaudit/timing.hpp"

namespace exitaudit {

enum class DefenseMode { gaussian_delay, max_delay };

struct TimeGuardConfig {
    double sigma_ms = 0.0;
    std::array<std::uint8_t, 32> secret_seed{};  // S: never exposed through any interface
    DefenseMode mode = DefenseMode::gaussian_delay;
};

struct DelayedPrediction {
    Vector probs;  // content identical to the undefended early-exit prediction
    int label = 0;
    double delay_ms = 0.0;
};

// Canonical sample serialization: row-major little-endian feature bytes.
inline std::vector<std::uint8_t> canonical_bytes(const Vector& x) {
    std::vector<std::uint8_t> bytes(x.size() * sizeof(double));
    for (int i = 0; i < x.size(); ++i) {
        double v = x(i);
        std::memcpy(bytes.data() + i * sizeof(double), &v, sizeof(double));
    }
    return bytes;
}

// Per-sample standard normal draw keyed by (hash(x), S): Sha512 content hash,
// HKDF extract-and-expand, then one Gaussian from the derived stream. The
// draw is a pure function of the sample bytes and the secret seed.
inline double timeguard_unit_noise(const Vector& x, const TimeGuardConfig& cfg) {
    const auto digest = Sha512::hash(canonical_bytes(x));
    static constexpr char info[] = "timeguard-delay";
    const auto okm = hkdf_sha512(digest, cfg.secret_seed,
                                 {reinterpret_cast<const std::uint8_t*>(info), sizeof(info) - 1},
                                 8);
    std::uint64_t seed = 0;
    std::memcpy(&seed, okm.data(), sizeof(seed));
    Rng rng(seed);
    return rng.gaussian();
}

// Delay rule t' = t + |t - I| with I = t + sigma * u, so t' = t + sigma * |u|:
// the response times of one exit follow the right half of N(t, sigma^2), and
// repeated queries of the same sample always see the same t'.
inline DelayedPrediction timeguard_delay(const Vector& x, const MultiExitModel& model,
                                         const TimingModel& tm, const TimeGuardConfig& cfg) {
    const auto pred = model.predict_early(x);
    DelayedPrediction out;
    out.probs = pred.probs;
    out.label = pred.label;
    const double t = tm.clean_time(pred.exit_index);
    if (cfg.mode == DefenseMode::max_delay) {
        out.delay_ms = tm.clean_times.back();
        return out;
    }
    out.delay_ms = t + cfg.sigma_ms * std::abs(timeguard_unit_noise(x, cfg));
    return out;
}

// Every response waits for the final exit's time; predictions are untouched.
inline DelayedPrediction max_delay(const Vector& x, const MultiExitModel& model,
                                   const TimingModel& tm) {
    TimeGuardConfig cfg;
    cfg.mode = DefenseMode::max_delay;
    return timeguard_delay(x, model, tm, cfg);
}

struct TradeoffPoint {
    double sigma = 0.0;
    double hybrid_asr = 0.0;
    double original_asr = 0.0;
    double mean_response_ms = 0.0;
    double steal_accuracy = 0.0;
    int predicted_n_exits = 0;
};

struct TradeoffResult {
    std::vector<TradeoffPoint> points;
    std::optional<double> crossing_sigma;  // smallest sigma with hybrid <= original + eps
    double crossing_mean_response_ms = 0.0;
    double max_delay_response_ms = 0.0;
    double epsilon = 0.01;
};

// Privacy/efficiency sweep: for each sigma, recover exits by clustering the
// TimeGuard-delayed response times of the balanced evaluation set, rerun the
// hybrid attack on those stolen exits, and record the mean response time.
inline TradeoffResult tradeoff_sweep(const MultiExitModel& target, const TimingModel& tm,
                                     const AttackModel& hybrid_attack,
                                     const AttackModel& original_attack,
                                     const TabularDataset& data,
                                     const std::vector<int>& member_idx,
                                     const std::vector<int>& nonmember_idx,
                                     const TimeGuardConfig& base_cfg,
                                     const std::vector<double>& sigma_list, double epsilon = 0.01) {
    if (sigma_list.empty()) throw std::invalid_argument("tradeoff_sweep: empty sigma list");
    const int m = static_cast<int>(std::min(member_idx.size(), nonmember_idx.size()));
    std::vector<int> mem(member_idx.begin(), member_idx.begin() + m);
    std::vector<int> non(nonmember_idx.begin(), nonmember_idx.begin() + m);
    std::vector<int> eval_idx = mem;
    eval_idx.insert(eval_idx.end(), non.begin(), non.end());

    AttackBuildOptions opts;
    opts.mode = original_attack.mode;
    AttackDataset base = build_attack_dataset(target, data, mem, non, opts);
    const double original_asr = run_inference_attack(original_attack, base);

    // per-sample clean time and unit delay noise, both independent of sigma
    const int n = 2 * m;
    std::vector<double> clean(n), unit(n);
    for (int i = 0; i < n; ++i) {
        clean[i] = tm.clean_time(base.taken_exit[i]);
        unit[i] = std::abs(timeguard_unit_noise(data.features.row(eval_idx[i]), base_cfg));
    }

    const int k = target.n_exits();
    TradeoffResult res;
    res.epsilon = epsilon;
    res.max_delay_response_ms = tm.clean_times.back();
    for (double sigma : sigma_list) {
        std::vector<double> times(n);
        for (int i = 0; i < n; ++i) times[i] = clean[i] + sigma * unit[i];
        const auto kde = kde_cluster(times);

        AttackDataset with_exit = base;
        with_exit.exit_onehot.setZero(n, k);
        int correct = 0;
        for (int i = 0; i < n; ++i) {
            const int stolen = std::clamp(kde.clusters[i], 0, k - 1);
            with_exit.exit_onehot(i, stolen) = 1.0;
            correct += stolen == base.taken_exit[i];
        }

        TradeoffPoint point;
        point.sigma = sigma;
        point.original_asr = original_asr;
        point.hybrid_asr = run_inference_attack(hybrid_attack, with_exit);
        point.mean_response_ms = mean(times);
        point.steal_accuracy = static_cast<double>(correct) / n;
        point.predicted_n_exits = kde.n_clusters();
        res.points.push_back(point);

        if (!res.crossing_sigma && point.hybrid_asr <= original_asr + epsilon) {
            res.crossing_sigma = sigma;
            res.crossing_mean_response_ms = point.mean_response_ms;
        }
    }
    return res;
}

}  // namespace exitaudit
