#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "exitaudit/dataset.hpp"
#include "exitaudit/mlp.hpp"
#include "exitaudit/nn.hpp"

namespace exitaudit {

enum class AttackMode { score_based, gradient_based };
enum class ExitSource { none, direct, timing };

// One sample's attack-model inputs; the library stores these columnar (see
// AttackDataset) and materializes rows on demand.
struct AttackFeatureRecord {
    Vector score;
    Vector penult_feature;
    double loss = 0.0;
    Vector last_grad;
    Vector label_onehot;
    std::optional<Vector> exit_onehot;
    int is_member = 0;
};

struct AttackDataset {
    AttackMode mode = AttackMode::score_based;
    Matrix score;         // n x C, from the exit that fired
    Matrix penult;        // n x W, gradient mode only
    Vector loss;          // n
    Matrix grad;          // n x (C*H + C), gradient mode only
    Matrix label_onehot;  // n x C
    Matrix exit_onehot;   // n x stolen_n_exits; empty without exit knowledge
    std::vector<int> taken_exit;  // ground-truth exit that produced the features
    std::vector<int> is_member;

    int size() const { return static_cast<int>(score.rows()); }
    bool has_exit_onehot() const { return exit_onehot.size() > 0; }

    AttackFeatureRecord record(int i) const {
        AttackFeatureRecord rec;
        rec.score = score.row(i);
        rec.loss = loss(i);
        rec.label_onehot = label_onehot.row(i);
        if (mode == AttackMode::gradient_based) {
            rec.penult_feature = penult.row(i);
            rec.last_grad = grad.row(i);
        }
        if (has_exit_onehot()) rec.exit_onehot = exit_onehot.row(i);
        rec.is_member = is_member[i];
        return rec;
    }
};

struct AttackBuildOptions {
    AttackMode mode = AttackMode::score_based;
    ExitSource exit_source = ExitSource::none;
    int stolen_n_exits = 0;  // 0: use the model's own exit count
    // per-sample exits recovered from the timing channel (ExitSource::timing)
    const std::vector<int>* member_exits = nullptr;
    const std::vector<int>* nonmember_exits = nullptr;
    // take score/feature/loss/gradient at the final exit instead of the exit
    // that fired (the default matches what an early-exit observer sees)
    bool features_at_final_exit = false;
};

namespace detail {

struct FeatureBlock {
    Matrix score, penult, grad, label_onehot;
    Vector loss;
    std::vector<int> taken;
};

inline FeatureBlock compute_features(const MultiExitModel& model, const Matrix& x,
                                     const std::vector<int>& y, bool gradients,
                                     bool features_at_final_exit = false) {
    const auto ev = model.eval_all_exits(x, true);
    const int n = static_cast<int>(x.rows());
    const int c = model.cfg.n_classes;
    const int h = model.cfg.head_hidden;
    FeatureBlock fb;
    fb.score.resize(n, c);
    fb.label_onehot.setZero(n, c);
    fb.loss.resize(n);
    fb.taken.resize(n);
    if (gradients) {
        fb.penult.resize(n, model.cfg.hidden_width);
        fb.grad.resize(n, c * h + c);
    }
    for (int r = 0; r < n; ++r) {
        const int taken = model.taken_exit_for_row(ev, r);
        const int e = features_at_final_exit ? model.n_exits() - 1 : taken;
        fb.taken[r] = taken;
        fb.score.row(r) = ev.probs[e].row(r);
        fb.label_onehot(r, y[r]) = 1.0;
        fb.loss(r) = cross_entropy(ev.probs[e].row(r), y[r]);
        if (gradients) {
            fb.penult.row(r) = ev.module_input[e].row(r);
            Eigen::RowVectorXd dlogits = ev.probs[e].row(r);
            dlogits(y[r]) -= 1.0;
            const Eigen::RowVectorXd a = ev.last_input[e].row(r);
            for (int i = 0; i < c; ++i)
                fb.grad.row(r).segment(i * h, h) = dlogits(i) * a;
            fb.grad.row(r).segment(c * h, c) = dlogits;
        }
    }
    return fb;
}

}  // namespace detail

// Features are computed at the exit that fired. Member records come first,
// then non-members; both sides truncated to the smaller one.
inline AttackDataset build_attack_dataset(const MultiExitModel& model, const TabularDataset& data,
                                          const std::vector<int>& member_idx,
                                          const std::vector<int>& nonmember_idx,
                                          const AttackBuildOptions& opts = {}) {
    if (member_idx.empty() || nonmember_idx.empty())
        throw std::invalid_argument("build_attack_dataset: empty split part");
    const int m = static_cast<int>(std::min(member_idx.size(), nonmember_idx.size()));
    std::vector<int> mem(member_idx.begin(), member_idx.begin() + m);
    std::vector<int> non(nonmember_idx.begin(), nonmember_idx.begin() + m);

    const bool gradients = opts.mode == AttackMode::gradient_based;
    const auto fb_m = detail::compute_features(model, rows(data.features, mem),
                                               gather(data.labels, mem), gradients,
                                               opts.features_at_final_exit);
    const auto fb_n = detail::compute_features(model, rows(data.features, non),
                                               gather(data.labels, non), gradients,
                                               opts.features_at_final_exit);

    AttackDataset out;
    out.mode = opts.mode;
    const int n = 2 * m;
    out.score.resize(n, fb_m.score.cols());
    out.score << fb_m.score, fb_n.score;
    out.label_onehot.resize(n, fb_m.label_onehot.cols());
    out.label_onehot << fb_m.label_onehot, fb_n.label_onehot;
    out.loss.resize(n);
    out.loss << fb_m.loss, fb_n.loss;
    if (gradients) {
        out.penult.resize(n, fb_m.penult.cols());
        out.penult << fb_m.penult, fb_n.penult;
        out.grad.resize(n, fb_m.grad.cols());
        out.grad << fb_m.grad, fb_n.grad;
    }
    out.taken_exit = fb_m.taken;
    out.taken_exit.insert(out.taken_exit.end(), fb_n.taken.begin(), fb_n.taken.end());
    out.is_member.assign(m, 1);
    out.is_member.insert(out.is_member.end(), m, 0);

    if (opts.exit_source != ExitSource::none) {
        const int k = opts.stolen_n_exits > 0 ? opts.stolen_n_exits : model.n_exits();
        std::vector<int> exits;
        if (opts.exit_source == ExitSource::direct) {
            exits = out.taken_exit;
        } else {
            if (!opts.member_exits || !opts.nonmember_exits)
                throw std::invalid_argument(
                    "build_attack_dataset: timing exit source needs per-sample exits");
            if (opts.member_exits->size() < static_cast<std::size_t>(m) ||
                opts.nonmember_exits->size() < static_cast<std::size_t>(m))
                throw std::invalid_argument(
                    "build_attack_dataset: timing exit vectors shorter than the balanced set");
            exits.assign(opts.member_exits->begin(), opts.member_exits->begin() + m);
            exits.insert(exits.end(), opts.nonmember_exits->begin(),
                         opts.nonmember_exits->begin() + m);
        }
        out.exit_onehot.setZero(n, k);
        for (int r = 0; r < n; ++r)
            out.exit_onehot(r, std::clamp(exits[r], 0, k - 1)) = 1.0;
    }
    return out;
}

inline void write_attack_csv(const AttackDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_attack_csv: cannot open " + path);
    // column order: is_member, taken_exit, loss, score..., label_onehot...,
    // then exit_onehot..., penult..., grad... when present
    out << "is_member,taken_exit,loss";
    for (int j = 0; j < ds.score.cols(); ++j) out << ",score_" << j;
    for (int j = 0; j < ds.label_onehot.cols(); ++j) out << ",label_" << j;
    for (int j = 0; j < ds.exit_onehot.cols(); ++j) out << ",exit_" << j;
    for (int j = 0; j < ds.penult.cols(); ++j) out << ",penult_" << j;
    for (int j = 0; j < ds.grad.cols(); ++j) out << ",grad_" << j;
    out << '\n';
    char buf[64];
    auto emit = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        out << ',' << buf;
    };
    for (int i = 0; i < ds.size(); ++i) {
        out << ds.is_member[i] << ',' << ds.taken_exit[i];
        std::snprintf(buf, sizeof(buf), "%.17g", ds.loss(i));
        out << ',' << buf;
        for (int j = 0; j < ds.score.cols(); ++j) emit(ds.score(i, j));
        for (int j = 0; j < ds.label_onehot.cols(); ++j) emit(ds.label_onehot(i, j));
        for (int j = 0; j < ds.exit_onehot.cols(); ++j) emit(ds.exit_onehot(i, j));
        for (int j = 0; j < ds.penult.cols(); ++j) emit(ds.penult(i, j));
        for (int j = 0; j < ds.grad.cols(); ++j) emit(ds.grad(i, j));
        out << '\n';
    }
}

// Membership classifier: one branch encoder per input component feeding a
// 4-layer head with a 2-way output.
class AttackModel {
public:
    AttackMode mode = AttackMode::score_based;
    bool uses_exit = false;
    BranchNet net;

    AttackModel() = default;
    AttackModel(AttackMode attack_mode, bool with_exit, int n_classes, int penult_dim,
                int grad_dim, int exit_dim, Rng& rng)
        : mode(attack_mode), uses_exit(with_exit) {
        std::vector<int> dims;
        dims.push_back(n_classes);  // score branch
        if (mode == AttackMode::gradient_based) {
            dims.push_back(penult_dim);
            dims.push_back(1);  // loss
            dims.push_back(grad_dim);
            dims.push_back(n_classes);  // label one-hot
        }
        if (uses_exit) dims.push_back(exit_dim);
        net = BranchNet(dims, 2, rng);
    }

    std::vector<Matrix> assemble_inputs(const AttackDataset& ds) const {
        if (uses_exit && !ds.has_exit_onehot())
            throw std::invalid_argument("attack model expects exit one-hot inputs");
        std::vector<Matrix> inputs;
        inputs.push_back(ds.score);
        if (mode == AttackMode::gradient_based) {
            inputs.push_back(ds.penult);
            inputs.push_back(ds.loss);
            inputs.push_back(ds.grad);
            inputs.push_back(ds.label_onehot);
        }
        if (uses_exit) inputs.push_back(ds.exit_onehot);
        return inputs;
    }

    std::vector<int> predict(const AttackDataset& ds) const {
        const Matrix logits = net.apply(assemble_inputs(ds));
        std::vector<int> preds(logits.rows());
        for (int r = 0; r < logits.rows(); ++r) preds[r] = logits(r, 1) > logits(r, 0) ? 1 : 0;
        return preds;
    }
};

inline AttackModel train_attack_model(const AttackDataset& ds, const ClassifierTrainConfig& cfg) {
    const bool any_member = std::any_of(ds.is_member.begin(), ds.is_member.end(),
                                        [](int v) { return v == 1; });
    const bool any_non = std::any_of(ds.is_member.begin(), ds.is_member.end(),
                                     [](int v) { return v == 0; });
    if (!any_member || !any_non)
        throw std::invalid_argument("train_attack_model: records are all one class");

    Rng rng(cfg.seed);
    AttackModel model(ds.mode, ds.has_exit_onehot(), static_cast<int>(ds.score.cols()),
                      static_cast<int>(ds.penult.cols()), static_cast<int>(ds.grad.cols()),
                      static_cast<int>(ds.exit_onehot.cols()), rng);
    auto params = model.net.params();
    const auto inputs = model.assemble_inputs(ds);
    const int n = ds.size();
    const int bs = std::max(1, cfg.batch_size);
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = rng.permutation(n);
        for (int start = 0; start < n; start += bs) {
            const int count = std::min(bs, n - start);
            std::vector<Matrix> xb(inputs.size());
            for (std::size_t b = 0; b < inputs.size(); ++b) {
                xb[b].resize(count, inputs[b].cols());
                for (int i = 0; i < count; ++i) xb[b].row(i) = inputs[b].row(order[start + i]);
            }
            std::vector<int> yb(count);
            for (int i = 0; i < count; ++i) yb[i] = ds.is_member[order[start + i]];

            for (Param* p : params) p->grad.setZero();
            Matrix probs = softmax_rows(model.net.forward_train(xb));
            double loss = 0.0;
            for (int r = 0; r < count; ++r) loss += cross_entropy(probs.row(r), yb[r]);
            if (!std::isfinite(loss)) throw TrainingDiverged(epoch);
            for (int r = 0; r < count; ++r) probs(r, yb[r]) -= 1.0;
            model.net.backward(probs / count);
            adam_update(params, ++step, cfg);
        }
    }
    return model;
}

// Fraction of correct membership calls; the ASR when the set is balanced.
inline double run_inference_attack(const AttackModel& model, const AttackDataset& eval_set) {
    const auto preds = model.predict(eval_set);
    int correct = 0;
    for (int i = 0; i < eval_set.size(); ++i) correct += preds[i] == eval_set.is_member[i];
    return static_cast<double>(correct) / eval_set.size();
}

// ---------------------------------------------------------------------------
// Label-only attack: perturbation magnitude + threshold decision
// ---------------------------------------------------------------------------

struct PerturbationParams {
    int k_directions = 10;
    double s_max = 1.0;      // callers scale this to 5x the feature std
    int bisection_steps = 20;
};

inline double feature_std(const Matrix& x) {
    const double m = x.mean();
    return std::sqrt((x.array() - m).square().mean());
}

inline Matrix make_directions(int dim, int k, Rng& rng) {
    Matrix dirs(k, dim);
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < dim; ++j) dirs(i, j) = rng.gaussian();
        dirs.row(i) /= dirs.row(i).norm();
    }
    return dirs;
}

// Smallest scale along each direction that flips the predicted label
// (s_max when none does), bisected and averaged over directions. Batched
// over samples so every probe is one matrix pass.
inline std::vector<double> perturbation_magnitudes(const MultiExitModel& model, const Matrix& x,
                                                   const Matrix& directions,
                                                   const PerturbationParams& params) {
    const int n = static_cast<int>(x.rows());
    const auto base = early_exit_predictions(model, x);
    std::vector<double> acc(n, 0.0);
    for (int d = 0; d < directions.rows(); ++d) {
        const Eigen::RowVectorXd dir = directions.row(d);
        auto flipped_at = [&](const Vector& scale) {
            Matrix xp = x + scale * dir;
            const auto labels = early_exit_predictions(model, xp);
            std::vector<char> flips(n);
            for (int i = 0; i < n; ++i) flips[i] = labels[i] != base[i];
            return flips;
        };
        Vector hi = Vector::Constant(n, params.s_max);
        Vector lo = Vector::Zero(n);
        const auto flip_max = flipped_at(hi);
        for (int step = 0; step < params.bisection_steps; ++step) {
            Vector mid = 0.5 * (lo + hi);
            const auto flips = flipped_at(mid);
            for (int i = 0; i < n; ++i) {
                if (!flip_max[i]) continue;
                if (flips[i])
                    hi(i) = mid(i);
                else
                    lo(i) = mid(i);
            }
        }
        for (int i = 0; i < n; ++i) acc[i] += flip_max[i] ? hi(i) : params.s_max;
    }
    for (double& v : acc) v /= directions.rows();
    return acc;
}

inline double perturbation_magnitude(const MultiExitModel& model, const Vector& x,
                                     const Matrix& directions, const PerturbationParams& params) {
    return perturbation_magnitudes(model, x.transpose(), directions, params)[0];
}

// Threshold for "member iff magnitude > t", swept over candidate cuts
// between consecutive distinct magnitudes. The whole shadow set is balanced,
// where balanced and plain accuracy agree; inside an exit bucket the sides
// can be wildly uneven and the plain objective is the one the averaged
// per-exit ASR rewards, so the objective weighs samples, not sides.
inline double best_magnitude_threshold(const std::vector<double>& member_mags,
                                       const std::vector<double>& nonmember_mags) {
    std::vector<double> all(member_mags);
    all.insert(all.end(), nonmember_mags.begin(), nonmember_mags.end());
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    std::vector<double> candidates;
    candidates.push_back(all.front() - 1.0);
    for (std::size_t i = 1; i < all.size(); ++i) candidates.push_back(0.5 * (all[i - 1] + all[i]));
    candidates.push_back(all.back() + 1.0);

    double best_thr = candidates.front();
    double best_score = -1.0;
    for (double thr : candidates) {
        double correct = 0.0;
        for (double v : member_mags) correct += v > thr;
        for (double v : nonmember_mags) correct += v <= thr;
        const double score = correct / (member_mags.size() + nonmember_mags.size());
        if (score > best_score) {
            best_score = score;
            best_thr = thr;
        }
    }
    return best_thr;
}

struct LabelOnlyDecision {
    double global_threshold = 0.0;
    std::vector<double> per_exit_thresholds;  // empty in global mode
    std::vector<bool> bucket_fallback;        // true: bucket was too small, global used
    PerturbationParams params;
};

struct LabelOnlyInputs {
    std::vector<double> member_magnitudes;
    std::vector<double> nonmember_magnitudes;
    std::vector<int> member_exits;
    std::vector<int> nonmember_exits;
};

inline LabelOnlyInputs label_only_inputs(const MultiExitModel& model, const Matrix& member_x,
                                         const Matrix& nonmember_x, const Matrix& directions,
                                         const PerturbationParams& params) {
    LabelOnlyInputs out;
    out.member_magnitudes = perturbation_magnitudes(model, member_x, directions, params);
    out.nonmember_magnitudes = perturbation_magnitudes(model, nonmember_x, directions, params);
    out.member_exits = taken_exits(model, member_x);
    out.nonmember_exits = taken_exits(model, nonmember_x);
    return out;
}

namespace detail {

inline double threshold_accuracy(const std::vector<double>& member_mags,
                                 const std::vector<double>& nonmember_mags, double thr) {
    double correct = 0.0;
    for (double v : member_mags) correct += v > thr;
    for (double v : nonmember_mags) correct += v <= thr;
    return correct / (member_mags.size() + nonmember_mags.size());
}

}  // namespace detail

// Thresholds from the shadow magnitudes: one global cut, or one per exit
// depth with a global fallback for buckets of fewer than 10 shadow samples.
// A bucket-specific cut is adopted only when it beats the global cut on the
// shadow bucket by min_bucket_gain; thin-bucket sweeps otherwise latch onto
// noise that does not transfer to the target.
inline LabelOnlyDecision derive_label_only_decision(const LabelOnlyInputs& shadow, int n_exits,
                                                    bool per_exit,
                                                    const PerturbationParams& params,
                                                    double min_bucket_gain = 0.02) {
    LabelOnlyDecision dec;
    dec.params = params;
    dec.global_threshold =
        best_magnitude_threshold(shadow.member_magnitudes, shadow.nonmember_magnitudes);
    if (!per_exit) return dec;
    dec.per_exit_thresholds.assign(n_exits, dec.global_threshold);
    dec.bucket_fallback.assign(n_exits, false);
    for (int e = 0; e < n_exits; ++e) {
        std::vector<double> mem, non;
        for (std::size_t i = 0; i < shadow.member_magnitudes.size(); ++i)
            if (shadow.member_exits[i] == e) mem.push_back(shadow.member_magnitudes[i]);
        for (std::size_t i = 0; i < shadow.nonmember_magnitudes.size(); ++i)
            if (shadow.nonmember_exits[i] == e) non.push_back(shadow.nonmember_magnitudes[i]);
        if (mem.size() + non.size() < 10) {
            dec.bucket_fallback[e] = true;
            continue;
        }
        double candidate;
        if (mem.empty()) {
            // one-sided bucket: the depth itself decides the membership call
            candidate = *std::max_element(non.begin(), non.end()) + 1.0;
        } else if (non.empty()) {
            candidate = *std::min_element(mem.begin(), mem.end()) - 1.0;
        } else {
            candidate = best_magnitude_threshold(mem, non);
        }
        if (detail::threshold_accuracy(mem, non, candidate) >=
            detail::threshold_accuracy(mem, non, dec.global_threshold) + min_bucket_gain)
            dec.per_exit_thresholds[e] = candidate;
    }
    return dec;
}

struct LabelOnlyResult {
    double asr = 0.0;
    LabelOnlyDecision decision;
};

// Global mode: accuracy over the balanced set. Per-exit mode: samples are
// judged against their exit's threshold and the ASR is the unweighted mean
// over exit depths.
inline LabelOnlyResult evaluate_label_only(const LabelOnlyInputs& target,
                                           const LabelOnlyDecision& decision, int n_exits,
                                           const std::vector<int>* member_eval_exits = nullptr,
                                           const std::vector<int>* nonmember_eval_exits = nullptr) {
    LabelOnlyResult res;
    res.decision = decision;
    const auto& mem_exits = member_eval_exits ? *member_eval_exits : target.member_exits;
    const auto& non_exits = nonmember_eval_exits ? *nonmember_eval_exits : target.nonmember_exits;

    if (decision.per_exit_thresholds.empty()) {
        int correct = 0;
        for (double v : target.member_magnitudes) correct += v > decision.global_threshold;
        for (double v : target.nonmember_magnitudes) correct += v <= decision.global_threshold;
        res.asr = static_cast<double>(correct) /
                  (target.member_magnitudes.size() + target.nonmember_magnitudes.size());
        return res;
    }

    double asr_sum = 0.0;
    int buckets = 0;
    for (int e = 0; e < n_exits; ++e) {
        const double thr = decision.per_exit_thresholds[e];
        int correct = 0, total = 0;
        for (std::size_t i = 0; i < target.member_magnitudes.size(); ++i)
            if (std::clamp(mem_exits[i], 0, n_exits - 1) == e) {
                correct += target.member_magnitudes[i] > thr;
                ++total;
            }
        for (std::size_t i = 0; i < target.nonmember_magnitudes.size(); ++i)
            if (std::clamp(non_exits[i], 0, n_exits - 1) == e) {
                correct += target.nonmember_magnitudes[i] <= thr;
                ++total;
            }
        if (total == 0) continue;
        asr_sum += static_cast<double>(correct) / total;
        ++buckets;
    }
    res.asr = buckets > 0 ? asr_sum / buckets : 0.5;
    return res;
}

// ---------------------------------------------------------------------------
// Exit-count stealing and the score-only adaptive exit classifier
// ---------------------------------------------------------------------------

inline int count_exits(const std::vector<int>& observed_exit_indices) {
    if (observed_exit_indices.empty())
        throw std::invalid_argument("count_exits: empty probe set");
    return *std::max_element(observed_exit_indices.begin(), observed_exit_indices.end()) + 1;
}

// Adversary 1: the model interface exposes the exit index directly.
inline int count_exits(const MultiExitModel& model, const Matrix& probe_x) {
    return count_exits(taken_exits(model, probe_x));
}

struct AdaptiveExitClassifier {
    Mlp net;  // score vector -> exit index
    double holdout_accuracy = 0.0;

    std::vector<int> predict(const Matrix& scores) const {
        const Matrix logits = net.apply(scores);
        std::vector<int> out(logits.rows());
        for (int r = 0; r < logits.rows(); ++r) {
            int am = 0;
            logits.row(r).maxCoeff(&am);
            out[r] = am;
        }
        return out;
    }
};

// Appendix-style score-only exit stealing: train a 4-layer classifier on
// (prediction score, taken exit) pairs from the shadow model and report its
// held-out accuracy.
inline AdaptiveExitClassifier adaptive_exit_classifier(const MultiExitModel& shadow,
                                                       const Matrix& probe_x,
                                                       const ClassifierTrainConfig& cfg) {
    const auto ev = shadow.eval_all_exits(probe_x);
    const int n = static_cast<int>(probe_x.rows());
    Matrix scores(n, shadow.cfg.n_classes);
    std::vector<int> exits(n);
    for (int r = 0; r < n; ++r) {
        const int e = shadow.taken_exit_for_row(ev, r);
        exits[r] = e;
        scores.row(r) = ev.probs[e].row(r);
    }

    Rng rng(cfg.seed);
    const auto order = rng.permutation(n);
    const int train_n = n * 4 / 5;
    Matrix train_x(train_n, scores.cols()), hold_x(n - train_n, scores.cols());
    std::vector<int> train_y(train_n), hold_y(n - train_n);
    for (int i = 0; i < n; ++i) {
        if (i < train_n) {
            train_x.row(i) = scores.row(order[i]);
            train_y[i] = exits[order[i]];
        } else {
            hold_x.row(i - train_n) = scores.row(order[i]);
            hold_y[i - train_n] = exits[order[i]];
        }
    }

    AdaptiveExitClassifier out;
    Rng net_rng(derive_seed(cfg.seed, "adaptive-exit-net"));
    out.net = Mlp({shadow.cfg.n_classes, 256, 128, 64, shadow.n_exits()}, net_rng, false);
    ClassifierTrainConfig train_cfg = cfg;
    train_mlp_classifier(out.net, train_x, train_y, train_cfg);
    const auto preds = out.predict(hold_x);
    int correct = 0;
    for (std::size_t i = 0; i < hold_y.size(); ++i) correct += preds[i] == hold_y[i];
    out.holdout_accuracy = hold_y.empty() ? 0.0 : static_cast<double>(correct) / hold_y.size();
    return out;
}

}  // namespace exitaudit
