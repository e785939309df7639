#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "exitaudit/defense.hpp"
#include "exitaudit/nn.hpp"
#include "exitaudit/stats.hpp"

namespace exitaudit {

// Shared-binning histogram pair over losses: n_bins uniform bins over
// [lo, hi] plus one overflow bin, epsilon-smoothed and renormalized.
struct LossHistogramPair {
    int n_bins = 100;
    double lo = 0.0;
    double hi = 1.0;
    double epsilon = 1e-10;
    std::vector<double> member_hist;     // length n_bins + 1
    std::vector<double> nonmember_hist;  // length n_bins + 1

    double bin_width() const { return (hi - lo) / n_bins; }
};

namespace detail {

inline std::vector<double> smoothed_histogram(const std::vector<double>& samples, int n_bins,
                                              double lo, double hi, double epsilon) {
    std::vector<double> hist(n_bins + 1, 0.0);
    const double width = (hi - lo) / n_bins;
    for (double v : samples) {
        int bin;
        if (v >= hi) {
            bin = n_bins;  // overflow
        } else if (v <= lo) {
            bin = 0;
        } else {
            bin = static_cast<int>((v - lo) / width);
            bin = std::clamp(bin, 0, n_bins - 1);
        }
        hist[bin] += 1.0;
    }
    double total = 0.0;
    for (double& h : hist) {
        h = h / samples.size() + epsilon;
        total += h;
    }
    for (double& h : hist) h /= total;
    return hist;
}

inline double kl_base2(const std::vector<double>& p, const std::vector<double>& q) {
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) acc += p[i] * std::log2(p[i] / q[i]);
    return acc;
}

}  // namespace detail

// Binning over the pooled samples: [min(0, pooled min), pooled 99th
// percentile] with an overflow bin; losses are nonnegative so the lower edge
// is 0 for loss data.
inline LossHistogramPair build_loss_histograms(const std::vector<double>& member_losses,
                                               const std::vector<double>& nonmember_losses,
                                               int n_bins = 100, double epsilon = 1e-10) {
    if (member_losses.empty() || nonmember_losses.empty())
        throw std::invalid_argument("build_loss_histograms: empty sample set");
    std::vector<double> pooled(member_losses);
    pooled.insert(pooled.end(), nonmember_losses.begin(), nonmember_losses.end());
    LossHistogramPair pair;
    pair.n_bins = n_bins;
    pair.epsilon = epsilon;
    pair.lo = std::min(0.0, *std::min_element(pooled.begin(), pooled.end()));
    pair.hi = quantile(pooled, 0.99);
    if (pair.hi <= pair.lo) pair.hi = pair.lo + 1.0;
    pair.member_hist = detail::smoothed_histogram(member_losses, n_bins, pair.lo, pair.hi, epsilon);
    pair.nonmember_hist =
        detail::smoothed_histogram(nonmember_losses, n_bins, pair.lo, pair.hi, epsilon);
    return pair;
}

inline double js_from_histograms(const std::vector<double>& p, const std::vector<double>& q) {
    std::vector<double> m(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
    return 0.5 * detail::kl_base2(p, m) + 0.5 * detail::kl_base2(q, m);
}

// JS(P || Q) over shared epsilon-smoothed histograms, base-2 logs so the
// value lies in [0, 1]. epsilon = 0 recovers the exact endpoint values
// (identical samples -> 0, disjoint supports -> 1).
inline double js_divergence(const std::vector<double>& p_samples,
                            const std::vector<double>& q_samples, int n_bins = 100,
                            double epsilon = 1e-10) {
    const auto pair = build_loss_histograms(p_samples, q_samples, n_bins, epsilon);
    return js_from_histograms(pair.member_hist, pair.nonmember_hist);
}

// Train accuracy minus test accuracy, both under early-exit predictions.
inline double overfitting_gap(const MultiExitModel& model, const Matrix& train_x,
                              const std::vector<int>& train_y, const Matrix& test_x,
                              const std::vector<int>& test_y) {
    if (train_x.rows() == 0 || test_x.rows() == 0)
        throw std::invalid_argument("overfitting_gap: empty evaluation set");
    return early_exit_accuracy(model, train_x, train_y) -
           early_exit_accuracy(model, test_x, test_y);
}

struct ExitLosses {
    std::vector<double> losses;
    std::vector<int> exits;
};

inline ExitLosses losses_at_taken_exit(const MultiExitModel& model, const Matrix& x,
                                       const std::vector<int>& y) {
    const auto ev = model.eval_all_exits(x);
    ExitLosses out;
    out.losses.resize(x.rows());
    out.exits.resize(x.rows());
    for (int r = 0; r < x.rows(); ++r) {
        const int e = model.taken_exit_for_row(ev, r);
        out.exits[r] = e;
        out.losses[r] = cross_entropy(ev.probs[e].row(r), y[r]);
    }
    return out;
}

struct PerExitJs {
    std::vector<double> js;        // one entry per exit depth
    std::vector<bool> reliable;    // false: fewer than 10 samples on a side
    std::vector<int> member_count;
    std::vector<int> nonmember_count;
};

// Member/non-member loss divergence bucketed by the exit that fired.
inline PerExitJs per_exit_js(const MultiExitModel& model, const Matrix& member_x,
                             const std::vector<int>& member_y, const Matrix& nonmember_x,
                             const std::vector<int>& nonmember_y, int n_bins = 100,
                             double epsilon = 1e-10) {
    const auto mem = losses_at_taken_exit(model, member_x, member_y);
    const auto non = losses_at_taken_exit(model, nonmember_x, nonmember_y);
    const int k = model.n_exits();
    PerExitJs out;
    out.js.assign(k, 0.0);
    out.reliable.assign(k, false);
    out.member_count.assign(k, 0);
    out.nonmember_count.assign(k, 0);
    for (int e = 0; e < k; ++e) {
        std::vector<double> m, n;
        for (std::size_t i = 0; i < mem.losses.size(); ++i)
            if (mem.exits[i] == e) m.push_back(mem.losses[i]);
        for (std::size_t i = 0; i < non.losses.size(); ++i)
            if (non.exits[i] == e) n.push_back(non.losses[i]);
        out.member_count[e] = static_cast<int>(m.size());
        out.nonmember_count[e] = static_cast<int>(n.size());
        if (m.empty() || n.empty()) continue;
        out.js[e] = js_divergence(m, n, n_bins, epsilon);
        out.reliable[e] = m.size() >= 10 && n.size() >= 10;
    }
    return out;
}

struct ExitRatio {
    // one entry per exit; ratio absent when nothing leaves at that exit
    std::vector<std::optional<double>> nonmember_ratio;
    std::vector<int> total_count;
};

// Fraction of non-members among all samples leaving at each exit.
inline ExitRatio nonmember_ratio_per_exit(const MultiExitModel& model, const Matrix& member_x,
                                          const Matrix& nonmember_x) {
    const auto mem_exits = taken_exits(model, member_x);
    const auto non_exits = taken_exits(model, nonmember_x);
    const int k = model.n_exits();
    std::vector<int> mem_count(k, 0), non_count(k, 0);
    for (int e : mem_exits) ++mem_count[e];
    for (int e : non_exits) ++non_count[e];
    ExitRatio out;
    out.nonmember_ratio.resize(k);
    out.total_count.resize(k);
    for (int e = 0; e < k; ++e) {
        out.total_count[e] = mem_count[e] + non_count[e];
        if (out.total_count[e] > 0)
            out.nonmember_ratio[e] =
                static_cast<double>(non_count[e]) / static_cast<double>(out.total_count[e]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// AuditReport
// ---------------------------------------------------------------------------

struct AuditReport {
    int schema_version = 1;
    std::string task_name;
    // architecture descriptor
    int input_dim = 0;
    int n_classes = 0;
    int n_blocks = 0;
    int hidden_width = 0;
    int head_hidden = 0;
    int n_exits = 0;
    double tau = 1.0;

    std::optional<double> train_accuracy;
    std::optional<double> test_accuracy;
    std::optional<double> vanilla_train_accuracy;
    std::optional<double> vanilla_test_accuracy;
    std::vector<std::uint64_t> ops_per_exit;
    std::optional<double> mean_inference_ops;

    // attack name -> ASR, e.g. "score_original", "score_hybrid_direct",
    // "label_only_per_exit", "gradient_original"
    std::map<std::string, double> asr;

    std::optional<double> overfitting_gap;
    std::optional<double> js_overall;
    std::optional<PerExitJs> per_exit_js;
    std::optional<ExitRatio> exit_ratio;
    std::optional<double> exit_steal_accuracy;
    std::optional<int> stolen_n_exits;
    std::optional<TradeoffResult> defense_sweep;

    void validate() const {
        for (const auto& [name, value] : asr)
            if (value < 0.0 || value > 1.0)
                throw std::logic_error("audit report: ASR '" + name + "' outside [0,1]");
    }
};

inline void to_json(nlohmann::json& j, const AuditReport& r) {
    r.validate();
    j = nlohmann::json{{"schema_version", r.schema_version},
                       {"task_name", r.task_name},
                       {"architecture",
                        {{"input_dim", r.input_dim},
                         {"n_classes", r.n_classes},
                         {"n_blocks", r.n_blocks},
                         {"hidden_width", r.hidden_width},
                         {"head_hidden", r.head_hidden},
                         {"n_exits", r.n_exits},
                         {"tau", r.tau}}},
                       {"ops_per_exit", r.ops_per_exit},
                       {"asr", r.asr}};
    auto put = [&](const char* key, const auto& opt) {
        if (opt) j[key] = *opt;
    };
    put("train_accuracy", r.train_accuracy);
    put("test_accuracy", r.test_accuracy);
    put("vanilla_train_accuracy", r.vanilla_train_accuracy);
    put("vanilla_test_accuracy", r.vanilla_test_accuracy);
    put("mean_inference_ops", r.mean_inference_ops);
    put("overfitting_gap", r.overfitting_gap);
    put("js_overall", r.js_overall);
    put("exit_steal_accuracy", r.exit_steal_accuracy);
    put("stolen_n_exits", r.stolen_n_exits);
    if (r.per_exit_js) {
        j["per_exit_js"] = {{"js", r.per_exit_js->js},
                            {"reliable", r.per_exit_js->reliable},
                            {"member_count", r.per_exit_js->member_count},
                            {"nonmember_count", r.per_exit_js->nonmember_count}};
    }
    if (r.exit_ratio) {
        nlohmann::json ratios = nlohmann::json::array();
        for (const auto& opt : r.exit_ratio->nonmember_ratio)
            ratios.push_back(opt ? nlohmann::json(*opt) : nlohmann::json(nullptr));
        j["exit_ratio"] = {{"nonmember_ratio", ratios},
                           {"total_count", r.exit_ratio->total_count}};
    }
    if (r.defense_sweep) {
        nlohmann::json points = nlohmann::json::array();
        for (const auto& p : r.defense_sweep->points)
            points.push_back({{"sigma", p.sigma},
                              {"hybrid_asr", p.hybrid_asr},
                              {"original_asr", p.original_asr},
                              {"mean_response_ms", p.mean_response_ms},
                              {"steal_accuracy", p.steal_accuracy},
                              {"predicted_n_exits", p.predicted_n_exits}});
        j["defense_sweep"] = {{"points", points},
                              {"epsilon", r.defense_sweep->epsilon},
                              {"max_delay_response_ms", r.defense_sweep->max_delay_response_ms}};
        if (r.defense_sweep->crossing_sigma) {
            j["defense_sweep"]["crossing_sigma"] = *r.defense_sweep->crossing_sigma;
            j["defense_sweep"]["crossing_mean_response_ms"] =
                r.defense_sweep->crossing_mean_response_ms;
        }
    }
}

inline void from_json(const nlohmann::json& j, AuditReport& r) {
    r.schema_version = j.at("schema_version").get<int>();
    r.task_name = j.at("task_name").get<std::string>();
    const auto& arch = j.at("architecture");
    r.input_dim = arch.at("input_dim").get<int>();
    r.n_classes = arch.at("n_classes").get<int>();
    r.n_blocks = arch.at("n_blocks").get<int>();
    r.hidden_width = arch.at("hidden_width").get<int>();
    r.head_hidden = arch.at("head_hidden").get<int>();
    r.n_exits = arch.at("n_exits").get<int>();
    r.tau = arch.at("tau").get<double>();
    r.ops_per_exit = j.at("ops_per_exit").get<std::vector<std::uint64_t>>();
    r.asr = j.at("asr").get<std::map<std::string, double>>();
    auto get = [&](const char* key, auto& opt) {
        using T = typename std::decay_t<decltype(opt)>::value_type;
        if (j.contains(key)) opt = j.at(key).get<T>();
    };
    get("train_accuracy", r.train_accuracy);
    get("test_accuracy", r.test_accuracy);
    get("vanilla_train_accuracy", r.vanilla_train_accuracy);
    get("vanilla_test_accuracy", r.vanilla_test_accuracy);
    get("mean_inference_ops", r.mean_inference_ops);
    get("overfitting_gap", r.overfitting_gap);
    get("js_overall", r.js_overall);
    get("exit_steal_accuracy", r.exit_steal_accuracy);
    get("stolen_n_exits", r.stolen_n_exits);
    if (j.contains("per_exit_js")) {
        PerExitJs pj;
        pj.js = j["per_exit_js"].at("js").get<std::vector<double>>();
        pj.reliable = j["per_exit_js"].at("reliable").get<std::vector<bool>>();
        pj.member_count = j["per_exit_js"].at("member_count").get<std::vector<int>>();
        pj.nonmember_count = j["per_exit_js"].at("nonmember_count").get<std::vector<int>>();
        r.per_exit_js = pj;
    }
    if (j.contains("exit_ratio")) {
        ExitRatio er;
        for (const auto& v : j["exit_ratio"].at("nonmember_ratio")) {
            if (v.is_null())
                er.nonmember_ratio.emplace_back(std::nullopt);
            else
                er.nonmember_ratio.emplace_back(v.get<double>());
        }
        er.total_count = j["exit_ratio"].at("total_count").get<std::vector<int>>();
        r.exit_ratio = er;
    }
    if (j.contains("defense_sweep")) {
        TradeoffResult tr;
        for (const auto& v : j["defense_sweep"].at("points")) {
            TradeoffPoint p;
            p.sigma = v.at("sigma").get<double>();
            p.hybrid_asr = v.at("hybrid_asr").get<double>();
            p.original_asr = v.at("original_asr").get<double>();
            p.mean_response_ms = v.at("mean_response_ms").get<double>();
            p.steal_accuracy = v.at("steal_accuracy").get<double>();
            p.predicted_n_exits = v.at("predicted_n_exits").get<int>();
            tr.points.push_back(p);
        }
        tr.epsilon = j["defense_sweep"].at("epsilon").get<double>();
        tr.max_delay_response_ms = j["defense_sweep"].at("max_delay_response_ms").get<double>();
        if (j["defense_sweep"].contains("crossing_sigma")) {
            tr.crossing_sigma = j["defense_sweep"]["crossing_sigma"].get<double>();
            tr.crossing_mean_response_ms =
                j["defense_sweep"]["crossing_mean_response_ms"].get<double>();
        }
        r.defense_sweep = tr;
    }
}

inline void save_report(const AuditReport& report, const std::string& path) {
    nlohmann::json j = report;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_report: cannot open " + path);
    out << j.dump(2) << '\n';
}

inline AuditReport load_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_report: cannot open " + path);
    nlohmann::json j;
    in >> j;
    return j.get<AuditReport>();
}

// ---------------------------------------------------------------------------
// Flat CSV companions for external plotting
// ---------------------------------------------------------------------------

inline void write_loss_hist_csv(const LossHistogramPair& pair, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_loss_hist_csv: cannot open " + path);
    out << "bin_lo,bin_hi,member_density,nonmember_density\n";
    const double width = pair.bin_width();
    for (int b = 0; b <= pair.n_bins; ++b) {
        const double lo = pair.lo + b * width;
        const double hi = b == pair.n_bins ? std::numeric_limits<double>::infinity() : lo + width;
        out << lo << ',' << hi << ',' << pair.member_hist[b] << ',' << pair.nonmember_hist[b]
            << '\n';
    }
}

inline void write_js_per_exit_csv(const PerExitJs& pj, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_js_per_exit_csv: cannot open " + path);
    out << "exit,js,reliable,member_count,nonmember_count\n";
    for (std::size_t e = 0; e < pj.js.size(); ++e)
        out << e << ',' << pj.js[e] << ',' << (pj.reliable[e] ? 1 : 0) << ','
            << pj.member_count[e] << ',' << pj.nonmember_count[e] << '\n';
}

inline void write_ratio_csv(const ExitRatio& ratio, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_ratio_csv: cannot open " + path);
    out << "exit,nonmember_ratio,total_count\n";
    for (std::size_t e = 0; e < ratio.nonmember_ratio.size(); ++e) {
        out << e << ',';
        if (ratio.nonmember_ratio[e]) out << *ratio.nonmember_ratio[e];
        out << ',' << ratio.total_count[e] << '\n';
    }
}

inline void write_tradeoff_csv(const TradeoffResult& sweep, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_tradeoff_csv: cannot open " + path);
    out << "sigma,hybrid_asr,original_asr,mean_response_ms,steal_accuracy,predicted_n_exits\n";
    for (const auto& p : sweep.points)
        out << p.sigma << ',' << p.hybrid_asr << ',' << p.original_asr << ','
            << p.mean_response_ms << ',' << p.steal_accuracy << ',' << p.predicted_n_exits
            << '\n';
}

}  // namespace exitaudit
