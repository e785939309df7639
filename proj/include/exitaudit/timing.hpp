#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "exitaudit/nn.hpp"
#include "exitaudit/rng.hpp"
#include "exitaudit/stats.hpp"

namespace exitaudit {

struct ClusteringFailed : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Simulated inference-time channel: the clean time of an exit is an affine
// function of its cumulative op count, and each query adds truncated
// positive Gaussian noise.
struct TimingModel {
    double base_time_ms = 5.0;
    double time_per_op_ms = 1e-4;
    double noise_mu_ms = 0.0;
    double noise_sigma_ms = 0.0;
    std::vector<double> clean_times;  // per exit, strictly increasing

    static TimingModel from_model(const MultiExitModel& model, double base_ms = 5.0,
                                  double per_op_ms = 1e-4, double mu_ms = 0.0,
                                  double sigma_ms = 0.0) {
        if (sigma_ms < 0.0) throw std::invalid_argument("timing model: sigma must be >= 0");
        TimingModel tm;
        tm.base_time_ms = base_ms;
        tm.time_per_op_ms = per_op_ms;
        tm.noise_mu_ms = mu_ms;
        tm.noise_sigma_ms = sigma_ms;
        for (std::uint64_t ops : model.ops_per_exit)
            tm.clean_times.push_back(base_ms + per_op_ms * static_cast<double>(ops));
        for (std::size_t e = 1; e < tm.clean_times.size(); ++e)
            if (tm.clean_times[e] <= tm.clean_times[e - 1])
                throw std::logic_error("timing model: clean times must be strictly increasing");
        return tm;
    }

    double clean_time(int exit_index) const { return clean_times.at(exit_index); }

    double min_adjacent_gap() const {
        double gap = std::numeric_limits<double>::infinity();
        for (std::size_t e = 1; e < clean_times.size(); ++e)
            gap = std::min(gap, clean_times[e] - clean_times[e - 1]);
        return gap;
    }
};

// One noisy query of a sample leaving at the given exit.
inline double measure_once(const TimingModel& tm, int exit_index, Rng& rng) {
    return tm.clean_time(exit_index) +
           rng.truncated_positive_gaussian(tm.noise_mu_ms, tm.noise_sigma_ms);
}

inline double measure_exit(const TimingModel& tm, int exit_index, int n_queries, Rng& rng) {
    if (n_queries < 1) throw std::invalid_argument("measure: n_queries must be >= 1");
    if (tm.noise_sigma_ms < 0.0) throw std::invalid_argument("measure: sigma must be >= 0");
    // average the noise before adding the clean time, so a noise-free
    // channel reports the clean time bit-exactly
    double noise = 0.0;
    for (int q = 0; q < n_queries; ++q)
        noise += rng.truncated_positive_gaussian(tm.noise_mu_ms, tm.noise_sigma_ms);
    return tm.clean_time(exit_index) + noise / n_queries;
}

// Averaged noisy inference time of one sample.
inline double measure(const TimingModel& tm, const MultiExitModel& model, const Vector& x,
                      int n_queries, Rng& rng) {
    const int exit_index = model.predict_early(x).exit_index;
    return measure_exit(tm, exit_index, n_queries, rng);
}

struct KdeClustering {
    double bandwidth = 0.0;
    std::vector<double> grid;
    std::vector<double> density;
    std::vector<double> minima;  // sorted cluster boundaries
    std::vector<int> clusters;   // per input value, 0 = fastest cluster

    int n_clusters() const { return static_cast<int>(minima.size()) + 1; }
};

// Gaussian-kernel density on a uniform grid; interior local minima of the
// density split the one-dimensional data into clusters ranked by time.
// Bandwidth is Silverman's rule h = 0.9 * min(sd, IQR/1.34) * n^(-1/5).
inline KdeClustering kde_cluster(const std::vector<double>& times, int grid_points = 512) {
    if (times.size() < 2) throw std::invalid_argument("kde_cluster: need at least 2 values");
    KdeClustering out;
    out.clusters.assign(times.size(), 0);

    const double lo_value = *std::min_element(times.begin(), times.end());
    const double hi_value = *std::max_element(times.begin(), times.end());
    if (lo_value == hi_value) return out;  // one point mass: single cluster, no minima

    const double sd = sample_stddev(times);
    const double iqr = interquartile_range(times);
    double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
    const double n = static_cast<double>(times.size());
    out.bandwidth = 0.9 * spread * std::pow(n, -0.2);

    // Silverman's rule presumes continuous data. A noise-free channel yields
    // a handful of exact point masses, where the global-spread bandwidth can
    // swallow a lightly-populated mass next to a heavy one; cap the bandwidth
    // by the smallest gap between distinct values in that regime.
    std::vector<double> uniq(times);
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    if (uniq.size() <= 64) {
        double min_gap = hi_value - lo_value;
        for (std::size_t i = 1; i < uniq.size(); ++i)
            min_gap = std::min(min_gap, uniq[i] - uniq[i - 1]);
        out.bandwidth = std::min(out.bandwidth, min_gap / 6.0);
    }

    const double lo = lo_value - 3.0 * out.bandwidth;
    const double hi = hi_value + 3.0 * out.bandwidth;
    out.grid.resize(grid_points);
    out.density.assign(grid_points, 0.0);
    const double step = (hi - lo) / (grid_points - 1);
    for (int i = 0; i < grid_points; ++i) out.grid[i] = lo + i * step;
    const double norm = 1.0 / (n * out.bandwidth * std::sqrt(2.0 * M_PI));
    for (double t : times) {
        for (int i = 0; i < grid_points; ++i) {
            const double u = (out.grid[i] - t) / out.bandwidth;
            out.density[i] += norm * std::exp(-0.5 * u * u);
        }
    }

    // interior minima, plateau-aware: a run of equal density values counts
    // once, with the boundary placed at its midpoint
    int i = 1;
    while (i < grid_points - 1) {
        int j = i;
        while (j + 1 < grid_points - 1 && out.density[j + 1] == out.density[i]) ++j;
        if (out.density[i - 1] > out.density[i] && out.density[j + 1] > out.density[j])
            out.minima.push_back(out.grid[(i + j) / 2]);
        i = j + 1;
    }

    for (std::size_t s = 0; s < times.size(); ++s) {
        int cluster = 0;
        for (double cut : out.minima) cluster += times[s] > cut;
        out.clusters[s] = cluster;
    }
    return out;
}

struct TimingTraceRow {
    int sample_id = 0;
    double mean_time_ms = 0.0;
    int n_queries = 1;
    int predicted_exit = -1;
    int true_exit = 0;  // ground truth, held for scoring only
};

struct TimingTrace {
    std::vector<TimingTraceRow> rows;
};

inline void write_trace_csv(const TimingTrace& trace, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_trace_csv: cannot open " + path);
    out << "sample_id,mean_time_ms,n_queries,predicted_exit,true_exit\n";
    char buf[64];
    for (const auto& row : trace.rows) {
        std::snprintf(buf, sizeof(buf), "%.17g", row.mean_time_ms);
        out << row.sample_id << ',' << buf << ',' << row.n_queries << ',' << row.predicted_exit
            << ',' << row.true_exit << '\n';
    }
}

struct ExitStealResult {
    int predicted_n_exits = 0;
    std::vector<int> per_sample_exit;
    double accuracy = 0.0;
    bool all_exits_observed = true;  // false = some exit never fired in the probe set
    TimingTrace trace;
    KdeClustering clustering;
};

// Time-based hyperparameter stealing: average noisy queries per sample,
// cluster the averaged times, and read cluster rank as exit depth.
inline ExitStealResult steal_exit_depths(const TimingModel& tm, const MultiExitModel& model,
                                         const Matrix& probe_x, int n_queries, Rng& rng,
                                         int max_clusters = 8) {
    if (probe_x.rows() < 2) throw std::invalid_argument("steal_exit_depths: probe set too small");
    ExitStealResult res;
    const std::vector<int> true_exits = taken_exits(model, probe_x);

    std::vector<bool> seen(model.n_exits(), false);
    for (int e : true_exits) seen[e] = true;
    res.all_exits_observed = std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });

    std::vector<double> times(true_exits.size());
    for (std::size_t i = 0; i < true_exits.size(); ++i)
        times[i] = measure_exit(tm, true_exits[i], n_queries, rng);

    res.clustering = kde_cluster(times);
    if (res.clustering.n_clusters() > max_clusters)
        throw ClusteringFailed("kde produced " + std::to_string(res.clustering.n_clusters()) +
                               " clusters (max " + std::to_string(max_clusters) +
                               "); raise n_queries to suppress channel noise");

    res.predicted_n_exits = res.clustering.n_clusters();
    res.per_sample_exit = res.clustering.clusters;
    int correct = 0;
    for (std::size_t i = 0; i < true_exits.size(); ++i)
        correct += res.per_sample_exit[i] == true_exits[i];
    res.accuracy = static_cast<double>(correct) / static_cast<double>(true_exits.size());

    res.trace.rows.reserve(times.size());
    for (std::size_t i = 0; i < times.size(); ++i)
        res.trace.rows.push_back({static_cast<int>(i), times[i], n_queries, res.per_sample_exit[i],
                                  true_exits[i]});
    return res;
}

struct QueryPlan {
    double delta_t = 0.0;
    double sigma = 0.0;
    double z_star = 1.96;
    int n_required = 1;
};

// Lower bound on the per-sample query count that separates two adjacent
// exits at the requested confidence:
//   Z = (t1 - t2) / (sigma * sqrt(2/N))  =>  N = 2 * (z* * sigma / dt)^2
inline QueryPlan plan_queries(double delta_t, double sigma, double confidence = 0.95) {
    if (delta_t <= 0.0) throw std::invalid_argument("plan_queries: delta_t must be > 0");
    if (sigma < 0.0) throw std::invalid_argument("plan_queries: sigma must be >= 0");
    QueryPlan plan;
    plan.delta_t = delta_t;
    plan.sigma = sigma;
    plan.z_star = confidence == 0.95 ? 1.96 : normal_quantile(0.5 + confidence / 2.0);
    const double ratio = plan.z_star * sigma / delta_t;
    plan.n_required = std::max(1, static_cast<int>(std::ceil(2.0 * ratio * ratio)));
    return plan;
}

// Sample standard deviation of repeated single queries on one sample; the
// estimate reflects the observed (truncated) noise distribution.
inline double estimate_sigma(const TimingModel& tm, const MultiExitModel& model, const Vector& x,
                             int n_probe, Rng& rng) {
    if (n_probe < 2) throw std::invalid_argument("estimate_sigma: need at least 2 probes");
    const int exit_index = model.predict_early(x).exit_index;
    std::vector<double> times(n_probe);
    for (int i = 0; i < n_probe; ++i) times[i] = measure_once(tm, exit_index, rng);
    return sample_stddev(times);
}

}  // namespace exitaudit
