#pragma once

// Test-only oracles, kept independent of the library code paths they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "exitaudit/dataset.hpp"
#include "exitaudit/nn.hpp"
#include "exitaudit/rng.hpp"

namespace oracles {

// Central finite differences on the train-mode joint loss, against the
// analytic gradients, over every trainable parameter entry. Returns the
// worst relative error seen.
inline double max_gradient_rel_err(exitaudit::MultiExitModel& model, const exitaudit::Matrix& xb,
                                   const std::vector<int>& yb, double step = 1e-4) {
    model.zero_grads();
    model.joint_batch_loss(xb, yb, true, false);
    std::vector<exitaudit::Matrix> analytic;
    for (auto* p : model.params()) analytic.push_back(p->grad);

    double worst = 0.0;
    auto params = model.params();
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& value = params[pi]->value;
        for (int r = 0; r < value.rows(); ++r) {
            for (int c = 0; c < value.cols(); ++c) {
                const double orig = value(r, c);
                value(r, c) = orig + step;
                const double lp = model.joint_batch_loss(xb, yb, false, false);
                value(r, c) = orig - step;
                const double lm = model.joint_batch_loss(xb, yb, false, false);
                value(r, c) = orig;
                const double fd = (lp - lm) / (2.0 * step);
                const double a = analytic[pi](r, c);
                const double rel =
                    std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-2});
                worst = std::max(worst, rel);
            }
        }
    }
    return worst;
}

// Same check for last_layer_gradient: perturb the taken exit's final dense
// layer and difference the eval-mode cross-entropy at that exit.
inline double max_last_layer_grad_rel_err(exitaudit::MultiExitModel& model,
                                          const exitaudit::Vector& x, int label, int exit_index,
                                          double step = 1e-4) {
    const exitaudit::Vector analytic = exitaudit::last_layer_gradient(model, x, label, exit_index);
    exitaudit::DenseLayer* last = exit_index + 1 < model.n_exits()
                                      ? &model.heads[exit_index].l2
                                      : &model.classifier.l3;
    auto loss_at_exit = [&]() {
        const auto ev = model.eval_all_exits(x.transpose());
        return exitaudit::cross_entropy(ev.probs[exit_index].row(0), label);
    };
    const int c = last->out_dim();
    const int h = last->in_dim();
    double worst = 0.0;
    auto probe = [&](double& theta, double analytic_value) {
        const double orig = theta;
        theta = orig + step;
        const double lp = loss_at_exit();
        theta = orig - step;
        const double lm = loss_at_exit();
        theta = orig;
        const double fd = (lp - lm) / (2.0 * step);
        const double rel =
            std::abs(analytic_value - fd) / std::max({std::abs(analytic_value), std::abs(fd), 1e-2});
        worst = std::max(worst, rel);
    };
    for (int i = 0; i < c; ++i)
        for (int j = 0; j < h; ++j) probe(last->weight.value(i, j), analytic(i * h + j));
    for (int i = 0; i < c; ++i) probe(last->bias.value(0, i), analytic(c * h + i));
    return worst;
}

// Brute-force nearest-prototype classifier. Prototypes are recovered from
// the data by per-class majority vote, so the oracle sees only the dataset.
inline double nearest_prototype_accuracy(const exitaudit::TabularDataset& ds) {
    const int d = ds.dim();
    exitaudit::Matrix votes = exitaudit::Matrix::Zero(ds.n_classes, d);
    std::vector<int> counts(ds.n_classes, 0);
    for (int i = 0; i < ds.n(); ++i) {
        votes.row(ds.labels[i]) += ds.features.row(i);
        ++counts[ds.labels[i]];
    }
    exitaudit::Matrix prototypes(ds.n_classes, d);
    for (int c = 0; c < ds.n_classes; ++c)
        for (int j = 0; j < d; ++j)
            prototypes(c, j) = votes(c, j) * 2.0 > counts[c] ? 1.0 : 0.0;

    int correct = 0;
    for (int i = 0; i < ds.n(); ++i) {
        int best = -1;
        double best_dist = 1e300;
        for (int c = 0; c < ds.n_classes; ++c) {
            const double dist = (ds.features.row(i) - prototypes.row(c)).squaredNorm();
            if (dist < best_dist) {
                best_dist = dist;
                best = c;
            }
        }
        correct += best == ds.labels[i];
    }
    return static_cast<double>(correct) / ds.n();
}

inline exitaudit::Matrix majority_vote_prototypes(const exitaudit::TabularDataset& ds) {
    exitaudit::Matrix votes = exitaudit::Matrix::Zero(ds.n_classes, ds.dim());
    std::vector<int> counts(ds.n_classes, 0);
    for (int i = 0; i < ds.n(); ++i) {
        votes.row(ds.labels[i]) += ds.features.row(i);
        ++counts[ds.labels[i]];
    }
    exitaudit::Matrix prototypes(ds.n_classes, ds.dim());
    for (int c = 0; c < ds.n_classes; ++c)
        for (int j = 0; j < ds.dim(); ++j)
            prototypes(c, j) = votes(c, j) * 2.0 > counts[c] ? 1.0 : 0.0;
    return prototypes;
}

// Plain logistic-regression fit (binary, full-batch gradient descent),
// independent of the library's training path.
inline double logistic_fit_accuracy(const exitaudit::Matrix& x, const std::vector<int>& y,
                                    int iterations = 2000, double lr = 0.5) {
    const int n = static_cast<int>(x.rows());
    const int d = static_cast<int>(x.cols());
    exitaudit::Vector w = exitaudit::Vector::Zero(d);
    double b = 0.0;
    for (int it = 0; it < iterations; ++it) {
        exitaudit::Vector gw = exitaudit::Vector::Zero(d);
        double gb = 0.0;
        for (int i = 0; i < n; ++i) {
            const double z = x.row(i).dot(w) + b;
            const double p = 1.0 / (1.0 + std::exp(-z));
            const double err = p - static_cast<double>(y[i]);
            gw += err * x.row(i).transpose();
            gb += err;
        }
        w -= lr / n * gw;
        b -= lr / n * gb;
    }
    int correct = 0;
    for (int i = 0; i < n; ++i) {
        const double z = x.row(i).dot(w) + b;
        correct += (z > 0.0 ? 1 : 0) == y[i];
    }
    return static_cast<double>(correct) / n;
}

// Jensen-Shannon divergence (base 2) between two normal densities via
// Simpson quadrature, an analytic-path oracle for the histogram estimator.
inline double js_two_gaussians_quadrature(double mu1, double mu2, double sigma) {
    const double lo = std::min(mu1, mu2) - 10.0 * sigma;
    const double hi = std::max(mu1, mu2) + 10.0 * sigma;
    const int n = 20000;  // even
    const double h = (hi - lo) / n;
    auto pdf = [sigma](double x, double mu) {
        const double z = (x - mu) / sigma;
        return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * M_PI));
    };
    auto integrand = [&](double x) {
        const double p = pdf(x, mu1);
        const double q = pdf(x, mu2);
        const double m = 0.5 * (p + q);
        double acc = 0.0;
        if (p > 0.0 && m > 0.0) acc += 0.5 * p * std::log2(p / m);
        if (q > 0.0 && m > 0.0) acc += 0.5 * q * std::log2(q / m);
        return acc;
    };
    double sum = integrand(lo) + integrand(hi);
    for (int i = 1; i < n; ++i) sum += integrand(lo + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
    return sum * h / 3.0;
}

// Independent arithmetic route for the query planner's closed form.
inline int plan_queries_reference(double delta_t, double sigma, double z_star) {
    const double ratio = z_star * sigma / delta_t;
    const double n = 2.0 * ratio * ratio;
    int out = static_cast<int>(n);
    if (static_cast<double>(out) < n) ++out;
    return std::max(1, out);
}

// Monte-Carlo standard deviation of the truncated-positive Gaussian channel.
inline double truncated_gaussian_std_mc(double mu, double sigma, int n, std::uint64_t seed) {
    exitaudit::Rng rng(seed);
    std::vector<double> draws(n);
    for (int i = 0; i < n; ++i) draws[i] = rng.truncated_positive_gaussian(mu, sigma);
    double m = 0.0;
    for (double v : draws) m += v;
    m /= n;
    double acc = 0.0;
    for (double v : draws) acc += (v - m) * (v - m);
    return std::sqrt(acc / (n - 1));
}

}  // namespace oracles
