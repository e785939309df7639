#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "exitaudit/nn.hpp"

namespace exitaudit {

// Dense stack with ReLU between layers; optionally after the last layer too
// (branch encoders emit non-negative embeddings, heads emit raw logits).
class Mlp {
public:
    std::vector<DenseLayer> layers;
    bool relu_after_last = false;

    Mlp() = default;
    Mlp(const std::vector<int>& dims, Rng& rng, bool relu_last = false)
        : relu_after_last(relu_last) {
        if (dims.size() < 2) throw std::invalid_argument("mlp: need at least input and output dims");
        for (std::size_t i = 0; i + 1 < dims.size(); ++i)
            layers.emplace_back(dims[i], dims[i + 1], rng);
    }

    int in_dim() const { return layers.front().in_dim(); }
    int out_dim() const { return layers.back().out_dim(); }

    Matrix apply(const Matrix& x) const {
        Matrix h = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            h = layers[i].apply(h);
            if (i + 1 < layers.size() || relu_after_last) h = h.cwiseMax(0.0);
        }
        return h;
    }

    Matrix forward_train(const Matrix& x) {
        pre_.resize(layers.size());
        Matrix h = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            pre_[i] = layers[i].forward_train(h);
            h = (i + 1 < layers.size() || relu_after_last) ? pre_[i].cwiseMax(0.0) : pre_[i];
        }
        return h;
    }

    Matrix backward(const Matrix& dy) {
        Matrix d = dy;
        for (std::size_t i = layers.size(); i-- > 0;) {
            if (i + 1 < layers.size() || relu_after_last)
                d = (pre_[i].array() > 0.0).select(d, 0.0);
            d = layers[i].backward(d);
        }
        return d;
    }

    void collect_params(std::vector<Param*>& out) {
        for (auto& l : layers) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        }
    }

private:
    std::vector<Matrix> pre_;
};

// One 2-layer encoder per input component, embeddings concatenated into a
// 4-layer head.
class BranchNet {
public:
    std::vector<Mlp> branches;
    Mlp head;
    int branch_out = 64;

    BranchNet() = default;
    BranchNet(const std::vector<int>& input_dims, int n_out, Rng& rng, int branch_hidden = 128,
              int branch_out_dim = 64)
        : branch_out(branch_out_dim) {
        for (int in : input_dims)
            branches.emplace_back(std::vector<int>{in, branch_hidden, branch_out_dim}, rng, true);
        const int concat = static_cast<int>(input_dims.size()) * branch_out_dim;
        head = Mlp({concat, 256, 128, 64, n_out}, rng, false);
    }

    int n_inputs() const { return static_cast<int>(branches.size()); }

    Matrix apply(const std::vector<Matrix>& inputs) const {
        Matrix concat = concat_embeddings(inputs, [&](std::size_t i, const Matrix& x) {
            return branches[i].apply(x);
        });
        return head.apply(concat);
    }

    Matrix forward_train(const std::vector<Matrix>& inputs) {
        Matrix concat = concat_embeddings(inputs, [&](std::size_t i, const Matrix& x) {
            return branches[i].forward_train(x);
        });
        return head.forward_train(concat);
    }

    void backward(const Matrix& dlogits) {
        const Matrix dconcat = head.backward(dlogits);
        for (std::size_t i = 0; i < branches.size(); ++i)
            branches[i].backward(dconcat.middleCols(static_cast<int>(i) * branch_out, branch_out));
    }

    std::vector<Param*> params() {
        std::vector<Param*> out;
        for (auto& b : branches) b.collect_params(out);
        head.collect_params(out);
        return out;
    }

private:
    template <typename Fn>
    Matrix concat_embeddings(const std::vector<Matrix>& inputs, Fn&& encode) const {
        if (inputs.size() != branches.size())
            throw ShapeError("branch net: expected " + std::to_string(branches.size()) +
                             " inputs, got " + std::to_string(inputs.size()));
        Matrix concat(inputs[0].rows(), static_cast<int>(branches.size()) * branch_out);
        for (std::size_t i = 0; i < inputs.size(); ++i)
            concat.middleCols(static_cast<int>(i) * branch_out, branch_out) =
                encode(i, inputs[i]);
        return concat;
    }

    template <typename Fn>
    Matrix concat_embeddings(const std::vector<Matrix>& inputs, Fn&& encode) {
        if (inputs.size() != branches.size())
            throw ShapeError("branch net: expected " + std::to_string(branches.size()) +
                             " inputs, got " + std::to_string(inputs.size()));
        Matrix concat(inputs[0].rows(), static_cast<int>(branches.size()) * branch_out);
        for (std::size_t i = 0; i < inputs.size(); ++i)
            concat.middleCols(static_cast<int>(i) * branch_out, branch_out) =
                encode(i, inputs[i]);
        return concat;
    }
};

struct ClassifierTrainConfig {
    int epochs = 40;
    int batch_size = 128;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
};

inline void adam_update(std::vector<Param*>& params, long step,
                        const ClassifierTrainConfig& cfg) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (Param* p : params) {
        p->m = cfg.beta1 * p->m + (1.0 - cfg.beta1) * p->grad;
        p->v = cfg.beta2 * p->v + (1.0 - cfg.beta2) * p->grad.cwiseProduct(p->grad);
        p->value.array() -= cfg.learning_rate * (p->m.array() / bc1) /
                            ((p->v.array() / bc2).sqrt() + cfg.adam_eps);
    }
}

// Cross-entropy Adam training for a plain Mlp classifier.
inline std::vector<double> train_mlp_classifier(Mlp& net, const Matrix& x,
                                                const std::vector<int>& y,
                                                const ClassifierTrainConfig& cfg) {
    const int n = static_cast<int>(x.rows());
    if (n == 0) throw std::invalid_argument("train_mlp_classifier: empty dataset");
    Rng rng(cfg.seed);
    std::vector<Param*> params;
    net.collect_params(params);
    std::vector<double> epoch_losses;
    long step = 0;
    const int bs = std::max(1, cfg.batch_size);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = rng.permutation(n);
        double loss_sum = 0.0;
        int batches = 0;
        for (int start = 0; start < n; start += bs) {
            const int count = std::min(bs, n - start);
            Matrix xb(count, x.cols());
            std::vector<int> yb(count);
            for (int i = 0; i < count; ++i) {
                xb.row(i) = x.row(order[start + i]);
                yb[i] = y[order[start + i]];
            }
            for (Param* p : params) p->grad.setZero();
            Matrix probs = softmax_rows(net.forward_train(xb));
            double loss = 0.0;
            for (int r = 0; r < count; ++r) loss += cross_entropy(probs.row(r), yb[r]);
            loss /= count;
            if (!std::isfinite(loss)) throw TrainingDiverged(epoch);
            for (int r = 0; r < count; ++r) probs(r, yb[r]) -= 1.0;
            net.backward(probs / count);
            adam_update(params, ++step, cfg);
            loss_sum += loss;
            ++batches;
        }
        epoch_losses.push_back(loss_sum / std::max(1, batches));
    }
    return epoch_losses;
}

}  // namespace exitaudit
