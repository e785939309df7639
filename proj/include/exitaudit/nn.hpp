#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "exitaudit/dataset.hpp"
#include "exitaudit/rng.hpp"

namespace exitaudit {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingDiverged : std::runtime_error {
    explicit TrainingDiverged(int epoch)
        : std::runtime_error("training diverged: loss became non-finite at epoch " +
                             std::to_string(epoch)),
          epoch(epoch) {}
    int epoch;
};

struct SerializationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Trainable tensor with its gradient and Adam state.
struct Param {
    Matrix value, grad, m, v;

    void setup(int rows, int cols) {
        value.setZero(rows, cols);
        grad.setZero(rows, cols);
        m.setZero(rows, cols);
        v.setZero(rows, cols);
    }
};

inline Matrix softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (int i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        out.row(i) = (logits.row(i).array() - mx).exp();
        out.row(i) /= out.row(i).sum();
    }
    return out;
}

inline double cross_entropy(const Eigen::RowVectorXd& probs, int label) {
    return -std::log(std::max(probs(label), 1e-300));
}

class DenseLayer {
public:
    Param weight;  // out x in
    Param bias;    // 1 x out

    DenseLayer() = default;
    DenseLayer(int in_dim, int out_dim, Rng& rng) {
        weight.setup(out_dim, in_dim);
        bias.setup(1, out_dim);
        const double limit = std::sqrt(6.0 / (in_dim + out_dim));
        for (int r = 0; r < out_dim; ++r)
            for (int c = 0; c < in_dim; ++c) weight.value(r, c) = rng.uniform(-limit, limit);
    }

    int in_dim() const { return static_cast<int>(weight.value.cols()); }
    int out_dim() const { return static_cast<int>(weight.value.rows()); }

    Matrix apply(const Matrix& x) const {
        return (x * weight.value.transpose()).rowwise() + bias.value.row(0);
    }

    Matrix forward_train(const Matrix& x) {
        input_ = x;
        return apply(x);
    }

    Matrix backward(const Matrix& dy) {
        weight.grad.noalias() += dy.transpose() * input_;
        bias.grad.row(0) += dy.colwise().sum();
        return dy * weight.value;
    }

    std::uint64_t op_count() const {
        // 2*in*out multiply-adds counted separately, plus out bias additions
        return 2ULL * in_dim() * out_dim() + static_cast<std::uint64_t>(out_dim());
    }

private:
    Matrix input_;
};

// 1-d batch normalization. Training uses batch statistics (biased variance
// for the normalization, unbiased for the running update, PyTorch
// convention); eval depends only on the running statistics.
class NormLayer {
public:
    Param gamma, beta;              // 1 x dim
    Matrix running_mean;            // 1 x dim
    Matrix running_var;             // 1 x dim
    double epsilon = 1e-5;
    double momentum = 0.1;

    NormLayer() = default;
    explicit NormLayer(int dim) {
        gamma.setup(1, dim);
        beta.setup(1, dim);
        gamma.value.setOnes();
        running_mean.setZero(1, dim);
        running_var.setOnes(1, dim);
    }

    int dim() const { return static_cast<int>(gamma.value.cols()); }

    Matrix apply(const Matrix& x) const {
        const Eigen::RowVectorXd invstd =
            (running_var.row(0).array() + epsilon).sqrt().inverse().matrix();
        Matrix xhat = (x.rowwise() - running_mean.row(0)).array().rowwise() * invstd.array();
        return (xhat.array().rowwise() * gamma.value.row(0).array()).rowwise() +
               beta.value.row(0).array();
    }

    Matrix forward_train(const Matrix& x, bool update_running) {
        const int b = static_cast<int>(x.rows());
        const Eigen::RowVectorXd mu = x.colwise().mean();
        Matrix centered = x.rowwise() - mu;
        const Eigen::RowVectorXd var = centered.array().square().colwise().mean();
        invstd_ = (var.array() + epsilon).sqrt().inverse().matrix();
        xhat_ = centered.array().rowwise() * invstd_.array();
        if (update_running) {
            const double unbias = b > 1 ? static_cast<double>(b) / (b - 1) : 1.0;
            running_mean.row(0) = (1.0 - momentum) * running_mean.row(0) + momentum * mu;
            running_var.row(0) = (1.0 - momentum) * running_var.row(0) + momentum * (unbias * var);
        }
        return (xhat_.array().rowwise() * gamma.value.row(0).array()).rowwise() +
               beta.value.row(0).array();
    }

    Matrix backward(const Matrix& dy) {
        const double b = static_cast<double>(dy.rows());
        gamma.grad.row(0) += (dy.array() * xhat_.array()).colwise().sum().matrix();
        beta.grad.row(0) += dy.colwise().sum();
        Matrix dxhat = dy.array().rowwise() * gamma.value.row(0).array();
        const Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
        const Eigen::RowVectorXd sum_dxhat_xhat = (dxhat.array() * xhat_.array()).colwise().sum();
        Matrix dx = b * dxhat;
        dx.rowwise() -= sum_dxhat;
        dx -= (xhat_.array().rowwise() * sum_dxhat_xhat.array()).matrix();
        dx.array().rowwise() *= (invstd_.array() / b);
        return dx;
    }

    std::uint64_t op_count() const { return 4ULL * dim(); }

private:
    Matrix xhat_;
    Eigen::RowVectorXd invstd_;
};

// Linear -> BatchNorm -> ReLU
class Block {
public:
    DenseLayer dense;
    NormLayer norm;

    Block() = default;
    Block(int in_dim, int out_dim, Rng& rng) : dense(in_dim, out_dim, rng), norm(out_dim) {}

    Matrix apply(const Matrix& x) const { return norm.apply(dense.apply(x)).cwiseMax(0.0); }

    Matrix forward_train(const Matrix& x, bool update_running) {
        pre_ = norm.forward_train(dense.forward_train(x), update_running);
        return pre_.cwiseMax(0.0);
    }

    Matrix backward(const Matrix& dy) {
        Matrix masked = (pre_.array() > 0.0).select(dy, 0.0);
        return dense.backward(norm.backward(masked));
    }

    std::uint64_t op_count() const {
        return dense.op_count() + norm.op_count() + static_cast<std::uint64_t>(dense.out_dim());
    }

    // smallest |rectifier input| on the last cached train-mode pass
    double kink_clearance() const { return pre_.cwiseAbs().minCoeff(); }

private:
    Matrix pre_;
};

// Dense -> ReLU -> Dense; logits out. Also used for the stages of the final
// classifier so every exit path ends in a dense layer of the same input
// width (attack feature dimensions stay uniform across exits).
class ExitHead {
public:
    DenseLayer l1, l2;

    ExitHead() = default;
    ExitHead(int in_dim, int hidden, int n_classes, Rng& rng)
        : l1(in_dim, hidden, rng), l2(hidden, n_classes, rng) {}

    Matrix apply(const Matrix& x) const { return l2.apply(l1.apply(x).cwiseMax(0.0)); }

    // post-ReLU activation entering the last dense layer
    Matrix last_input(const Matrix& x) const { return l1.apply(x).cwiseMax(0.0); }

    Matrix forward_train(const Matrix& x) {
        pre_ = l1.forward_train(x);
        return l2.forward_train(pre_.cwiseMax(0.0));
    }

    Matrix backward(const Matrix& dy) {
        Matrix d1 = l2.backward(dy);
        Matrix masked = (pre_.array() > 0.0).select(d1, 0.0);
        return l1.backward(masked);
    }

    std::uint64_t op_count() const {
        return l1.op_count() + static_cast<std::uint64_t>(l1.out_dim()) + l2.op_count();
    }

    double kink_clearance() const { return pre_.cwiseAbs().minCoeff(); }

private:
    Matrix pre_;
};

class FinalClassifier {
public:
    DenseLayer l1, l2, l3;

    FinalClassifier() = default;
    FinalClassifier(int in_dim, int mid, int hidden, int n_classes, Rng& rng)
        : l1(in_dim, mid, rng), l2(mid, hidden, rng), l3(hidden, n_classes, rng) {}

    Matrix apply(const Matrix& x) const {
        return l3.apply(l2.apply(l1.apply(x).cwiseMax(0.0)).cwiseMax(0.0));
    }

    Matrix last_input(const Matrix& x) const {
        return l2.apply(l1.apply(x).cwiseMax(0.0)).cwiseMax(0.0);
    }

    Matrix forward_train(const Matrix& x) {
        pre1_ = l1.forward_train(x);
        pre2_ = l2.forward_train(pre1_.cwiseMax(0.0));
        return l3.forward_train(pre2_.cwiseMax(0.0));
    }

    Matrix backward(const Matrix& dy) {
        Matrix d2 = l3.backward(dy);
        Matrix m2 = (pre2_.array() > 0.0).select(d2, 0.0);
        Matrix d1 = l2.backward(m2);
        Matrix m1 = (pre1_.array() > 0.0).select(d1, 0.0);
        return l1.backward(m1);
    }

    std::uint64_t op_count() const {
        return l1.op_count() + static_cast<std::uint64_t>(l1.out_dim()) + l2.op_count() +
               static_cast<std::uint64_t>(l2.out_dim()) + l3.op_count();
    }

    double kink_clearance() const {
        return std::min(pre1_.cwiseAbs().minCoeff(), pre2_.cwiseAbs().minCoeff());
    }

private:
    Matrix pre1_, pre2_;
};

struct ModelConfig {
    int input_dim = 0;
    int n_classes = 0;
    int n_blocks = 5;
    int hidden_width = 256;
    int head_hidden = 64;
    int n_exits = 1;  // 1 = vanilla, internal heads = n_exits - 1
    double tau = 1.0;
};

// Internal heads attached after blocks at rounded linear spacing; the
// backbone's own classifier is always the last exit.
inline std::vector<int> exit_attach_indices(int n_blocks, int n_exits) {
    std::vector<int> attach;
    for (int j = 1; j < n_exits; ++j) {
        const int consumed = static_cast<int>(
            std::ceil(static_cast<double>(j) * n_blocks / static_cast<double>(n_exits)));
        attach.push_back(consumed - 1);
    }
    // guard strict increase for non-default block counts
    for (std::size_t i = 1; i < attach.size(); ++i)
        attach[i] = std::max(attach[i], attach[i - 1] + 1);
    for (int& a : attach) a = std::min(a, n_blocks - 1);
    return attach;
}

struct ForwardRecord {
    std::vector<Vector> per_exit_probs;
    std::vector<double> per_exit_loss;  // present only when a label was given
    Vector penultimate_feature;         // input to the exit module that fired
    int taken_exit = 0;
    int predicted_label = 0;
};

struct EarlyExit {
    Vector probs;
    int label = 0;
    int exit_index = 0;
};

// Batched eval-mode quantities for every exit; feature matrices are filled
// only when requested.
struct BatchExitEval {
    std::vector<Matrix> probs;         // per exit: n x C
    std::vector<Matrix> module_input;  // per exit: n x W, input to the exit module
    std::vector<Matrix> last_input;    // per exit: n x H, input to the exit's last dense layer
};

class MultiExitModel {
public:
    ModelConfig cfg;
    std::vector<Block> blocks;
    std::vector<ExitHead> heads;
    FinalClassifier classifier;
    std::vector<int> attach;  // attach[j] = block index whose output feeds head j
    double tau = 1.0;
    std::vector<std::uint64_t> ops_per_exit;

    MultiExitModel() = default;

    MultiExitModel(const ModelConfig& config, Rng& rng) : cfg(config), tau(config.tau) {
        if (cfg.input_dim < 1 || cfg.n_classes < 2)
            throw std::invalid_argument("model config: need input_dim >= 1 and n_classes >= 2");
        if (cfg.n_exits < 1 || cfg.n_exits > cfg.n_blocks + 1)
            throw std::invalid_argument("model config: n_exits must be in [1, n_blocks + 1]");
        attach = exit_attach_indices(cfg.n_blocks, cfg.n_exits);
        blocks.reserve(cfg.n_blocks);
        for (int i = 0; i < cfg.n_blocks; ++i)
            blocks.emplace_back(i == 0 ? cfg.input_dim : cfg.hidden_width, cfg.hidden_width, rng);
        for (std::size_t j = 0; j < attach.size(); ++j)
            heads.emplace_back(cfg.hidden_width, cfg.head_hidden, cfg.n_classes, rng);
        classifier = FinalClassifier(cfg.hidden_width, cfg.hidden_width, cfg.head_hidden,
                                     cfg.n_classes, rng);
        compute_ops();
    }

    int n_exits() const { return cfg.n_exits; }

    std::vector<Param*> params() {
        std::vector<Param*> out;
        for (auto& b : blocks) {
            out.push_back(&b.dense.weight);
            out.push_back(&b.dense.bias);
            out.push_back(&b.norm.gamma);
            out.push_back(&b.norm.beta);
        }
        for (auto& h : heads) {
            out.push_back(&h.l1.weight);
            out.push_back(&h.l1.bias);
            out.push_back(&h.l2.weight);
            out.push_back(&h.l2.bias);
        }
        for (DenseLayer* l : {&classifier.l1, &classifier.l2, &classifier.l3}) {
            out.push_back(&l->weight);
            out.push_back(&l->bias);
        }
        return out;
    }

    void check_input(const Matrix& x) const {
        if (static_cast<int>(x.cols()) != cfg.input_dim)
            throw ShapeError("input has " + std::to_string(x.cols()) + " features, model expects " +
                             std::to_string(cfg.input_dim));
    }

    BatchExitEval eval_all_exits(const Matrix& x, bool want_features = false) const {
        check_input(x);
        BatchExitEval ev;
        ev.probs.reserve(cfg.n_exits);
        if (want_features) {
            ev.module_input.reserve(cfg.n_exits);
            ev.last_input.reserve(cfg.n_exits);
        }
        Matrix h = x;
        std::size_t j = 0;
        for (int i = 0; i < cfg.n_blocks; ++i) {
            h = blocks[i].apply(h);
            if (j < attach.size() && attach[j] == i) {
                ev.probs.push_back(softmax_rows(heads[j].apply(h)));
                if (want_features) {
                    ev.module_input.push_back(h);
                    ev.last_input.push_back(heads[j].last_input(h));
                }
                ++j;
            }
        }
        ev.probs.push_back(softmax_rows(classifier.apply(h)));
        if (want_features) {
            ev.module_input.push_back(h);
            ev.last_input.push_back(classifier.last_input(h));
        }
        return ev;
    }

    // First exit (in depth order) whose top-class probability reaches tau;
    // the final exit otherwise.
    int taken_exit_for_row(const BatchExitEval& ev, int row) const {
        for (int e = 0; e + 1 < cfg.n_exits; ++e)
            if (ev.probs[e].row(row).maxCoeff() >= tau) return e;
        return cfg.n_exits - 1;
    }

    ForwardRecord forward_full(const Vector& x, std::optional<int> label = std::nullopt) const {
        const auto ev = eval_all_exits(x.transpose(), true);
        ForwardRecord rec;
        rec.per_exit_probs.reserve(cfg.n_exits);
        for (int e = 0; e < cfg.n_exits; ++e) rec.per_exit_probs.push_back(ev.probs[e].row(0));
        if (label) {
            if (*label < 0 || *label >= cfg.n_classes)
                throw ShapeError("label out of range: " + std::to_string(*label));
            for (int e = 0; e < cfg.n_exits; ++e)
                rec.per_exit_loss.push_back(cross_entropy(ev.probs[e].row(0), *label));
        }
        rec.taken_exit = taken_exit_for_row(ev, 0);
        rec.penultimate_feature = ev.module_input[rec.taken_exit].row(0);
        int argmax = 0;
        rec.per_exit_probs[rec.taken_exit].maxCoeff(&argmax);
        rec.predicted_label = argmax;
        return rec;
    }

    // Early-terminating single-sample inference: deeper exits are not computed.
    EarlyExit predict_early(const Vector& x) const {
        check_input(x.transpose());
        Matrix h = x.transpose();
        std::size_t j = 0;
        for (int i = 0; i < cfg.n_blocks; ++i) {
            h = blocks[i].apply(h);
            if (j < attach.size() && attach[j] == i) {
                Matrix p = softmax_rows(heads[j].apply(h));
                if (p.row(0).maxCoeff() >= tau) {
                    EarlyExit out;
                    out.probs = p.row(0);
                    p.row(0).maxCoeff(&out.label);
                    out.exit_index = static_cast<int>(j);
                    return out;
                }
                ++j;
            }
        }
        Matrix p = softmax_rows(classifier.apply(h));
        EarlyExit out;
        out.probs = p.row(0);
        p.row(0).maxCoeff(&out.label);
        out.exit_index = cfg.n_exits - 1;
        return out;
    }

    void zero_grads() {
        for (Param* p : params()) p->grad.setZero();
    }

    // Joint loss over all exits on one batch: sum over exits of the
    // batch-mean cross-entropy. Fills gradients when accumulate is set.
    double joint_batch_loss(const Matrix& xb, const std::vector<int>& yb, bool accumulate,
                            bool update_running) {
        check_input(xb);
        const int b = static_cast<int>(xb.rows());
        Matrix h = xb;
        std::vector<Matrix> logits(cfg.n_exits);
        std::size_t j = 0;
        for (int i = 0; i < cfg.n_blocks; ++i) {
            h = blocks[i].forward_train(h, update_running);
            if (j < attach.size() && attach[j] == i) {
                logits[j] = heads[j].forward_train(h);
                ++j;
            }
        }
        logits[cfg.n_exits - 1] = classifier.forward_train(h);

        double loss = 0.0;
        std::vector<Matrix> dlogits(cfg.n_exits);
        for (int e = 0; e < cfg.n_exits; ++e) {
            Matrix probs = softmax_rows(logits[e]);
            for (int r = 0; r < b; ++r) loss += cross_entropy(probs.row(r), yb[r]);
            if (accumulate) {
                for (int r = 0; r < b; ++r) probs(r, yb[r]) -= 1.0;
                dlogits[e] = probs / static_cast<double>(b);
            }
        }
        loss /= static_cast<double>(b);

        if (accumulate) {
            Matrix dh = classifier.backward(dlogits[cfg.n_exits - 1]);
            int next_head = static_cast<int>(attach.size()) - 1;
            for (int i = cfg.n_blocks - 1; i >= 0; --i) {
                if (next_head >= 0 && attach[next_head] == i) {
                    dh += heads[next_head].backward(dlogits[next_head]);
                    --next_head;
                }
                dh = blocks[i].backward(dh);
            }
        }
        return loss;
    }

    // Distance of the closest cached rectifier input to its kink, from the
    // last joint_batch_loss pass. Gradient checks difference the loss across
    // a step, which is only meaningful away from the kinks; probes landing
    // closer than the step size should be redrawn.
    double kink_clearance() const {
        double clearance = std::numeric_limits<double>::infinity();
        for (const auto& b : blocks) clearance = std::min(clearance, b.kink_clearance());
        for (const auto& h : heads) clearance = std::min(clearance, h.kink_clearance());
        clearance = std::min(clearance, classifier.kink_clearance());
        return clearance;
    }

private:
    void compute_ops() {
        ops_per_exit.assign(cfg.n_exits, 0);
        std::vector<std::uint64_t> backbone_prefix(cfg.n_blocks);
        std::uint64_t acc = 0;
        for (int i = 0; i < cfg.n_blocks; ++i) {
            acc += blocks[i].op_count();
            backbone_prefix[i] = acc;
        }
        for (std::size_t j = 0; j < attach.size(); ++j)
            ops_per_exit[j] = backbone_prefix[attach[j]] + heads[j].op_count();
        ops_per_exit[cfg.n_exits - 1] = backbone_prefix[cfg.n_blocks - 1] + classifier.op_count();
        for (int e = 0; e + 1 < cfg.n_exits; ++e)
            if (ops_per_exit[e] >= ops_per_exit[e + 1])
                throw std::logic_error("ops_per_exit must be strictly increasing");
    }
};

// Cumulative operation count up to and including the given exit.
inline std::uint64_t count_ops(const MultiExitModel& model, int exit_index) {
    if (exit_index < 0 || exit_index >= model.n_exits())
        throw std::out_of_range("count_ops: exit index out of range");
    return model.ops_per_exit[exit_index];
}

struct TrainConfig {
    int epochs = 100;
    int batch_size = 128;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
};

// Joint multi-exit training: Adam on the unweighted sum of per-exit
// cross-entropies. Returns the per-epoch mean joint loss.
inline std::vector<double> train_joint(MultiExitModel& model, const Matrix& x,
                                       const std::vector<int>& y, const TrainConfig& cfg) {
    if (cfg.epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (x.rows() != static_cast<long>(y.size()))
        throw ShapeError("train_joint: feature rows and label count differ");
    for (int label : y)
        if (label < 0 || label >= model.cfg.n_classes)
            throw std::invalid_argument("train_joint: label out of range");

    const int n = static_cast<int>(x.rows());
    const int bs = std::max(1, cfg.batch_size);
    Rng rng(cfg.seed);
    auto all_params = model.params();
    std::vector<double> epoch_losses;
    epoch_losses.reserve(cfg.epochs);
    long adam_step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<int> order = rng.permutation(n);
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
            model.zero_grads();
            const double loss = model.joint_batch_loss(xb, yb, true, true);
            if (!std::isfinite(loss)) throw TrainingDiverged(epoch);
            loss_sum += loss;
            ++batches;

            ++adam_step;
            const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam_step));
            const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam_step));
            for (Param* p : all_params) {
                p->m = cfg.beta1 * p->m + (1.0 - cfg.beta1) * p->grad;
                p->v = cfg.beta2 * p->v + (1.0 - cfg.beta2) * p->grad.cwiseProduct(p->grad);
                p->value.array() -= cfg.learning_rate * (p->m.array() / bc1) /
                                    ((p->v.array() / bc2).sqrt() + cfg.adam_eps);
            }
        }
        epoch_losses.push_back(loss_sum / std::max(1, batches));
    }
    return epoch_losses;
}

// Flattened gradient of the cross-entropy at one exit with respect to that
// exit's final dense layer: the weight block row-major, then the bias.
inline Vector last_layer_gradient(const MultiExitModel& model, const Vector& x, int label,
                                  int exit_index) {
    if (exit_index < 0 || exit_index >= model.n_exits())
        throw std::out_of_range("last_layer_gradient: exit index out of range");
    const auto ev = model.eval_all_exits(x.transpose(), true);
    const Eigen::RowVectorXd probs = ev.probs[exit_index].row(0);
    Eigen::RowVectorXd dlogits = probs;
    dlogits(label) -= 1.0;
    const Eigen::RowVectorXd a = ev.last_input[exit_index].row(0);
    const int c = static_cast<int>(dlogits.size());
    const int h = static_cast<int>(a.size());
    Vector out(c * h + c);
    for (int i = 0; i < c; ++i)
        for (int j = 0; j < h; ++j) out(i * h + j) = dlogits(i) * a(j);
    for (int i = 0; i < c; ++i) out(c * h + i) = dlogits(i);
    return out;
}

inline std::vector<int> taken_exits(const MultiExitModel& model, const Matrix& x) {
    const auto ev = model.eval_all_exits(x);
    std::vector<int> exits(x.rows());
    for (int r = 0; r < x.rows(); ++r) exits[r] = model.taken_exit_for_row(ev, r);
    return exits;
}

inline std::vector<int> early_exit_predictions(const MultiExitModel& model, const Matrix& x,
                                               std::vector<int>* exits_out = nullptr) {
    const auto ev = model.eval_all_exits(x);
    std::vector<int> preds(x.rows());
    if (exits_out) exits_out->resize(x.rows());
    for (int r = 0; r < x.rows(); ++r) {
        const int e = model.taken_exit_for_row(ev, r);
        int argmax = 0;
        ev.probs[e].row(r).maxCoeff(&argmax);
        preds[r] = argmax;
        if (exits_out) (*exits_out)[r] = e;
    }
    return preds;
}

inline double early_exit_accuracy(const MultiExitModel& model, const Matrix& x,
                                  const std::vector<int>& y) {
    const auto preds = early_exit_predictions(model, x);
    int correct = 0;
    for (std::size_t i = 0; i < y.size(); ++i) correct += preds[i] == y[i];
    return static_cast<double>(correct) / static_cast<double>(y.size());
}

struct ThresholdChoice {
    double tau = 1.0;
    bool fallback = false;  // no grid value met the accuracy bar
};

// Smallest tau on {0, 0.05, ..., 1.0} whose early-exit holdout accuracy is
// within `slack` of the vanilla reference accuracy.
inline ThresholdChoice select_threshold(MultiExitModel& model, const Matrix& x,
                                        const std::vector<int>& y, double reference_accuracy,
                                        double slack = 0.005) {
    if (x.rows() == 0) throw std::invalid_argument("select_threshold: empty holdout set");
    const auto ev = model.eval_all_exits(x);
    const int n = static_cast<int>(x.rows());
    const int k = model.n_exits();
    Matrix maxprob(n, k);
    Eigen::MatrixXi argmax(n, k);
    for (int e = 0; e < k; ++e)
        for (int r = 0; r < n; ++r) {
            int am = 0;
            maxprob(r, e) = ev.probs[e].row(r).maxCoeff(&am);
            argmax(r, e) = am;
        }
    for (int step = 0; step <= 20; ++step) {
        const double tau = 0.05 * step;
        int correct = 0;
        for (int r = 0; r < n; ++r) {
            int e = k - 1;
            for (int cand = 0; cand + 1 < k; ++cand)
                if (maxprob(r, cand) >= tau) {
                    e = cand;
                    break;
                }
            correct += argmax(r, e) == y[static_cast<std::size_t>(r)];
        }
        const double acc = static_cast<double>(correct) / n;
        if (acc >= reference_accuracy - slack) {
            model.tau = tau;
            return {tau, false};
        }
    }
    model.tau = 1.0;
    return {1.0, true};
}

namespace detail {

inline void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

inline void write_f64(std::ostream& out, double v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline double read_f64(std::istream& in) {
    double v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

inline void write_matrix(std::ostream& out, const Matrix& m) {
    write_u64(out, static_cast<std::uint64_t>(m.rows()));
    write_u64(out, static_cast<std::uint64_t>(m.cols()));
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) write_f64(out, m(r, c));
}

inline Matrix read_matrix(std::istream& in) {
    const auto rowcount = read_u64(in);
    const auto colcount = read_u64(in);
    Matrix m(static_cast<int>(rowcount), static_cast<int>(colcount));
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) m(r, c) = read_f64(in);
    return m;
}

inline void write_dense(std::ostream& out, const DenseLayer& l) {
    write_matrix(out, l.weight.value);
    write_matrix(out, l.bias.value);
}

inline void read_dense(std::istream& in, DenseLayer& l) {
    l.weight.value = read_matrix(in);
    l.bias.value = read_matrix(in);
    l.weight.grad.setZero(l.weight.value.rows(), l.weight.value.cols());
    l.weight.m = l.weight.grad;
    l.weight.v = l.weight.grad;
    l.bias.grad.setZero(1, l.bias.value.cols());
    l.bias.m = l.bias.grad;
    l.bias.v = l.bias.grad;
}

}  // namespace detail

inline constexpr char kModelMagic[8] = {'X', 'A', 'M', 'O', 'D', 'E', 'L', '1'};

// Self-describing binary model file: architecture descriptor, tau, ops
// table, then all parameters row-major. Round-trips bit-exactly.
inline void save_model(const MultiExitModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw SerializationError("save_model: cannot open " + path);
    out.write(kModelMagic, sizeof(kModelMagic));
    detail::write_u64(out, static_cast<std::uint64_t>(model.cfg.input_dim));
    detail::write_u64(out, static_cast<std::uint64_t>(model.cfg.n_classes));
    detail::write_u64(out, static_cast<std::uint64_t>(model.cfg.n_blocks));
    detail::write_u64(out, static_cast<std::uint64_t>(model.cfg.hidden_width));
    detail::write_u64(out, static_cast<std::uint64_t>(model.cfg.head_hidden));
    detail::write_u64(out, static_cast<std::uint64_t>(model.cfg.n_exits));
    for (int a : model.attach) detail::write_u64(out, static_cast<std::uint64_t>(a));
    detail::write_f64(out, model.tau);
    for (std::uint64_t ops : model.ops_per_exit) detail::write_u64(out, ops);
    for (const auto& b : model.blocks) {
        detail::write_dense(out, b.dense);
        detail::write_matrix(out, b.norm.gamma.value);
        detail::write_matrix(out, b.norm.beta.value);
        detail::write_matrix(out, b.norm.running_mean);
        detail::write_matrix(out, b.norm.running_var);
        detail::write_f64(out, b.norm.epsilon);
        detail::write_f64(out, b.norm.momentum);
    }
    for (const auto& h : model.heads) {
        detail::write_dense(out, h.l1);
        detail::write_dense(out, h.l2);
    }
    detail::write_dense(out, model.classifier.l1);
    detail::write_dense(out, model.classifier.l2);
    detail::write_dense(out, model.classifier.l3);
    if (!out) throw SerializationError("save_model: write failed for " + path);
}

inline MultiExitModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SerializationError("load_model: cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kModelMagic, sizeof(magic)) != 0)
        throw SerializationError("load_model: " + path + " is not a model file");

    MultiExitModel model;
    model.cfg.input_dim = static_cast<int>(detail::read_u64(in));
    model.cfg.n_classes = static_cast<int>(detail::read_u64(in));
    model.cfg.n_blocks = static_cast<int>(detail::read_u64(in));
    model.cfg.hidden_width = static_cast<int>(detail::read_u64(in));
    model.cfg.head_hidden = static_cast<int>(detail::read_u64(in));
    model.cfg.n_exits = static_cast<int>(detail::read_u64(in));
    model.attach.resize(model.cfg.n_exits - 1);
    for (int& a : model.attach) a = static_cast<int>(detail::read_u64(in));
    model.tau = detail::read_f64(in);
    model.cfg.tau = model.tau;
    model.ops_per_exit.resize(model.cfg.n_exits);
    for (auto& ops : model.ops_per_exit) ops = detail::read_u64(in);

    model.blocks.resize(model.cfg.n_blocks);
    for (auto& b : model.blocks) {
        detail::read_dense(in, b.dense);
        b.norm.gamma.value = detail::read_matrix(in);
        b.norm.beta.value = detail::read_matrix(in);
        b.norm.running_mean = detail::read_matrix(in);
        b.norm.running_var = detail::read_matrix(in);
        b.norm.epsilon = detail::read_f64(in);
        b.norm.momentum = detail::read_f64(in);
        b.norm.gamma.grad.setZero(1, b.norm.gamma.value.cols());
        b.norm.gamma.m = b.norm.gamma.grad;
        b.norm.gamma.v = b.norm.gamma.grad;
        b.norm.beta.grad.setZero(1, b.norm.beta.value.cols());
        b.norm.beta.m = b.norm.beta.grad;
        b.norm.beta.v = b.norm.beta.grad;
    }
    model.heads.resize(model.cfg.n_exits - 1);
    for (auto& h : model.heads) {
        detail::read_dense(in, h.l1);
        detail::read_dense(in, h.l2);
    }
    detail::read_dense(in, model.classifier.l1);
    detail::read_dense(in, model.classifier.l2);
    detail::read_dense(in, model.classifier.l3);
    if (!in) throw SerializationError("load_model: truncated file " + path);
    return model;
}

}  // namespace exitaudit
