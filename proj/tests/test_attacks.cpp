#include <catch2/catch_amalgamated.hpp>

#include <numeric>

#include "exitaudit/attacks.hpp"
#include "exitaudit/stats.hpp"
#include "oracles.hpp"

using namespace exitaudit;

namespace {

// classes interleaved row-wise so any contiguous slice is class-balanced
TabularDataset blob_task(int n_per_class, double spread, std::uint64_t seed, int n_classes = 2,
                         int dim = 8) {
    TabularDataset ds;
    ds.n_classes = n_classes;
    ds.features.resize(n_per_class * n_classes, dim);
    ds.labels.resize(n_per_class * n_classes);
    Rng rng(seed);
    for (int row = 0; row < n_per_class * n_classes; ++row) {
        const int c = row % n_classes;
        ds.labels[row] = c;
        for (int j = 0; j < dim; ++j)
            ds.features(row, j) = rng.gaussian() * spread + (j % n_classes == c ? 1.5 : -1.5);
    }
    return ds;
}

MultiExitModel trained_toy_model(const TabularDataset& ds, const std::vector<int>& train_idx,
                                 int n_exits, std::uint64_t seed, int epochs = 80) {
    ModelConfig cfg;
    cfg.input_dim = ds.dim();
    cfg.n_classes = ds.n_classes;
    cfg.n_blocks = 3;
    cfg.hidden_width = 16;
    cfg.head_hidden = 8;
    cfg.n_exits = n_exits;
    cfg.tau = 0.8;
    Rng rng(seed);
    MultiExitModel model(cfg, rng);
    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = 32;
    tc.seed = derive_seed(seed, "train");
    train_joint(model, rows(ds.features, train_idx), gather(ds.labels, train_idx), tc);
    return model;
}

std::vector<int> range_idx(int lo, int hi) {
    std::vector<int> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    return idx;
}

}  // namespace

TEST_CASE("attack dataset is balanced by truncation and tracks exits") {
    const auto ds = blob_task(40, 0.8, 1);
    auto model = trained_toy_model(ds, range_idx(0, 30), 3, 2, 30);

    const auto members = range_idx(0, 30);
    const auto nonmembers = range_idx(30, 76);  // larger side gets truncated
    AttackBuildOptions opts;
    opts.exit_source = ExitSource::direct;
    const auto attack_ds = build_attack_dataset(model, ds, members, nonmembers, opts);
    CHECK(attack_ds.size() == 60);
    CHECK(std::accumulate(attack_ds.is_member.begin(), attack_ds.is_member.end(), 0) == 30);
    REQUIRE(attack_ds.has_exit_onehot());
    CHECK(attack_ds.exit_onehot.cols() == 3);

    // exit one-hot agrees with forward_full's taken exit, record by record
    for (int i = 0; i < attack_ds.size(); ++i) {
        const int src = i < 30 ? members[i] : nonmembers[i - 30];
        const auto rec = model.forward_full(ds.features.row(src), ds.labels[src]);
        int onehot_argmax = 0;
        attack_ds.exit_onehot.row(i).maxCoeff(&onehot_argmax);
        REQUIRE(onehot_argmax == rec.taken_exit);
        REQUIRE(attack_ds.taken_exit[i] == rec.taken_exit);
        REQUIRE(attack_ds.loss(i) == Catch::Approx(rec.per_exit_loss[rec.taken_exit]));
    }
}

TEST_CASE("exit source none leaves the exit one-hot absent") {
    const auto ds = blob_task(30, 0.6, 3);
    auto model = trained_toy_model(ds, range_idx(0, 20), 2, 4, 20);
    const auto attack_ds =
        build_attack_dataset(model, ds, range_idx(0, 20), range_idx(20, 40), {});
    CHECK_FALSE(attack_ds.has_exit_onehot());
    CHECK_FALSE(attack_ds.record(0).exit_onehot.has_value());
    CHECK(attack_ds.record(0).is_member == 1);
    CHECK(attack_ds.record(attack_ds.size() - 1).is_member == 0);

    CHECK_THROWS_AS(build_attack_dataset(model, ds, {}, range_idx(0, 5), {}),
                    std::invalid_argument);
}

TEST_CASE("exit one-hot widens the attack model input by the exit count") {
    const auto ds = blob_task(30, 0.6, 5);
    auto model = trained_toy_model(ds, range_idx(0, 20), 3, 6, 20);
    AttackBuildOptions opts;
    opts.exit_source = ExitSource::direct;
    const auto with_exit = build_attack_dataset(model, ds, range_idx(0, 20), range_idx(20, 40), opts);
    const auto without = build_attack_dataset(model, ds, range_idx(0, 20), range_idx(20, 40), {});
    auto total_dim = [](const AttackDataset& a) {
        return a.score.cols() + a.exit_onehot.cols();
    };
    CHECK(total_dim(with_exit) - total_dim(without) == model.n_exits());
}

TEST_CASE("separable gradient-mode records train to near-perfect ASR") {
    // loss carries the whole signal: 0 for members, 10 for non-members
    Rng rng(7);
    const int m = 150;
    AttackDataset ds;
    ds.mode = AttackMode::gradient_based;
    ds.score.resize(2 * m, 4);
    ds.penult.resize(2 * m, 6);
    ds.grad.resize(2 * m, 10);
    ds.label_onehot.setZero(2 * m, 4);
    ds.loss.resize(2 * m);
    for (int i = 0; i < 2 * m; ++i) {
        for (int j = 0; j < 4; ++j) ds.score(i, j) = 0.25;
        for (int j = 0; j < 6; ++j) ds.penult(i, j) = rng.gaussian();
        for (int j = 0; j < 10; ++j) ds.grad(i, j) = rng.gaussian();
        ds.label_onehot(i, static_cast<int>(rng.below(4))) = 1.0;
        ds.loss(i) = i < m ? 0.0 : 10.0;
    }
    ds.is_member.assign(m, 1);
    ds.is_member.insert(ds.is_member.end(), m, 0);
    ds.taken_exit.assign(2 * m, 0);

    ClassifierTrainConfig cfg;
    cfg.epochs = 30;
    cfg.seed = 8;
    const auto model = train_attack_model(ds, cfg);
    CHECK(run_inference_attack(model, ds) >= 0.99);
}

TEST_CASE("label-permuted records carry no signal") {
    Rng rng(9);
    const int m = 400;
    AttackDataset train_ds, test_ds;
    for (AttackDataset* ds : {&train_ds, &test_ds}) {
        ds->mode = AttackMode::score_based;
        ds->score.resize(2 * m, 5);
        ds->label_onehot.setZero(2 * m, 5);
        ds->loss.resize(2 * m);
        for (int i = 0; i < 2 * m; ++i) {
            for (int j = 0; j < 5; ++j) ds->score(i, j) = rng.uniform();
            ds->score.row(i) /= ds->score.row(i).sum();
            ds->label_onehot(i, static_cast<int>(rng.below(5))) = 1.0;
            ds->loss(i) = rng.uniform();
        }
        ds->is_member.assign(m, 1);
        ds->is_member.insert(ds->is_member.end(), m, 0);
        ds->taken_exit.assign(2 * m, 0);
    }
    ClassifierTrainConfig cfg;
    cfg.epochs = 20;
    cfg.seed = 10;
    const auto model = train_attack_model(train_ds, cfg);
    const double asr = run_inference_attack(model, test_ds);
    CHECK(asr > 0.45);
    CHECK(asr < 0.55);
}

TEST_CASE("training refuses all-one-class records") {
    AttackDataset ds;
    ds.score.resize(10, 3);
    ds.score.setConstant(1.0 / 3);
    ds.label_onehot.setZero(10, 3);
    ds.loss.setZero(10);
    ds.is_member.assign(10, 1);
    ds.taken_exit.assign(10, 0);
    ClassifierTrainConfig cfg;
    CHECK_THROWS_AS(train_attack_model(ds, cfg), std::invalid_argument);
}

TEST_CASE("a constant membership predictor scores one half on balanced data") {
    const auto ds = blob_task(30, 0.6, 11);
    auto model = trained_toy_model(ds, range_idx(0, 20), 2, 12, 15);
    const auto attack_ds =
        build_attack_dataset(model, ds, range_idx(0, 20), range_idx(20, 40), {});
    ClassifierTrainConfig cfg;
    cfg.epochs = 1;
    cfg.seed = 13;
    auto attack = train_attack_model(attack_ds, cfg);
    // force the head to always call "member"
    attack.net.head.layers.back().bias.value(0, 1) = 1e6;
    CHECK(run_inference_attack(attack, attack_ds) == 0.5);
}

TEST_CASE("perturbation magnitude saturates on a constant-output model") {
    const auto ds = blob_task(20, 0.6, 14);
    auto model = trained_toy_model(ds, range_idx(0, 10), 2, 15, 5);
    // pin every exit to class 0 regardless of input
    for (auto& head : model.heads) head.l2.bias.value(0, 0) = 1e6;
    model.classifier.l3.bias.value(0, 0) = 1e6;

    Rng rng(16);
    const auto dirs = make_directions(ds.dim(), 10, rng);
    PerturbationParams params;
    params.s_max = 3.0;
    const double mag = perturbation_magnitude(model, ds.features.row(0), dirs, params);
    CHECK(mag == 3.0);
}

TEST_CASE("perturbation magnitude is invariant to direction order") {
    const auto ds = blob_task(20, 0.8, 17);
    auto model = trained_toy_model(ds, range_idx(0, 20), 2, 18, 40);
    Rng rng(19);
    Matrix dirs = make_directions(ds.dim(), 6, rng);
    PerturbationParams params;
    params.s_max = 5.0 * feature_std(ds.features);
    const double a = perturbation_magnitude(model, ds.features.row(3), dirs, params);
    Matrix reversed = dirs.colwise().reverse();
    const double b = perturbation_magnitude(model, ds.features.row(3), reversed, params);
    CHECK(a == Catch::Approx(b));
}

TEST_CASE("members sit farther from the boundary than non-members") {
    // overlap-heavy task memorized by an over-capacity model
    const auto ds = blob_task(60, 1.6, 20);
    const auto train_idx = range_idx(0, 25);
    const auto test_idx = range_idx(60, 85);
    auto model = trained_toy_model(ds, train_idx, 2, 21, 150);
    REQUIRE(early_exit_accuracy(model, rows(ds.features, train_idx), gather(ds.labels, train_idx)) >
            0.95);

    Rng rng(22);
    const auto dirs = make_directions(ds.dim(), 10, rng);
    PerturbationParams params;
    params.s_max = 5.0 * feature_std(ds.features);
    const auto member_mags = perturbation_magnitudes(model, rows(ds.features, train_idx), dirs, params);
    const auto nonmember_mags =
        perturbation_magnitudes(model, rows(ds.features, test_idx), dirs, params);
    CHECK(exitaudit::mean(member_mags) > exitaudit::mean(nonmember_mags));
}

TEST_CASE("identical magnitude distributions give chance-level label-only ASR") {
    LabelOnlyInputs inputs;
    Rng rng(23);
    for (int i = 0; i < 500; ++i) {
        const double v = rng.uniform();
        inputs.member_magnitudes.push_back(v);
        inputs.nonmember_magnitudes.push_back(v);
        inputs.member_exits.push_back(0);
        inputs.nonmember_exits.push_back(0);
    }
    const auto dec = derive_label_only_decision(inputs, 1, false, {});
    const auto res = evaluate_label_only(inputs, dec, 1);
    CHECK(res.asr == Catch::Approx(0.5));
}

TEST_CASE("per-exit mode on a vanilla model reduces to the global attack") {
    LabelOnlyInputs shadow, target;
    Rng rng(24);
    for (int i = 0; i < 200; ++i) {
        shadow.member_magnitudes.push_back(rng.gaussian(2.0, 0.5));
        shadow.nonmember_magnitudes.push_back(rng.gaussian(1.0, 0.5));
        target.member_magnitudes.push_back(rng.gaussian(2.0, 0.5));
        target.nonmember_magnitudes.push_back(rng.gaussian(1.0, 0.5));
        shadow.member_exits.push_back(0);
        shadow.nonmember_exits.push_back(0);
        target.member_exits.push_back(0);
        target.nonmember_exits.push_back(0);
    }
    const auto global_dec = derive_label_only_decision(shadow, 1, false, {});
    const auto per_exit_dec = derive_label_only_decision(shadow, 1, true, {});
    const double a = evaluate_label_only(target, global_dec, 1).asr;
    const double b = evaluate_label_only(target, per_exit_dec, 1).asr;
    CHECK(a == Catch::Approx(b));
    CHECK(a > 0.7);
}

TEST_CASE("small shadow buckets fall back to the global threshold") {
    LabelOnlyInputs shadow;
    Rng rng(25);
    for (int i = 0; i < 100; ++i) {
        shadow.member_magnitudes.push_back(rng.gaussian(2.0, 0.3));
        shadow.nonmember_magnitudes.push_back(rng.gaussian(1.0, 0.3));
        shadow.member_exits.push_back(0);
        shadow.nonmember_exits.push_back(0);
    }
    // a couple of stragglers at exit 1: below the 10-sample floor
    shadow.member_magnitudes.push_back(5.0);
    shadow.member_exits.push_back(1);
    shadow.nonmember_magnitudes.push_back(0.1);
    shadow.nonmember_exits.push_back(1);

    const auto dec = derive_label_only_decision(shadow, 2, true, {});
    REQUIRE(dec.bucket_fallback.size() == 2);
    CHECK_FALSE(dec.bucket_fallback[0]);
    CHECK(dec.bucket_fallback[1]);
    CHECK(dec.per_exit_thresholds[1] == dec.global_threshold);
}

TEST_CASE("count_exits reports max observed index plus one") {
    CHECK(count_exits({0, 0, 0}) == 1);
    CHECK(count_exits({0, 2, 1, 2}) == 3);
    CHECK_THROWS_AS(count_exits(std::vector<int>{}), std::invalid_argument);

    // monotone in probe-set size: prefixes never see a larger maximum
    const std::vector<int> stream = {0, 1, 0, 3, 2, 1, 4, 0};
    int prev = 0;
    for (std::size_t n = 1; n <= stream.size(); ++n) {
        const int k = count_exits({stream.begin(), stream.begin() + n});
        REQUIRE(k >= prev);
        prev = k;
    }

    const auto ds = blob_task(30, 0.6, 26);
    auto vanilla = trained_toy_model(ds, range_idx(0, 20), 1, 27, 10);
    CHECK(count_exits(vanilla, ds.features) == 1);
}

TEST_CASE("exit classifier on random score/exit pairs performs at chance") {
    Rng rng(28);
    const int n = 1500, k = 4;
    Matrix scores(n, 6);
    std::vector<int> exits(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < 6; ++j) scores(i, j) = rng.uniform();
        scores.row(i) /= scores.row(i).sum();
        exits[i] = static_cast<int>(rng.below(k));
    }
    Rng net_rng(29);
    Mlp net({6, 256, 128, 64, k}, net_rng, false);
    ClassifierTrainConfig cfg;
    cfg.epochs = 15;
    cfg.seed = 30;
    train_mlp_classifier(net, scores.topRows(1200), {exits.begin(), exits.begin() + 1200}, cfg);
    const Matrix logits = net.apply(scores.bottomRows(300));
    int correct = 0;
    for (int r = 0; r < 300; ++r) {
        int am = 0;
        logits.row(r).maxCoeff(&am);
        correct += am == exits[1200 + r];
    }
    const double acc = static_cast<double>(correct) / 300.0;
    CHECK(acc > 1.0 / k - 0.1);
    CHECK(acc < 1.0 / k + 0.1);
}

TEST_CASE("adaptive exit classifier runs end to end on a trained shadow model") {
    const auto ds = blob_task(120, 1.2, 31, 4, 12);
    const auto train_idx = range_idx(0, 160);
    auto model = trained_toy_model(ds, train_idx, 3, 32, 60);
    model.tau = 0.8;
    ClassifierTrainConfig cfg;
    cfg.epochs = 25;
    cfg.seed = 33;
    const auto clf = adaptive_exit_classifier(model, ds.features, cfg);
    CHECK(clf.holdout_accuracy >= 0.0);
    CHECK(clf.holdout_accuracy <= 1.0);
    CHECK(clf.predict(Matrix::Constant(5, 4, 0.25)).size() == 5);
}

TEST_CASE("attack dataset csv export has one row per record") {
    const auto ds = blob_task(20, 0.6, 34);
    auto model = trained_toy_model(ds, range_idx(0, 10), 2, 35, 5);
    AttackBuildOptions opts;
    opts.exit_source = ExitSource::direct;
    const auto attack_ds = build_attack_dataset(model, ds, range_idx(0, 10), range_idx(10, 20), opts);
    const std::string path = "/tmp/exitaudit_test_attack.csv";
    write_attack_csv(attack_ds, path);
    std::ifstream in(path);
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) ++lines;
    CHECK(lines == attack_ds.size() + 1);
    std::remove(path.c_str());
}

TEST_CASE("white-box dominance on an overfit task: gradient >= score >= chance") {
    // small but genuinely overfit setup so the knowledge ordering shows
    SynthConfig sc;
    sc.n_classes = 20;
    sc.n_features = 80;
    sc.samples_per_class = 40;
    sc.prototype_flip_prob = 0.3;
    sc.seed = 41;
    const auto ds = synth_generate(sc);
    const auto split = split_four(ds.n(), 42);

    auto train_one = [&](const std::vector<int>& idx, std::uint64_t seed) {
        ModelConfig mc;
        mc.input_dim = 80;
        mc.n_classes = 20;
        mc.n_blocks = 5;
        mc.hidden_width = 48;
        mc.head_hidden = 16;
        mc.n_exits = 3;
        mc.tau = 0.8;
        Rng rng(seed);
        MultiExitModel m(mc, rng);
        TrainConfig tc;
        tc.epochs = 20;
        tc.batch_size = 64;
        tc.seed = derive_seed(seed, "train");
        train_joint(m, rows(ds.features, idx), gather(ds.labels, idx), tc);
        return m;
    };
    auto target = train_one(split.target_train, 43);
    auto shadow = train_one(split.shadow_train, 44);

    ClassifierTrainConfig cc;
    cc.epochs = 20;
    cc.seed = 45;
    auto asr_for = [&](AttackMode mode) {
        AttackBuildOptions opts;
        opts.mode = mode;
        const auto train_ds =
            build_attack_dataset(shadow, ds, split.shadow_train, split.shadow_test, opts);
        const auto attack = train_attack_model(train_ds, cc);
        const auto eval_ds =
            build_attack_dataset(target, ds, split.target_train, split.target_test, opts);
        return run_inference_attack(attack, eval_ds);
    };
    const double score = asr_for(AttackMode::score_based);
    const double gradient = asr_for(AttackMode::gradient_based);
    INFO("score " << score << " gradient " << gradient);
    CHECK(score >= 0.5 - 0.02);
    CHECK(gradient >= score - 0.03);
}

TEST_CASE("white-box features can be pinned to the final exit") {
    const auto ds = blob_task(30, 0.8, 50);
    auto model = trained_toy_model(ds, range_idx(0, 30), 3, 51, 30);
    AttackBuildOptions taken_opts;
    taken_opts.mode = AttackMode::gradient_based;
    AttackBuildOptions final_opts = taken_opts;
    final_opts.features_at_final_exit = true;
    const auto at_taken =
        build_attack_dataset(model, ds, range_idx(0, 30), range_idx(30, 60), taken_opts);
    const auto at_final =
        build_attack_dataset(model, ds, range_idx(0, 30), range_idx(30, 60), final_opts);

    // taken_exit bookkeeping is unchanged; features follow the flag
    CHECK(at_final.taken_exit == at_taken.taken_exit);
    bool saw_early_exit = false;
    for (int i = 0; i < at_taken.size(); ++i) {
        const int e = at_taken.taken_exit[i];
        if (e == model.n_exits() - 1) {
            REQUIRE(at_final.score.row(i) == at_taken.score.row(i));
        } else {
            saw_early_exit = true;
            const auto rec = model.forward_full(
                i < 30 ? ds.features.row(i) : ds.features.row(30 + (i - 30)),
                std::nullopt);
            REQUIRE((at_final.score.row(i).transpose() -
                     rec.per_exit_probs[model.n_exits() - 1])
                        .cwiseAbs()
                        .maxCoeff() < 1e-12);
        }
    }
    CHECK(saw_early_exit);
}
