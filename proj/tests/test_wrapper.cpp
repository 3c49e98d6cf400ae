#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedwrap/wrapper.hpp"

using namespace fedwrap;

namespace {

Dataset blobs(std::size_t n, std::size_t dim, double sep, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 0.3);
    Dataset d;
    d.in_dim = dim;
    d.n_classes = 2;
    std::vector<double> x(dim);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = static_cast<int>(i % 2);
        for (double& v : x) v = nd(rng) + (y ? sep : -sep);
        d.push_back(x, y, i);
    }
    return d;
}

Model zero_model(ModelSpec s) {
    Model m = init_model(s, 0);
    m.params = zero_params(s);
    return m;
}

WrapperConfig config_for(Model local, Dataset train) {
    WrapperConfig cfg;
    cfg.client_id = "0";
    cfg.clients = {"1", "2"};
    cfg.local_model = LocalModelHandle::from_model(std::move(local));
    cfg.train_dataset = std::move(train);
    cfg.translator = translator_spec_for(cfg, ModelKind::Mlp3, 16);
    cfg.train.learning_rate = 0.1;
    cfg.train.batch_size = 8;
    return cfg;
}

std::vector<double> random_x(std::size_t dim, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    std::vector<double> x(dim);
    for (double& v : x) v = nd(rng);
    return x;
}

double sum(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s;
}

} // namespace

TEST(StackingInput, ProbsWidth) {
    auto cfg = config_for(init_model(ModelSpec::logistic(4, 2), 1), blobs(10, 4, 1, 1));
    std::vector<double> x{1, 2, 3, 4};
    auto s = build_stacking_input(cfg, x);
    ASSERT_EQ(s.size(), 6u);
    EXPECT_EQ(cfg.stack_in_dim(), 6u);
    EXPECT_EQ(std::vector<double>(s.begin(), s.begin() + 4), x);
}

TEST(StackingInput, HiddenPaddedTruncatesAndKeeps) {
    std::vector<double> x{0.3, -0.2, 1.0, 0.5};
    auto wide = config_for(init_model(ModelSpec::mlp3(4, 18, 2), 2), blobs(10, 4, 1, 1));
    wide.feature_mode = FeatureMode::hidden_padded(16);
    auto feats = forward(*wide.local_model.model, x).features;
    auto s = build_stacking_input(wide, x);
    ASSERT_EQ(s.size(), 20u);
    EXPECT_EQ(std::vector<double>(s.begin() + 4, s.end()),
              std::vector<double>(feats.begin(), feats.begin() + 16));

    auto exact = config_for(init_model(ModelSpec::mlp3(4, 16, 2), 3), blobs(10, 4, 1, 1));
    exact.feature_mode = FeatureMode::hidden_padded(16);
    auto f16 = forward(*exact.local_model.model, x).features;
    auto s16 = build_stacking_input(exact, x);
    EXPECT_EQ(std::vector<double>(s16.begin() + 4, s16.end()), f16);

    auto lr = config_for(init_model(ModelSpec::logistic(4, 2), 3), blobs(10, 4, 1, 1));
    lr.feature_mode = FeatureMode::hidden_padded(5);
    auto slr = build_stacking_input(lr, x);
    EXPECT_EQ(slr[7], 0.0);
    EXPECT_EQ(slr[8], 0.0);
}

TEST(StackingInput, ZeroLocalModelAppendsUniform) {
    auto cfg = config_for(zero_model(ModelSpec::logistic(3, 2)), blobs(10, 3, 1, 1));
    std::vector<double> x{0.1, 7.0, -2.0};
    EXPECT_EQ(build_stacking_input(cfg, x), (std::vector<double>{0.1, 7.0, -2.0, 0.5, 0.5}));
}

TEST(StackingInput, BlackBoxRejectsHiddenMode) {
    auto cfg = config_for(init_model(ModelSpec::logistic(2, 2), 1), blobs(10, 2, 1, 1));
    cfg.local_model = LocalModelHandle::black_box(
        [](std::span<const double>) { return std::vector<double>{0.3, 0.7}; }, 2, 2, "tree");
    cfg.feature_mode = FeatureMode::hidden_padded(4);
    std::vector<double> x{1, 1};
    EXPECT_THROW(build_stacking_input(cfg, x), UnsupportedModelError);
    cfg.feature_mode = FeatureMode::probs();
    EXPECT_EQ(build_stacking_input(cfg, x), (std::vector<double>{1, 1, 0.3, 0.7}));
}

TEST(StackingInput, WidthHomogeneousAcrossArchitectures) {
    const ModelSpec specs[] = {ModelSpec::logistic(6, 2), ModelSpec::mlp3(6, 16, 2),
                               ModelSpec::mlp3(6, 18, 2), ModelSpec::mlp3(6, 24, 2)};
    for (const auto& s : specs) {
        auto cfg = config_for(init_model(s, 4), blobs(10, 6, 1, 1));
        EXPECT_EQ(cfg.stack_in_dim(), 8u);
        EXPECT_EQ(translator_spec_for(cfg, ModelKind::Mlp3, 16), ModelSpec::mlp3(8, 16, 2));
    }
}

TEST(Stacking, ZeroLearningRateReturnsGlobal) {
    auto cfg = config_for(init_model(ModelSpec::logistic(3, 2), 1), blobs(20, 3, 1, 2));
    cfg.train.learning_rate = 0.0;
    auto state = make_stacking_state(cfg, 5);
    auto global = init_model(cfg.translator, 99).params;
    auto upd = stacking_train_round(state, cfg, global, 1);
    EXPECT_TRUE(bitwise_equal(upd.params, global));
    EXPECT_EQ(upd.n_samples, 20u);
    EXPECT_EQ(state.rounds_completed, 1u);
}

TEST(Stacking, SeparableToyReachesFullAccuracy) {
    auto data = blobs(40, 2, 1.0, 3);
    auto cfg = config_for(init_model(ModelSpec::logistic(2, 2), 1), data);
    cfg.translator = translator_spec_for(cfg, ModelKind::LogisticRegression, 0);
    cfg.train.learning_rate = 0.5;
    cfg.train.local_epochs = 30;
    auto state = make_stacking_state(cfg, 7);
    auto upd = stacking_train_round(state, cfg, state.translator.params, 1);
    EXPECT_EQ(upd.n_samples, 40u);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < data.n_rows(); ++i)
        hit += argmax(stacking_predict(state, cfg, data.row(i))) == data.labels[i];
    EXPECT_EQ(hit, data.n_rows());
}

TEST(Stacking, ShapeMismatchIsFederationError) {
    auto cfg = config_for(init_model(ModelSpec::logistic(3, 2), 1), blobs(20, 3, 1, 2));
    auto state = make_stacking_state(cfg, 5);
    auto other = init_model(ModelSpec::mlp3(5, 18, 2), 1).params;
    EXPECT_THROW(stacking_train_round(state, cfg, other, 1), FederationError);
}

TEST(Stacking, ZeroTranslatorIsUniformAndDeterministic) {
    auto cfg = config_for(init_model(ModelSpec::logistic(3, 2), 1), blobs(20, 3, 1, 2));
    auto state = make_stacking_state(cfg, 5);
    state.translator.params = zero_params(cfg.translator);
    std::vector<double> x{0.2, -1.0, 3.0};
    auto p = stacking_predict(state, cfg, x);
    EXPECT_EQ(p, (std::vector<double>{0.5, 0.5}));
    auto fresh = make_stacking_state(cfg, 5);
    EXPECT_EQ(stacking_predict(fresh, cfg, x), stacking_predict(fresh, cfg, x));
}

TEST(Stacking, HandSetTranslatorFollowsLocalRanking) {
    auto cfg = config_for(init_model(ModelSpec::logistic(3, 2), 11), blobs(20, 3, 1, 2));
    cfg.translator = translator_spec_for(cfg, ModelKind::LogisticRegression, 0);
    auto state = make_stacking_state(cfg, 5);
    // Weight rows select only the appended probabilities: logit_c = 4 * p_c.
    auto& w = state.translator.weight(0).values;
    std::fill(w.begin(), w.end(), 0.0);
    w[0 * 5 + 3] = 4.0;
    w[1 * 5 + 4] = 4.0;
    std::mt19937_64 rng(8);
    for (int i = 0; i < 20; ++i) {
        auto x = random_x(3, rng);
        EXPECT_EQ(argmax(stacking_predict(state, cfg, x)),
                  argmax(cfg.local_model.predict_proba(x)));
    }
}

TEST(Stacking, MismatchedTranslatorRejectedByValidation) {
    auto cfg = config_for(init_model(ModelSpec::logistic(3, 2), 1), blobs(20, 3, 1, 2));
    cfg.translator = ModelSpec::mlp3(4, 16, 2);
    EXPECT_THROW(make_stacking_state(cfg, 1), ConfigError);
    cfg.translator = translator_spec_for(cfg, ModelKind::Mlp3, 16);
    cfg.clients.push_back("0");
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Bagging, SingleModelEqualsLocal) {
    auto cfg = config_for(init_model(ModelSpec::mlp3(4, 8, 3), 1), blobs(10, 4, 1, 1));
    cfg.train_dataset.n_classes = 3;
    auto state = bagging_init(cfg, {});
    ASSERT_EQ(state.order.size(), 1u);
    std::mt19937_64 rng(2);
    for (int i = 0; i < 50; ++i) {
        auto x = random_x(4, rng);
        auto a = bagging_predict(state, x);
        auto b = cfg.local_model.predict_proba(x);
        for (std::size_t c = 0; c < 3; ++c)
            EXPECT_NEAR(a[c], b[c], 1e-9);
    }
}

TEST(Bagging, IdenticalModelsGiveThatModel) {
    auto local = init_model(ModelSpec::logistic(4, 2), 6);
    auto cfg = config_for(local, blobs(10, 4, 1, 1));
    auto state = bagging_init(cfg, {{"1", local}});
    ASSERT_EQ(state.order.size(), 2u);
    std::mt19937_64 rng(3);
    for (int i = 0; i < 50; ++i) {
        auto x = random_x(4, rng);
        auto a = bagging_predict(state, x);
        auto b = forward(local, x).probs;
        EXPECT_NEAR(a[0], b[0], 1e-12);
        EXPECT_NEAR(a[1], b[1], 1e-12);
    }
}

TEST(Bagging, InitializationIsMemberMean) {
    std::mt19937_64 rng(4);
    for (std::size_t m : {1u, 2u, 5u}) {
        auto local = init_model(ModelSpec::mlp3(3, 6, 3), rng());
        auto cfg = config_for(local, blobs(10, 3, 1, 1));
        cfg.train_dataset.n_classes = 3;
        std::map<std::string, Model> peers;
        for (std::size_t k = 1; k < m; ++k)
            peers.emplace(std::to_string(k), k % 2 ? init_model(ModelSpec::logistic(3, 3), rng())
                                                   : init_model(ModelSpec::mlp3(3, 4, 3), rng()));
        auto state = bagging_init(cfg, peers);
        peers.emplace("0", local);
        for (int i = 0; i < 100; ++i) {
            auto x = random_x(3, rng);
            std::vector<double> mean(3, 0.0);
            for (const auto& [id, model] : peers) {
                auto p = forward(model, x).probs;
                for (std::size_t c = 0; c < 3; ++c) mean[c] += p[c] / static_cast<double>(m);
            }
            auto got = bagging_predict(state, x);
            for (std::size_t c = 0; c < 3; ++c)
                EXPECT_NEAR(got[c], mean[c], 1e-9);
            EXPECT_NEAR(sum(got), 1.0, 1e-9);
        }
    }
}

TEST(Bagging, PerfectPeerIsNotLost) {
    // Model A: hand-set LR that separates the blobs; model B: random weights.
    auto data = blobs(60, 2, 1.0, 5);
    Model a = zero_model(ModelSpec::logistic(2, 2));
    a.weight(0).values = {-3, -3, 3, 3};
    Model b = init_model(ModelSpec::logistic(2, 2), 77);
    auto cfg = config_for(b, data);
    cfg.train.local_epochs = 20;
    cfg.train.learning_rate = 0.5;
    auto acc = [&](auto&& predict) {
        std::size_t hit = 0;
        for (std::size_t i = 0; i < data.n_rows(); ++i)
            hit += argmax(predict(data.row(i))) == data.labels[i];
        return static_cast<double>(hit) / static_cast<double>(data.n_rows());
    };
    const double acc_a = acc([&](std::span<const double> x) { return forward(a, x).probs; });
    auto state = bagging_fit(cfg, {{"1", a}});
    const double acc_bag = acc([&](std::span<const double> x) { return bagging_predict(state, x); });
    EXPECT_GE(acc_bag, acc_a - 0.02);
}

TEST(Bagging, PermutingMembersAndBlocks) {
    std::mt19937_64 rng(9);
    auto local = init_model(ModelSpec::logistic(3, 2), 1);
    auto cfg = config_for(local, blobs(30, 3, 1, 1));
    auto state = bagging_fit(cfg, {{"1", init_model(ModelSpec::mlp3(3, 4, 2), 2)},
                                   {"2", init_model(ModelSpec::logistic(3, 2), 3)}});
    // Reverse the member order and move the fusion column blocks along with it.
    BaggingState perm = state;
    std::reverse(perm.order.begin(), perm.order.end());
    const std::size_t M = state.order.size(), C = 2, W = M * C;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t k = 0; k < C; ++k)
                perm.fusion.weight[c * W + (M - 1 - m) * C + k] = state.fusion.weight[c * W + m * C + k];
    for (int i = 0; i < 50; ++i) {
        auto x = random_x(3, rng);
        auto a = bagging_predict(state, x);
        auto b = bagging_predict(perm, x);
        EXPECT_NEAR(a[0], b[0], 1e-12);
        EXPECT_NEAR(a[1], b[1], 1e-12);
    }
}

TEST(Bagging, FusionGradientMatchesFiniteDifference) {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    FusionLayer f = FusionLayer::averaging(3, 3);
    for (double& w : f.weight) w += 0.1 * (u(rng) - 0.5);
    for (double& b : f.bias) b = 0.05 * u(rng);
    std::vector<std::vector<double>> store;
    std::vector<int> labels;
    for (int s = 0; s < 6; ++s) {
        std::vector<double> c;
        for (int m = 0; m < 3; ++m) {
            std::vector<double> p{u(rng), u(rng), u(rng)};
            const double z = sum(p);
            for (double v : p) c.push_back(v / z);
        }
        store.push_back(c);
        labels.push_back(s % 3);
    }
    std::vector<std::span<const double>> inputs(store.begin(), store.end());
    std::vector<double> gw, gb, dummy_w, dummy_b;
    f.loss_and_grad(inputs, labels, gw, gb);
    auto loss = [&](const FusionLayer& g) { return g.loss_and_grad(inputs, labels, dummy_w, dummy_b); };
    const double h = 1e-6;
    for (std::size_t i = 0; i < f.weight.size(); ++i) {
        FusionLayer up = f, dn = f;
        up.weight[i] += h;
        dn.weight[i] -= h;
        EXPECT_NEAR(gw[i], (loss(up) - loss(dn)) / (2 * h), 1e-6);
    }
    for (std::size_t i = 0; i < f.bias.size(); ++i) {
        FusionLayer up = f, dn = f;
        up.bias[i] += h;
        dn.bias[i] -= h;
        EXPECT_NEAR(gb[i], (loss(up) - loss(dn)) / (2 * h), 1e-6);
    }
}

TEST(Bagging, ClassMismatchRejected) {
    auto cfg = config_for(init_model(ModelSpec::logistic(3, 2), 1), blobs(10, 3, 1, 1));
    EXPECT_THROW(bagging_init(cfg, {{"1", init_model(ModelSpec::logistic(3, 3), 1)}}),
                 FederationError);
}

TEST(Aggregator, Examples) {
    std::vector<double> local{0.8, 0.2}, fed{0.2, 0.8};
    EXPECT_EQ(aggregate_outputs(local, fed, 0.0), local);
    EXPECT_EQ(aggregate_outputs(local, fed, 1.0), fed);
    auto mid = aggregate_outputs(local, fed, 0.5);
    EXPECT_DOUBLE_EQ(mid[0], 0.5);
    EXPECT_DOUBLE_EQ(mid[1], 0.5);
    std::vector<double> three{0.2, 0.3, 0.5};
    EXPECT_THROW(aggregate_outputs(local, three, 0.5), InputError);
}

TEST(Aggregator, OutputStaysAProbabilityVector) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 200; ++i) {
        std::vector<double> a{u(rng), u(rng), u(rng)}, b{u(rng), u(rng), u(rng)};
        const double sa = sum(a), sb = sum(b);
        for (auto& v : a) v /= sa;
        for (auto& v : b) v /= sb;
        auto out = aggregate_outputs(a, b, u(rng));
        EXPECT_NEAR(sum(out), 1.0, 1e-9);
        for (double v : out) EXPECT_GE(v, 0.0);
    }
}

TEST(Decision, ThresholdAndArgmax) {
    EXPECT_EQ(decide_label(std::vector<double>{0.5, 0.5}, 0.5), 1);
    EXPECT_EQ(decide_label(std::vector<double>{0.51, 0.49}, 0.5), 0);
    EXPECT_EQ(decide_label(std::vector<double>{0.8, 0.2}, 0.15), 1);
    EXPECT_EQ(decide_label(std::vector<double>{0.3, 0.3, 0.4}, 0.5), 2);
    EXPECT_EQ(decide_label(std::vector<double>{0.4, 0.4, 0.2}, 0.5), 0);
}

TEST(Infer, UntrainedIsLifecycleError) {
    auto cfg = config_for(init_model(ModelSpec::logistic(3, 2), 1), blobs(10, 3, 1, 1));
    WrapperState st;
    std::vector<double> x{1, 2, 3};
    EXPECT_THROW(wrapper_infer(cfg, st, x), LifecycleError);
    st.phase = WrapperPhase::Training;
    EXPECT_THROW(wrapper_infer(cfg, st, x), LifecycleError);
}

TEST(Infer, ZeroFusionWeightRecoversLocal) {
    std::mt19937_64 rng(21);
    for (auto mode : {WrapperMode::Stacking, WrapperMode::Bagging}) {
        auto cfg = config_for(init_model(ModelSpec::mlp3(4, 16, 2), 3), blobs(30, 4, 1, 4));
        cfg.fusion_weight = 0.0;
        cfg.threshold = 0.3;
        WrapperState st;
        st.mode = mode;
        if (mode == WrapperMode::Stacking) {
            st.stacking = make_stacking_state(cfg, 4);
            stacking_train_round(*st.stacking, cfg, st.stacking->translator.params, 1);
        } else {
            st.bagging = bagging_fit(cfg, {{"1", init_model(ModelSpec::logistic(4, 2), 9)}});
        }
        st.phase = WrapperPhase::Ready;
        for (int i = 0; i < 200; ++i) {
            auto x = random_x(4, rng);
            auto got = wrapper_infer(cfg, st, x);
            auto local = cfg.local_model.predict_proba(x);
            EXPECT_EQ(got.probs, local);
            EXPECT_EQ(got.label, decide_label(local, cfg.threshold));
        }
    }
}
