#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedwrap/model.hpp"
#include "fedwrap/model_io.hpp"
#include "oracles.hpp"

using namespace fedwrap;

namespace {

Model lr_with(std::vector<double> w, std::vector<double> b) {
    Model m = init_model(ModelSpec::logistic(w.size() / b.size(), b.size()), 0);
    m.weight(0).values = std::move(w);
    m.bias(0).values = std::move(b);
    return m;
}

Dataset random_dataset(std::size_t n, std::size_t dim, std::size_t classes, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    std::uniform_int_distribution<int> cls(0, static_cast<int>(classes) - 1);
    Dataset d;
    d.in_dim = dim;
    d.n_classes = classes;
    std::vector<double> x(dim);
    for (std::size_t i = 0; i < n; ++i) {
        for (double& v : x) v = nd(rng);
        d.push_back(x, cls(rng), i);
    }
    return d;
}

Model random_model(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> dim(1, 6), hid(1, 7), cls(2, 4);
    const bool mlp = rng() % 2 == 0;
    ModelSpec s = mlp ? ModelSpec::mlp3(dim(rng), hid(rng), cls(rng))
                      : ModelSpec::logistic(dim(rng), cls(rng));
    Model m = init_model(s, rng());
    std::normal_distribution<double> nd(0.0, 0.3);
    for (auto& b : m.params)
        for (double& v : b.values) v += nd(rng);
    return m;
}

} // namespace

TEST(InitModel, LogisticCountsAndZeroBias) {
    auto m = init_model(ModelSpec::logistic(4, 2), 7);
    EXPECT_EQ(m.spec.param_count(), 10u);
    std::size_t total = 0;
    for (const auto& b : m.params) total += b.values.size();
    EXPECT_EQ(total, 10u);
    for (double v : m.bias(0).values) EXPECT_EQ(v, 0.0);
}

TEST(InitModel, Deterministic) {
    auto a = init_model(ModelSpec::mlp3(5, 6, 3), 42);
    auto b = init_model(ModelSpec::mlp3(5, 6, 3), 42);
    EXPECT_TRUE(bitwise_equal(a, b));
    auto c = init_model(ModelSpec::mlp3(5, 6, 3), 43);
    EXPECT_FALSE(bitwise_equal(a, c));
}

TEST(InitModel, Mlp3ParamCount) {
    auto m = init_model(ModelSpec::mlp3(8, 16, 2), 1);
    EXPECT_EQ(m.spec.param_count(), 722u);
    ASSERT_EQ(m.params.size(), 8u);
    EXPECT_EQ(m.weight(0).shape, (std::vector<std::size_t>{16, 8}));
    EXPECT_EQ(m.weight(3).shape, (std::vector<std::size_t>{2, 16}));
}

TEST(InitModel, GlorotBounds) {
    auto m = init_model(ModelSpec::mlp3(8, 16, 2), 3);
    const double s0 = std::sqrt(6.0 / (8 + 16));
    for (double v : m.weight(0).values) EXPECT_LE(std::abs(v), s0);
}

TEST(InitModel, RejectsZeroDims) {
    EXPECT_THROW(init_model(ModelSpec::logistic(0, 2), 1), ConfigError);
    EXPECT_THROW(init_model(ModelSpec::logistic(3, 1), 1), ConfigError);
    EXPECT_THROW(init_model(ModelSpec::mlp3(3, 0, 2), 1), ConfigError);
}

TEST(ModelSpec, ParamCountFormulaProperty) {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<std::size_t> d(1, 40);
    for (int i = 0; i < 200; ++i) {
        const std::size_t in = d(rng), h = d(rng), c = d(rng) + 1;
        EXPECT_EQ(ModelSpec::logistic(in, c).param_count(), in * c + c);
        EXPECT_EQ(ModelSpec::mlp3(in, h, c).param_count(),
                  in * h + h + 2 * (h * h + h) + h * c + c);
        std::size_t counted = 0;
        for (const auto& b : zero_params(ModelSpec::mlp3(in, h, c))) counted += b.element_count();
        EXPECT_EQ(counted, ModelSpec::mlp3(in, h, c).param_count());
    }
}

TEST(Forward, ZeroParamsGiveUniform) {
    auto m = init_model(ModelSpec::logistic(3, 4), 0);
    for (auto& b : m.params) std::fill(b.values.begin(), b.values.end(), 0.0);
    auto r = forward(m, std::vector<double>{1.5, -2.0, 7.0});
    for (double p : r.probs) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Forward, IdentityLogisticAtOrigin) {
    auto m = lr_with({1, 0, 0, 1}, {0, 0});
    auto r = forward(m, std::vector<double>{0, 0});
    EXPECT_EQ(r.probs, (std::vector<double>{0.5, 0.5}));
    EXPECT_EQ(r.features, (std::vector<double>{0, 0}));
}

TEST(Forward, IdentityLogisticHandSoftmax) {
    auto m = lr_with({1, 0, 0, 1}, {0, 0});
    auto r = forward(m, std::vector<double>{2, 0});
    const double e2 = std::exp(2.0);
    EXPECT_NEAR(r.probs[0], e2 / (e2 + 1), 1e-15);
    EXPECT_NEAR(r.probs[1], 1 / (e2 + 1), 1e-15);
    EXPECT_NEAR(r.probs[0], 0.8808, 1e-4);
}

TEST(Forward, FeatureWidths) {
    auto lr = init_model(ModelSpec::logistic(5, 3), 1);
    auto mlp = init_model(ModelSpec::mlp3(5, 18, 3), 1);
    std::vector<double> x(5, 0.3);
    EXPECT_EQ(forward(lr, x).features.size(), 3u);
    auto r = forward(mlp, x);
    EXPECT_EQ(r.features.size(), 18u);
    for (double f : r.features) EXPECT_GE(f, 0.0);
}

TEST(Forward, DimensionMismatch) {
    auto m = init_model(ModelSpec::logistic(3, 2), 1);
    EXPECT_THROW(forward(m, std::vector<double>{1, 2}), InputError);
}

TEST(Softmax, SumsToOneForExtremeLogits) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-700, 700);
    for (int i = 0; i < 500; ++i) {
        std::vector<double> z(1 + rng() % 6);
        for (double& v : z) v = u(rng) * (i % 2 ? 1.0 : 1e3);
        auto p = softmax(z);
        double s = 0;
        for (double v : p) {
            ASSERT_FALSE(std::isnan(v));
            ASSERT_GE(v, 0.0);
            ASSERT_LE(v, 1.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(Grad, DuplicatedBatchEqualsSingle) {
    std::mt19937_64 rng(3);
    auto m = random_model(rng);
    std::vector<double> x(m.spec.in_dim, 0.7);
    std::vector<LabeledRef> one{{x, 1}};
    std::vector<LabeledRef> two{{x, 1}, {x, 1}};
    auto g1 = grad(m, one);
    auto g2 = grad(m, two);
    EXPECT_LT(max_abs_diff(g1, g2), 1e-15);
}

TEST(Grad, LogisticMatchesFiniteDifference) {
    std::mt19937_64 rng(17);
    auto m = init_model(ModelSpec::logistic(3, 2), 9);
    auto d = random_dataset(5, 3, 2, rng);
    auto batch = as_batch(d);
    auto analytic = grad(m, batch);
    auto numeric = oracle::finite_difference_grad(m, batch, 0.0);
    EXPECT_LT(oracle::worst_relative_error(analytic, numeric), 1e-4);
}

TEST(Grad, ZeroLogisticHandDerivative) {
    auto m = init_model(ModelSpec::logistic(3, 2), 1);
    for (auto& b : m.params) std::fill(b.values.begin(), b.values.end(), 0.0);
    std::vector<double> x{0.5, -1.0, 2.0};
    std::vector<LabeledRef> batch{{x, 1}};
    auto g = grad(m, batch);
    // Row of the true class is (1/n_classes - 1) * x.
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_DOUBLE_EQ(g[0].values[1 * 3 + i], (0.5 - 1.0) * x[i]);
        EXPECT_DOUBLE_EQ(g[0].values[0 * 3 + i], 0.5 * x[i]);
    }
}

TEST(Grad, RandomModelsMatchFiniteDifference) {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        auto m = random_model(rng);
        auto d = random_dataset(1 + rng() % 6, m.spec.in_dim, m.spec.n_classes, rng);
        const double l2 = trial % 3 == 0 ? 0.01 : 0.0;
        auto batch = as_batch(d);
        auto analytic = grad(m, batch, l2);
        auto numeric = oracle::finite_difference_grad(m, batch, l2);
        ASSERT_LT(oracle::worst_relative_error(analytic, numeric), 1e-4)
            << "trial " << trial << " " << m.spec.descriptor();
    }
}

TEST(Grad, EmptyBatchRejected) {
    auto m = init_model(ModelSpec::logistic(3, 2), 1);
    std::vector<LabeledRef> empty;
    EXPECT_THROW(grad(m, empty), InputError);
}

namespace {
Dataset separable_blobs(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 0.3);
    Dataset d;
    d.in_dim = 2;
    d.n_classes = 2;
    for (std::size_t i = 0; i < 40; ++i) {
        const int y = static_cast<int>(i % 2);
        const double c = y == 0 ? -2.0 : 2.0;
        std::vector<double> x{c + nd(rng), c + nd(rng)};
        d.push_back(x, y, i);
    }
    return d;
}
} // namespace

TEST(SgdTrain, ZeroLearningRateLeavesParams) {
    auto d = separable_blobs(1);
    auto m = init_model(ModelSpec::mlp3(2, 4, 2), 5);
    TrainHp hp;
    hp.learning_rate = 0.0;
    hp.local_epochs = 3;
    EXPECT_TRUE(bitwise_equal(sgd_train(m, d, hp), m));
}

TEST(SgdTrain, RejectsZeroEpochs) {
    auto d = separable_blobs(1);
    TrainHp hp;
    hp.local_epochs = 0;
    EXPECT_THROW(sgd_train(init_model(ModelSpec::logistic(2, 2), 1), d, hp), ConfigError);
}

TEST(SgdTrain, SeparableBlobsReachFullAccuracy) {
    auto d = separable_blobs(2);
    TrainHp hp;
    hp.learning_rate = 0.5;
    hp.local_epochs = 50;
    hp.batch_size = 8;
    auto m = sgd_train(init_model(ModelSpec::logistic(2, 2), 3), d, hp);
    EXPECT_EQ(accuracy(m, d), 1.0);
}

TEST(SgdTrain, Deterministic) {
    auto d = separable_blobs(4);
    TrainHp hp;
    hp.local_epochs = 5;
    hp.seed = 99;
    auto a = sgd_train(init_model(ModelSpec::mlp3(2, 5, 2), 1), d, hp);
    auto b = sgd_train(init_model(ModelSpec::mlp3(2, 5, 2), 1), d, hp);
    EXPECT_TRUE(bitwise_equal(a, b));
}

TEST(SgdTrain, SmallStepsMoveLittle) {
    auto d = separable_blobs(4);
    auto m = init_model(ModelSpec::logistic(2, 2), 1);
    TrainHp hp;
    double prev = 1e300;
    for (double lr : {1e-2, 1e-4, 1e-6, 1e-8}) {
        hp.learning_rate = lr;
        const double moved = max_abs_diff(sgd_train(m, d, hp).params, m.params);
        EXPECT_LT(moved, prev);
        prev = moved;
    }
    EXPECT_LT(prev, 1e-7);
}

TEST(SgdTrain, DivergenceIsReported) {
    auto d = separable_blobs(4);
    auto m = init_model(ModelSpec::mlp3(2, 8, 2), 1);
    TrainHp hp;
    hp.learning_rate = 1e200;
    hp.local_epochs = 5;
    try {
        sgd_train(m, d, hp);
        FAIL() << "expected divergence";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
    }
}

TEST(ModelIo, RoundTripRandomModels) {
    std::mt19937_64 rng(8);
    for (int i = 0; i < 100; ++i) {
        auto m = random_model(rng);
        m.rng_seed = rng();
        EXPECT_TRUE(bitwise_equal(deserialize_model(serialize_model(m)), m));
    }
}

TEST(ModelIo, LayoutMatchesFormat) {
    auto m = init_model(ModelSpec::logistic(2, 2), 1);
    auto bytes = serialize_model(m);
    EXPECT_EQ(bytes.substr(0, 4), "FWM1");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 0);
    EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 1);
    const std::size_t hlen = encoding::get_u32_be(bytes, 6);
    EXPECT_EQ(bytes.size(), 10 + hlen + 6 * 8);
    // First value is weight[0][0], little-endian.
    EXPECT_EQ(encoding::get_f64_le(bytes, 10 + hlen), m.weight(0).values[0]);
}

TEST(ModelIo, TruncatedBytesRejected) {
    auto bytes = serialize_model(init_model(ModelSpec::mlp3(3, 4, 2), 1));
    for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{9}, std::size_t{20},
                            bytes.size() - 1})
        EXPECT_THROW(deserialize_model(std::string_view(bytes).substr(0, cut)), DecodeError);
}

TEST(ModelIo, VersionMismatchRejected) {
    auto bytes = serialize_model(init_model(ModelSpec::logistic(2, 2), 1));
    bytes[5] = static_cast<char>(bytes[5] + 1);
    try {
        deserialize_model(bytes);
        FAIL();
    } catch (const DecodeError& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
}

TEST(ModelIo, ShapeMismatchRejected) {
    auto m = init_model(ModelSpec::logistic(2, 2), 1);
    m.params[0].shape = {2, 3};
    m.params[0].values.resize(6);
    EXPECT_THROW(deserialize_model(serialize_model(m)), DecodeError);
}
