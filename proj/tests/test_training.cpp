#include "test_support.hpp"

#include <dendplrnn/training.hpp>

#include <gtest/gtest.h>

using namespace dendplrnn;
using testing_support::gradient_check;
using testing_support::random_model;
using testing_support::random_vec;

namespace {

TrajectoryBatch lorenz_batch(std::size_t T, std::uint64_t seed) {
    const auto spec = SystemSpec::preset(SystemKind::Lorenz63);
    const auto raw = simulate(spec, default_initial_state(spec, seed), T + 500, seed);
    return standardize(TrajectoryBatch::single(raw.data[0].bottomRows(static_cast<Eigen::Index>(T)), spec.dt()));
}

Mat random_window(std::size_t T, std::size_t N, Rng& rng) {
    Mat w(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(N));
    std::uniform_real_distribution<double> u(-1.5, 1.5);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
    return w;
}

DendParams scalar_affine(double a, double h) {
    auto t = Tensors::zeros(1, 0, 1);
    t.A(0) = a;
    t.h0(0) = h;
    return DendParams(std::move(t), Observation::identity_mapping(1));
}

} // namespace

TEST(Init, AlphaRange) {
    const auto data = lorenz_batch(2000, 1);
    TrainConfig c;
    c.M = 6;
    c.B = 1;
    for (std::uint64_t s = 0; s < 20; ++s) {
        c.rng_seed = s;
        EXPECT_LE(init_params(c, data).alphas().cwiseAbs().maxCoeff(), 1.0);
    }
    c.B = 20;
    c.M = 22;
    for (std::uint64_t s = 0; s < 20; ++s) {
        c.rng_seed = s;
        EXPECT_LE(init_params(c, data).alphas().cwiseAbs().maxCoeff(), 1.0 / std::sqrt(20.0));
    }
}

TEST(Init, ThresholdsWithinDataRange) {
    const auto data = lorenz_batch(2000, 2);
    const Mat x = data.pooled();
    TrainConfig c;
    c.M = 8;
    c.B = 5;
    for (std::uint64_t s = 0; s < 100; ++s) {
        c.rng_seed = s;
        const auto p = init_params(c, data);
        for (Eigen::Index m = 0; m < 3; ++m) {
            EXPECT_GE(p.thresholds().col(m).minCoeff(), x.col(m).minCoeff());
            EXPECT_LE(p.thresholds().col(m).maxCoeff(), x.col(m).maxCoeff());
        }
        EXPECT_TRUE((p.W().diagonal().array() == 0.0).all());
        Mat J = p.W();
        J.diagonal() = p.A();
        EXPECT_LE(detail::spectral_norm(J), 1.0 + 1e-9);
    }
}

TEST(Rollout, HandComputedAffine) {
    // z0 = 1 (forced), z1 = 0.5 + 1 = 1.5, z2 = 0.75 + 1 = 1.75
    const auto p = scalar_affine(0.5, 1.0);
    Mat w(3, 1);
    w << 1.0, 3.0, 2.0;
    const auto r = teacher_forced_rollout(p, {}, 2, w);
    EXPECT_NEAR(r.loss, (0.0 + 2.25 + 0.0625) / 3.0, 1e-15);
    const auto g = backward(p, {}, 2, w, r);
    // dL/da = (2/3)[-(3 - z1) - (2 - z2)(z1 + a)], dL/dh = (2/3)[-(3 - z1) - (2 - z2)(a + 1)]
    EXPECT_NEAR(g.A(0), -4.0 / 3.0, 1e-14);
    EXPECT_NEAR(g.h0(0), -1.25, 1e-14);
}

TEST(Rollout, EveryStepForcedIsOneStepError) {
    Rng rng(5);
    const auto p = random_model(4, 2, 2, 41);
    const Mat w = random_window(30, 2, rng);
    const auto r = teacher_forced_rollout(p, {}, 1, w);
    // tau = 1: each prediction starts from the data point one step back; the
    // unobserved part keeps evolving freely
    Vec z = p.initial_state(w.row(0).transpose());
    double loss = 0.0;
    for (Eigen::Index t = 1; t < w.rows(); ++t) {
        z.head(2) = w.row(t - 1).transpose();
        z = step(z, p, {});
        loss += (w.row(t).transpose() - z.head(2)).squaredNorm();
    }
    EXPECT_NEAR(r.loss, loss / 30.0, 1e-12);
}

TEST(Rollout, TauBeyondWindowIsFreeRun) {
    Rng rng(6);
    const auto p = random_model(4, 2, 2, 42);
    const Mat w = random_window(25, 2, rng);
    const auto r = teacher_forced_rollout(p, {}, 25, w);
    const Mat free = simulate_free(p.initial_state(w.row(0).transpose()), p, {}, 25);
    EXPECT_LT((r.latent - free).cwiseAbs().maxCoeff(), 1e-12);
    const double loss = (w - free.leftCols(2)).squaredNorm() / 25.0;
    EXPECT_NEAR(r.loss, loss, 1e-12);
}

TEST(Gradient, MatchesFiniteDifferences) {
    Rng rng(7);
    std::uniform_int_distribution<int> pick_tau(1, 25);
    int checked = 0;
    std::uint64_t seed = 1000;
    for (Variant v : {Variant{}, Variant{true, false}, Variant{false, true}}) {
        int found = 0;
        while (found < 8) {
            const auto p = random_model(4, 3, 2, seed++);
            const Mat w = random_window(20, 2, rng);
            const auto res = gradient_check(p, v, static_cast<std::size_t>(pick_tau(rng)), w, 0.0, 0);
            if (res.crosses_kink) continue;
            EXPECT_LT(res.rel_error, 1e-4) << "seed " << seed - 1;
            ++found;
            ++checked;
        }
    }
    EXPECT_EQ(checked, 24);
}

TEST(Gradient, IncludesMarTerm) {
    Rng rng(8);
    int found = 0;
    std::uint64_t seed = 2000;
    while (found < 5) {
        const auto p = random_model(4, 3, 2, seed++);
        const auto res = gradient_check(p, {}, 5, random_window(20, 2, rng), 0.7, 2);
        if (res.crosses_kink) continue;
        EXPECT_LT(res.rel_error, 1e-4);
        ++found;
    }
}

TEST(Gradient, MarAloneMatchesFiniteDifferences) {
    const auto p = random_model(5, 2, 2, 77);
    Tensors g = p.tensors().zeros_like();
    add_mar_gradient(p, 1.3, 3, g);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < 5; ++i) {
        auto shifted = [&](double d) {
            DendParams q = p;
            q.update([&](Tensors& t) { t.h0(i) += d; });
            return mar_penalty(q, 1.3, 3);
        };
        EXPECT_NEAR(g.h0(i), (shifted(h) - shifted(-h)) / (2 * h), 1e-7);
        auto shifted_a = [&](double d) {
            DendParams q = p;
            q.update([&](Tensors& t) { t.A(i) += d; });
            return mar_penalty(q, 1.3, 3);
        };
        EXPECT_NEAR(g.A(i), (shifted_a(h) - shifted_a(-h)) / (2 * h), 1e-7);
        for (Eigen::Index j = 0; j < 5; ++j) {
            if (i == j) continue;
            DendParams qp = p, qm = p;
            qp.update([&](Tensors& t) { t.W(i, j) += h; });
            qm.update([&](Tensors& t) { t.W(i, j) -= h; });
            EXPECT_NEAR(g.W(i, j), (mar_penalty(qp, 1.3, 3) - mar_penalty(qm, 1.3, 3)) / (2 * h), 1e-7);
        }
    }
}

TEST(Gradient, DiagonalOfWIsZero) {
    Rng rng(9);
    const auto p = random_model(5, 3, 2, 5);
    const Mat w = random_window(30, 2, rng);
    const auto g = backward(p, {}, 4, w, teacher_forced_rollout(p, {}, 4, w));
    EXPECT_TRUE((g.W.diagonal().array() == 0.0).all());
}

TEST(Mar, Values) {
    const auto p = random_model(3, 1, 1, 3);
    EXPECT_EQ(mar_penalty(p, 0.0, 2), 0.0);

    auto t = Tensors::zeros(3, 1, 1);
    t.A << 0.3, 1.0, 1.0;
    t.W(0, 1) = 0.7;  // unregularized row
    const DendParams q(t, Observation::identity_mapping(1));
    EXPECT_EQ(mar_penalty(q, 5.0, 2), 0.0);

    auto s = Tensors::zeros(2, 1, 1);
    s.A << 0.9, 0.5;
    s.W(1, 0) = 0.3;
    s.h0 << 0.0, 0.2;
    const DendParams r(s, Observation::identity_mapping(1));
    EXPECT_NEAR(mar_penalty(r, 2.0, 1), 0.76, 1e-15);
}

TEST(Config, ValidationAndSchedule) {
    TrainConfig c;
    c.epochs = 101;
    EXPECT_DOUBLE_EQ(c.learning_rate(0), 1e-3);
    EXPECT_NEAR(c.learning_rate(100), 1e-5, 1e-18);
    EXPECT_NEAR(c.learning_rate(50), 1e-4, 1e-16);
    c.M = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    TrainConfig d;
    d.m_reg = d.M + 1;
    EXPECT_THROW(d.validate(), ConfigError);
    EXPECT_EQ(TrainConfig{}.hash(), TrainConfig{}.hash());
    TrainConfig e;
    e.tau = 7;
    EXPECT_NE(e.hash(), TrainConfig{}.hash());
}

TEST(Train, AffineToyRecovered) {
    // x' = 0.9 x + 0.1 from several starting points
    TrajectoryBatch data;
    for (int k = 0; k < 10; ++k) {
        Mat x(40, 1);
        x(0, 0) = -2.0 + 0.5 * k;
        for (Eigen::Index t = 1; t < 40; ++t) x(t, 0) = 0.9 * x(t - 1, 0) + 0.1;
        data.data.push_back(x);
    }
    data.standardized = true;  // values already O(1)
    data.mean = Vec::Zero(1);
    data.std = Vec::Ones(1);
    TrainConfig c;
    c.M = 1;
    c.B = 0;
    c.tau = 1;
    c.seq_len = 20;
    c.batch_size = 16;
    c.epochs = 200;
    c.batches_per_epoch = 5;
    c.lr_start = 0.05;
    c.lr_end = 1e-4;
    const auto res = train(data, c);
    ASSERT_FALSE(res.diverged) << res.message;
    double mse = 0.0;
    for (double x = -2.0; x <= 2.5; x += 0.05) {
        const double pred = step(Vec::Constant(1, x), res.params, {})(0);
        mse += (pred - (0.9 * x + 0.1)) * (pred - (0.9 * x + 0.1));
    }
    EXPECT_LT(mse / 91.0, 1e-6);
}

TEST(Train, DeterministicAndStructural) {
    const auto data = lorenz_batch(3000, 3);
    TrainConfig c;
    c.M = 6;
    c.B = 3;
    c.seq_len = 50;
    c.tau = 10;
    c.epochs = 20;
    c.batch_size = 4;
    c.rng_seed = 11;
    const auto a = train(data, c);
    const auto b = train(data, c);
    EXPECT_EQ(a.params.W(), b.params.W());
    EXPECT_EQ(a.params.thresholds(), b.params.thresholds());
    EXPECT_TRUE((a.params.W().diagonal().array() == 0.0).all());
    ASSERT_EQ(a.log.size(), 20u);
    EXPECT_LT(a.log.back().loss, a.log.front().loss);
    EXPECT_DOUBLE_EQ(a.log.back().lr, c.lr_end);
    c.rng_seed = 12;
    EXPECT_NE(train(data, c).params.W(), a.params.W());
}

TEST(Train, DivergenceReportsAndKeepsFiniteParams) {
    const auto data = lorenz_batch(1000, 4);
    TrainConfig c;
    c.M = 3;
    c.B = 0;
    c.seq_len = 400;
    c.tau = 1000;
    c.epochs = 5;
    c.batch_size = 2;
    auto t = Tensors::zeros(3, 0, 3);
    t.A.setConstant(50.0);
    const DendParams start(std::move(t), Observation::identity_mapping(3));
    const auto res = train(data, c, {}, start);
    EXPECT_TRUE(res.diverged);
    EXPECT_NE(res.message.find("epoch 0"), std::string::npos) << res.message;
    EXPECT_TRUE(res.params.tensors().all_finite());
}

TEST(Train, ConfigErrors) {
    const auto data = lorenz_batch(100, 5);
    TrainConfig c;
    c.seq_len = 500;
    EXPECT_THROW(train(data, c), ConfigError);
    c.seq_len = 50;
    c.M = 2;
    EXPECT_THROW(train(data, c), ConfigError);
}
