// BPTT with sparse teacher forcing for the dendritic PLRNN.
//
// The read-out uses the identity mapping: the first N latent states are
// compared with the observations and, every tau steps, replaced by them.
// The loss at a forced step is taken before the replacement. Gradients are
// computed by hand: inside one sub-region the map is affine, so each step's
// adjoint is closed form.
#pragma once

#include "dynsys.hpp"
#include "model.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace dendplrnn {

struct TrainConfig {
    std::size_t M = 16;
    std::size_t B = 10;
    std::size_t tau = 25;
    std::size_t seq_len = 500;
    std::size_t batch_size = 16;
    std::size_t epochs = 1000;
    std::size_t batches_per_epoch = 1;
    double lr_start = 1e-3;
    double lr_end = 1e-5;
    double lambda_mar = 0.0;
    std::size_t m_reg = 0;
    Variant variant;
    std::uint64_t rng_seed = 0;
    double gradient_clip_norm = 10.0;
    std::size_t checkpoint_every = 0;  ///< 0 = only the final checkpoint

    /// Per-epoch multiplicative factor taking lr_start to lr_end over the run.
    double lr_decay() const {
        if (epochs <= 1) return 1.0;
        return std::pow(lr_end / lr_start, 1.0 / static_cast<double>(epochs - 1));
    }

    double learning_rate(std::size_t epoch) const { return lr_start * std::pow(lr_decay(), static_cast<double>(epoch)); }

    void validate() const {
        detail::require(M >= 1, "train.M: must be >= 1");
        detail::require(tau >= 1, "train.tau: must be >= 1");
        detail::require(seq_len >= 2, "train.seq_len: must be >= 2");
        detail::require(batch_size >= 1, "train.batch_size: must be >= 1");
        detail::require(batches_per_epoch >= 1, "train.batches_per_epoch: must be >= 1");
        detail::require(m_reg <= M, "train.m_reg: must be <= M");
        detail::require(lambda_mar >= 0.0, "train.lambda_mar: must be >= 0");
        detail::require(lr_start > 0.0 && lr_end > 0.0, "train.lr_start/lr_end: must be > 0");
        detail::require(lr_end <= lr_start, "train.lr_end: must be <= lr_start");
        detail::require(gradient_clip_norm > 0.0, "train.gradient_clip_norm: must be > 0");
    }

    nlohmann::json to_json() const {
        return {{"M", M},
                {"B", B},
                {"tau", tau},
                {"seq_len", seq_len},
                {"batch_size", batch_size},
                {"epochs", epochs},
                {"batches_per_epoch", batches_per_epoch},
                {"lr_start", lr_start},
                {"lr_end", lr_end},
                {"lambda_mar", lambda_mar},
                {"m_reg", m_reg},
                {"clipped", variant.clipped},
                {"mean_centered", variant.mean_centered},
                {"rng_seed", rng_seed},
                {"gradient_clip_norm", gradient_clip_norm},
                {"checkpoint_every", checkpoint_every}};
    }

    std::string hash() const { return detail::fnv1a_hex(to_json().dump()); }
};

struct AdamState {
    Tensors m;
    Tensors v;
    long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit AdamState(const Tensors& like) : m(like.zeros_like()), v(like.zeros_like()) {}

    void apply(DendParams& p, Tensors grad, double lr) {
        ++step;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        p.update([&](Tensors& t) {
            t.for_each(
                [&](auto& param, auto& g, auto& mm, auto& vv) {
                    mm = beta1 * mm + (1.0 - beta1) * g;
                    vv = beta2 * vv + (1.0 - beta2) * g.cwiseAbs2();
                    param.array() -= lr * (mm.array() / c1) / ((vv.array() / c2).sqrt() + eps);
                },
                grad, m, v);
        });
    }
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// alpha_b ~ U[-B^-0.5, B^-0.5]; thresholds ~ U over each dimension's data
/// range (pooled range for latent states without a read-out); A ~ U[0.5,
/// 0.99]; W ~ N(0, 1/M) off-diagonal, shrunk until ||diag(A) + W||_2 <= 1;
/// h0 = 0; L = 0.
inline DendParams init_params(const TrainConfig& cfg, const TrajectoryBatch& data) {
    cfg.validate();
    data.check_shape();
    const std::size_t N = data.dim();
    detail::require(cfg.M >= N, "train.M: identity mapping requires M >= N");
    Rng rng(cfg.rng_seed);
    const auto M = static_cast<Eigen::Index>(cfg.M);
    auto t = Tensors::zeros(cfg.M, cfg.B, N);

    std::uniform_real_distribution<double> ua(0.5, 0.99);
    for (Eigen::Index i = 0; i < M; ++i) t.A(i) = ua(rng);
    std::normal_distribution<double> nw(0.0, 1.0 / std::sqrt(static_cast<double>(cfg.M)));
    for (Eigen::Index i = 0; i < M; ++i)
        for (Eigen::Index j = 0; j < M; ++j) t.W(i, j) = i == j ? 0.0 : nw(rng);
    auto combined_norm = [&](double s) {
        Mat m = s * t.W;
        m.diagonal() = t.A;
        return detail::spectral_norm(m);
    };
    if (combined_norm(1.0) > 1.0) {
        double lo = 0.0, hi = 1.0;
        for (int it = 0; it < 60; ++it) {
            const double mid = 0.5 * (lo + hi);
            (combined_norm(mid) > 1.0 ? hi : lo) = mid;
        }
        t.W *= lo;
    }

    if (cfg.B > 0) {
        const double a = 1.0 / std::sqrt(static_cast<double>(cfg.B));
        std::uniform_real_distribution<double> ualpha(-a, a);
        for (Eigen::Index b = 0; b < t.alphas.size(); ++b) t.alphas(b) = ualpha(rng);

        const Mat pooled = data.pooled();
        const Vec lo = pooled.colwise().minCoeff().transpose();
        const Vec hi = pooled.colwise().maxCoeff().transpose();
        const double plo = lo.minCoeff(), phi = hi.maxCoeff();
        if (!data.standardized)
            std::cerr << "warning: init_params on unstandardized data, using the pooled data range\n";
        for (Eigen::Index b = 0; b < t.thresholds.rows(); ++b)
            for (Eigen::Index m = 0; m < M; ++m) {
                const bool own = data.standardized && m < static_cast<Eigen::Index>(N);
                std::uniform_real_distribution<double> uh(own ? lo(m) : plo, own ? hi(m) : phi);
                t.thresholds(b, m) = uh(rng);
            }
    }
    return DendParams(std::move(t), Observation::identity_mapping(N));
}

// ---------------------------------------------------------------------------
// Teacher-forced rollout and its gradient
// ---------------------------------------------------------------------------

struct Rollout {
    Mat latent;  ///< pre-forcing states [T][M]
    Mat inputs;  ///< states fed to the map (post-forcing) [T][M]
    double loss = 0.0;
};

inline bool is_forced(std::size_t t, std::size_t tau) { return t % tau == 0; }

namespace detail {

/// phi(u) and its slope at the nonlinearity input u of state s. Scratch
/// vectors are caller-owned so the training loops do not allocate. With
/// `upstream` (= W^T dL/dz') the alpha and threshold gradients are
/// accumulated into `g` in the same pass.
inline void basis_terms(const Vec& s, const DendParams& p, const Variant& v, Vec& u, Vec& ph, Vec& dphi,
                        const Vec* upstream = nullptr, Tensors* g = nullptr) {
    const Eigen::Index M = s.size();
    if (v.mean_centered)
        u = (s.array() - s.mean()).matrix();
    else
        u = s;
    if (p.B() == 0) {
        for (Eigen::Index m = 0; m < M; ++m) {
            const double on = u(m) > 0.0 ? 1.0 : 0.0;
            ph(m) = on * u(m);
            dphi(m) = on;
        }
    } else {
        const auto nb = p.alphas().size();
        const double* al = p.alphas().data();
        for (Eigen::Index m = 0; m < M; ++m) {
            const double um = u(m);
            const double* h = p.thresholds().data() + m * nb;  // column m, contiguous
            double sp = 0.0, sd = 0.0;
            for (Eigen::Index b = 0; b < nb; ++b) {
                const double e = um - h[b];
                const double a = e > 0.0 ? al[b] : 0.0;
                sp += a * e;
                sd += a;
            }
            ph(m) = sp;
            dphi(m) = sd;
            if (g != nullptr) {
                const double w = (*upstream)(m);
                double* ga = g->alphas.data();
                double* gh = g->thresholds.data() + m * nb;
                for (Eigen::Index b = 0; b < nb; ++b) {
                    const double e = um - h[b];
                    const double on = e > 0.0 ? w : 0.0;
                    ga[b] += on * e;
                    gh[b] -= on * al[b];
                }
            }
        }
    }
    if (v.clipped) {
        const double asum = p.alpha_sum();
        double relu_part = 0.0;
        for (Eigen::Index m = 0; m < M; ++m)
            if (u(m) > 0.0) {
                ph(m) -= asum * u(m);
                dphi(m) -= asum;
                if (upstream != nullptr) relu_part += (*upstream)(m) * u(m);
            }
        if (g != nullptr && p.B() > 0) g->alphas.array() -= relu_part;
    }
}

} // namespace detail

/// z_1 = [x_1, L x_1]; at forced times t = l tau (0-based) the first N
/// components are replaced by x_t after the loss at t has been recorded.
/// loss = (1/T) sum_t ||x_t - I z_t||^2.
inline Rollout teacher_forced_rollout(const DendParams& p, const Variant& v, std::size_t tau, const Mat& window) {
    detail::require(p.observation().identity, "teacher_forced_rollout: identity mapping required");
    detail::require(static_cast<std::size_t>(window.cols()) == p.N(), "teacher_forced_rollout: window has wrong dimension");
    detail::require(window.rows() >= 1, "teacher_forced_rollout: empty window");
    detail::require(tau >= 1, "teacher_forced_rollout: tau must be >= 1");
    const Eigen::Index T = window.rows();
    const auto N = static_cast<Eigen::Index>(p.N());
    Rollout r;
    r.latent.resize(T, static_cast<Eigen::Index>(p.M()));
    r.inputs.resize(T, static_cast<Eigen::Index>(p.M()));
    const auto M = static_cast<Eigen::Index>(p.M());
    Vec z = p.initial_state(window.row(0).transpose());
    Vec u(M), ph(M), dphi(M), next(M);
    double loss = 0.0;
    for (Eigen::Index t = 0; t < T; ++t) {
        r.latent.row(t) = z.transpose();
        loss += (window.row(t) - z.head(N).transpose()).squaredNorm();
        if (is_forced(static_cast<std::size_t>(t), tau)) z.head(N) = window.row(t).transpose();
        r.inputs.row(t) = z.transpose();
        if (t + 1 < T) {
            detail::basis_terms(z, p, v, u, ph, dphi);
            next.noalias() = p.W() * ph;
            next += p.A().cwiseProduct(z) + p.h0();
            if (!next.allFinite())
                throw NumericalError(detail::cat("rollout: non-finite latent state at step ", t + 1), static_cast<long>(t + 1));
            z.swap(next);
        }
    }
    r.loss = loss / static_cast<double>(T);
    return r;
}

namespace detail {

inline void check_gradient(const Tensors& g) {
    auto check = [](const auto& block, const char* name) {
        if (!block.allFinite()) throw NumericalError(std::string("backward: non-finite gradient in block '") + name + "'");
    };
    check(g.A, "A");
    check(g.W, "W");
    check(g.h0, "h0");
    check(g.alphas, "alphas");
    check(g.thresholds, "thresholds");
    check(g.L, "L");
}

} // namespace detail

/// Exact reverse-mode gradient of the rollout loss. Adjoints do not flow
/// through components replaced by data; z_1 depends on L only. The
/// derivative of max(0, u) at u = 0 is taken as 0.
inline Tensors backward(const DendParams& p, const Variant& v, std::size_t tau, const Mat& window,
                        const Rollout& r) {
    const Eigen::Index T = window.rows();
    const auto M = static_cast<Eigen::Index>(p.M());
    const auto N = static_cast<Eigen::Index>(p.N());
    detail::require(r.latent.rows() == T && r.inputs.rows() == T, "backward: rollout does not match window");

    Tensors g = p.tensors().zeros_like();
    const double scale = 2.0 / static_cast<double>(T);
    Vec gz = Vec::Zero(M);
    gz.head(N) = scale * (r.latent.row(T - 1).head(N) - window.row(T - 1)).transpose();

    Vec s(M), u(M), ph(M), dphi(M), vW(M), gu(M), gs(M);
    for (Eigen::Index t = T - 2; t >= 0; --t) {
        // gz is dL/dz_{t+1}; z_{t+1} = F(s_t)
        s = r.inputs.row(t).transpose();
        vW.noalias() = p.W().transpose() * gz;
        detail::basis_terms(s, p, v, u, ph, dphi, &vW, &g);
        g.A += gz.cwiseProduct(s);
        g.W.noalias() += gz * ph.transpose();
        g.h0 += gz;
        gu = vW.cwiseProduct(dphi);
        if (v.mean_centered) gu.array() -= gu.mean();
        gs = p.A().cwiseProduct(gz) + gu;
        if (is_forced(static_cast<std::size_t>(t), tau)) gs.head(N).setZero();
        gs.head(N) += scale * (r.latent.row(t).head(N) - window.row(t)).transpose();
        gz.swap(gs);
    }
    // z_1 = [x_1, L x_1]
    if (g.L.size() > 0) g.L.noalias() += gz.tail(M - N) * window.row(0);
    g.W.diagonal().setZero();
    detail::check_gradient(g);
    return g;
}

/// lambda [ sum (A_ii - 1)^2 + sum_{j != i} W_ij^2 + sum h_i^2 ] over the
/// last m_reg latent states (the first N are pinned to observations).
inline double mar_penalty(const DendParams& p, double lambda, std::size_t m_reg) {
    detail::require(m_reg <= p.M(), "mar_penalty: m_reg must be <= M");
    if (lambda == 0.0 || m_reg == 0) return 0.0;
    const auto M = static_cast<Eigen::Index>(p.M());
    double s = 0.0;
    for (Eigen::Index i = M - static_cast<Eigen::Index>(m_reg); i < M; ++i) {
        s += (p.A()(i) - 1.0) * (p.A()(i) - 1.0);
        for (Eigen::Index j = 0; j < M; ++j)
            if (j != i) s += p.W()(i, j) * p.W()(i, j);
        s += p.h0()(i) * p.h0()(i);
    }
    return lambda * s;
}

inline void add_mar_gradient(const DendParams& p, double lambda, std::size_t m_reg, Tensors& g) {
    if (lambda == 0.0 || m_reg == 0) return;
    const auto M = static_cast<Eigen::Index>(p.M());
    for (Eigen::Index i = M - static_cast<Eigen::Index>(m_reg); i < M; ++i) {
        g.A(i) += 2.0 * lambda * (p.A()(i) - 1.0);
        for (Eigen::Index j = 0; j < M; ++j)
            if (j != i) g.W(i, j) += 2.0 * lambda * p.W()(i, j);
        g.h0(i) += 2.0 * lambda * p.h0()(i);
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;
    double mar = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    double wall_ms = 0.0;

    nlohmann::json to_json() const {
        return {{"epoch", epoch}, {"loss", loss}, {"mar", mar}, {"lr", lr}, {"grad_norm", grad_norm}, {"wall_ms", wall_ms}};
    }
};

struct TrainResult {
    DendParams params;
    std::vector<EpochRecord> log;
    bool diverged = false;
    std::string message;
};

/// Called after every epoch with the updated parameters.
using EpochCallback = std::function<void(const EpochRecord&, const DendParams&)>;

namespace detail {

struct WindowSampler {
    const TrajectoryBatch& data;
    std::size_t seq_len;
    std::size_t per_traj;

    WindowSampler(const TrajectoryBatch& d, std::size_t len)
        : data(d), seq_len(len), per_traj(d.length() - len + 1) {}

    Mat operator()(Rng& rng) const {
        std::uniform_int_distribution<std::size_t> pick(0, per_traj * data.n_trajectories() - 1);
        const std::size_t k = pick(rng);
        const auto& traj = data.data[k / per_traj];
        return traj.middleRows(static_cast<Eigen::Index>(k % per_traj), static_cast<Eigen::Index>(seq_len));
    }
};

} // namespace detail

/// Mean rollout loss and gradient over a set of windows, plus the MAR term.
inline std::pair<double, Tensors> batch_gradient(const DendParams& p, const TrainConfig& cfg,
                                                 const std::vector<Mat>& windows) {
    Tensors g = p.tensors().zeros_like();
    double loss = 0.0;
    for (const auto& w : windows) {
        const auto r = teacher_forced_rollout(p, cfg.variant, cfg.tau, w);
        const auto gw = backward(p, cfg.variant, cfg.tau, w, r);
        loss += r.loss;
        g.for_each([](auto& acc, const auto& x) { acc += x; }, gw);
    }
    const double inv = 1.0 / static_cast<double>(windows.size());
    g.for_each([inv](auto& acc) { acc *= inv; });
    add_mar_gradient(p, cfg.lambda_mar, cfg.m_reg, g);
    return {loss * inv, std::move(g)};
}

/// Trains from scratch (init_params) or from `start` when given.
inline TrainResult train(const TrajectoryBatch& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {},
                         std::optional<DendParams> start = std::nullopt) {
    cfg.validate();
    data.check_shape();
    detail::require(data.length() >= cfg.seq_len,
                    detail::cat("train.seq_len: ", cfg.seq_len, " exceeds series length ", data.length()));
    TrainResult result{start ? *start : init_params(cfg, data), {}, false, ""};
    DendParams& p = result.params;
    AdamState adam(p.tensors());
    Rng rng(cfg.rng_seed ^ 0x5851f42d4c957f2dull);
    const detail::WindowSampler sample(data, cfg.seq_len);
    std::vector<Mat> windows(cfg.batch_size);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = cfg.learning_rate(epoch);
        double loss_sum = 0.0, gnorm_sum = 0.0;
        try {
            for (std::size_t it = 0; it < cfg.batches_per_epoch; ++it) {
                for (auto& w : windows) w = sample(rng);
                auto [loss, g] = batch_gradient(p, cfg, windows);
                if (!std::isfinite(loss)) throw NumericalError("loss is not finite");
                const double gnorm = std::sqrt(g.squared_norm());
                if (gnorm > cfg.gradient_clip_norm) {
                    const double s = cfg.gradient_clip_norm / gnorm;
                    g.for_each([s](auto& x) { x *= s; });
                }
                DendParams next = p;
                adam.apply(next, std::move(g), lr);
                p = std::move(next);
                loss_sum += loss;
                gnorm_sum += gnorm;
            }
        } catch (const Error& e) {
            result.diverged = true;
            result.message = detail::cat("training diverged at epoch ", epoch, ": ", e.what());
            return result;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = loss_sum / static_cast<double>(cfg.batches_per_epoch);
        rec.mar = mar_penalty(p, cfg.lambda_mar, cfg.m_reg);
        rec.lr = lr;
        rec.grad_norm = gnorm_sum / static_cast<double>(cfg.batches_per_epoch);
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(rec);
        if (on_epoch) on_epoch(rec, p);
    }
    return result;
}

} // namespace dendplrnn
