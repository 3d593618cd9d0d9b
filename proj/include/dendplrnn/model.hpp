// The dendritic PLRNN: latent map with spline basis expansion, observation
// model, sub-region bookkeeping, Jacobians and the expansion to a
// conventional PLRNN.
//
// Latent update (plain):      z' = A.z + W phi(z) + h0 [+ C s] [+ eps]
//   phi(u)_m   = sum_b alpha_b max(0, u_m - h_{b,m})
// clipped:    phi(u)_m   = sum_b alpha_b [max(0, u_m - h_{b,m}) - max(0, u_m)]
// mean-centred: phi is applied to u = Mc z, Mc = I - (1/M) 1 1^T.
//
// With zero bases (B = 0) the nonlinearity is the plain ReLU, i.e. a single
// fixed basis alpha = 1, h = 0 that is not trained.
#pragma once

#include "common.hpp"

#include <algorithm>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dendplrnn {

struct Variant {
    bool clipped = false;
    bool mean_centered = false;

    friend bool operator==(const Variant&, const Variant&) = default;
};

/// Trainable parameter blocks. Gradients and optimizer moments reuse the type.
struct Tensors {
    Vec A;           ///< diagonal of the self-connection matrix, [M]
    Mat W;           ///< off-diagonal connections, [M][M], zero diagonal
    Vec h0;          ///< bias, [M]
    Vec alphas;      ///< basis slopes, [B]
    Mat thresholds;  ///< basis thresholds, [B][M]
    Mat L;           ///< initial-state estimator, [M-N][N] (identity mapping only)

    static Tensors zeros(std::size_t M, std::size_t B, std::size_t N_L) {
        const auto m = static_cast<Eigen::Index>(M);
        const auto b = static_cast<Eigen::Index>(B);
        const auto nl = static_cast<Eigen::Index>(N_L);
        return {Vec::Zero(m), Mat::Zero(m, m), Vec::Zero(m), Vec::Zero(b), Mat::Zero(b, m), Mat::Zero(m - nl, nl)};
    }

    Tensors zeros_like() const {
        return {Vec::Zero(A.size()), Mat::Zero(W.rows(), W.cols()), Vec::Zero(h0.size()),
                Vec::Zero(alphas.size()), Mat::Zero(thresholds.rows(), thresholds.cols()),
                Mat::Zero(L.rows(), L.cols())};
    }

    /// Applies f(self_block, other_block...) across every block.
    template <typename F, typename... Others>
    void for_each(F&& f, Others&... others) {
        f(A, others.A...);
        f(W, others.W...);
        f(h0, others.h0...);
        f(alphas, others.alphas...);
        f(thresholds, others.thresholds...);
        f(L, others.L...);
    }

    double squared_norm() const {
        return A.squaredNorm() + W.squaredNorm() + h0.squaredNorm() + alphas.squaredNorm() +
               thresholds.squaredNorm() + L.squaredNorm();
    }

    bool all_finite() const {
        return A.allFinite() && W.allFinite() && h0.allFinite() && alphas.allFinite() &&
               thresholds.allFinite() && L.allFinite();
    }
};

/// Observation model: either read out the first N latent states or x = B z.
struct Observation {
    bool identity = true;
    std::size_t n = 0;
    Mat B;  ///< [N][M], used when !identity

    static Observation identity_mapping(std::size_t N) { return {true, N, Mat()}; }
    static Observation matrix(Mat B) {
        const auto n = static_cast<std::size_t>(B.rows());
        return {false, n, std::move(B)};
    }
};

/// All parameters of latent and observation maps. Structural invariants
/// (diag(W) = 0, shapes, finiteness) hold after construction and after every
/// update().
class DendParams {
public:
    DendParams(Tensors t, Observation obs, Mat C = Mat(), Vec Sigma = Vec(), Vec Gamma = Vec())
        : t_(std::move(t)), obs_(std::move(obs)), C_(std::move(C)), Sigma_(std::move(Sigma)),
          Gamma_(std::move(Gamma)) {
        const auto M = t_.A.size();
        if (C_.size() == 0) C_ = Mat::Zero(M, 0);
        if (Sigma_.size() == 0) Sigma_ = Vec::Zero(M);
        if (Gamma_.size() == 0) Gamma_ = Vec::Zero(static_cast<Eigen::Index>(obs_.n));
        if (obs_.identity && t_.L.size() == 0)
            t_.L = Mat::Zero(M - static_cast<Eigen::Index>(obs_.n), static_cast<Eigen::Index>(obs_.n));
        if (!obs_.identity && t_.L.size() == 0) t_.L = Mat::Zero(0, 0);
        validate();
        t_.W.diagonal().setZero();
    }

    /// Zero-initialized model with identity read-out of the first N states.
    static DendParams zeros(std::size_t M, std::size_t N, std::size_t B) {
        return DendParams(Tensors::zeros(M, B, N), Observation::identity_mapping(N));
    }

    std::size_t M() const { return static_cast<std::size_t>(t_.A.size()); }
    std::size_t N() const { return obs_.n; }
    /// Number of trainable bases; 0 means plain ReLU.
    std::size_t B() const { return static_cast<std::size_t>(t_.alphas.size()); }
    std::size_t K() const { return static_cast<std::size_t>(C_.cols()); }

    /// Number of bases entering phi (1 for the plain-ReLU case).
    std::size_t basis_count() const { return B() == 0 ? 1 : B(); }
    double alpha(std::size_t b) const { return B() == 0 ? 1.0 : t_.alphas(static_cast<Eigen::Index>(b)); }
    double threshold(std::size_t b, std::size_t m) const {
        return B() == 0 ? 0.0 : t_.thresholds(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(m));
    }
    double alpha_sum() const {
        double s = 0.0;
        for (std::size_t b = 0; b < basis_count(); ++b) s += alpha(b);
        return s;
    }

    const Tensors& tensors() const { return t_; }
    const Vec& A() const { return t_.A; }
    const Mat& W() const { return t_.W; }
    const Vec& h0() const { return t_.h0; }
    const Vec& alphas() const { return t_.alphas; }
    const Mat& thresholds() const { return t_.thresholds; }
    const Mat& L() const { return t_.L; }
    const Mat& C() const { return C_; }
    const Observation& observation() const { return obs_; }
    const Vec& Sigma() const { return Sigma_; }
    const Vec& Gamma() const { return Gamma_; }

    /// Mutates the trainable blocks; the structural zero diagonal of W is
    /// restored and invariants re-checked afterwards.
    template <typename F>
    void update(F&& f) {
        f(t_);
        t_.W.diagonal().setZero();
        validate();
    }

    void set_noise(Vec Sigma, Vec Gamma) {
        Sigma_ = std::move(Sigma);
        Gamma_ = std::move(Gamma);
        validate();
    }

    /// Latent state from an observation, z = [x, L x] (identity mapping).
    Vec initial_state(const Vec& x) const {
        detail::require(obs_.identity, "initial_state requires the identity mapping");
        detail::require(static_cast<std::size_t>(x.size()) == N(), "initial_state: observation dimension mismatch");
        Vec z(t_.A.size());
        z.head(x.size()) = x;
        z.tail(t_.L.rows()) = t_.L * x;
        return z;
    }

private:
    void validate() const {
        const auto M = t_.A.size();
        detail::require(M >= 1, "model needs M >= 1");
        detail::require(t_.W.rows() == M && t_.W.cols() == M, "W must be M x M");
        detail::require(t_.h0.size() == M, "h0 must have length M");
        detail::require(t_.thresholds.rows() == t_.alphas.size() &&
                            (t_.alphas.size() == 0 || t_.thresholds.cols() == M),
                        "thresholds must be B x M");
        detail::require(C_.rows() == M, "C must have M rows");
        detail::require(Sigma_.size() == M && (Sigma_.array() >= 0.0).all(), "Sigma must be length M, >= 0");
        detail::require(Gamma_.size() == static_cast<Eigen::Index>(obs_.n) && (Gamma_.array() >= 0.0).all(),
                        "Gamma must be length N, >= 0");
        if (obs_.identity) {
            detail::require(static_cast<Eigen::Index>(obs_.n) <= M, "identity mapping requires M >= N");
            detail::require(t_.L.rows() == M - static_cast<Eigen::Index>(obs_.n) &&
                                t_.L.cols() == static_cast<Eigen::Index>(obs_.n),
                            "L must be (M-N) x N");
        } else {
            detail::require(obs_.B.cols() == M && obs_.B.rows() == static_cast<Eigen::Index>(obs_.n),
                            "B matrix must be N x M");
            detail::require(obs_.B.allFinite(), "B matrix not finite");
        }
        detail::require(t_.all_finite() && C_.allFinite(), "parameters must be finite");
    }

    Tensors t_;
    Observation obs_;
    Mat C_;
    Vec Sigma_;
    Vec Gamma_;
};

/// Mc = I - (1/M) 1 1^T.
inline Mat mean_centering_matrix(std::size_t M) {
    const auto m = static_cast<Eigen::Index>(M);
    return Mat::Identity(m, m) - Mat::Constant(m, m, 1.0 / static_cast<double>(M));
}

/// Argument of the nonlinearity: z itself, or its mean-centred version.
inline Vec nonlinearity_input(const Vec& z, const Variant& v) {
    if (!v.mean_centered) return z;
    return (z.array() - z.mean()).matrix();
}

/// The basis expansion applied to an already mean-centred (if applicable) input.
inline Vec phi_basis(const Vec& u, const DendParams& p, const Variant& v) {
    detail::require(static_cast<std::size_t>(u.size()) == p.M(), "phi_basis: dimension mismatch");
    Vec out = Vec::Zero(u.size());
    for (std::size_t b = 0; b < p.basis_count(); ++b) {
        const double a = p.alpha(b);
        for (Eigen::Index m = 0; m < u.size(); ++m) {
            double term = detail::relu(u(m) - p.threshold(b, static_cast<std::size_t>(m)));
            if (v.clipped) term -= detail::relu(u(m));
            out(m) += a * term;
        }
    }
    return out;
}

/// One latent step. `input` is the external drive s_t (needs K columns in C);
/// `noise` draws eps ~ N(0, diag(Sigma^2)) when given.
inline Vec step(const Vec& z, const DendParams& p, const Variant& v, const Vec* input = nullptr,
                Rng* noise = nullptr, long step_index = -1) {
    detail::require(static_cast<std::size_t>(z.size()) == p.M(), "step: state dimension mismatch");
    Vec out = p.A().cwiseProduct(z) + p.W() * phi_basis(nonlinearity_input(z, v), p, v) + p.h0();
    if (input != nullptr) {
        detail::require(static_cast<std::size_t>(input->size()) == p.K(), "step: input dimension mismatch");
        out += p.C() * *input;
    }
    if (noise != nullptr) {
        std::normal_distribution<double> normal(0.0, 1.0);
        for (Eigen::Index m = 0; m < out.size(); ++m) out(m) += p.Sigma()(m) * normal(*noise);
    }
    if (!out.allFinite())
        throw NumericalError(detail::cat("step: non-finite latent state at step ", step_index), step_index);
    return out;
}

/// Free-running trajectory [T][M] starting at (and including) z1.
inline Mat simulate_free(const Vec& z1, const DendParams& p, const Variant& v, std::size_t T,
                         double divergence_bound = 1e8, Rng* noise = nullptr) {
    detail::require(T >= 1, "simulate_free: T must be >= 1");
    Mat out(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(p.M()));
    Vec z = z1;
    out.row(0) = z.transpose();
    for (std::size_t t = 1; t < T; ++t) {
        z = step(z, p, v, nullptr, noise, static_cast<long>(t));
        if (z.norm() > divergence_bound)
            throw NumericalError(detail::cat("simulate_free: state norm exceeded ", divergence_bound, " at step ", t),
                                 static_cast<long>(t));
        out.row(static_cast<Eigen::Index>(t)) = z.transpose();
    }
    return out;
}

/// Observations [T][N] for a latent trajectory [T][M].
inline Mat observe(const Mat& z_traj, const DendParams& p, Rng* noise = nullptr) {
    detail::require(static_cast<std::size_t>(z_traj.cols()) == p.M(), "observe: latent dimension mismatch");
    const auto n = static_cast<Eigen::Index>(p.N());
    Mat x = p.observation().identity ? Mat(z_traj.leftCols(n)) : Mat(z_traj * p.observation().B.transpose());
    if (noise != nullptr) {
        std::normal_distribution<double> normal(0.0, 1.0);
        for (Eigen::Index t = 0; t < x.rows(); ++t)
            for (Eigen::Index i = 0; i < n; ++i) x(t, i) += p.Gamma()(i) * normal(*noise);
    }
    return x;
}

// ---------------------------------------------------------------------------
// Sub-regions
// ---------------------------------------------------------------------------

/// Indicator stack identifying one linear sub-region: bit (b, m) is set iff
/// u_m > h_{b,m} (u = z, or Mc z when mean-centred). The clipped variant adds
/// a final row for u_m > 0.
struct RegionConfig {
    std::size_t rows = 0;  ///< basis rows (+1 for clipped)
    std::size_t M = 0;
    std::vector<std::uint8_t> bits;  ///< row-major [rows][M]

    bool at(std::size_t row, std::size_t m) const { return bits[row * M + m] != 0; }
    friend bool operator==(const RegionConfig&, const RegionConfig&) = default;
    friend bool operator<(const RegionConfig& a, const RegionConfig& b) { return a.bits < b.bits; }

    std::string to_string() const {
        std::string s;
        for (std::size_t r = 0; r < rows; ++r) {
            if (r) s += '|';
            for (std::size_t m = 0; m < M; ++m) s += at(r, m) ? '1' : '0';
        }
        return s;
    }

    std::size_t hash() const {
        std::size_t h = 1469598103934665603ull;
        for (auto b : bits) h = (h ^ b) * 1099511628211ull;
        return h;
    }
};

struct RegionHash {
    std::size_t operator()(const RegionConfig& r) const { return r.hash(); }
};

inline RegionConfig region_of(const Vec& z, const DendParams& p, const Variant& v) {
    const Vec u = nonlinearity_input(z, v);
    RegionConfig r;
    r.M = p.M();
    r.rows = p.basis_count() + (v.clipped ? 1 : 0);
    r.bits.assign(r.rows * r.M, 0);
    for (std::size_t b = 0; b < p.basis_count(); ++b)
        for (std::size_t m = 0; m < r.M; ++m)
            r.bits[b * r.M + m] = u(static_cast<Eigen::Index>(m)) > p.threshold(b, m) ? 1 : 0;
    if (v.clipped)
        for (std::size_t m = 0; m < r.M; ++m)
            r.bits[p.basis_count() * r.M + m] = u(static_cast<Eigen::Index>(m)) > 0.0 ? 1 : 0;
    return r;
}

/// The map restricted to one sub-region: F(z) = J z + c.
struct AffinePiece {
    Mat J;
    Vec c;
};

/// J = A + W diag(d) P and c = W hB + h0, with d_m the summed active slopes,
/// hB_m = -sum_b alpha_b d_{b,m} h_{b,m} and P = I or Mc.
inline AffinePiece affine_piece(const RegionConfig& r, const DendParams& p, const Variant& v) {
    detail::require(r.M == p.M() && r.rows == p.basis_count() + (v.clipped ? 1 : 0),
                    "affine_piece: region does not match model");
    const auto M = static_cast<Eigen::Index>(p.M());
    Vec d = Vec::Zero(M), hB = Vec::Zero(M);
    for (std::size_t b = 0; b < p.basis_count(); ++b)
        for (std::size_t m = 0; m < p.M(); ++m)
            if (r.at(b, m)) {
                d(static_cast<Eigen::Index>(m)) += p.alpha(b);
                hB(static_cast<Eigen::Index>(m)) -= p.alpha(b) * p.threshold(b, m);
            }
    if (v.clipped) {
        const double asum = p.alpha_sum();
        for (std::size_t m = 0; m < p.M(); ++m)
            if (r.at(p.basis_count(), m)) d(static_cast<Eigen::Index>(m)) -= asum;
    }
    Mat WD = p.W() * d.asDiagonal();
    if (v.mean_centered) WD = WD * mean_centering_matrix(p.M());
    AffinePiece piece;
    piece.J = WD;
    piece.J.diagonal() += p.A();
    piece.c = p.W() * hB + p.h0();
    return piece;
}

/// Jacobian of the latent map at z (strict-inequality indicators).
inline Mat jacobian(const Vec& z, const DendParams& p, const Variant& v) {
    return affine_piece(region_of(z, p, v), p, v).J;
}

// ---------------------------------------------------------------------------
// Expansion to a conventional PLRNN
// ---------------------------------------------------------------------------

/// Conventional PLRNN  zh' = A zh + W max(0, zh) + h0 [+ C s]  of dimension
/// M * B obtained by stacking B shifted copies zh_b = z - h_b.
struct ExpandedPlrnn {
    Vec A;   ///< diagonal, [MB]
    Mat W;   ///< [MB][MB]
    Vec h0;  ///< [MB]
    Mat C;   ///< [MB][K]
    Vec shift;  ///< stacked thresholds (h_1; ...; h_B)
    std::size_t M = 0;

    Vec embed(const Vec& z) const {
        const auto m = static_cast<Eigen::Index>(M);
        Vec out(shift.size());
        for (Eigen::Index b = 0; b < shift.size() / m; ++b) out.segment(b * m, m) = z - shift.segment(b * m, m);
        return out;
    }

    Vec project(const Vec& zh) const {
        const auto m = static_cast<Eigen::Index>(M);
        return zh.head(m) + shift.head(m);
    }

    Vec step(const Vec& zh, const Vec* input = nullptr) const {
        Vec out = A.cwiseProduct(zh) + W * zh.cwiseMax(0.0) + h0;
        if (input != nullptr) out += C * *input;
        return out;
    }
};

inline ExpandedPlrnn expand_to_plrnn(const DendParams& p, const Variant& v = {}) {
    detail::require(!v.clipped && !v.mean_centered, "expand_to_plrnn: plain variant only");
    const auto M = static_cast<Eigen::Index>(p.M());
    const auto nb = static_cast<Eigen::Index>(p.basis_count());
    ExpandedPlrnn e;
    e.M = p.M();
    e.A.resize(M * nb);
    e.W.resize(M * nb, M * nb);
    e.h0.resize(M * nb);
    e.shift.resize(M * nb);
    e.C.resize(M * nb, p.C().cols());
    for (Eigen::Index b = 0; b < nb; ++b) {
        e.A.segment(b * M, M) = p.A();
        for (Eigen::Index m = 0; m < M; ++m)
            e.shift(b * M + m) = p.threshold(static_cast<std::size_t>(b), static_cast<std::size_t>(m));
        e.C.middleRows(b * M, M) = p.C();
        for (Eigen::Index c = 0; c < nb; ++c) e.W.block(b * M, c * M, M, M) = p.alpha(static_cast<std::size_t>(c)) * p.W();
    }
    // h0_hat = (A_tilde - I) h_tilde + h0_tilde
    for (Eigen::Index b = 0; b < nb; ++b)
        e.h0.segment(b * M, M) = (p.A().array() - 1.0).matrix().cwiseProduct(e.shift.segment(b * M, M)) + p.h0();
    return e;
}

// ---------------------------------------------------------------------------
// Boundedness of the clipped variant
// ---------------------------------------------------------------------------

/// c-tilde: a bound on ||phi_clipped(u)||_2 valid for every u. Each clipped
/// term alpha_b [max(0, u - h) - max(0, u)] lies between 0 and -alpha_b h.
inline double clipped_phi_bound(const DendParams& p) {
    double c = 0.0;
    for (std::size_t m = 0; m < p.M(); ++m) {
        double lo = 0.0, hi = 0.0;
        for (std::size_t b = 0; b < p.basis_count(); ++b) {
            const double e = -p.alpha(b) * p.threshold(b, m);
            lo += std::min(0.0, e);
            hi += std::max(0.0, e);
        }
        c = std::max(c, std::max(std::abs(lo), std::abs(hi)));
    }
    return std::sqrt(static_cast<double>(p.M())) * c;
}

/// (c ||W|| + ||h0||) / (1 - ||A||) + ||z1||, finite when max|A_ii| < 1.
inline double clipped_orbit_bound(const DendParams& p, const Vec& z1) {
    const double a = p.A().cwiseAbs().maxCoeff();
    detail::require(a < 1.0, "clipped_orbit_bound: needs spectral norm of A < 1");
    return (clipped_phi_bound(p) * detail::spectral_norm(p.W()) + p.h0().norm()) / (1.0 - a) + z1.norm();
}

} // namespace dendplrnn
