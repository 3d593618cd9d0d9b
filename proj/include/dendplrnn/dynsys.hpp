// Ground-truth benchmark systems, observation noise, preprocessing and
// CSV ingestion.
#pragma once

#include "common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace dendplrnn {

enum class SystemKind { Lorenz63, Lorenz96, BurstingNeuron, NeuralPopulation, WilsonCowan };

inline std::string to_string(SystemKind k) {
    switch (k) {
    case SystemKind::Lorenz63: return "lorenz63";
    case SystemKind::Lorenz96: return "lorenz96";
    case SystemKind::BurstingNeuron: return "bursting_neuron";
    case SystemKind::NeuralPopulation: return "neural_population";
    case SystemKind::WilsonCowan: return "wilson_cowan";
    }
    return "unknown";
}

inline SystemKind system_kind_from_string(const std::string& s) {
    for (auto k : {SystemKind::Lorenz63, SystemKind::Lorenz96, SystemKind::BurstingNeuron,
                   SystemKind::NeuralPopulation, SystemKind::WilsonCowan})
        if (to_string(k) == s) return k;
    throw ConfigError("unknown system kind '" + s + "'");
}

/// Parameter names each system requires, and their reference values.
inline const std::map<std::string, double>& default_parameters(SystemKind kind) {
    static const std::map<std::string, double> lorenz63{
        {"sigma", 10.0}, {"rho", 28.0}, {"beta", 8.0 / 3.0}};
    static const std::map<std::string, double> lorenz96{{"F", 8.0}, {"N", 10.0}};
    // Burst-firing regime; E_NMDA is not listed with the other constants and
    // defaults to the usual 0 mV reversal potential.
    static const std::map<std::string, double> bursting{
        {"C_m", 6.0},    {"g_L", 8.0},     {"E_L", -80.0}, {"g_Na", 20.0},   {"E_Na", 60.0},
        {"V_hNa", -20.0}, {"k_Na", 15.0},  {"g_K", 10.0},  {"E_K", -90.0},   {"V_hK", -25.0},
        {"k_K", 5.0},    {"tau_n", 1.0},   {"g_M", 25.0},  {"V_hM", -15.0},  {"k_M", 5.0},
        {"tau_h", 200.0}, {"g_NMDA", 10.2}, {"E_NMDA", 0.0}};
    // g scales the random part of the coupling (entries N(0, g^2/N)).
    static const std::map<std::string, double> neuralpop{
        {"N", 50.0}, {"J1", 0.09}, {"g", 2.0}, {"network_seed", 35.0}};
    static const std::map<std::string, double> wilson{
        {"w_ee", 9.0}, {"w_ei", 9.0}, {"w_ie", 5.0}, {"w_ii", 5.0},
        {"z_e", 3.0},  {"z_i", 4.0},  {"tau_e", 1.0}, {"tau_i", 1.0}};
    switch (kind) {
    case SystemKind::Lorenz63: return lorenz63;
    case SystemKind::Lorenz96: return lorenz96;
    case SystemKind::BurstingNeuron: return bursting;
    case SystemKind::NeuralPopulation: return neuralpop;
    case SystemKind::WilsonCowan: return wilson;
    }
    throw ConfigError("unknown system kind");
}

inline double default_dt(SystemKind kind) {
    switch (kind) {
    case SystemKind::BurstingNeuron: return 0.05;
    case SystemKind::WilsonCowan: return 0.1;
    case SystemKind::NeuralPopulation: return 0.05;
    default: return 0.01;
    }
}

/// A benchmark system with its parameters and sampling step.
class SystemSpec {
public:
    /// Validates that `params` holds exactly the names `kind` needs.
    SystemSpec(SystemKind kind, std::map<std::string, double> params, double dt,
               double process_noise_std = 0.0, int substeps = 1)
        : kind_(kind), params_(std::move(params)), dt_(dt), noise_(process_noise_std),
          substeps_(substeps) {
        detail::require(dt_ > 0.0 && std::isfinite(dt_), "dt must be > 0");
        detail::require(noise_ >= 0.0, "process_noise_std must be >= 0");
        detail::require(substeps_ >= 1, "substeps must be >= 1");
        const auto& ref = default_parameters(kind_);
        for (const auto& [name, _] : ref)
            detail::require(params_.count(name) == 1,
                            "missing parameter '" + name + "' for " + to_string(kind_));
        for (const auto& [name, value] : params_) {
            detail::require(ref.count(name) == 1,
                            "unexpected parameter '" + name + "' for " + to_string(kind_));
            detail::require(std::isfinite(value), "parameter '" + name + "' is not finite");
        }
        if (kind_ == SystemKind::Lorenz96 || kind_ == SystemKind::NeuralPopulation)
            detail::require(params_.at("N") >= 1.0 && params_.at("N") == std::floor(params_.at("N")),
                            "parameter 'N' must be a positive integer");
        if (kind_ == SystemKind::Lorenz96)
            detail::require(params_.at("N") >= 4.0, "lorenz96 needs N >= 4");
    }

    /// Reference parameters and default step for `kind`.
    static SystemSpec preset(SystemKind kind, double process_noise_std = 0.0) {
        return SystemSpec(kind, default_parameters(kind), default_dt(kind), process_noise_std);
    }

    SystemKind kind() const { return kind_; }
    const std::map<std::string, double>& params() const { return params_; }
    double param(const std::string& name) const { return params_.at(name); }
    double dt() const { return dt_; }
    double process_noise_std() const { return noise_; }
    int substeps() const { return substeps_; }

    std::size_t dimension() const {
        switch (kind_) {
        case SystemKind::Lorenz63: return 3;
        case SystemKind::BurstingNeuron: return 3;
        case SystemKind::WilsonCowan: return 2;
        case SystemKind::Lorenz96:
        case SystemKind::NeuralPopulation: return static_cast<std::size_t>(params_.at("N"));
        }
        return 0;
    }

    nlohmann::json to_json() const {
        return {{"kind", to_string(kind_)}, {"params", params_}, {"dt", dt_},
                {"process_noise_std", noise_}, {"substeps", substeps_}};
    }

    static SystemSpec from_json(const nlohmann::json& j) {
        auto kind = system_kind_from_string(j.at("kind").get<std::string>());
        auto params = default_parameters(kind);
        if (j.contains("params"))
            for (auto& [k, v] : j.at("params").items()) params[k] = v.get<double>();
        return SystemSpec(kind, params, j.value("dt", default_dt(kind)),
                          j.value("process_noise_std", 0.0), j.value("substeps", 1));
    }

private:
    SystemKind kind_;
    std::map<std::string, double> params_;
    double dt_;
    double noise_;
    int substeps_;
};

/// Time series of one or more trajectories with common length and dimension.
/// Rows of each matrix are time steps.
struct TrajectoryBatch {
    std::vector<Mat> data;
    double dt = 1.0;
    bool standardized = false;
    Vec mean;  ///< per-dimension mean removed by standardize()
    Vec std;   ///< per-dimension scale removed by standardize()
    nlohmann::json provenance = nlohmann::json::object();

    std::size_t n_trajectories() const { return data.size(); }
    std::size_t length() const { return data.empty() ? 0 : static_cast<std::size_t>(data[0].rows()); }
    std::size_t dim() const { return data.empty() ? 0 : static_cast<std::size_t>(data[0].cols()); }

    /// All rows of all trajectories stacked.
    Mat pooled() const {
        Mat out(static_cast<Eigen::Index>(length() * n_trajectories()), static_cast<Eigen::Index>(dim()));
        Eigen::Index r = 0;
        for (const auto& d : data) {
            out.middleRows(r, d.rows()) = d;
            r += d.rows();
        }
        return out;
    }

    void check_shape() const {
        detail::require(!data.empty(), "trajectory batch is empty");
        for (const auto& d : data)
            detail::require(d.rows() == data[0].rows() && d.cols() == data[0].cols(),
                            "all trajectories must share T and N");
    }

    static TrajectoryBatch single(Mat m, double dt = 1.0) {
        TrajectoryBatch b;
        b.data.push_back(std::move(m));
        b.dt = dt;
        return b;
    }
};

// ---------------------------------------------------------------------------
// Vector fields
// ---------------------------------------------------------------------------

namespace detail {

struct NeuralPopulationNet {
    Mat J;
    Vec xi;
    Vec v;
};

inline NeuralPopulationNet make_neural_population(const SystemSpec& spec) {
    const auto n = static_cast<Eigen::Index>(spec.param("N"));
    Rng rng(static_cast<std::uint64_t>(spec.param("network_seed")));
    std::normal_distribution<double> normal(0.0, 1.0);
    NeuralPopulationNet net{Mat(n, n), Vec(n), Vec(n)};
    const double scale = spec.param("g") / std::sqrt(static_cast<double>(n));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) net.J(i, j) = scale * normal(rng);
    for (Eigen::Index i = 0; i < n; ++i) net.xi(i) = normal(rng);
    for (Eigen::Index i = 0; i < n; ++i) net.v(i) = normal(rng);
    return net;
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace detail

/// Deterministic drift f(x) of the system's ODE.
using Drift = std::function<Vec(const Vec&)>;

inline Drift make_drift(const SystemSpec& spec) {
    const auto& p = spec.params();
    switch (spec.kind()) {
    case SystemKind::Lorenz63: {
        const double s = p.at("sigma"), r = p.at("rho"), b = p.at("beta");
        return [s, r, b](const Vec& x) {
            Vec d(3);
            d << s * (x(1) - x(0)), x(0) * (r - x(2)) - x(1), x(0) * x(1) - b * x(2);
            return d;
        };
    }
    case SystemKind::Lorenz96: {
        const double F = p.at("F");
        return [F](const Vec& x) {
            const Eigen::Index n = x.size();
            Vec d(n);
            for (Eigen::Index i = 0; i < n; ++i) {
                const double xp1 = x((i + 1) % n);
                const double xm1 = x((i + n - 1) % n);
                const double xm2 = x((i + n - 2) % n);
                d(i) = (xp1 - xm2) * xm1 - x(i) + F;
            }
            return d;
        };
    }
    case SystemKind::BurstingNeuron: {
        const auto q = p;
        return [q](const Vec& x) {
            const double V = x(0), n = x(1), h = x(2);
            auto gate = [](double vh, double k, double v) { return 1.0 / (1.0 + std::exp((vh - v) / k)); };
            const double m_inf = gate(q.at("V_hNa"), q.at("k_Na"), V);
            const double n_inf = gate(q.at("V_hK"), q.at("k_K"), V);
            const double h_inf = gate(q.at("V_hM"), q.at("k_M"), V);
            const double nmda = 1.0 / (1.0 + 0.33 * std::exp(-0.0625 * V));
            const double current = q.at("g_L") * (V - q.at("E_L")) +
                                   q.at("g_Na") * m_inf * (V - q.at("E_Na")) +
                                   q.at("g_K") * n * (V - q.at("E_K")) +
                                   q.at("g_M") * h * (V - q.at("E_K")) +
                                   q.at("g_NMDA") * nmda * (V - q.at("E_NMDA"));
            Vec d(3);
            d << -current / q.at("C_m"), (n_inf - n) / q.at("tau_n"), (h_inf - h) / q.at("tau_h");
            return d;
        };
    }
    case SystemKind::NeuralPopulation: {
        auto net = detail::make_neural_population(spec);
        const double coupling = p.at("J1") / std::sqrt(p.at("N"));
        return [net, coupling](const Vec& h) {
            const Vec r = h.array().tanh().matrix();
            return Vec(-h + net.J * r + coupling * net.xi * net.v.dot(r));
        };
    }
    case SystemKind::WilsonCowan: {
        const double wee = p.at("w_ee"), wei = p.at("w_ei"), wie = p.at("w_ie"), wii = p.at("w_ii");
        const double ze = p.at("z_e"), zi = p.at("z_i"), te = p.at("tau_e"), ti = p.at("tau_i");
        // state = (r_e, r_i)
        return [=](const Vec& r) {
            Vec d(2);
            d << (-r(0) + detail::logistic(wee * r(0) - wei * r(1) - ze)) / te,
                 (-r(1) + detail::logistic(wie * r(0) - wii * r(1) - zi)) / ti;
            return d;
        };
    }
    }
    throw ConfigError("unknown system kind");
}

namespace detail {

inline Vec rk4_step(const Drift& f, const Vec& x, double h) {
    const Vec k1 = f(x);
    const Vec k2 = f(x + 0.5 * h * k1);
    const Vec k3 = f(x + 0.5 * h * k2);
    const Vec k4 = f(x + h * k3);
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

} // namespace detail

/// Integrates the system for T samples spaced dt apart, starting at (and
/// including) `initial_state`. Drift uses RK4 substeps; process noise is an
/// Euler-Maruyama increment N(0, s^2 dt I) per substep.
inline TrajectoryBatch simulate(const SystemSpec& spec, const Vec& initial_state, std::size_t T,
                                std::uint64_t rng_seed) {
    detail::require(T >= 2, "simulate: T must be >= 2");
    detail::require(static_cast<std::size_t>(initial_state.size()) == spec.dimension(),
                    detail::cat("simulate: initial state has length ", initial_state.size(),
                                ", system dimension is ", spec.dimension()));
    const auto f = make_drift(spec);
    const double h = spec.dt() / spec.substeps();
    const double noise_scale = spec.process_noise_std() * std::sqrt(h);
    Rng rng(rng_seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    Mat out(static_cast<Eigen::Index>(T), initial_state.size());
    Vec x = initial_state;
    out.row(0) = x.transpose();
    for (std::size_t t = 1; t < T; ++t) {
        for (int s = 0; s < spec.substeps(); ++s) {
            x = detail::rk4_step(f, x, h);
            if (noise_scale > 0.0)
                for (Eigen::Index i = 0; i < x.size(); ++i) x(i) += noise_scale * normal(rng);
        }
        if (!x.allFinite())
            throw NumericalError(detail::cat("simulate: non-finite state at step ", t), static_cast<long>(t));
        out.row(static_cast<Eigen::Index>(t)) = x.transpose();
    }
    auto batch = TrajectoryBatch::single(std::move(out), spec.dt());
    batch.provenance = {{"source", "simulation"}, {"system", spec.to_json()},
                        {"initial_state", std::vector<double>(initial_state.data(), initial_state.data() + initial_state.size())},
                        {"rng_seed", rng_seed}, {"preprocessing", nlohmann::json::array()}};
    return batch;
}

/// A point on (or near) each system's attractor-relevant region, used as the
/// default starting state before transient removal.
inline Vec default_initial_state(const SystemSpec& spec, std::uint64_t seed) {
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const auto n = static_cast<Eigen::Index>(spec.dimension());
    Vec x(n);
    switch (spec.kind()) {
    case SystemKind::Lorenz63: x << 1.0 + u(rng), 1.0 + u(rng), 25.0 + 5.0 * u(rng); break;
    case SystemKind::Lorenz96:
        for (Eigen::Index i = 0; i < n; ++i) x(i) = spec.param("F") + u(rng);
        break;
    case SystemKind::BurstingNeuron: x << -60.0 + 5.0 * u(rng), 0.01, 0.04 + 0.01 * u(rng); break;
    case SystemKind::NeuralPopulation:
        for (Eigen::Index i = 0; i < n; ++i) x(i) = u(rng);
        break;
    case SystemKind::WilsonCowan: x << 0.5 + 0.5 * u(rng), 0.5 + 0.5 * u(rng); break;
    }
    return x;
}

/// Equilibria of the drift inside a box, via damped Newton from a grid of
/// starts. Used for ground-truth fixed points (Lorenz, Wilson-Cowan).
struct Equilibrium {
    Vec x;
    Eigen::VectorXcd eigenvalues;  ///< of the drift Jacobian
    bool stable = false;
};

inline std::vector<Equilibrium> find_equilibria(const SystemSpec& spec, const Vec& lo, const Vec& hi,
                                                int grid_per_dim = 20, double tol = 1e-10) {
    const auto f = make_drift(spec);
    const auto n = static_cast<Eigen::Index>(spec.dimension());
    detail::require(lo.size() == n && hi.size() == n, "find_equilibria: box dimension mismatch");
    auto jac = [&](const Vec& x) {
        Mat J(n, n);
        for (Eigen::Index j = 0; j < n; ++j) {
            const double h = 1e-7 * std::max(1.0, std::abs(x(j)));
            Vec xp = x, xm = x;
            xp(j) += h;
            xm(j) -= h;
            J.col(j) = (f(xp) - f(xm)) / (2.0 * h);
        }
        return J;
    };
    std::vector<Equilibrium> found;
    std::size_t total = 1;
    for (Eigen::Index i = 0; i < n; ++i) total *= static_cast<std::size_t>(grid_per_dim);
    detail::require(total <= 2'000'000, "find_equilibria: grid too large");
    for (std::size_t idx = 0; idx < total; ++idx) {
        Vec x(n);
        std::size_t rem = idx;
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto k = rem % static_cast<std::size_t>(grid_per_dim);
            rem /= static_cast<std::size_t>(grid_per_dim);
            x(i) = lo(i) + (hi(i) - lo(i)) * (static_cast<double>(k) + 0.5) / grid_per_dim;
        }
        bool converged = false;
        for (int it = 0; it < 100; ++it) {
            const Vec fx = f(x);
            const double r0 = fx.norm();
            if (r0 < tol) {
                converged = true;
                break;
            }
            const Vec dx = jac(x).fullPivLu().solve(-fx);
            if (!dx.allFinite()) break;
            double step = 1.0;
            while (step > 1e-6 && f(x + step * dx).norm() >= r0) step *= 0.5;
            x += step * dx;
        }
        if (!converged) continue;
        if (((x - lo).array() < -1e-9).any() || ((hi - x).array() < -1e-9).any()) continue;
        bool dup = false;
        for (const auto& e : found)
            if ((e.x - x).norm() < 1e-6) dup = true;
        if (dup) continue;
        Equilibrium e;
        e.x = x;
        e.eigenvalues = Eigen::EigenSolver<Mat>(jac(x)).eigenvalues();
        e.stable = (e.eigenvalues.real().array() < 0.0).all();
        found.push_back(std::move(e));
    }
    std::sort(found.begin(), found.end(), [](const Equilibrium& a, const Equilibrium& b) {
        return std::lexicographical_compare(a.x.data(), a.x.data() + a.x.size(), b.x.data(), b.x.data() + b.x.size());
    });
    return found;
}

// ---------------------------------------------------------------------------
// Noise and preprocessing
// ---------------------------------------------------------------------------

namespace detail {

inline void append_step(TrajectoryBatch& b, nlohmann::json step) {
    if (!b.provenance.is_object()) b.provenance = nlohmann::json::object();
    b.provenance["preprocessing"].push_back(std::move(step));
}

} // namespace detail

/// Adds i.i.d. Gaussian noise with variance `variance_fraction` times each
/// dimension's (pooled) data variance.
inline TrajectoryBatch add_observation_noise(const TrajectoryBatch& batch, double variance_fraction,
                                             std::uint64_t rng_seed) {
    detail::require(variance_fraction >= 0.0, "variance_fraction must be >= 0");
    batch.check_shape();
    TrajectoryBatch out = batch;
    if (variance_fraction == 0.0) return out;
    const Mat pooled = batch.pooled();
    const Vec mean = pooled.colwise().mean().transpose();
    const Vec var = (pooled.rowwise() - mean.transpose()).array().square().colwise().sum().transpose() /
                    static_cast<double>(std::max<Eigen::Index>(pooled.rows() - 1, 1));
    const Vec scale = (variance_fraction * var).array().sqrt().matrix();
    Rng rng(rng_seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& d : out.data)
        for (Eigen::Index t = 0; t < d.rows(); ++t)
            for (Eigen::Index i = 0; i < d.cols(); ++i) d(t, i) += scale(i) * normal(rng);
    detail::append_step(out, {{"op", "observation_noise"}, {"variance_fraction", variance_fraction},
                              {"rng_seed", rng_seed}});
    return out;
}

/// Per-dimension z-scoring pooled across trajectories (sample std, ddof=1).
/// Stores the removed mean/std for unstandardize().
inline TrajectoryBatch standardize(const TrajectoryBatch& batch) {
    batch.check_shape();
    const Mat pooled = batch.pooled();
    detail::require(pooled.rows() >= 2, "standardize: need at least 2 samples");
    const Vec mean = pooled.colwise().mean().transpose();
    Vec sd(mean.size());
    for (Eigen::Index i = 0; i < mean.size(); ++i) {
        const double ss = (pooled.col(i).array() - mean(i)).square().sum();
        sd(i) = std::sqrt(ss / static_cast<double>(pooled.rows() - 1));
        if (!(sd(i) > 0.0) || !std::isfinite(sd(i)))
            throw ConfigError(detail::cat("standardize: dimension ", i, " has zero variance"));
    }
    TrajectoryBatch out = batch;
    for (auto& d : out.data) d = ((d.rowwise() - mean.transpose()).array().rowwise() / sd.transpose().array()).matrix();
    // Second pass removes the rounding residue in the mean.
    const Vec resid = out.pooled().colwise().mean().transpose();
    for (auto& d : out.data) d.rowwise() -= resid.transpose();
    out.standardized = true;
    out.mean = mean;
    out.std = sd;
    detail::append_step(out, {{"op", "standardize"},
                              {"mean", std::vector<double>(mean.data(), mean.data() + mean.size())},
                              {"std", std::vector<double>(sd.data(), sd.data() + sd.size())}});
    return out;
}

/// Inverse of standardize().
inline TrajectoryBatch unstandardize(const TrajectoryBatch& batch) {
    detail::require(batch.standardized, "unstandardize: batch is not standardized");
    TrajectoryBatch out = batch;
    for (auto& d : out.data)
        d = ((d.array().rowwise() * batch.std.transpose().array()).rowwise() + batch.mean.transpose().array()).matrix();
    out.standardized = false;
    detail::append_step(out, {{"op", "unstandardize"}});
    return out;
}

/// Symmetric convolution along time with per-position renormalization of the
/// truncated kernel at the edges.
inline Mat convolve_truncated(const Mat& x, const std::vector<double>& kernel) {
    const auto half = static_cast<Eigen::Index>(kernel.size() / 2);
    const Eigen::Index T = x.rows();
    Mat out = Mat::Zero(T, x.cols());
    for (Eigen::Index t = 0; t < T; ++t) {
        double wsum = 0.0;
        for (Eigen::Index k = -half; k <= half; ++k) {
            const Eigen::Index s = t + k;
            if (s < 0 || s >= T) continue;
            const double w = kernel[static_cast<std::size_t>(k + half)];
            out.row(t) += w * x.row(s);
            wsum += w;
        }
        out.row(t) /= wsum;
    }
    return out;
}

inline std::vector<double> gaussian_kernel(double sigma) {
    const auto half = static_cast<int>(std::ceil(4.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * half + 1));
    for (int i = -half; i <= half; ++i)
        k[static_cast<std::size_t>(i + half)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    return k;
}

/// Hann window of length `window` (numpy.hanning convention, zero end points).
inline std::vector<double> hann_window(std::size_t window) {
    std::vector<double> w(window, 1.0);
    if (window == 1) return w;
    for (std::size_t n = 0; n < window; ++n)
        w[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(window - 1));
    return w;
}

inline TrajectoryBatch gaussian_smooth(const TrajectoryBatch& batch, double sigma_bins) {
    detail::require(sigma_bins > 0.0, "gaussian_smooth: sigma must be > 0");
    batch.check_shape();
    TrajectoryBatch out = batch;
    // narrower than a quarter bin: the sampled kernel is a delta up to rounding
    if (sigma_bins < 0.25) {
        detail::append_step(out, {{"op", "gaussian_smooth"}, {"sigma_bins", sigma_bins}, {"identity", true}});
        return out;
    }
    const auto kernel = gaussian_kernel(sigma_bins);
    detail::require(batch.length() > kernel.size() / 2, "gaussian_smooth: series shorter than kernel half-width");
    for (auto& d : out.data) d = convolve_truncated(d, kernel);
    detail::append_step(out, {{"op", "gaussian_smooth"}, {"sigma_bins", sigma_bins}});
    return out;
}

inline TrajectoryBatch hann_smooth(const TrajectoryBatch& batch, std::size_t window) {
    detail::require(window >= 1, "hann_smooth: window must be positive");
    batch.check_shape();
    detail::require(batch.length() > window, "hann_smooth: series must be longer than the window");
    auto kernel = hann_window(window);
    if (window % 2 == 0) kernel.push_back(0.0);  // centre even windows by zero padding
    TrajectoryBatch out = batch;
    for (auto& d : out.data) d = convolve_truncated(d, kernel);
    detail::append_step(out, {{"op", "hann_smooth"}, {"window", window}});
    return out;
}

/// Row t = (s_t, s_{t-lag}, ..., s_{t-(m-1)lag}) for t >= (m-1)lag.
inline TrajectoryBatch delay_embed(std::span<const double> series, std::size_t m, std::size_t lag) {
    detail::require(m >= 1, "delay_embed: m must be >= 1");
    detail::require(lag >= 1 || m == 1, "delay_embed: lag must be >= 1");
    const std::size_t span_len = (m - 1) * lag;
    detail::require(series.size() > span_len,
                    detail::cat("delay_embed: series of length ", series.size(), " too short for m=", m, ", lag=", lag));
    const std::size_t rows = series.size() - span_len;
    Mat out(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(m));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < m; ++k)
            out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = series[r + span_len - k * lag];
    auto b = TrajectoryBatch::single(std::move(out));
    b.provenance = {{"source", "delay_embedding"},
                    {"preprocessing", {{{"op", "delay_embed"}, {"m", m}, {"lag", lag}}}}};
    return b;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

struct CsvOptions {
    bool skip_header = false;
    std::vector<std::size_t> columns;  ///< empty = all columns (0-based)
    double dt = 1.0;
};

/// Reads a rectangular numeric table, one row per time step. Errors cite
/// 1-based file row and column.
inline TrajectoryBatch ingest_csv(const std::string& path, const CsvOptions& opts = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open '" + path + "'");
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t row_no = 0;
    std::size_t width = 0;
    bool header_pending = opts.skip_header;
    while (std::getline(in, line)) {
        ++row_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#') continue;
        if (header_pending) {
            header_pending = false;
            continue;
        }
        std::vector<double> vals;
        std::size_t col = 0, start = 0;
        while (true) {
            ++col;
            const auto end = line.find(',', start);
            std::string cell = line.substr(start, end == std::string::npos ? std::string::npos : end - start);
            const auto a = cell.find_first_not_of(" \t");
            const auto b = cell.find_last_not_of(" \t");
            cell = a == std::string::npos ? "" : cell.substr(a, b - a + 1);
            double v = 0.0;
            std::size_t used = 0;
            bool ok = !cell.empty();
            if (ok) {
                try {
                    v = std::stod(cell, &used);
                } catch (const std::exception&) {
                    ok = false;
                }
            }
            if (!ok || used != cell.size())
                throw ConfigError(detail::cat(path, ": non-numeric cell at row ", row_no, ", column ", col,
                                              " ('", cell, "')"));
            vals.push_back(v);
            if (end == std::string::npos) break;
            start = end + 1;
        }
        if (width == 0) width = vals.size();
        else if (vals.size() != width)
            throw ConfigError(detail::cat(path, ": ragged row ", row_no, " has ", vals.size(),
                                          " columns, expected ", width));
        rows.push_back(std::move(vals));
    }
    if (rows.empty()) throw ConfigError(path + ": empty file");
    std::vector<std::size_t> cols = opts.columns;
    if (cols.empty())
        for (std::size_t c = 0; c < width; ++c) cols.push_back(c);
    for (auto c : cols)
        if (c >= width) throw ConfigError(detail::cat(path, ": column ", c + 1, " requested but file has ", width));
    Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t k = 0; k < cols.size(); ++k)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = rows[r][cols[k]];
    auto b = TrajectoryBatch::single(std::move(m), opts.dt);
    b.provenance = {{"source", "file"}, {"path", path}, {"columns", cols},
                    {"preprocessing", nlohmann::json::array()}};
    return b;
}

/// Writes one trajectory as CSV with 17 significant digits. `comment` lines
/// are emitted first, prefixed with '#' (ingest_csv skips them).
inline void write_csv(const std::string& path, const Mat& m, const std::vector<std::string>& header = {},
                      const std::vector<std::string>& comment = {}) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path + "'");
    out.precision(17);
    for (const auto& c : comment) out << "# " << c << '\n';
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    if (!header.empty()) out << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << m(r, c);
        out << '\n';
    }
}

} // namespace dendplrnn
