// Reconstruction quality: state-space divergence (binning and Gaussian
// mixture Monte Carlo), power-spectrum correlation and n-step prediction
// error.
#pragma once

#include "dynsys.hpp"
#include "model.hpp"

#include <nlohmann/json.hpp>
#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <complex>
#include <limits>
#include <map>
#include <unordered_map>
#include <vector>

namespace dendplrnn {

// ---------------------------------------------------------------------------
// State-space divergence
// ---------------------------------------------------------------------------

struct BinningOptions {
    std::size_t m_bins = 30;
    std::size_t transient = 0;  ///< leading generated rows dropped before binning
};

/// KL(p_true || p_gen) over an m^N grid spanning mean +- 2 std of the truth
/// per dimension. Samples outside the grid go to the edge bins. Generated
/// bins that are empty get mass 1 / (10 n_gen).
inline double dstsp_binning(const Mat& truth, const Mat& generated, const BinningOptions& opt = {}) {
    detail::require(truth.cols() == generated.cols(), "dstsp_binning: dimension mismatch");
    detail::require(opt.m_bins >= 1, "dstsp_binning: m_bins must be >= 1");
    const auto N = truth.cols();
    const double cells = std::pow(static_cast<double>(opt.m_bins), static_cast<double>(N));
    if (cells > 1e8)
        throw ConfigError(detail::cat("dstsp_binning: ", opt.m_bins, "^", N,
                                      " bins exceeds 1e8, use dstsp_gmm for this dimension"));
    detail::require(generated.rows() > static_cast<Eigen::Index>(opt.transient),
                    "dstsp_binning: generated series not longer than the transient");
    detail::require(truth.rows() >= 2, "dstsp_binning: truth needs at least 2 samples");
    const Mat gen = generated.bottomRows(generated.rows() - static_cast<Eigen::Index>(opt.transient));

    const Vec mean = truth.colwise().mean().transpose();
    const Vec sd = ((truth.rowwise() - mean.transpose()).array().square().colwise().sum() /
                    static_cast<double>(truth.rows() - 1))
                       .sqrt()
                       .transpose();
    const auto m = static_cast<long>(opt.m_bins);
    auto key = [&](const auto& row) {
        std::uint64_t k = 0;
        for (Eigen::Index i = 0; i < N; ++i) {
            const double lo = mean(i) - 2.0 * sd(i);
            const double width = 4.0 * sd(i);
            long b = width > 0.0 ? static_cast<long>(std::floor((row(i) - lo) / width * static_cast<double>(m))) : 0;
            b = std::clamp(b, 0L, m - 1);
            k = k * static_cast<std::uint64_t>(m) + static_cast<std::uint64_t>(b);
        }
        return k;
    };
    std::unordered_map<std::uint64_t, double> p_true, p_gen;
    for (Eigen::Index t = 0; t < truth.rows(); ++t) p_true[key(truth.row(t))] += 1.0;
    for (Eigen::Index t = 0; t < gen.rows(); ++t) p_gen[key(gen.row(t))] += 1.0;
    const double nt = static_cast<double>(truth.rows());
    const double ng = static_cast<double>(gen.rows());
    const double floor_mass = 1.0 / (10.0 * ng);
    // sum in key order so the result does not depend on hash-table layout
    std::map<std::uint64_t, double> ordered(p_true.begin(), p_true.end());
    double kl = 0.0;
    for (const auto& [k, count] : ordered) {
        const double p = count / nt;
        const auto it = p_gen.find(k);
        const double q = it == p_gen.end() ? floor_mass : it->second / ng;
        kl += p * std::log(p / q);
    }
    return kl;
}

inline double dstsp_binning(const TrajectoryBatch& truth, const TrajectoryBatch& generated,
                            const BinningOptions& opt = {}) {
    return dstsp_binning(truth.pooled(), generated.pooled(), opt);
}

struct GmmOptions {
    double sigma2 = 1.0;
    std::size_t n_mc = 1000;
    std::uint64_t rng_seed = 0;
    std::size_t max_centers = 5000;
};

namespace detail {

/// Evenly strided subsample of at most `cap` rows.
inline Mat stride_subsample(const Mat& x, std::size_t cap) {
    const auto n = static_cast<std::size_t>(x.rows());
    if (n <= cap) return x;
    Mat out(static_cast<Eigen::Index>(cap), x.cols());
    for (std::size_t k = 0; k < cap; ++k) out.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(k * n / cap));
    return out;
}

/// log (1/T) sum_t exp(-||x - c_t||^2 / (2 sigma2)); the Gaussian
/// normalization constant is omitted because it cancels in the ratio.
inline double log_mixture(const Vec& x, const Mat& centers, double sigma2) {
    const Vec d2 = (centers.rowwise() - x.transpose()).rowwise().squaredNorm();
    const Vec e = -d2 / (2.0 * sigma2);
    const double mx = e.maxCoeff();
    return mx + std::log((e.array() - mx).exp().sum()) - std::log(static_cast<double>(centers.rows()));
}

} // namespace detail

/// Monte Carlo KL between Gaussian mixtures (covariance sigma2 I) centred on
/// the truth and generated samples; n_mc draws from the truth mixture.
inline double dstsp_gmm(const Mat& truth, const Mat& generated, const GmmOptions& opt = {}) {
    detail::require(truth.cols() == generated.cols(), "dstsp_gmm: dimension mismatch");
    detail::require(truth.rows() >= 1 && generated.rows() >= 1, "dstsp_gmm: empty input");
    detail::require(opt.sigma2 > 0.0, "dstsp_gmm: sigma2 must be > 0");
    detail::require(opt.n_mc >= 1 && opt.max_centers >= 1, "dstsp_gmm: n_mc and max_centers must be >= 1");
    const Mat ct = detail::stride_subsample(truth, opt.max_centers);
    const Mat cg = detail::stride_subsample(generated, opt.max_centers);
    Rng rng(opt.rng_seed);
    std::uniform_int_distribution<Eigen::Index> pick(0, ct.rows() - 1);
    std::normal_distribution<double> normal(0.0, std::sqrt(opt.sigma2));
    double sum = 0.0;
    for (std::size_t i = 0; i < opt.n_mc; ++i) {
        Vec x = ct.row(pick(rng)).transpose();
        for (Eigen::Index j = 0; j < x.size(); ++j) x(j) += normal(rng);
        sum += detail::log_mixture(x, ct, opt.sigma2) - detail::log_mixture(x, cg, opt.sigma2);
    }
    return sum / static_cast<double>(opt.n_mc);
}

// ---------------------------------------------------------------------------
// Power-spectrum correlation
// ---------------------------------------------------------------------------

struct PscOptions {
    double smooth_sigma = 100.0;    ///< Gaussian width in bins at length 100000, scaled linearly
    double cutoff_fraction = 0.1;   ///< fraction of the one-sided spectrum retained
    std::size_t max_length = 100000;
};

namespace detail {

inline Vec standardized_column(const Mat& x, Eigen::Index col, std::size_t T) {
    Vec v = x.col(col).head(static_cast<Eigen::Index>(T));
    v.array() -= v.mean();
    const double sd = std::sqrt(v.squaredNorm() / static_cast<double>(std::max<Eigen::Index>(v.size() - 1, 1)));
    if (sd > 0.0) v /= sd;
    return v;
}

/// Smoothed, unit-sum one-sided power spectrum truncated to the retained band.
inline Vec power_spectrum(const Vec& series, const PscOptions& opt) {
    Eigen::FFT<double> fft;
    std::vector<double> in(series.data(), series.data() + series.size());
    std::vector<std::complex<double>> out;
    fft.fwd(out, in);
    const std::size_t half = in.size() / 2 + 1;
    Mat ps(static_cast<Eigen::Index>(half), 1);
    for (std::size_t k = 0; k < half; ++k) ps(static_cast<Eigen::Index>(k), 0) = std::norm(out[k]);
    const double sigma = opt.smooth_sigma * static_cast<double>(in.size()) / 100000.0;
    if (sigma > 1e-3) ps = convolve_truncated(ps, gaussian_kernel(sigma));
    const double total = ps.sum();
    if (total > 0.0) ps /= total;
    const auto keep = std::max<Eigen::Index>(2, static_cast<Eigen::Index>(std::floor(opt.cutoff_fraction * static_cast<double>(half))));
    return ps.col(0).head(std::min<Eigen::Index>(keep, ps.rows()));
}

inline double pearson(const Vec& a, const Vec& b) {
    const Vec da = (a.array() - a.mean()).matrix();
    const Vec db = (b.array() - b.mean()).matrix();
    const double den = std::sqrt(da.squaredNorm() * db.squaredNorm());
    if (den == 0.0) return 0.0;
    return std::clamp(da.dot(db) / den, -1.0, 1.0);
}

} // namespace detail

/// Dimension-averaged Pearson correlation of smoothed power spectra of the
/// standardized series (first max_length steps, common length).
inline double psc(const Mat& truth, const Mat& generated, const PscOptions& opt = {}) {
    detail::require(truth.cols() == generated.cols(), "psc: dimension mismatch");
    detail::require(opt.cutoff_fraction > 0.0 && opt.cutoff_fraction <= 1.0, "psc: cutoff_fraction must be in (0, 1]");
    detail::require(opt.smooth_sigma >= 0.0, "psc: smooth_sigma must be >= 0");
    const auto T = std::min({static_cast<std::size_t>(truth.rows()), static_cast<std::size_t>(generated.rows()), opt.max_length});
    if (T < 256) throw ConfigError(detail::cat("psc: series length ", T, " < 256, spectrum too coarse"));
    double sum = 0.0;
    for (Eigen::Index i = 0; i < truth.cols(); ++i) {
        const Vec st = detail::power_spectrum(detail::standardized_column(truth, i, T), opt);
        const Vec sg = detail::power_spectrum(detail::standardized_column(generated, i, T), opt);
        sum += detail::pearson(st, sg);
    }
    return sum / static_cast<double>(truth.cols());
}

// ---------------------------------------------------------------------------
// Prediction error
// ---------------------------------------------------------------------------

struct PredictionOptions {
    std::size_t warmup = 50;
    std::size_t stride = 10;
};

/// Mean squared n-step prediction error. For each evaluated t the latent
/// state is built by forcing every step over the preceding min(t, warmup)
/// observations and at t itself, then the model runs freely for n steps.
inline double pe_n_step(const DendParams& p, const Variant& v, const Mat& test, std::size_t n,
                        const PredictionOptions& opt = {}) {
    detail::require(p.observation().identity, "pe_n_step: identity mapping required");
    detail::require(n >= 1, "pe_n_step: n must be >= 1");
    detail::require(opt.stride >= 1, "pe_n_step: stride must be >= 1");
    detail::require(static_cast<std::size_t>(test.cols()) == p.N(), "pe_n_step: test dimension mismatch");
    const auto T = static_cast<std::size_t>(test.rows());
    if (T <= opt.warmup + n)
        throw ConfigError(detail::cat("pe_n_step: test length ", T, " must exceed warmup + n = ", opt.warmup + n));
    const auto N = static_cast<Eigen::Index>(p.N());
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t + n < T; t += opt.stride) {
        const std::size_t s = t - std::min(t, opt.warmup);
        Vec z = p.initial_state(test.row(static_cast<Eigen::Index>(s)).transpose());
        for (std::size_t k = s; k < t; ++k) {
            z.head(N) = test.row(static_cast<Eigen::Index>(k)).transpose();
            z = step(z, p, v, nullptr, nullptr, static_cast<long>(k));
        }
        z.head(N) = test.row(static_cast<Eigen::Index>(t)).transpose();
        for (std::size_t k = 0; k < n; ++k) z = step(z, p, v, nullptr, nullptr, static_cast<long>(t + k));
        sum += (test.row(static_cast<Eigen::Index>(t + n)).transpose() - z.head(N)).squaredNorm();
        ++count;
    }
    return sum / (static_cast<double>(N) * static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct MetricOptions {
    BinningOptions binning;
    GmmOptions gmm;
    PscOptions spectrum;
    PredictionOptions prediction;
    std::vector<std::size_t> pe_steps{1, 5, 20};
    std::size_t generated_length = 0;  ///< 0 = length of the truth series
    std::size_t transient = 1000;      ///< free-run steps discarded before comparison
    double success_threshold = 4.0;
    bool compute_gmm = true;

    nlohmann::json to_json() const {
        return {{"m_bins", binning.m_bins},
                {"sigma2", gmm.sigma2},
                {"n_mc", gmm.n_mc},
                {"gmm_seed", gmm.rng_seed},
                {"max_centers", gmm.max_centers},
                {"smooth_sigma", spectrum.smooth_sigma},
                {"cutoff_fraction", spectrum.cutoff_fraction},
                {"warmup", prediction.warmup},
                {"stride", prediction.stride},
                {"pe_steps", pe_steps},
                {"generated_length", generated_length},
                {"transient", transient},
                {"success_threshold", success_threshold},
                {"compute_gmm", compute_gmm}};
    }
};

struct ReconMetrics {
    double dstsp_bin = std::numeric_limits<double>::quiet_NaN();
    double dstsp_gmm = std::numeric_limits<double>::quiet_NaN();
    double psc = std::numeric_limits<double>::quiet_NaN();
    std::map<std::size_t, double> pe;
    bool success = false;
    std::string note;  ///< set when the free run diverged or a metric was skipped

    nlohmann::json to_json() const {
        auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
        nlohmann::json pej = nlohmann::json::object();
        for (const auto& [n, val] : pe) pej[std::to_string(n)] = num(val);
        nlohmann::json j = {{"dstsp_bin", num(dstsp_bin)}, {"dstsp_gmm", num(dstsp_gmm)}, {"psc", num(psc)},
                            {"pe", pej}, {"success", success}};
        if (!note.empty()) j["note"] = note;
        return j;
    }
};

/// Free-running observations of length T after discarding `transient` steps,
/// started from the latent state inferred from x1.
inline Mat generate_observations(const DendParams& p, const Variant& v, const Vec& x1, std::size_t T,
                                 std::size_t transient) {
    const Mat z = simulate_free(p.initial_state(x1), p, v, T + transient);
    return observe(z.bottomRows(static_cast<Eigen::Index>(T)), p);
}

/// Full evaluation against a test series. A diverging free run yields
/// maximal-failure values rather than an exception.
inline ReconMetrics evaluate_reconstruction(const DendParams& p, const Variant& v, const Mat& test,
                                            const MetricOptions& opt = {}) {
    ReconMetrics r;
    const std::size_t T = opt.generated_length ? opt.generated_length : static_cast<std::size_t>(test.rows());
    Mat gen;
    try {
        gen = generate_observations(p, v, test.row(0).transpose(), T, opt.transient);
    } catch (const NumericalError& e) {
        r.note = std::string("free run diverged: ") + e.what();
        r.dstsp_bin = std::numeric_limits<double>::infinity();
        r.psc = -1.0;
    }
    if (gen.size() > 0) {
        BinningOptions b = opt.binning;
        b.transient = 0;
        if (std::pow(static_cast<double>(b.m_bins), static_cast<double>(test.cols())) <= 1e8)
            r.dstsp_bin = dstsp_binning(test, gen, b);
        else
            r.note = "dstsp_bin skipped: too many bins for this dimension, see dstsp_gmm";
        if (opt.compute_gmm) r.dstsp_gmm = dstsp_gmm(test, gen, opt.gmm);
        r.psc = psc(test, gen, opt.spectrum);
    }
    for (auto n : opt.pe_steps) {
        try {
            r.pe[n] = pe_n_step(p, v, test, n, opt.prediction);
        } catch (const NumericalError&) {
            r.pe[n] = std::numeric_limits<double>::infinity();
        }
    }
    r.success = std::isnan(r.dstsp_bin) ? r.dstsp_gmm < opt.success_threshold : r.dstsp_bin < opt.success_threshold;
    return r;
}

} // namespace dendplrnn
