// Fixed points, k-cycles, region bookkeeping and vector fields of a trained
// model. Inside each linear sub-region the map is affine, so fixed points
// and cycles are solutions of small dense linear systems that are then
// checked for region self-consistency.
#pragma once

#include "model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <complex>
#include <deque>
#include <map>
#include <set>
#include <vector>

namespace dendplrnn {

enum class Stability { Stable, Unstable, Saddle, Marginal };

inline std::string to_string(Stability s) {
    switch (s) {
    case Stability::Stable: return "stable";
    case Stability::Unstable: return "unstable";
    case Stability::Saddle: return "saddle";
    case Stability::Marginal: return "marginal";
    }
    return "unknown";
}

/// Marginal if any ||lambda| - 1| < tol, else stable / unstable / saddle by
/// the moduli.
inline Stability classify(const Eigen::VectorXcd& eigenvalues, double tol = 1e-6) {
    bool all_in = true, all_out = true;
    for (Eigen::Index i = 0; i < eigenvalues.size(); ++i) {
        const double r = std::abs(eigenvalues(i));
        if (std::abs(r - 1.0) < tol) return Stability::Marginal;
        all_in = all_in && r < 1.0;
        all_out = all_out && r > 1.0;
    }
    if (all_in) return Stability::Stable;
    if (all_out) return Stability::Unstable;
    return Stability::Saddle;
}

struct FixedPointResult {
    Vec z_star;
    RegionConfig region;
    Eigen::VectorXcd eigenvalues;
    Stability stability = Stability::Marginal;
    double residual = 0.0;
};

struct CycleResult {
    std::size_t period = 0;
    Mat points;  ///< [period][M], points.row(k+1) = step(points.row(k))
    std::vector<RegionConfig> regions;
    Eigen::VectorXcd floquet;  ///< eigenvalues of the period-step product Jacobian
    Stability stability = Stability::Marginal;
    double residual = 0.0;  ///< ||F^n(z*) - z*||
};

/// A region whose linear system is (numerically) singular, i.e. the affine
/// piece has an eigenvalue at 1. Reported, not treated as an error.
struct SingularRegion {
    std::vector<RegionConfig> regions;
    double rcond = 0.0;
};

struct SearchOptions {
    enum class Mode { Exhaustive, Seeded };
    Mode mode = Mode::Seeded;
    std::vector<Mat> trajectories;  ///< latent trajectories [T][M] to harvest regions from
    Vec box_lo;                     ///< optional latent box for random seeds
    Vec box_hi;
    std::size_t n_random = 2000;
    std::size_t max_hops = 20;  ///< re-solve in the region of a non-consistent solution
    std::uint64_t rng_seed = 0;
    double rcond_min = 1e-12;
    double dedup_tol = 1e-6;
    double residual_tol = 1e-8;
    std::size_t max_exhaustive = 1'000'000;
};

template <typename T>
struct SearchResult {
    std::vector<T> found;
    std::vector<SingularRegion> singular;
    std::size_t candidates_tried = 0;
};

namespace detail {

/// All distinct per-dimension indicator columns: dimension m has
/// (#distinct breakpoints + 1) reachable patterns, ordered by interval.
inline std::vector<std::vector<std::vector<std::uint8_t>>> column_patterns(const DendParams& p, const Variant& v) {
    const std::size_t nb = p.basis_count();
    const std::size_t rows = nb + (v.clipped ? 1 : 0);
    std::vector<std::vector<std::vector<std::uint8_t>>> out(p.M());
    for (std::size_t m = 0; m < p.M(); ++m) {
        std::vector<double> bp;
        for (std::size_t b = 0; b < nb; ++b) bp.push_back(p.threshold(b, m));
        if (v.clipped) bp.push_back(0.0);
        std::vector<double> sorted = bp;
        std::sort(sorted.begin(), sorted.end());
        sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
        for (std::size_t k = 0; k <= sorted.size(); ++k) {
            std::vector<std::uint8_t> col(rows);
            for (std::size_t r = 0; r < rows; ++r) col[r] = (k > 0 && bp[r] <= sorted[k - 1]) ? 1 : 0;
            out[m].push_back(std::move(col));
        }
    }
    return out;
}

inline double region_space_size(const std::vector<std::vector<std::vector<std::uint8_t>>>& cols) {
    double n = 1.0;
    for (const auto& c : cols) n *= static_cast<double>(c.size());
    return n;
}

/// Enumerates every feasible region (mixed-radix counter over dimensions).
inline std::vector<RegionConfig> all_regions(const DendParams& p, const Variant& v) {
    const auto cols = column_patterns(p, v);
    const std::size_t rows = p.basis_count() + (v.clipped ? 1 : 0);
    std::vector<RegionConfig> out;
    std::vector<std::size_t> idx(p.M(), 0);
    while (true) {
        RegionConfig r;
        r.rows = rows;
        r.M = p.M();
        r.bits.assign(rows * p.M(), 0);
        for (std::size_t m = 0; m < p.M(); ++m)
            for (std::size_t k = 0; k < rows; ++k) r.bits[k * p.M() + m] = cols[m][idx[m]][k];
        out.push_back(std::move(r));
        std::size_t m = 0;
        while (m < p.M() && ++idx[m] == cols[m].size()) idx[m++] = 0;
        if (m == p.M()) break;
    }
    return out;
}

inline std::vector<RegionConfig> single_bit_flips(const RegionConfig& r) {
    std::vector<RegionConfig> out;
    for (std::size_t i = 0; i < r.bits.size(); ++i) {
        RegionConfig f = r;
        f.bits[i] ^= 1;
        out.push_back(std::move(f));
    }
    return out;
}

inline std::vector<Vec> random_seeds(const DendParams& p, const SearchOptions& opt) {
    const auto M = static_cast<Eigen::Index>(p.M());
    Vec lo, hi;
    if (opt.box_lo.size() == M && opt.box_hi.size() == M) {
        lo = opt.box_lo;
        hi = opt.box_hi;
    } else if (!opt.trajectories.empty()) {
        lo = Vec::Constant(M, std::numeric_limits<double>::infinity());
        hi = -lo;
        for (const auto& t : opt.trajectories) {
            lo = lo.cwiseMin(t.colwise().minCoeff().transpose());
            hi = hi.cwiseMax(t.colwise().maxCoeff().transpose());
        }
    } else {
        // thresholds span the interesting part of state space
        lo = Vec::Constant(M, -1.0);
        hi = Vec::Constant(M, 1.0);
        if (p.B() > 0) {
            lo = lo.cwiseMin(p.thresholds().colwise().minCoeff().transpose());
            hi = hi.cwiseMax(p.thresholds().colwise().maxCoeff().transpose());
        }
    }
    const Vec mid = 0.5 * (lo + hi);
    const Vec half = 0.75 * (hi - lo);  // box x 1.5
    Rng rng(opt.rng_seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<Vec> out;
    for (std::size_t i = 0; i < opt.n_random; ++i) {
        Vec z(M);
        for (Eigen::Index m = 0; m < M; ++m) z(m) = mid(m) + half(m) * u(rng);
        out.push_back(std::move(z));
    }
    return out;
}

/// Canonical rotation (lexicographically smallest) of a region sequence.
inline std::vector<RegionConfig> canonical_rotation(const std::vector<RegionConfig>& seq) {
    std::vector<RegionConfig> best = seq;
    for (std::size_t s = 1; s < seq.size(); ++s) {
        std::vector<RegionConfig> rot(seq.begin() + static_cast<std::ptrdiff_t>(s), seq.end());
        rot.insert(rot.end(), seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(s));
        if (std::lexicographical_compare(rot.begin(), rot.end(), best.begin(), best.end())) best = std::move(rot);
    }
    return best;
}

struct CycleSolve {
    bool singular = false;
    double rcond = 0.0;
    Vec z0;
    Mat product;
};

/// Solves z = F_{n-1}(...F_0(z)) for the affine pieces of `seq`.
inline CycleSolve solve_sequence(const std::vector<RegionConfig>& seq, const DendParams& p, const Variant& v,
                                 double rcond_min) {
    const auto M = static_cast<Eigen::Index>(p.M());
    Mat P = Mat::Identity(M, M);
    Vec q = Vec::Zero(M);
    for (const auto& r : seq) {
        const auto piece = affine_piece(r, p, v);
        P = piece.J * P;
        q = piece.J * q + piece.c;
    }
    Eigen::PartialPivLU<Mat> lu(Mat::Identity(M, M) - P);
    CycleSolve s;
    s.rcond = lu.rcond();
    s.product = std::move(P);
    if (!(s.rcond > rcond_min)) {
        s.singular = true;
        return s;
    }
    s.z0 = lu.solve(q);
    return s;
}

} // namespace detail

/// (B+1)^M regions separated by M B (B+1)^(M-1) boundaries. Returned as
/// doubles because the counts overflow 64-bit integers at realistic sizes.
struct RegionCount {
    double regions = 1.0;
    double boundaries = 0.0;
};

inline RegionCount count_theoretical_regions(std::size_t M, std::size_t B) {
    const double m = static_cast<double>(M), b = static_cast<double>(B);
    return {std::pow(b + 1.0, m), B == 0 ? 0.0 : m * b * std::pow(b + 1.0, m - 1.0)};
}

/// Visit counts of each region along a latent trajectory [T][M].
inline std::map<RegionConfig, std::size_t> region_census(const DendParams& p, const Variant& v, const Mat& traj) {
    detail::require(static_cast<std::size_t>(traj.cols()) == p.M(), "region_census: trajectory dimension mismatch");
    std::map<RegionConfig, std::size_t> out;
    for (Eigen::Index t = 0; t < traj.rows(); ++t) ++out[region_of(traj.row(t).transpose(), p, v)];
    return out;
}

/// Fixed points z* = F(z*), one linear solve per candidate region.
inline SearchResult<FixedPointResult> fixed_points(const DendParams& p, const Variant& v,
                                                   const SearchOptions& opt = {}) {
    SearchResult<FixedPointResult> res;
    const auto M = static_cast<Eigen::Index>(p.M());
    std::set<RegionConfig> tried;
    std::deque<RegionConfig> queue;
    auto enqueue = [&](RegionConfig r) {
        if (tried.insert(r).second) queue.push_back(std::move(r));
    };

    const bool exhaustive = opt.mode == SearchOptions::Mode::Exhaustive;
    if (exhaustive) {
        const double n = detail::region_space_size(detail::column_patterns(p, v));
        detail::require(n <= static_cast<double>(opt.max_exhaustive),
                        detail::cat("fixed_points: exhaustive search over ", n, " regions exceeds limit ",
                                    opt.max_exhaustive, ", use seeded mode"));
        for (auto& r : detail::all_regions(p, v)) enqueue(std::move(r));
    } else {
        for (const auto& t : opt.trajectories) {
            detail::require(t.cols() == M, "fixed_points: trajectory dimension mismatch");
            for (Eigen::Index k = 0; k < t.rows(); ++k) enqueue(region_of(t.row(k).transpose(), p, v));
        }
        for (const auto& z : detail::random_seeds(p, opt)) enqueue(region_of(z, p, v));
    }

    auto add = [&](const Vec& z, const RegionConfig& r, const AffinePiece& piece) {
        for (const auto& f : res.found)
            if ((f.z_star - z).norm() < opt.dedup_tol) return false;
        FixedPointResult fp;
        fp.z_star = z;
        fp.region = r;
        fp.eigenvalues = Eigen::EigenSolver<Mat>(piece.J).eigenvalues();
        fp.stability = classify(fp.eigenvalues);
        fp.residual = (step(z, p, v) - z).norm();
        res.found.push_back(std::move(fp));
        return true;
    };

    while (!queue.empty()) {
        RegionConfig r = std::move(queue.front());
        queue.pop_front();
        ++res.candidates_tried;
        for (std::size_t hop = 0; hop <= (exhaustive ? 0 : opt.max_hops); ++hop) {
            const auto piece = affine_piece(r, p, v);
            Eigen::PartialPivLU<Mat> lu(Mat::Identity(M, M) - piece.J);
            const double rc = lu.rcond();
            if (!(rc > opt.rcond_min)) {
                res.singular.push_back({{r}, rc});
                break;
            }
            const Vec z = lu.solve(piece.c);
            const RegionConfig actual = region_of(z, p, v);
            if (actual == r) {
                if ((step(z, p, v) - z).norm() < opt.residual_tol && add(z, r, piece) && !exhaustive)
                    for (auto& f : detail::single_bit_flips(r)) enqueue(std::move(f));
                break;
            }
            if (exhaustive || !tried.insert(actual).second) break;
            ++res.candidates_tried;
            r = actual;
        }
    }
    std::sort(res.found.begin(), res.found.end(), [](const FixedPointResult& a, const FixedPointResult& b) {
        return std::lexicographical_compare(a.z_star.data(), a.z_star.data() + a.z_star.size(), b.z_star.data(),
                                            b.z_star.data() + b.z_star.size());
    });
    return res;
}

/// Cycles of exact period n >= 2. Candidates are region sequences harvested
/// from trajectories and from orbits of random seeds (or all sequences in
/// exhaustive mode). Orbits whose true period divides n are rejected.
inline SearchResult<CycleResult> k_cycles(const DendParams& p, const Variant& v, std::size_t n,
                                          const SearchOptions& opt = {}) {
    detail::require(n >= 2, "k_cycles: period must be >= 2");
    SearchResult<CycleResult> res;
    const auto M = static_cast<Eigen::Index>(p.M());
    std::set<std::vector<RegionConfig>> tried;
    std::deque<std::vector<RegionConfig>> queue;
    auto enqueue = [&](const std::vector<RegionConfig>& seq) {
        auto c = detail::canonical_rotation(seq);
        if (tried.insert(c).second) queue.push_back(std::move(c));
    };
    auto harvest = [&](const Mat& traj) {
        std::vector<RegionConfig> regs;
        for (Eigen::Index k = 0; k < traj.rows(); ++k) regs.push_back(region_of(traj.row(k).transpose(), p, v));
        for (std::size_t k = 0; k + n <= regs.size(); ++k)
            enqueue(std::vector<RegionConfig>(regs.begin() + static_cast<std::ptrdiff_t>(k),
                                              regs.begin() + static_cast<std::ptrdiff_t>(k + n)));
    };

    const bool exhaustive = opt.mode == SearchOptions::Mode::Exhaustive;
    if (exhaustive) {
        const double per = detail::region_space_size(detail::column_patterns(p, v));
        const double total = std::pow(per, static_cast<double>(n));
        detail::require(total <= static_cast<double>(opt.max_exhaustive),
                        detail::cat("k_cycles: exhaustive search over ", total, " sequences exceeds limit ",
                                    opt.max_exhaustive, ", use seeded mode"));
        const auto regions = detail::all_regions(p, v);
        std::vector<std::size_t> idx(n, 0);
        while (true) {
            std::vector<RegionConfig> seq;
            for (auto i : idx) seq.push_back(regions[i]);
            enqueue(seq);
            std::size_t k = 0;
            while (k < n && ++idx[k] == regions.size()) idx[k++] = 0;
            if (k == n) break;
        }
    } else {
        for (const auto& t : opt.trajectories) {
            detail::require(t.cols() == M, "k_cycles: trajectory dimension mismatch");
            harvest(t);
        }
        // short orbits of random seeds, after a brief settling period
        for (const auto& z : detail::random_seeds(p, opt)) {
            try {
                const Mat orbit = simulate_free(z, p, v, 4 * n + 50);
                harvest(orbit.bottomRows(static_cast<Eigen::Index>(2 * n)));
            } catch (const NumericalError&) {
            }
        }
    }

    auto is_new = [&](const Mat& pts) {
        for (const auto& c : res.found) {
            if (c.period != n) continue;
            for (Eigen::Index k = 0; k < c.points.rows(); ++k)
                if ((c.points.row(k) - pts.row(0)).norm() < opt.dedup_tol) return false;
        }
        return true;
    };

    while (!queue.empty()) {
        auto seq = std::move(queue.front());
        queue.pop_front();
        for (std::size_t hop = 0; hop <= (exhaustive ? 0 : opt.max_hops); ++hop) {
            ++res.candidates_tried;
            const auto s = detail::solve_sequence(seq, p, v, opt.rcond_min);
            if (s.singular) {
                res.singular.push_back({seq, s.rcond});
                break;
            }
            Mat pts(static_cast<Eigen::Index>(n), M);
            std::vector<RegionConfig> visited;
            Vec z = s.z0;
            bool finite = true;
            for (std::size_t k = 0; k < n; ++k) {
                pts.row(static_cast<Eigen::Index>(k)) = z.transpose();
                visited.push_back(region_of(z, p, v));
                z = p.A().cwiseProduct(z) + p.W() * phi_basis(nonlinearity_input(z, v), p, v) + p.h0();
                finite = finite && z.allFinite();
            }
            if (!finite) break;
            if (visited == seq) {
                const double residual = (z - s.z0).norm();
                // true period d | n, d < n  ->  the orbit repeats early
                bool divisor = false;
                for (std::size_t d = 1; d < n && !divisor; ++d)
                    if (n % d == 0 && (pts.row(static_cast<Eigen::Index>(d)) - pts.row(0)).norm() < opt.dedup_tol)
                        divisor = true;
                if (!divisor && residual < opt.residual_tol && is_new(pts)) {
                    CycleResult c;
                    c.period = n;
                    c.points = std::move(pts);
                    c.regions = std::move(visited);
                    c.floquet = Eigen::EigenSolver<Mat>(s.product).eigenvalues();
                    c.stability = classify(c.floquet);
                    c.residual = residual;
                    res.found.push_back(std::move(c));
                }
                break;
            }
            if (exhaustive) break;
            auto next = detail::canonical_rotation(visited);
            if (!tried.insert(next).second) break;
            seq = std::move(next);
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Vector fields
// ---------------------------------------------------------------------------

/// Points of a regular grid over dimensions (i, j) of observation space, all
/// other coordinates fixed at `base`. Row-major in (j, i): i varies fastest.
inline Mat planar_grid(const Vec& base, std::size_t i, std::size_t j, double lo_i, double hi_i, double lo_j,
                       double hi_j, std::size_t resolution) {
    detail::require(resolution >= 2, "planar_grid: resolution must be >= 2");
    detail::require(i < static_cast<std::size_t>(base.size()) && j < static_cast<std::size_t>(base.size()) && i != j,
                    "planar_grid: bad plane dimensions");
    Mat out(static_cast<Eigen::Index>(resolution * resolution), base.size());
    const double r = static_cast<double>(resolution - 1);
    for (std::size_t b = 0; b < resolution; ++b)
        for (std::size_t a = 0; a < resolution; ++a) {
            Vec x = base;
            x(static_cast<Eigen::Index>(i)) = lo_i + (hi_i - lo_i) * static_cast<double>(a) / r;
            x(static_cast<Eigen::Index>(j)) = lo_j + (hi_j - lo_j) * static_cast<double>(b) / r;
            out.row(static_cast<Eigen::Index>(b * resolution + a)) = x.transpose();
        }
    return out;
}

/// One-step displacement F(x) - x at observation-space points [G][N]: each
/// point is embedded as z = [x, L x], stepped once and read out.
inline Mat vector_field(const DendParams& p, const Variant& v, const Mat& points) {
    detail::require(p.observation().identity, "vector_field: identity mapping required");
    detail::require(static_cast<std::size_t>(points.cols()) == p.N(), "vector_field: point dimension mismatch");
    const auto N = static_cast<Eigen::Index>(p.N());
    Mat out(points.rows(), N);
    for (Eigen::Index g = 0; g < points.rows(); ++g) {
        const Vec x = points.row(g).transpose();
        const Vec z = step(p.initial_state(x), p, v);
        out.row(g) = (z.head(N) - x).transpose();
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON export
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json complex_to_json(const Eigen::VectorXcd& e) {
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index i = 0; i < e.size(); ++i) out.push_back({e(i).real(), e(i).imag()});
    return out;
}

inline std::vector<double> to_std(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

} // namespace detail

inline nlohmann::json to_json(const FixedPointResult& f, const DendParams& p) {
    nlohmann::json j = {{"z", detail::to_std(f.z_star)},
                        {"region", f.region.to_string()},
                        {"eigenvalues", detail::complex_to_json(f.eigenvalues)},
                        {"spectral_radius", f.eigenvalues.cwiseAbs().maxCoeff()},
                        {"stability", to_string(f.stability)},
                        {"residual", f.residual}};
    Mat z = f.z_star.transpose();
    j["x"] = detail::to_std(observe(z, p).row(0).transpose());
    return j;
}

inline nlohmann::json to_json(const CycleResult& c, const DendParams& p) {
    nlohmann::json pts = nlohmann::json::array(), regs = nlohmann::json::array(), xs = nlohmann::json::array();
    const Mat x = observe(c.points, p);
    for (Eigen::Index k = 0; k < c.points.rows(); ++k) {
        pts.push_back(detail::to_std(c.points.row(k).transpose()));
        xs.push_back(detail::to_std(x.row(k).transpose()));
    }
    for (const auto& r : c.regions) regs.push_back(r.to_string());
    return {{"period", c.period},
            {"points", pts},
            {"x", xs},
            {"regions", regs},
            {"floquet", detail::complex_to_json(c.floquet)},
            {"stability", to_string(c.stability)},
            {"residual", c.residual}};
}

} // namespace dendplrnn
