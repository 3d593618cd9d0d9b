// Shared types, errors and small numeric helpers.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dendplrnn {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Rng = std::mt19937_64;

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid argument, shape or configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Numerical failure at run time (divergence, non-finite values).
class NumericalError : public Error {
public:
    NumericalError(const std::string& what, long step = -1)
        : Error(what), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

namespace detail {

template <typename... Args>
std::string cat(const Args&... args) {
    std::ostringstream os;
    os.precision(17);
    (os << ... << args);
    return os.str();
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

inline double relu(double u) { return u > 0.0 ? u : 0.0; }

/// FNV-1a 64-bit, rendered as 16 hex digits.
inline std::string fnv1a_hex(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xF];
        h >>= 4;
    }
    return out;
}

/// Largest singular value.
inline double spectral_norm(const Mat& m) {
    if (m.size() == 0) return 0.0;
    Eigen::JacobiSVD<Mat> svd(m);
    return svd.singularValues()(0);
}

} // namespace detail
} // namespace dendplrnn
