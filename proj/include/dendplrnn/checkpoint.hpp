// JSON checkpoint format for DendParams.
//
// Top-level keys: A, W, h0, alphas, thresholds, C, obs, L, variant, meta,
// plus Sigma and Gamma (noise scales). Matrices are arrays of rows. Doubles
// are written in shortest round-trip form, so save -> load is value exact.
#pragma once

#include "model.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <string>

namespace dendplrnn {

namespace detail {

inline nlohmann::json vec_to_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline nlohmann::json mat_to_json(const Mat& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Vec vec_from_json(const nlohmann::json& j, const std::string& field) {
    if (!j.is_array()) throw ConfigError("checkpoint: '" + field + "' must be an array");
    Vec v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    return v;
}

inline Mat mat_from_json(const nlohmann::json& j, const std::string& field, Eigen::Index cols_if_empty = 0) {
    if (!j.is_array()) throw ConfigError("checkpoint: '" + field + "' must be an array of rows");
    if (j.empty()) return Mat(0, cols_if_empty);
    const auto cols = static_cast<Eigen::Index>(j[0].size());
    Mat m(static_cast<Eigen::Index>(j.size()), cols);
    for (std::size_t r = 0; r < j.size(); ++r) {
        if (static_cast<Eigen::Index>(j[r].size()) != cols)
            throw ConfigError("checkpoint: '" + field + "' has ragged rows");
        for (Eigen::Index c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), c) = j[r][static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

} // namespace detail

struct Checkpoint {
    DendParams params;
    Variant variant;
    nlohmann::json meta = nlohmann::json::object();
};

inline nlohmann::json to_json(const DendParams& p, const Variant& v, const nlohmann::json& meta = {}) {
    nlohmann::json j;
    j["A"] = detail::vec_to_json(p.A());
    j["W"] = detail::mat_to_json(p.W());
    j["h0"] = detail::vec_to_json(p.h0());
    j["alphas"] = detail::vec_to_json(p.alphas());
    j["thresholds"] = detail::mat_to_json(p.thresholds());
    j["C"] = detail::mat_to_json(p.C());
    if (p.observation().identity)
        j["obs"] = {{"mode", "identity"}, {"N", p.N()}};
    else
        j["obs"] = {{"mode", "matrix"}, {"N", p.N()}, {"B", detail::mat_to_json(p.observation().B)}};
    j["L"] = detail::mat_to_json(p.L());
    j["Sigma"] = detail::vec_to_json(p.Sigma());
    j["Gamma"] = detail::vec_to_json(p.Gamma());
    j["variant"] = {{"clipped", v.clipped}, {"mean_centered", v.mean_centered}};
    nlohmann::json m = meta.is_object() ? meta : nlohmann::json::object();
    if (!m.contains("created")) m["created"] = detail::utc_timestamp();
    j["meta"] = std::move(m);
    return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    for (const char* key : {"A", "W", "h0", "alphas", "thresholds", "obs", "L", "variant"})
        if (!j.contains(key)) throw ConfigError(std::string("checkpoint: missing field '") + key + "'");
    Tensors t;
    t.A = detail::vec_from_json(j.at("A"), "A");
    const auto M = t.A.size();
    t.W = detail::mat_from_json(j.at("W"), "W", M);
    t.h0 = detail::vec_from_json(j.at("h0"), "h0");
    t.alphas = detail::vec_from_json(j.at("alphas"), "alphas");
    t.thresholds = detail::mat_from_json(j.at("thresholds"), "thresholds", M);
    const auto& o = j.at("obs");
    const auto N = static_cast<Eigen::Index>(o.at("N").get<std::size_t>());
    Observation obs = o.at("mode").get<std::string>() == "identity"
                          ? Observation::identity_mapping(static_cast<std::size_t>(N))
                          : Observation::matrix(detail::mat_from_json(o.at("B"), "obs.B", M));
    t.L = detail::mat_from_json(j.at("L"), "L", obs.identity ? N : 0);
    if (obs.identity && t.L.rows() == 0) t.L = Mat(0, N);
    if (t.thresholds.rows() == 0) t.thresholds = Mat(0, M);
    Mat C = j.contains("C") ? detail::mat_from_json(j.at("C"), "C", 0) : Mat();
    if (C.rows() == 0) C = Mat::Zero(M, 0);
    Vec Sigma = j.contains("Sigma") ? detail::vec_from_json(j.at("Sigma"), "Sigma") : Vec();
    Vec Gamma = j.contains("Gamma") ? detail::vec_from_json(j.at("Gamma"), "Gamma") : Vec();
    Variant v{j.at("variant").value("clipped", false), j.at("variant").value("mean_centered", false)};
    return Checkpoint{DendParams(std::move(t), std::move(obs), std::move(C), std::move(Sigma), std::move(Gamma)), v,
                      j.value("meta", nlohmann::json::object())};
}

inline void save_checkpoint(const std::string& path, const DendParams& p, const Variant& v,
                            const nlohmann::json& meta = {}) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write checkpoint '" + path + "'");
    out << to_json(p, v, meta).dump(1) << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open checkpoint '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("checkpoint '" + path + "' is not valid JSON: " + e.what());
    }
    return checkpoint_from_json(j);
}

} // namespace dendplrnn
