// Run configuration and the generate / train / evaluate / analyze / sweep
// commands behind the command-line tool.
//
// A run is described by one JSON document. Unknown keys and type errors are
// reported with their dotted field path (e.g. "train.M") as ConfigError.
#pragma once

#include "analysis.hpp"
#include "checkpoint.hpp"
#include "dynsys.hpp"
#include "metrics.hpp"
#include "training.hpp"

#include <nlohmann/json.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

namespace dendplrnn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Field-path aware JSON reader
// ---------------------------------------------------------------------------

class FieldReader {
public:
    FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError("config field '" + label() + "': expected an object");
    }

    bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

    template <typename T>
    T get(const std::string& key, T fallback) {
        seen_.insert(key);
        if (!has(key)) return fallback;
        return convert<T>(j_.at(key), field(key));
    }

    template <typename T>
    T require(const std::string& key) {
        seen_.insert(key);
        if (!has(key)) throw ConfigError("config field '" + field(key) + "': required");
        return convert<T>(j_.at(key), field(key));
    }

    FieldReader child(const std::string& key) {
        seen_.insert(key);
        static const json empty = json::object();
        return FieldReader(has(key) ? j_.at(key) : empty, field(key));
    }

    const json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    /// Rejects keys that were never read.
    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError("config field '" + field(it.key()) + "': unknown field");
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    std::string label() const { return path_.empty() ? "<root>" : path_; }

    template <typename T>
    static T convert(const json& v, const std::string& where) {
        auto fail = [&](const char* what) {
            return ConfigError("config field '" + where + "': expected " + what + ", got " + v.dump());
        };
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw fail("a boolean");
            return v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw fail("a string");
            return v.get<std::string>();
        } else if constexpr (std::is_same_v<T, double>) {
            if (!v.is_number()) throw fail("a number");
            return v.get<double>();
        } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
            if (!v.is_number_unsigned()) throw fail("a non-negative integer");
            return v.get<T>();
        } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
            if (!v.is_array()) throw fail("an array of non-negative integers");
            T out;
            for (const auto& e : v) {
                if (!e.is_number_unsigned()) throw fail("an array of non-negative integers");
                out.push_back(e.get<std::size_t>());
            }
            return out;
        } else if constexpr (std::is_same_v<T, std::vector<std::uint64_t>>) {
            if (!v.is_array()) throw fail("an array of non-negative integers");
            T out;
            for (const auto& e : v) {
                if (!e.is_number_unsigned()) throw fail("an array of non-negative integers");
                out.push_back(e.get<std::uint64_t>());
            }
            return out;
        } else if constexpr (std::is_same_v<T, std::vector<double>>) {
            if (!v.is_array()) throw fail("an array of numbers");
            T out;
            for (const auto& e : v) {
                if (!e.is_number()) throw fail("an array of numbers");
                out.push_back(e.get<double>());
            }
            return out;
        } else {
            static_assert(sizeof(T) == 0, "unsupported config type");
        }
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

enum class Condition { Standard, LowData, PartialObservation, HighNoise };

inline std::string to_string(Condition c) {
    switch (c) {
    case Condition::Standard: return "standard";
    case Condition::LowData: return "low_data";
    case Condition::PartialObservation: return "partial_observation";
    case Condition::HighNoise: return "high_noise";
    }
    return "standard";
}

inline Condition condition_from_string(const std::string& s, const std::string& field) {
    if (s == "standard") return Condition::Standard;
    if (s == "low_data") return Condition::LowData;
    if (s == "partial_observation") return Condition::PartialObservation;
    if (s == "high_noise") return Condition::HighNoise;
    throw ConfigError("config field '" + field + "': unknown condition '" + s +
                      "' (standard, low_data, partial_observation, high_noise)");
}

struct DataConfig {
    std::size_t train_length = 100000;
    std::size_t test_length = 100000;
    std::size_t transient = 1000;
    double observation_noise = 0.01;  ///< fraction of each dimension's variance
    std::size_t n_trajectories = 1;
    std::string initial_conditions = "random";  ///< or "grid" over [grid_lo, grid_hi]
    std::vector<double> grid_lo;
    std::vector<double> grid_hi;
    std::size_t embed_m = 0;  ///< delay embedding of the kept coordinate (partial observation)
    std::size_t embed_lag = 1;
};

struct AnalysisConfig {
    std::string mode = "auto";  ///< auto | exhaustive | seeded
    std::size_t max_period = 5;
    std::size_t n_random = 2000;
    std::size_t trajectory_length = 5000;
    std::size_t field_resolution = 20;
    std::size_t max_exhaustive = 1'000'000;
    std::vector<double> field_lo;  ///< plane box in standardized coordinates
    std::vector<double> field_hi;
};

struct PathConfig {
    std::string data_in;
    std::string data_out;
    std::string checkpoint;
    std::string report;
    std::string out_dir;
};

struct SweepConfig {
    std::vector<std::size_t> M;
    std::vector<std::size_t> B;
    std::vector<std::uint64_t> seeds;
};

struct RunConfig {
    std::uint64_t seed = 0;
    Condition condition = Condition::Standard;
    SystemSpec system = SystemSpec::preset(SystemKind::Lorenz63);
    DataConfig data;
    TrainConfig train;
    MetricOptions metrics;
    AnalysisConfig analysis;
    PathConfig paths;
    SweepConfig sweep;

    /// Canonical form with all defaults filled in; the hashes are taken of it.
    json to_json() const {
        json j;
        j["seed"] = seed;
        j["condition"] = to_string(condition);
        j["system"] = {{"kind", to_string(system.kind())},
                       {"params", system.params()},
                       {"dt", system.dt()},
                       {"process_noise_std", system.process_noise_std()},
                       {"substeps", system.substeps()}};
        json embed = nullptr;
        if (data.embed_m > 0) embed = {{"m", data.embed_m}, {"lag", data.embed_lag}};
        j["data"] = {{"train_length", data.train_length},
                     {"test_length", data.test_length},
                     {"transient", data.transient},
                     {"observation_noise", data.observation_noise},
                     {"n_trajectories", data.n_trajectories},
                     {"initial_conditions", data.initial_conditions},
                     {"grid_lo", data.grid_lo},
                     {"grid_hi", data.grid_hi},
                     {"embed", embed}};
        j["train"] = train.to_json();
        j["metrics"] = metrics.to_json();
        j["analysis"] = {{"mode", analysis.mode},
                         {"max_period", analysis.max_period},
                         {"n_random", analysis.n_random},
                         {"trajectory_length", analysis.trajectory_length},
                         {"field_resolution", analysis.field_resolution},
                         {"max_exhaustive", analysis.max_exhaustive},
                         {"field_lo", analysis.field_lo},
                         {"field_hi", analysis.field_hi}};
        j["paths"] = {{"data_in", paths.data_in},
                      {"data_out", paths.data_out},
                      {"checkpoint", paths.checkpoint},
                      {"report", paths.report},
                      {"out_dir", paths.out_dir}};
        j["sweep"] = {{"M", sweep.M}, {"B", sweep.B}, {"seeds", sweep.seeds}};
        return j;
    }

    /// Identifies the dataset: system, data pipeline, condition and seed.
    std::string data_hash() const {
        const json j = to_json();
        return dendplrnn::detail::fnv1a_hex(json{{"seed", j["seed"]}, {"condition", j["condition"]}, {"system", j["system"]},
                                      {"data", j["data"]}}
                                     .dump());
    }

    /// Identifies data plus model and training settings.
    std::string config_hash() const {
        const json j = to_json();
        return dendplrnn::detail::fnv1a_hex(json{{"data", data_hash()}, {"train", j["train"]}}.dump());
    }
};

inline RunConfig parse_run_config(const json& root) {
    RunConfig c;
    FieldReader r(root, "");
    c.seed = r.get<std::uint64_t>("seed", 0);
    c.condition = condition_from_string(r.get<std::string>("condition", "standard"), "condition");

    {
        auto s = r.child("system");
        const std::string kind_name = s.get<std::string>("kind", "lorenz63");
        SystemKind kind;
        try {
            kind = system_kind_from_string(kind_name);
        } catch (const Error& e) {
            throw ConfigError("config field 'system.kind': " + std::string(e.what()));
        }
        std::map<std::string, double> params = default_parameters(kind);
        if (s.has("params")) {
            auto pr = s.child("params");
            for (auto& [name, value] : params) value = pr.get<double>(name, value);
            pr.finish();
        } else {
            s.child("params");
        }
        const double dt = s.get<double>("dt", default_dt(kind));
        const double noise = s.get<double>("process_noise_std", 0.0);
        const auto substeps = s.get<std::size_t>("substeps", 1);
        s.finish();
        try {
            c.system = SystemSpec(kind, params, dt, noise, static_cast<int>(substeps));
        } catch (const ConfigError& e) {
            throw ConfigError("config field 'system': " + std::string(e.what()));
        }
    }
    {
        auto d = r.child("data");
        auto& D = c.data;
        D.train_length = d.get("train_length", D.train_length);
        D.test_length = d.get("test_length", D.test_length);
        D.transient = d.get("transient", D.transient);
        D.observation_noise = d.get("observation_noise", D.observation_noise);
        D.n_trajectories = d.get("n_trajectories", D.n_trajectories);
        D.initial_conditions = d.get("initial_conditions", D.initial_conditions);
        D.grid_lo = d.get("grid_lo", D.grid_lo);
        D.grid_hi = d.get("grid_hi", D.grid_hi);
        if (d.has("embed")) {
            auto e = d.child("embed");
            D.embed_m = e.require<std::size_t>("m");
            D.embed_lag = e.get<std::size_t>("lag", 1);
            e.finish();
        } else {
            d.child("embed");
        }
        d.finish();
        if (D.train_length < 2) throw ConfigError("config field 'data.train_length': must be >= 2");
        if (D.test_length < 2) throw ConfigError("config field 'data.test_length': must be >= 2");
        if (D.n_trajectories < 1) throw ConfigError("config field 'data.n_trajectories': must be >= 1");
        if (D.observation_noise < 0.0) throw ConfigError("config field 'data.observation_noise': must be >= 0");
        if (D.initial_conditions != "random" && D.initial_conditions != "grid")
            throw ConfigError("config field 'data.initial_conditions': expected \"random\" or \"grid\"");
        if (D.initial_conditions == "grid" &&
            (D.grid_lo.size() != c.system.dimension() || D.grid_hi.size() != c.system.dimension()))
            throw ConfigError("config field 'data.grid_lo': grid initial conditions need grid_lo/grid_hi of the system dimension");
        if (D.embed_m == 1 || (D.embed_m > 0 && D.embed_lag < 1))
            throw ConfigError("config field 'data.embed': m must be >= 2 and lag >= 1");
    }
    {
        auto t = r.child("train");
        auto& T = c.train;
        T.M = t.get("M", T.M);
        T.B = t.get("B", T.B);
        T.tau = t.get("tau", T.tau);
        T.seq_len = t.get("seq_len", T.seq_len);
        T.batch_size = t.get("batch_size", T.batch_size);
        T.epochs = t.get("epochs", T.epochs);
        T.batches_per_epoch = t.get("batches_per_epoch", T.batches_per_epoch);
        T.lr_start = t.get("lr_start", T.lr_start);
        T.lr_end = t.get("lr_end", T.lr_end);
        T.lambda_mar = t.get("lambda_mar", T.lambda_mar);
        T.m_reg = t.get("m_reg", T.m_reg);
        T.variant.clipped = t.get("clipped", false);
        T.variant.mean_centered = t.get("mean_centered", false);
        T.rng_seed = t.get<std::uint64_t>("rng_seed", c.seed);
        T.gradient_clip_norm = t.get("gradient_clip_norm", T.gradient_clip_norm);
        T.checkpoint_every = t.get("checkpoint_every", T.checkpoint_every);
        t.finish();
        try {
            T.validate();
        } catch (const ConfigError& e) {
            const std::string msg = e.what();
            const auto colon = msg.find(':');
            throw ConfigError("config field '" + msg.substr(0, colon) + "':" + msg.substr(colon + 1));
        }
    }
    {
        auto m = r.child("metrics");
        auto& O = c.metrics;
        O.binning.m_bins = m.get("m_bins", O.binning.m_bins);
        O.gmm.sigma2 = m.get("sigma2", O.gmm.sigma2);
        O.gmm.n_mc = m.get("n_mc", O.gmm.n_mc);
        O.gmm.rng_seed = m.get<std::uint64_t>("gmm_seed", O.gmm.rng_seed);
        O.gmm.max_centers = m.get("max_centers", O.gmm.max_centers);
        O.spectrum.smooth_sigma = m.get("smooth_sigma", O.spectrum.smooth_sigma);
        O.spectrum.cutoff_fraction = m.get("cutoff_fraction", O.spectrum.cutoff_fraction);
        O.prediction.warmup = m.get("warmup", O.prediction.warmup);
        O.prediction.stride = m.get("stride", O.prediction.stride);
        O.pe_steps = m.get("pe_steps", O.pe_steps);
        O.generated_length = m.get("generated_length", O.generated_length);
        O.transient = m.get("transient", O.transient);
        O.success_threshold = m.get("success_threshold", O.success_threshold);
        O.compute_gmm = m.get("compute_gmm", O.compute_gmm);
        m.finish();
        if (O.binning.m_bins < 1) throw ConfigError("config field 'metrics.m_bins': must be >= 1");
        if (O.gmm.sigma2 <= 0.0) throw ConfigError("config field 'metrics.sigma2': must be > 0");
        if (O.spectrum.cutoff_fraction <= 0.0 || O.spectrum.cutoff_fraction > 1.0)
            throw ConfigError("config field 'metrics.cutoff_fraction': must be in (0, 1]");
        if (O.prediction.stride < 1) throw ConfigError("config field 'metrics.stride': must be >= 1");
        for (auto n : O.pe_steps)
            if (n < 1) throw ConfigError("config field 'metrics.pe_steps': steps must be >= 1");
    }
    {
        auto a = r.child("analysis");
        auto& A = c.analysis;
        A.mode = a.get("mode", A.mode);
        A.max_period = a.get("max_period", A.max_period);
        A.n_random = a.get("n_random", A.n_random);
        A.trajectory_length = a.get("trajectory_length", A.trajectory_length);
        A.field_resolution = a.get("field_resolution", A.field_resolution);
        A.max_exhaustive = a.get("max_exhaustive", A.max_exhaustive);
        A.field_lo = a.get("field_lo", A.field_lo);
        A.field_hi = a.get("field_hi", A.field_hi);
        a.finish();
        if (A.mode != "auto" && A.mode != "exhaustive" && A.mode != "seeded")
            throw ConfigError("config field 'analysis.mode': expected auto, exhaustive or seeded");
        if (A.field_resolution < 2) throw ConfigError("config field 'analysis.field_resolution': must be >= 2");
        if (A.field_lo.size() != A.field_hi.size() || (!A.field_lo.empty() && A.field_lo.size() != 2))
            throw ConfigError("config field 'analysis.field_lo': field_lo/field_hi must both hold 2 numbers");
    }
    {
        auto p = r.child("paths");
        c.paths.data_in = p.get("data_in", c.paths.data_in);
        c.paths.data_out = p.get("data_out", c.paths.data_out);
        c.paths.checkpoint = p.get("checkpoint", c.paths.checkpoint);
        c.paths.report = p.get("report", c.paths.report);
        c.paths.out_dir = p.get("out_dir", c.paths.out_dir);
        p.finish();
    }
    {
        auto s = r.child("sweep");
        c.sweep.M = s.get("M", c.sweep.M);
        c.sweep.B = s.get("B", c.sweep.B);
        c.sweep.seeds = s.get("seeds", c.sweep.seeds);
        s.finish();
    }
    r.finish();
    return c;
}

inline json read_json_file(const std::string& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + what + " '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(what + " '" + path + "' is not valid JSON: " + e.what());
    }
}

inline RunConfig load_run_config(const std::string& path) { return parse_run_config(read_json_file(path, "config")); }

inline void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path + "'");
    out << j.dump(2) << '\n';
}

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw ConfigError("output directory '" + dir + "' cannot be created");
    const auto probe = fs::path(dir) / ".write_probe";
    {
        std::ofstream out(probe);
        if (!out) throw ConfigError("output directory '" + dir + "' is not writable");
    }
    fs::remove(probe, ec);
}

inline std::string require_path(const std::string& value, const char* field) {
    if (value.empty()) throw ConfigError(std::string("config field '") + field + "': required (or pass it on the command line)");
    return value;
}

// ---------------------------------------------------------------------------
// Datasets on disk: train.csv, test.csv, provenance.json
// ---------------------------------------------------------------------------

struct Dataset {
    TrajectoryBatch train;
    TrajectoryBatch test;
    json provenance;
};

namespace detail {

inline std::vector<std::string> column_names(std::size_t n) {
    std::vector<std::string> h;
    for (std::size_t i = 0; i < n; ++i) h.push_back("x" + std::to_string(i));
    return h;
}

inline Vec initial_condition(const RunConfig& c, std::size_t k, std::uint64_t stream) {
    const auto n = static_cast<Eigen::Index>(c.system.dimension());
    if (c.data.initial_conditions == "random") return default_initial_state(c.system, stream * 7919 + k);
    // evenly spaced over the box, in the first two dimensions; remaining at the box centre
    const auto per = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(c.data.n_trajectories))));
    Vec x(n);
    for (Eigen::Index i = 0; i < n; ++i)
        x(i) = 0.5 * (c.data.grid_lo[static_cast<std::size_t>(i)] + c.data.grid_hi[static_cast<std::size_t>(i)]);
    const std::size_t idx[2] = {k % per, k / per};
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(n, 2); ++i) {
        const double lo = c.data.grid_lo[static_cast<std::size_t>(i)], hi = c.data.grid_hi[static_cast<std::size_t>(i)];
        x(i) = per == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * static_cast<double>(idx[i]) / static_cast<double>(per - 1);
    }
    return x;
}

inline TrajectoryBatch simulate_set(const RunConfig& c, const SystemSpec& spec, std::size_t n_traj, std::size_t length,
                                    std::uint64_t stream) {
    TrajectoryBatch out;
    out.dt = spec.dt();
    for (std::size_t k = 0; k < n_traj; ++k) {
        const Vec x0 = stream == 0 ? initial_condition(c, k, stream) : default_initial_state(spec, c.seed * 7919 + stream * 104729 + k);
        auto sim = simulate(spec, x0, length + c.data.transient, c.seed * 1000003 + stream * 1009 + k);
        out.data.push_back(sim.data[0].bottomRows(static_cast<Eigen::Index>(length)));
    }
    return out;
}

/// Applies the train-set standardization constants to another batch.
inline TrajectoryBatch apply_standardization(const TrajectoryBatch& b, const Vec& mean, const Vec& sd) {
    TrajectoryBatch out = b;
    for (auto& d : out.data) d = ((d.rowwise() - mean.transpose()).array().rowwise() / sd.transpose().array()).matrix();
    out.standardized = true;
    out.mean = mean;
    out.std = sd;
    return out;
}

inline TrajectoryBatch embed_batch(const TrajectoryBatch& b, std::size_t m, std::size_t lag) {
    TrajectoryBatch out = b;
    out.data.clear();
    for (const auto& d : b.data) {
        const Vec col = d.col(0);
        out.data.push_back(delay_embed(std::span<const double>(col.data(), static_cast<std::size_t>(col.size())), m, lag).data[0]);
    }
    return out;
}

inline void write_batch(const std::string& path, const TrajectoryBatch& b, const std::vector<std::string>& comment) {
    write_csv(path, b.pooled(), column_names(b.dim()), comment);
}

inline TrajectoryBatch read_batch(const std::string& path, const json& info, double dt) {
    auto raw = ingest_csv(path, CsvOptions{true, {}, dt});
    const auto n = info.at("n_trajectories").get<std::size_t>();
    const auto len = info.at("length").get<std::size_t>();
    const Mat all = raw.data[0];
    if (static_cast<std::size_t>(all.rows()) != n * len)
        throw ConfigError(dendplrnn::detail::cat(path, ": expected ", n * len, " rows from provenance, found ", all.rows()));
    TrajectoryBatch b;
    b.dt = dt;
    for (std::size_t k = 0; k < n; ++k) b.data.push_back(all.middleRows(static_cast<Eigen::Index>(k * len), static_cast<Eigen::Index>(len)));
    return b;
}

} // namespace detail

/// Simulates, corrupts, (partially) observes, standardizes and writes a
/// train/test pair with provenance.
inline Dataset make_dataset(const RunConfig& c) {
    SystemSpec spec = c.system;
    double obs_noise = c.data.observation_noise;
    std::size_t train_len = c.data.train_length;
    if (c.condition == Condition::HighNoise) {
        spec = SystemSpec(spec.kind(), spec.params(), spec.dt(), 0.1, spec.substeps());
        obs_noise = 0.1;
    }
    if (c.condition == Condition::LowData) train_len = 1000;

    auto train = detail::simulate_set(c, spec, c.data.n_trajectories, train_len, 0);
    auto test = detail::simulate_set(c, spec, 1, c.data.test_length, 1);
    train = add_observation_noise(train, obs_noise, c.seed * 31 + 1);
    test = add_observation_noise(test, obs_noise, c.seed * 31 + 2);
    if (c.condition == Condition::PartialObservation) {
        for (auto* b : {&train, &test})
            for (auto& d : b->data) d = Mat(d.leftCols(1));
    }
    auto st = standardize(train);
    auto ts = detail::apply_standardization(test, st.mean, st.std);
    if (c.condition == Condition::PartialObservation && c.data.embed_m > 0) {
        const Vec mean = st.mean, sd = st.std;
        st = detail::embed_batch(st, c.data.embed_m, c.data.embed_lag);
        ts = detail::embed_batch(ts, c.data.embed_m, c.data.embed_lag);
        for (auto* b : {&st, &ts}) {
            b->standardized = true;
            b->mean = Vec::Constant(static_cast<Eigen::Index>(c.data.embed_m), mean(0));
            b->std = Vec::Constant(static_cast<Eigen::Index>(c.data.embed_m), sd(0));
        }
    }
    auto vec = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    json prov = {{"data_hash", c.data_hash()},
                 {"seed", c.seed},
                 {"condition", to_string(c.condition)},
                 {"system", spec.to_json()},
                 {"observation_noise", obs_noise},
                 {"transient_removed", c.data.transient},
                 {"standardization", {{"mean", vec(st.mean)}, {"std", vec(st.std)}}},
                 {"embed", c.data.embed_m > 0 && c.condition == Condition::PartialObservation
                               ? json{{"m", c.data.embed_m}, {"lag", c.data.embed_lag}}
                               : json(nullptr)},
                 {"train", {{"n_trajectories", st.n_trajectories()}, {"length", st.length()}, {"dim", st.dim()}}},
                 {"test", {{"n_trajectories", ts.n_trajectories()}, {"length", ts.length()}, {"dim", ts.dim()}}},
                 {"dt", spec.dt()}};
    st.provenance = prov;
    ts.provenance = prov;
    return {std::move(st), std::move(ts), std::move(prov)};
}

inline void write_dataset(const Dataset& d, const std::string& dir) {
    ensure_dir(dir);
    const std::vector<std::string> comment{"data_hash: " + d.provenance.at("data_hash").get<std::string>()};
    detail::write_batch((fs::path(dir) / "train.csv").string(), d.train, comment);
    detail::write_batch((fs::path(dir) / "test.csv").string(), d.test, comment);
    write_json_file((fs::path(dir) / "provenance.json").string(), d.provenance);
}

inline Dataset read_dataset(const std::string& dir) {
    if (!fs::is_directory(dir)) throw ConfigError("data directory '" + dir + "' does not exist");
    Dataset d;
    d.provenance = read_json_file((fs::path(dir) / "provenance.json").string(), "provenance");
    const double dt = d.provenance.value("dt", 1.0);
    d.train = detail::read_batch((fs::path(dir) / "train.csv").string(), d.provenance.at("train"), dt);
    d.test = detail::read_batch((fs::path(dir) / "test.csv").string(), d.provenance.at("test"), dt);
    const auto& s = d.provenance.at("standardization");
    const Vec mean = dendplrnn::detail::vec_from_json(s.at("mean"), "standardization.mean");
    const Vec sd = dendplrnn::detail::vec_from_json(s.at("std"), "standardization.std");
    for (auto* b : {&d.train, &d.test}) {
        b->standardized = true;
        b->mean = mean;
        b->std = sd;
        b->provenance = d.provenance;
    }
    return d;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline void cmd_generate(const RunConfig& c, const std::string& out_dir) {
    const auto d = make_dataset(c);
    write_dataset(d, out_dir);
    std::cout << json{{"command", "generate"}, {"data_out", out_dir}, {"data_hash", c.data_hash()},
                      {"train_rows", d.train.length() * d.train.n_trajectories()}, {"test_rows", d.test.length()},
                      {"dim", d.train.dim()}}
                     .dump()
              << '\n';
}

struct TrainOutcome {
    bool diverged = false;
    std::string message;
    std::string checkpoint;
};

inline json checkpoint_meta(const RunConfig& c, const json& provenance, std::size_t epochs_done) {
    return {{"config_hash", c.config_hash()},
            {"data_hash", provenance.value("data_hash", std::string())},
            {"train_config", c.train.to_json()},
            {"epochs_completed", epochs_done},
            {"provenance", provenance}};
}

inline TrainOutcome cmd_train(const RunConfig& c, const std::string& data_dir, const std::string& out_dir) {
    const auto d = read_dataset(data_dir);
    ensure_dir(out_dir);
    const auto log_path = (fs::path(out_dir) / "train_log.jsonl").string();
    std::ofstream log(log_path);
    if (!log) throw Error("cannot write '" + log_path + "'");
    const std::string hash = c.config_hash();
    auto on_epoch = [&](const EpochRecord& r, const DendParams& p) {
        json rec = r.to_json();
        rec["config_hash"] = hash;
        log << rec.dump() << '\n';
        if (c.train.checkpoint_every > 0 && (r.epoch + 1) % c.train.checkpoint_every == 0 && r.epoch + 1 < c.train.epochs)
            save_checkpoint((fs::path(out_dir) / ("checkpoint_epoch_" + std::to_string(r.epoch + 1) + ".json")).string(), p,
                            c.train.variant, checkpoint_meta(c, d.provenance, r.epoch + 1));
    };
    auto res = train(d.train, c.train, on_epoch);
    TrainOutcome out;
    out.checkpoint = (fs::path(out_dir) / "checkpoint.json").string();
    json meta = checkpoint_meta(c, d.provenance, res.log.size());
    if (res.diverged) meta["diverged"] = res.message;
    save_checkpoint(out.checkpoint, res.params, c.train.variant, meta);
    out.diverged = res.diverged;
    out.message = res.message;
    return out;
}

inline json cmd_evaluate(const RunConfig& c, const std::string& checkpoint, const std::string& data_dir,
                         const std::string& report, bool force) {
    const auto ck = load_checkpoint(checkpoint);
    const auto d = read_dataset(data_dir);
    const std::string ck_hash = ck.meta.value("data_hash", std::string());
    const std::string data_hash = d.provenance.value("data_hash", std::string());
    if (ck_hash != data_hash && !force)
        throw ConfigError("checkpoint data_hash '" + ck_hash + "' does not match dataset data_hash '" + data_hash +
                          "' (use --force to evaluate anyway)");
    const Mat test = d.test.data.at(0);
    const auto m = evaluate_reconstruction(ck.params, ck.variant, test, c.metrics);
    json j = m.to_json();
    j["config_hash"] = ck.meta.value("config_hash", std::string());
    j["data_hash"] = data_hash;
    j["forced"] = ck_hash != data_hash;
    j["metrics_config"] = c.metrics.to_json();
    if (!report.empty()) {
        if (fs::path(report).has_parent_path()) ensure_dir(fs::path(report).parent_path().string());
        write_json_file(report, j);
    }
    return j;
}

inline json cmd_analyze(const RunConfig& c, const std::string& checkpoint, const std::string& data_dir,
                        const std::string& out_dir) {
    const auto ck = load_checkpoint(checkpoint);
    const auto& p = ck.params;
    const auto& v = ck.variant;
    ensure_dir(out_dir);

    std::optional<Dataset> data;
    if (!data_dir.empty()) data = read_dataset(data_dir);

    // free-running trajectory from the first data point (or the origin)
    Vec x1 = Vec::Zero(static_cast<Eigen::Index>(p.N()));
    if (data) x1 = data->train.data[0].row(0).transpose();
    Mat traj;
    std::string traj_note;
    try {
        traj = simulate_free(p.observation().identity ? p.initial_state(x1) : Vec(Vec::Zero(static_cast<Eigen::Index>(p.M()))),
                             p, v, c.analysis.trajectory_length);
    } catch (const NumericalError& e) {
        traj_note = e.what();
    }

    SearchOptions opt;
    opt.n_random = c.analysis.n_random;
    opt.max_exhaustive = c.analysis.max_exhaustive;
    opt.rng_seed = c.seed;
    if (traj.size() > 0) opt.trajectories.push_back(traj);
    const double region_space = dendplrnn::detail::region_space_size(dendplrnn::detail::column_patterns(p, v));
    const bool exhaustive = c.analysis.mode == "exhaustive" || (c.analysis.mode == "auto" && region_space <= 1e4);
    opt.mode = exhaustive ? SearchOptions::Mode::Exhaustive : SearchOptions::Mode::Seeded;

    const auto fps = fixed_points(p, v, opt);
    json out;
    out["config_hash"] = ck.meta.value("config_hash", std::string());
    out["search_mode"] = exhaustive ? "exhaustive" : "seeded";
    const auto count = count_theoretical_regions(p.M(), p.B());
    out["regions"] = {{"theoretical", count.regions}, {"boundaries", count.boundaries}};
    json fj = json::array();
    for (const auto& f : fps.found) fj.push_back(to_json(f, p));
    out["fixed_points"] = fj;
    out["singular_regions"] = fps.singular.size();

    json cj = json::array();
    std::size_t cycle_singular = 0;
    for (std::size_t n = 2; n <= c.analysis.max_period; ++n) {
        SearchOptions co = opt;
        if (exhaustive && std::pow(region_space, static_cast<double>(n)) > static_cast<double>(co.max_exhaustive))
            co.mode = SearchOptions::Mode::Seeded;
        const auto cyc = k_cycles(p, v, n, co);
        for (const auto& cy : cyc.found) cj.push_back(to_json(cy, p));
        cycle_singular += cyc.singular.size();
    }
    out["cycles"] = cj;
    out["cycle_singular_sequences"] = cycle_singular;

    if (traj.size() > 0) {
        out["visited_regions"] = region_census(p, v, traj).size();
        write_csv((fs::path(out_dir) / "trajectory.csv").string(), observe(traj, p), detail::column_names(p.N()),
                  {"config_hash: " + out["config_hash"].get<std::string>()});
    } else {
        out["trajectory_error"] = traj_note;
    }

    if (p.observation().identity && p.N() >= 2) {
        double lo0 = -2.0, hi0 = 2.0, lo1 = -2.0, hi1 = 2.0;
        if (!c.analysis.field_lo.empty()) {
            lo0 = c.analysis.field_lo[0];
            lo1 = c.analysis.field_lo[1];
            hi0 = c.analysis.field_hi[0];
            hi1 = c.analysis.field_hi[1];
        } else if (data) {
            const Mat pooled = data->train.pooled();
            lo0 = pooled.col(0).minCoeff();
            hi0 = pooled.col(0).maxCoeff();
            lo1 = pooled.col(1).minCoeff();
            hi1 = pooled.col(1).maxCoeff();
        }
        const Mat grid = planar_grid(Vec::Zero(static_cast<Eigen::Index>(p.N())), 0, 1, lo0, hi0, lo1, hi1,
                                     c.analysis.field_resolution);
        const Mat field = vector_field(p, v, grid);
        Mat table(grid.rows(), 4);
        table << grid.leftCols(2), field.leftCols(2);
        write_csv((fs::path(out_dir) / "vector_field.csv").string(), table, {"x0", "x1", "dx0", "dx1"},
                  {"config_hash: " + out["config_hash"].get<std::string>()});
    }
    write_json_file((fs::path(out_dir) / "analysis.json").string(), out);
    return out;
}

/// Trains and evaluates every (M, B, seed) cell of the grid, running up to
/// `jobs` cells as separate processes.
inline void cmd_sweep(const RunConfig& c, const std::string& out_dir, std::size_t jobs) {
    if (c.sweep.M.empty() || c.sweep.B.empty() || c.sweep.seeds.empty())
        throw ConfigError("config field 'sweep': M, B and seeds must all be non-empty");
    ensure_dir(out_dir);
    const std::string data_dir = (fs::path(out_dir) / "data").string();
    if (!fs::exists(fs::path(data_dir) / "provenance.json")) write_dataset(make_dataset(c), data_dir);

    struct Cell {
        std::size_t M, B;
        std::uint64_t seed;
        std::string dir;
    };
    std::vector<Cell> cells;
    for (auto M : c.sweep.M)
        for (auto B : c.sweep.B)
            for (auto s : c.sweep.seeds)
                cells.push_back({M, B, s, (fs::path(out_dir) / ("M" + std::to_string(M) + "_B" + std::to_string(B) + "_seed" + std::to_string(s))).string()});

    auto run_cell = [&](const Cell& cell) {
        RunConfig cc = c;
        cc.train.M = cell.M;
        cc.train.B = cell.B;
        cc.train.rng_seed = cell.seed;
        ensure_dir(cell.dir);
        write_json_file((fs::path(cell.dir) / "config.json").string(), cc.to_json());
        const auto t = cmd_train(cc, data_dir, cell.dir);
        cmd_evaluate(cc, t.checkpoint, data_dir, (fs::path(cell.dir) / "report.json").string(), false);
        return t.diverged ? 1 : 0;
    };

    jobs = std::max<std::size_t>(jobs, 1);
    std::size_t next = 0, running = 0;
    std::vector<int> status(cells.size(), -1);
    std::map<pid_t, std::size_t> children;
    while (next < cells.size() || running > 0) {
        while (running < jobs && next < cells.size()) {
            std::cout.flush();
            const pid_t pid = fork();
            if (pid < 0) throw Error("sweep: fork failed");
            if (pid == 0) {
                int code = 1;
                try {
                    code = run_cell(cells[next]);
                } catch (const std::exception& e) {
                    std::cerr << json{{"error", {{"kind", "runtime"}, {"cell", cells[next].dir}, {"message", e.what()}}}}.dump() << '\n';
                }
                std::cout.flush();
                _exit(code);
            }
            children[pid] = next++;
            ++running;
        }
        int st = 0;
        const pid_t done = wait(&st);
        if (done < 0) break;
        status[children.at(done)] = WIFEXITED(st) ? WEXITSTATUS(st) : 1;
        children.erase(done);
        --running;
    }

    std::ofstream sum((fs::path(out_dir) / "summary.csv").string());
    if (!sum) throw Error("cannot write sweep summary");
    sum.precision(17);
    sum << "# data_hash: " << c.data_hash() << '\n';
    sum << "M,B,seed,dstsp_bin,psc,pe20,success\n";
    std::map<std::pair<std::size_t, std::size_t>, std::pair<std::size_t, std::size_t>> rate;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto& cell = cells[i];
        const auto rp = fs::path(cell.dir) / "report.json";
        double bin = std::nan(""), ps = std::nan(""), pe20 = std::nan("");
        bool ok = false;
        if (fs::exists(rp)) {
            const json r = read_json_file(rp.string(), "report");
            auto num = [](const json& x) { return x.is_number() ? x.get<double>() : std::nan(""); };
            bin = num(r.value("dstsp_bin", json()));
            ps = num(r.value("psc", json()));
            if (r.contains("pe") && r["pe"].contains("20")) pe20 = num(r["pe"]["20"]);
            ok = r.value("success", false);
        }
        sum << cell.M << ',' << cell.B << ',' << cell.seed << ',' << bin << ',' << ps << ',' << pe20 << ',' << (ok ? 1 : 0) << '\n';
        auto& rr = rate[{cell.M, cell.B}];
        ++rr.first;
        rr.second += ok ? 1 : 0;
    }
    std::ofstream rates((fs::path(out_dir) / "success_rate.csv").string());
    rates << "M,B,runs,successes,rate\n";
    for (const auto& [key, val] : rate)
        rates << key.first << ',' << key.second << ',' << val.first << ',' << val.second << ','
              << static_cast<double>(val.second) / static_cast<double>(val.first) << '\n';
    std::size_t failed = 0;
    for (int s : status) failed += s != 0 ? 1 : 0;
    std::cout << json{{"command", "sweep"}, {"cells", cells.size()}, {"failed_cells", failed},
                      {"summary", (fs::path(out_dir) / "summary.csv").string()}}
                     .dump()
              << '\n';
}

} // namespace dendplrnn::cli
