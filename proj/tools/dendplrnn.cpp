#include <dendplrnn/cli.hpp>

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace dendplrnn;
using namespace dendplrnn::cli;

int fail(const char* kind, const std::string& message, int code) {
    std::cerr << json{{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}}.dump() << '\n';
    return code;
}

// "m=3 lag=10" style tokens into the data section
void apply_embed(RunConfig& c, const std::vector<std::string>& tokens) {
    if (c.condition != Condition::PartialObservation)
        throw ConfigError("config field 'condition': --embed requires condition partial_observation");
    c.data.embed_m = 0;
    c.data.embed_lag = 1;
    for (const auto& t : tokens) {
        const auto eq = t.find('=');
        const std::string key = t.substr(0, eq);
        std::size_t value = 0;
        try {
            if (eq == std::string::npos) throw std::invalid_argument(t);
            std::size_t used = 0;
            value = std::stoul(t.substr(eq + 1), &used);
            if (used != t.size() - eq - 1) throw std::invalid_argument(t);
        } catch (const std::exception&) {
            throw ConfigError("config field 'data.embed': cannot parse '" + t + "' (expected m=<int> or lag=<int>)");
        }
        if (key == "m")
            c.data.embed_m = value;
        else if (key == "lag")
            c.data.embed_lag = value;
        else
            throw ConfigError("config field 'data.embed." + key + "': unknown field");
    }
    if (c.data.embed_m < 2 || c.data.embed_lag < 1)
        throw ConfigError("config field 'data.embed': m must be >= 2 and lag >= 1");
}

std::string pick(const std::string& flag, const std::string& from_config, const char* field) {
    return require_path(flag.empty() ? from_config : flag, field);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dendritic PLRNN: data generation, training, evaluation and analysis"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out, data, checkpoint, report;
    std::vector<std::string> embed;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> condition;
    std::optional<std::size_t> epochs;
    bool force = false;
    std::size_t jobs = 1;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "run configuration (JSON)")->required();
        sub->add_option("--seed", seed, "override the top-level seed");
        sub->add_option("--condition", condition, "standard | low_data | partial_observation | high_noise");
    };

    auto* gen = app.add_subcommand("generate", "simulate a benchmark system and write train/test CSVs");
    add_common(gen);
    gen->add_option("-o,--out", out, "output directory (paths.data_out)");
    gen->add_option("--embed", embed, "delay embedding of the observed coordinate, e.g. m=3 lag=10")->expected(1, 2);

    auto* tr = app.add_subcommand("train", "train a model on a generated dataset");
    add_common(tr);
    tr->add_option("-d,--data", data, "dataset directory (paths.data_in)");
    tr->add_option("-o,--out", out, "output directory (paths.out_dir)");
    tr->add_option("--epochs", epochs, "override train.epochs");

    auto* ev = app.add_subcommand("evaluate", "compute reconstruction metrics on the test set");
    add_common(ev);
    ev->add_option("-k,--checkpoint", checkpoint, "checkpoint (paths.checkpoint)");
    ev->add_option("-d,--data", data, "dataset directory (paths.data_in)");
    ev->add_option("-r,--report", report, "report path (paths.report)");
    ev->add_flag("--force", force, "evaluate even if checkpoint and data hashes differ");

    auto* an = app.add_subcommand("analyze", "fixed points, cycles, vector field and trajectory export");
    add_common(an);
    an->add_option("-k,--checkpoint", checkpoint, "checkpoint (paths.checkpoint)");
    an->add_option("-d,--data", data, "optional dataset directory for seeding and field bounds");
    an->add_option("-o,--out", out, "output directory (paths.out_dir)");

    auto* sw = app.add_subcommand("sweep", "train and evaluate a grid of (M, B, seed) cells");
    add_common(sw);
    sw->add_option("-o,--out", out, "output directory (paths.out_dir)");
    sw->add_option("-j,--jobs", jobs, "cells run concurrently as separate processes")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        RunConfig c = load_run_config(config_path);
        if (seed) {
            c.seed = *seed;
            c.train.rng_seed = *seed;
        }
        if (condition) c.condition = condition_from_string(*condition, "condition");
        if (epochs) c.train.epochs = *epochs;

        if (gen->parsed()) {
            if (!embed.empty()) apply_embed(c, embed);
            cmd_generate(c, pick(out, c.paths.data_out, "paths.data_out"));
        } else if (tr->parsed()) {
            const auto d = pick(data, c.paths.data_in, "paths.data_in");
            const auto o = pick(out, c.paths.out_dir, "paths.out_dir");
            const auto res = cmd_train(c, d, o);
            if (res.diverged)
                return fail("runtime", "training diverged: " + res.message + " (last finite parameters saved to " +
                                           res.checkpoint + ")",
                            1);
            std::cout << json{{"command", "train"}, {"checkpoint", res.checkpoint}, {"config_hash", c.config_hash()}}.dump()
                      << '\n';
        } else if (ev->parsed()) {
            const auto k = pick(checkpoint, c.paths.checkpoint, "paths.checkpoint");
            const auto d = pick(data, c.paths.data_in, "paths.data_in");
            const auto r = report.empty() ? c.paths.report : report;
            std::cout << cmd_evaluate(c, k, d, r, force).dump() << '\n';
        } else if (an->parsed()) {
            const auto k = pick(checkpoint, c.paths.checkpoint, "paths.checkpoint");
            const auto o = pick(out, c.paths.out_dir, "paths.out_dir");
            const auto j = cmd_analyze(c, k, data.empty() ? c.paths.data_in : data, o);
            std::cout << json{{"command", "analyze"}, {"fixed_points", j["fixed_points"].size()},
                              {"cycles", j["cycles"].size()}, {"out", o}}
                             .dump()
                      << '\n';
        } else if (sw->parsed()) {
            cmd_sweep(c, pick(out, c.paths.out_dir, "paths.out_dir"), jobs);
        }
    } catch (const ConfigError& e) {
        return fail("config", e.what(), 2);
    } catch (const NumericalError& e) {
        return fail("numerical", e.what(), 1);
    } catch (const std::exception& e) {
        return fail("runtime", e.what(), 1);
    }
    return 0;
}
