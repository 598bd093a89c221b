// nodal: pretrain -> probe -> finetune -> sweep -> hullbound -> report
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <nodal/pipeline.hpp>

namespace {

enum Exit { ok = 0, usage = 1, data = 2, numerical = 3 };

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Node-silencing probes for a small BERT-style encoder"};
    app.require_subcommand(1);
    app.set_version_flag("--version", nodal::kToolVersion);

    std::string run_dir = "runs/toy";
    std::string config_path;
    std::vector<std::string> overrides;
    long long seed = -1;
    bool quiet = false;

    auto common = [&](CLI::App* sub) {
        sub->add_option("-d,--run-dir", run_dir, "Run directory")->capture_default_str();
        sub->add_option("-s,--set", overrides, "Override a config field, e.g. pretrain.epochs=5 (repeatable)");
        sub->add_flag("-q,--quiet", quiet, "No progress output");
    };

    auto* pretrain = app.add_subcommand("pretrain", "Build data and vocabulary, pretrain the encoder");
    common(pretrain);
    pretrain->add_option("-c,--config", config_path, "JSON run config (default: built-in toy preset)");
    pretrain->add_option("--seed", seed, "Run seed; every component seed is derived from it");

    auto* probe = app.add_subcommand("probe", "Train the MLM probe on frozen attention outputs");
    common(probe);
    auto* finetune = app.add_subcommand("finetune", "Fine-tune on the classification task and train the task probe");
    common(finetune);
    auto* sweep = app.add_subcommand("sweep", "Aperture-size sweeps and per-head reports");
    common(sweep);
    auto* hull = app.add_subcommand("hullbound", "Realizable-label bounds for the task probe");
    common(hull);
    auto* report = app.add_subcommand("report", "Consolidated JSON summary of a run directory");
    common(report);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? Exit::ok : Exit::usage;
    }

    const auto log = nodal::stderr_log(quiet);
    try {
        if (pretrain->parsed()) {
            auto cfg = nodal::load_run_config(config_path, overrides);
            if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
            nodal::cmd_pretrain(cfg, run_dir, log);
        } else if (probe->parsed()) {
            nodal::cmd_probe(run_dir, overrides, log);
        } else if (finetune->parsed()) {
            nodal::cmd_finetune(run_dir, overrides, log);
        } else if (sweep->parsed()) {
            nodal::cmd_sweep(run_dir, overrides, log);
        } else if (hull->parsed()) {
            nodal::cmd_hullbound(run_dir, overrides, log);
        } else if (report->parsed()) {
            nodal::cmd_report(run_dir, log);
        }
    } catch (const nodal::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return Exit::numerical;
    } catch (const nodal::IngestionError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return Exit::data;
    } catch (const nodal::FormatError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return Exit::data;
    } catch (const nodal::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return Exit::usage;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return Exit::usage;
    }
    return Exit::ok;
}
