#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "aiiw/commands.hpp"

namespace {

int report(const aiiw::Error& e) {
    aiiw::Json j{{"error", {{"kind", e.kind()}, {"message", e.what()}}}};
    std::cerr << j.dump() << '\n';
    return e.kind() == "config" || e.kind() == "parse" ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sensitivity analysis for trials with informative assessment times"};
    app.require_subcommand(1);

    unsigned workers = 0;
    app.add_option("--workers", workers, "worker threads (default: $AIIW_WORKERS or all cores)");

    std::string data_path, config_path, out_dir;
    auto* analyze = app.add_subcommand("analyze", "fit, sensitivity grid, bootstrap and contour export");
    analyze->add_option("--data", data_path, "long-format CSV")->required();
    analyze->add_option("--config", config_path, "JSON run configuration");
    analyze->add_option("--out", out_dir, "output directory");

    auto* simulate = app.add_subcommand("simulate", "ground truth and bias/coverage study");
    simulate->add_option("--config", config_path, "JSON run configuration");
    simulate->add_option("--out", out_dir, "output directory");

    auto* truth = app.add_subcommand("truth", "ground truth at the target times, written to stdout");
    truth->add_option("--config", config_path, "JSON run configuration");

    for (auto* sub : {analyze, simulate, truth})
        sub->add_option("--workers", workers, "worker threads");

    CLI11_PARSE(app, argc, argv);

    try {
        const aiiw::RunConfig cfg = config_path.empty() ? aiiw::parse_config(aiiw::Json::object())
                                                        : aiiw::load_config(config_path);
        if (workers == 0) workers = cfg.workers.value_or(aiiw::default_workers());
        const std::string out = out_dir.empty() ? cfg.output_dir : out_dir;
        if (*analyze) {
            aiiw::cmd_analyze(cfg, aiiw::ingest(data_path), out, workers);
        } else if (*simulate) {
            aiiw::cmd_simulate(cfg, out, workers);
        } else if (*truth) {
            aiiw::cmd_truth(cfg, std::cout, workers);
        }
    } catch (const aiiw::Error& e) {
        return report(e);
    } catch (const std::exception& e) {
        std::cerr << aiiw::Json{{"error", {{"kind", "internal"}, {"message", e.what()}}}}.dump() << '\n';
        return 1;
    }
    return 0;
}
