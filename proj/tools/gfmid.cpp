// gfmid: simulate the converter, identify its dynamics, compare the methods.

#include "gfmid/config.hpp"
#include "gfmid/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

namespace {

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::string method;
};

gfmid::RunConfig resolve(const Options& opt) {
    gfmid::RunConfig cfg = opt.config.empty() ? gfmid::RunConfig{} : gfmid::load_config(opt.config);
    if (!opt.out.empty()) cfg.output_dir = opt.out;
    if (opt.seed) cfg.seed = *opt.seed;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Grid-forming converter simulation and equation discovery (SINDy, DSR)", "gfmid"};
    app.require_subcommand(1);

    Options opt;
    app.add_option("--config", opt.config, "JSON run config (comments allowed); defaults if omitted")
        ->check(CLI::ExistingFile);
    app.add_option("--out", opt.out, "Output directory (overrides output_dir)");
    app.add_option("--seed", opt.seed, "Global seed (overrides seed)");

    auto* simulate = app.add_subcommand("simulate", "Simulate the disturbance run, write dataset.csv");
    auto* sindy = app.add_subcommand("sindy", "Fit SINDy to dataset.csv");
    auto* dsr = app.add_subcommand("dsr", "Run DSR on every measured-state derivative");
    auto* identify = app.add_subcommand("identify", "Run one identification method");
    identify->add_option("--method", opt.method, "sindy or dsr")->required();
    auto* report = app.add_subcommand("report", "Compare the SINDy and DSR reports");
    auto* all = app.add_subcommand("all", "simulate, sindy, dsr, report");
    for (auto* sub : {simulate, sindy, dsr, identify, report, all}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;   // usage errors exit 2
    }

    try {
        const auto cfg = resolve(opt);
        auto& log = std::cout;
        if (simulate->parsed()) {
            gfmid::pipeline::simulate(cfg, log);
        } else if (sindy->parsed()) {
            gfmid::pipeline::identify_sindy(cfg, log);
        } else if (dsr->parsed()) {
            gfmid::pipeline::identify_dsr(cfg, log);
        } else if (identify->parsed()) {
            if (opt.method != "sindy" && opt.method != "dsr") {
                std::cerr << "gfmid identify: unknown method '" << opt.method
                          << "' (expected sindy or dsr)\n"
                          << identify->help();
                return 2;
            }
            gfmid::pipeline::identify(cfg, opt.method, log);
        } else if (report->parsed()) {
            gfmid::pipeline::report(cfg, log);
        } else if (all->parsed()) {
            gfmid::pipeline::run_all(cfg, log);
        }
    } catch (const std::exception& e) {
        std::cerr << "gfmid: error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
