#include "gfmid/pipeline.hpp"

#include "gfmid/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>
#include <sstream>

namespace gfmid::pipeline {

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    write_text(path, j.dump(2) + "\n");
}

std::string read_text(const std::filesystem::path& path, const std::string& producer) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw MissingInput("missing " + path.string() + "; run `gfmid " + producer +
                           "` with the same --out first");
    }
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

nlohmann::json read_json(const std::filesystem::path& path, const std::string& producer) {
    try {
        return nlohmann::json::parse(read_text(path, producer));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

Dataset load_dataset(const Layout& out) {
    if (!std::filesystem::exists(out.dataset())) {
        throw MissingInput("missing " + out.dataset().string() +
                           "; run `gfmid simulate` with the same --out first");
    }
    return read_dataset(out.dataset());
}

void record_timing(const Layout& out, const std::string& key, const nlohmann::json& value) {
    nlohmann::json t = nlohmann::json::object();
    if (std::filesystem::exists(out.timings())) {
        try {
            t = nlohmann::json::parse(read_text(out.timings(), "all"));
        } catch (const nlohmann::json::parse_error&) {
            t = nlohmann::json::object();   // rewritten below
        }
    }
    t[key] = value;
    write_json(out.timings(), t);
}

std::optional<double> recorded_runtime(const Layout& out, const std::string& key) {
    if (!std::filesystem::exists(out.timings())) return std::nullopt;
    try {
        const auto t = nlohmann::json::parse(read_text(out.timings(), "all"));
        if (t.contains(key) && t[key].contains("total_s")) return t[key]["total_s"].get<double>();
    } catch (const nlohmann::json::exception&) {
    }
    return std::nullopt;
}

dsr::TokenSet token_set(const RunConfig& cfg) {
    return dsr::TokenSet(cfg.dsr.operators, Dataset::variable_names());
}

}  // namespace

void simulate(const RunConfig& cfg, std::ostream& log) {
    const Layout out{cfg.output_dir};
    std::filesystem::create_directories(out.dir);
    SimConfig sim = cfg.simulation;
    sim.seed = simulation_seed(cfg);
    const Dataset ds = gfmid::simulate(sim, cfg.plant);
    const std::string csv = dataset_to_csv(ds);
    write_text(out.dataset(), csv);

    nlohmann::json dsr_seeds = nlohmann::json::object();
    for (std::size_t k = 0; k < kMeasuredCount; ++k) {
        dsr_seeds[std::string(kStateNames[k])] = dsr_seed(cfg, k);
    }
    // The location is not part of the experiment; leaving it out keeps runs
    // into different directories byte-identical.
    auto resolved = to_json(cfg);
    resolved.erase("output_dir");
    write_json(out.manifest(), {{"format", "gfmid.manifest/1"},
                                {"seed", cfg.seed},
                                {"derived_seeds", {{"simulation", sim.seed}, {"dsr", dsr_seeds}}},
                                {"samples", ds.rows()},
                                {"dataset", out.dataset().filename().string()},
                                {"dataset_sha256", metrics::sha256_hex(csv)},
                                {"config", resolved}});
    write_json(out.config(), resolved);
    log << "simulated " << ds.rows() << " samples -> " << out.dataset().string() << std::endl;
}

void identify_sindy(const RunConfig& cfg, std::ostream& log) {
    const Layout out{cfg.output_dir};
    const Dataset ds = load_dataset(out);
    const auto model = sindy::fit(ds, cfg.library, cfg.solver);
    for (const auto& w : model.warnings) log << "sindy: " << w << "\n";
    write_json(out.sindy_model(), sindy::to_json(model));
    std::string eqs;
    for (const auto& line : sindy::to_equations(model)) eqs += line + "\n";
    write_text(out.sindy_equations(), eqs);
    write_json(out.sindy_report(), metrics::to_json(metrics::evaluate_model(model, ds)));
    record_timing(out, "sindy", {{"total_s", model.runtime_s}});
    log << "sindy fit in " << model.runtime_s << " s -> " << out.sindy_model().string()
        << std::endl;
}

void identify_dsr(const RunConfig& cfg, std::ostream& log) {
    const Layout out{cfg.output_dir};
    const Dataset ds = load_dataset(out);
    const auto ts = token_set(cfg);
    std::vector<dsr::Expression> best;
    nlohmann::json per_target = nlohmann::json::object();
    double total = 0.0;
    for (std::size_t k = 0; k < kMeasuredCount; ++k) {
        dsr::DsrConfig dcfg = cfg.dsr;
        dcfg.seed = dsr_seed(cfg, k);
        const auto result = dsr::train(ds, static_cast<int>(k), dcfg);
        for (const auto& w : result.warnings) log << "dsr " << result.target << ": " << w << "\n";
        best.push_back(result.best);
        total += result.runtime_s;
        per_target[result.target] = result.runtime_s;

        const auto eval = dsr::evaluate(result.best, ts, ds.variables());
        auto j = dsr::to_json(result, ts);
        j["seed"] = dcfg.seed;
        const auto actual = ds.dX.col(static_cast<Eigen::Index>(k));
        j["r2"] = eval.valid ? nlohmann::json(metrics::r2(eval.values, actual)) : nlohmann::json();
        write_json(out.dsr_result(result.target), j);
        log << "dsr " << result.target << ": " << dsr::to_infix(result.best, ts) << "  reward "
            << result.best_reward << ", " << result.epochs_run << " epochs, " << result.runtime_s
            << " s" << std::endl;
    }
    write_json(out.dsr_report(), metrics::to_json(metrics::evaluate_dsr(best, ts, ds, total)));
    record_timing(out, "dsr", {{"total_s", total}, {"per_target_s", per_target}});
}

void identify(const RunConfig& cfg, const std::string& method, std::ostream& log) {
    if (method == "sindy") {
        identify_sindy(cfg, log);
    } else if (method == "dsr") {
        identify_dsr(cfg, log);
    } else {
        throw std::invalid_argument("unknown method '" + method + "' (expected sindy or dsr)");
    }
}

void report(const RunConfig& cfg, std::ostream& log) {
    const Layout out{cfg.output_dir};
    auto sindy_report = metrics::report_from_json(read_json(out.sindy_report(), "sindy"));
    auto dsr_report = metrics::report_from_json(read_json(out.dsr_report(), "dsr"));
    const Dataset ds = load_dataset(out);
    const auto fp = metrics::fingerprint(ds);
    for (const auto* r : {&sindy_report, &dsr_report}) {
        if (r->fingerprint != fp) {
            throw metrics::FingerprintMismatch(r->method + " report was computed on a different "
                                               "dataset than " + out.dataset().string() +
                                               "; rerun `gfmid " + r->method + "`");
        }
    }
    // Runtimes live in the timings file only; reports carry none.
    const auto t_sindy = recorded_runtime(out, "sindy");
    const auto t_dsr = recorded_runtime(out, "dsr");
    sindy_report.runtime_s = t_sindy.value_or(0.0);
    dsr_report.runtime_s = t_dsr.value_or(0.0);
    const auto cmp = metrics::compare({sindy_report, dsr_report});
    write_text(out.comparison_csv(), metrics::to_csv(cmp));
    const auto table = metrics::to_text(cmp);
    write_text(out.comparison_txt(), table);

    const auto model = sindy::model_from_json(read_json(out.sindy_model(), "sindy"));
    const auto ts = dsr::TokenSet::standard();
    std::vector<dsr::Expression> best;
    for (std::size_t k = 0; k < kMeasuredCount; ++k) {
        best.push_back(dsr::expression_from_json(
            read_json(out.dsr_result(std::string(kStateNames[k])), "dsr"), ts));
    }
    metrics::write_plot_csvs(ds,
                             {{"sindy", model.predict(ds)},
                              {"dsr", metrics::dsr_predictions(best, ts, ds)}},
                             out.plots());

    const std::string runtime = (t_sindy && t_dsr)
                                    ? metrics::runtime_summary(cmp)
                                    : "runtimes unavailable: " + out.timings().string() +
                                          " lacks an entry; rerun `gfmid sindy` and `gfmid dsr`\n";
    write_text(out.runtime_summary(), runtime);
    log << table << runtime;
}

void run_all(const RunConfig& cfg, std::ostream& log) {
    simulate(cfg, log);
    identify_sindy(cfg, log);
    identify_dsr(cfg, log);
    report(cfg, log);
}

std::vector<std::filesystem::path> reproducible_artifacts(const std::filesystem::path& dir) {
    const Layout out{dir};
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        if (e.path() == out.timings() || e.path() == out.runtime_summary()) continue;
        files.push_back(std::filesystem::relative(e.path(), dir));
    }
    std::sort(files.begin(), files.end());
    return files;
}

}  // namespace gfmid::pipeline
