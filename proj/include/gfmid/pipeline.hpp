#pragma once

// Pipeline stages behind the command-line tool. Each stage reads its inputs
// from and writes its artifacts to cfg.output_dir.

#include "gfmid/config.hpp"

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace gfmid::pipeline {

/// An earlier stage's artifact is absent. what() names the file and the
/// command that produces it.
class MissingInput : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Artifact names inside an output directory.
struct Layout {
    std::filesystem::path dir;

    [[nodiscard]] std::filesystem::path dataset() const { return dir / "dataset.csv"; }
    [[nodiscard]] std::filesystem::path manifest() const { return dir / "manifest.json"; }
    /// Resolved config, loadable with --config to repeat the run.
    [[nodiscard]] std::filesystem::path config() const { return dir / "config.json"; }
    [[nodiscard]] std::filesystem::path sindy_model() const { return dir / "sindy_model.json"; }
    [[nodiscard]] std::filesystem::path sindy_equations() const {
        return dir / "sindy_equations.txt";
    }
    [[nodiscard]] std::filesystem::path sindy_report() const { return dir / "sindy_report.json"; }
    [[nodiscard]] std::filesystem::path dsr_result(const std::string& target) const {
        return dir / ("dsr_" + target + ".json");
    }
    [[nodiscard]] std::filesystem::path dsr_report() const { return dir / "dsr_report.json"; }
    [[nodiscard]] std::filesystem::path comparison_csv() const { return dir / "comparison.csv"; }
    [[nodiscard]] std::filesystem::path comparison_txt() const { return dir / "comparison.txt"; }
    [[nodiscard]] std::filesystem::path plots() const { return dir / "plots"; }
    /// Wall-clock times. Not reproducible, so kept apart from everything else.
    [[nodiscard]] std::filesystem::path timings() const { return dir / "timings.json"; }
    [[nodiscard]] std::filesystem::path runtime_summary() const { return dir / "runtime.txt"; }
};

/// dataset.csv, manifest.json, config.json
void simulate(const RunConfig& cfg, std::ostream& log);
/// sindy_model.json, sindy_equations.txt, sindy_report.json
void identify_sindy(const RunConfig& cfg, std::ostream& log);
/// dsr_<target>.json per measured state, dsr_report.json
void identify_dsr(const RunConfig& cfg, std::ostream& log);
/// "sindy" or "dsr"; anything else throws std::invalid_argument.
void identify(const RunConfig& cfg, const std::string& method, std::ostream& log);
/// comparison.csv, comparison.txt, plots/, runtime.txt
void report(const RunConfig& cfg, std::ostream& log);
void run_all(const RunConfig& cfg, std::ostream& log);

/// Output files (relative, sorted) that must be identical across reruns:
/// everything except the timing files.
[[nodiscard]] std::vector<std::filesystem::path> reproducible_artifacts(
    const std::filesystem::path& dir);

}  // namespace gfmid::pipeline
