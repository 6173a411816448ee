#pragma once

// Fit scores per target derivative, method comparison and report rendering.

#include "gfmid/dataset.hpp"
#include "gfmid/dsr.hpp"
#include "gfmid/simulator.hpp"
#include "gfmid/sindy.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gfmid::metrics {

/// Mean of squared residuals.
[[nodiscard]] double mse(const Eigen::VectorXd& pred, const Eigen::VectorXd& actual);

/// 1 - SS_res / SS_tot, SS_tot about the mean of `actual`.
[[nodiscard]] double r2(const Eigen::VectorXd& pred, const Eigen::VectorXd& actual);

[[nodiscard]] std::string sha256_hex(std::string_view data);

/// SHA-256 (hex) of the dataset's canonical CSV serialization.
[[nodiscard]] std::string fingerprint(const Dataset& ds);

struct TargetRow {
    std::string target;
    double mse = 0.0;
    double r2 = 0.0;
    /// Active terms (sindy) or token count (dsr).
    int complexity = 0;
};

struct FitReport {
    std::string method;
    std::vector<TargetRow> rows;
    double runtime_s = 0.0;   // kept out of the JSON form
    std::string fingerprint;

    void validate() const;
};

/// Scores an n x 9 matrix of derivative predictions against ds.dX.
[[nodiscard]] FitReport evaluate_predictions(const std::string& method,
                                             const Eigen::MatrixXd& pred, const Dataset& ds,
                                             const std::vector<int>& complexity,
                                             double runtime_s);

[[nodiscard]] FitReport evaluate_model(const sindy::SparseModel& model, const Dataset& ds);

/// One best expression per target, in measured-state order.
[[nodiscard]] Eigen::MatrixXd dsr_predictions(const std::vector<dsr::Expression>& best,
                                              const dsr::TokenSet& ts, const Dataset& ds);

[[nodiscard]] FitReport evaluate_dsr(const std::vector<dsr::Expression>& best,
                                     const dsr::TokenSet& ts, const Dataset& ds,
                                     double runtime_s);

/// The plant right-hand side itself, evaluated on the full simulated states.
[[nodiscard]] Eigen::MatrixXd truth_predictions(const SimulationResult& run,
                                                const PlantParams& params);

class FingerprintMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ComparisonRow {
    std::string target;
    std::vector<TargetRow> per_method;   // in Comparison::methods order
};

struct Comparison {
    std::vector<std::string> methods;   // canonical order: sindy, dsr, then by name
    std::vector<ComparisonRow> rows;
    std::vector<double> runtimes;
    std::string fingerprint;

    /// runtime(dsr) / runtime(sindy) when both are present.
    [[nodiscard]] std::optional<double> runtime_ratio() const;
    /// Metric of `method` minus the metric of the first method.
    [[nodiscard]] double delta_mse(std::size_t row, std::size_t method) const;
    [[nodiscard]] double delta_r2(std::size_t row, std::size_t method) const;
};

/// Needs at least two reports over the same dataset fingerprint.
[[nodiscard]] Comparison compare(std::vector<FitReport> reports);

/// Comma-separated comparison table (full precision, no runtimes).
[[nodiscard]] std::string to_csv(const Comparison& c);
/// Aligned plain-text comparison table (no runtimes).
[[nodiscard]] std::string to_text(const Comparison& c);
/// Per-method runtimes and the dsr/sindy ratio next to the reported ~11x.
[[nodiscard]] std::string runtime_summary(const Comparison& c);

[[nodiscard]] nlohmann::json to_json(const FitReport& r);
[[nodiscard]] FitReport report_from_json(const nlohmann::json& j);

/// Writes plot_<target>.csv with t, actual and one prediction column per method.
void write_plot_csvs(const Dataset& ds, const std::map<std::string, Eigen::MatrixXd>& predictions,
                     const std::filesystem::path& dir);

}  // namespace gfmid::metrics
