#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace gfmid {

/// Sampled disturbance response: measured states, reference inputs and the
/// derivatives of the measured states. Column order follows kStateNames /
/// kInputNames.
struct Dataset {
    std::vector<double> time;
    Eigen::MatrixXd X;    // samples x 9
    Eigen::MatrixXd U;    // samples x 3
    Eigen::MatrixXd dX;   // samples x 9

    [[nodiscard]] Eigen::Index rows() const noexcept { return X.rows(); }

    /// Measured states followed by inputs (samples x 12).
    [[nodiscard]] Eigen::MatrixXd variables() const;

    /// Throws std::invalid_argument on shape mismatch or non-finite entries.
    void validate() const;

    /// t, states, inputs, then d_<state> derivative columns.
    [[nodiscard]] static std::vector<std::string> column_names();
    /// 9 measured states + 3 inputs.
    [[nodiscard]] static std::vector<std::string> variable_names();
    /// d_<state> for each measured state.
    [[nodiscard]] static std::vector<std::string> target_names();
};

class DatasetParseError : public std::runtime_error {
public:
    DatasetParseError(std::size_t line, const std::string& what)
        : std::runtime_error("dataset line " + std::to_string(line) + ": " + what), line_(line) {}

    [[nodiscard]] std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// CSV text with a header row and 17-significant-digit decimals, LF endings.
[[nodiscard]] std::string dataset_to_csv(const Dataset& ds);
[[nodiscard]] Dataset dataset_from_csv(const std::string& text);

void write_dataset(const Dataset& ds, const std::filesystem::path& path);
[[nodiscard]] Dataset read_dataset(const std::filesystem::path& path);

/// 17 significant digits; parses back to the identical double.
[[nodiscard]] std::string format_double(double v);

}  // namespace gfmid
