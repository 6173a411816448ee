#pragma once

// Sparse identification of the measured-state dynamics: a candidate function
// library over states and inputs, and sparse regressions of each derivative
// column onto it.

#include "gfmid/dataset.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace gfmid::sindy {

enum class Normalization { none, max_abs };
enum class TrigFactor { none, sin, cos };

struct LibrarySpec {
    int poly_degree = 2;
    bool include_trig = false;
    bool include_bias = true;
    Normalization normalization = Normalization::max_abs;
    /// Drop columns lying in the span of earlier columns (e.g. powers of a
    /// two-valued reference input).
    bool prune_dependent = true;
    /// Relative residual below which a column counts as dependent.
    double dependence_tolerance = 1e-10;

    void validate() const;
};

/// Monomial over the library variables, optionally times sin/cos of one of them.
struct Term {
    std::vector<int> exponents;
    TrigFactor trig = TrigFactor::none;
    int trig_variable = -1;

    [[nodiscard]] int degree() const;
    [[nodiscard]] std::string name(std::span<const std::string> variables) const;
    friend bool operator==(const Term&, const Term&) = default;
};

/// Terms in graded lexicographic order: bias, degree 1, ..., then trig terms.
[[nodiscard]] std::vector<Term> enumerate_terms(std::size_t n_variables, const LibrarySpec& spec,
                                                int angle_variable = -1);

/// Raw (unnormalized) evaluation of one term on every sample.
[[nodiscard]] Eigen::VectorXd evaluate_term(const Term& term, const Eigen::MatrixXd& variables);

struct CandidateLibrary {
    Eigen::MatrixXd theta;           // samples x terms, normalized columns
    std::vector<Term> terms;
    Eigen::VectorXd column_scales;   // raw column = theta column * scale
    std::vector<std::string> variable_names;
    std::vector<std::string> warnings;

    [[nodiscard]] std::size_t size() const noexcept { return terms.size(); }
    [[nodiscard]] std::vector<std::string> term_names() const;
};

/// `angle_variable` selects the column fed to sin/cos when trig terms are on.
[[nodiscard]] CandidateLibrary build_library(const Eigen::MatrixXd& variables,
                                             std::vector<std::string> variable_names,
                                             const LibrarySpec& spec, int angle_variable = -1);

/// Library over the 9 measured states and 3 inputs; theta_oc drives trig terms.
[[nodiscard]] CandidateLibrary build_library(const Dataset& ds, const LibrarySpec& spec);

struct StlsqConfig {
    double threshold = 0.05;
    double ridge = 0.0;
    int max_iter = 20;

    void validate() const;
};

struct LassoConfig {
    double lambda = 1e-3;
    /// Proximal-gradient step; defaults to 1/L for the library at hand.
    std::optional<double> step;
    int max_iter = 20000;
    double tol = 1e-12;

    void validate() const;
};

using SolverConfig = std::variant<StlsqConfig, LassoConfig>;

class SolverError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DegenerateDataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Sequentially thresholded ridge least squares. Returns unnormalized
/// coefficients, one per library term.
[[nodiscard]] Eigen::VectorXd stlsq(const CandidateLibrary& library, const Eigen::VectorXd& target,
                                    const StlsqConfig& cfg);

struct LassoResult {
    Eigen::VectorXd coefficients;     // unnormalized
    std::vector<double> objective;    // per iteration, normalized problem
    int iterations = 0;
};

/// Iterative soft thresholding for ||y - theta xi||^2 + lambda ||xi||_1 on the
/// normalized library. Throws SolverError if the objective keeps rising.
[[nodiscard]] LassoResult lasso(const CandidateLibrary& library, const Eigen::VectorXd& target,
                                const LassoConfig& cfg);

struct SparseModel {
    Eigen::MatrixXd xi;   // terms x targets, unnormalized
    std::vector<Term> terms;
    std::vector<std::string> variable_names;
    std::vector<std::string> target_names;
    std::vector<int> active_counts;
    std::vector<double> train_mse;
    LibrarySpec library;
    SolverConfig solver;
    std::vector<std::string> warnings;
    double runtime_s = 0.0;

    /// samples x targets
    [[nodiscard]] Eigen::MatrixXd predict(const Eigen::MatrixXd& variables) const;
    [[nodiscard]] Eigen::MatrixXd predict(const Dataset& ds) const;
};

/// One independent regression per measured-state derivative.
[[nodiscard]] SparseModel fit(const Dataset& ds, const LibrarySpec& spec,
                              const SolverConfig& solver);

/// "d/dt <target> = c1*term1 + c2*term2 ..." per target.
[[nodiscard]] std::vector<std::string> to_equations(const SparseModel& model);

[[nodiscard]] nlohmann::json to_json(const SparseModel& model);
[[nodiscard]] SparseModel model_from_json(const nlohmann::json& j);

[[nodiscard]] nlohmann::json to_json(const LibrarySpec& spec);
[[nodiscard]] nlohmann::json to_json(const SolverConfig& solver);

}  // namespace gfmid::sindy
