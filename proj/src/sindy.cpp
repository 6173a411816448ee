#include "gfmid/sindy.hpp"

#include "gfmid/plant.hpp"

#include <tbb/parallel_for.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>

namespace gfmid::sindy {

namespace {

const char* to_string(TrigFactor t) {
    switch (t) {
        case TrigFactor::none: return "none";
        case TrigFactor::sin: return "sin";
        case TrigFactor::cos: return "cos";
    }
    return "none";
}

TrigFactor parse_trig(const std::string& s) {
    if (s == "none") return TrigFactor::none;
    if (s == "sin") return TrigFactor::sin;
    if (s == "cos") return TrigFactor::cos;
    throw std::invalid_argument("unknown trig factor '" + s + "'");
}

const char* to_string(Normalization n) {
    return n == Normalization::none ? "none" : "max_abs";
}

Normalization parse_normalization(const std::string& s) {
    if (s == "none") return Normalization::none;
    if (s == "max_abs") return Normalization::max_abs;
    throw std::invalid_argument("unknown normalization '" + s + "' (expected none or max_abs)");
}

}  // namespace

void LibrarySpec::validate() const {
    if (poly_degree < 1 || poly_degree > 3) {
        throw std::invalid_argument("sindy.library.poly_degree must be in [1, 3]");
    }
    if (!(dependence_tolerance >= 0.0)) {
        throw std::invalid_argument("sindy.library.dependence_tolerance must be >= 0");
    }
}

int Term::degree() const {
    int d = 0;
    for (int e : exponents) d += e;
    return d;
}

std::string Term::name(std::span<const std::string> variables) const {
    std::string out;
    auto append = [&](const std::string& factor) {
        if (!out.empty()) out += '*';
        out += factor;
    };
    if (trig != TrigFactor::none) {
        append(std::string(to_string(trig)) + "(" +
               variables[static_cast<std::size_t>(trig_variable)] + ")");
    }
    for (std::size_t k = 0; k < exponents.size(); ++k) {
        if (exponents[k] == 1) {
            append(variables[k]);
        } else if (exponents[k] > 1) {
            append(variables[k] + "^" + std::to_string(exponents[k]));
        }
    }
    return out.empty() ? "1" : out;
}

std::vector<Term> enumerate_terms(std::size_t n_variables, const LibrarySpec& spec,
                                  int angle_variable) {
    spec.validate();
    std::vector<Term> terms;
    if (spec.include_bias) {
        terms.push_back({std::vector<int>(n_variables, 0), TrigFactor::none, -1});
    }
    // Non-decreasing index tuples of length `degree` give each monomial once,
    // in lexicographic order.
    std::vector<std::size_t> idx;
    std::function<void(std::size_t, int)> rec = [&](std::size_t start, int remaining) {
        if (remaining == 0) {
            Term t{std::vector<int>(n_variables, 0), TrigFactor::none, -1};
            for (auto k : idx) ++t.exponents[k];
            terms.push_back(std::move(t));
            return;
        }
        for (std::size_t k = start; k < n_variables; ++k) {
            idx.push_back(k);
            rec(k, remaining - 1);
            idx.pop_back();
        }
    };
    for (int d = 1; d <= spec.poly_degree; ++d) {
        rec(0, d);
    }
    if (spec.include_trig) {
        if (angle_variable < 0 || static_cast<std::size_t>(angle_variable) >= n_variables) {
            throw std::invalid_argument("trig terms need a valid angle variable");
        }
        for (auto f : {TrigFactor::sin, TrigFactor::cos}) {
            terms.push_back({std::vector<int>(n_variables, 0), f, angle_variable});
        }
        for (auto f : {TrigFactor::sin, TrigFactor::cos}) {
            for (std::size_t k = 0; k < n_variables; ++k) {
                Term t{std::vector<int>(n_variables, 0), f, angle_variable};
                t.exponents[k] = 1;
                terms.push_back(std::move(t));
            }
        }
    }
    if (terms.empty()) {
        throw std::invalid_argument("library spec enables no terms");
    }
    return terms;
}

Eigen::VectorXd evaluate_term(const Term& term, const Eigen::MatrixXd& variables) {
    if (term.exponents.size() != static_cast<std::size_t>(variables.cols())) {
        throw std::invalid_argument("term arity does not match the variable count");
    }
    Eigen::ArrayXd col = Eigen::ArrayXd::Ones(variables.rows());
    if (term.trig == TrigFactor::sin) {
        col *= variables.col(term.trig_variable).array().sin();
    } else if (term.trig == TrigFactor::cos) {
        col *= variables.col(term.trig_variable).array().cos();
    }
    for (std::size_t k = 0; k < term.exponents.size(); ++k) {
        for (int p = 0; p < term.exponents[k]; ++p) {
            col *= variables.col(static_cast<Eigen::Index>(k)).array();
        }
    }
    return col.matrix();
}

std::vector<std::string> CandidateLibrary::term_names() const {
    std::vector<std::string> names;
    names.reserve(terms.size());
    for (const auto& t : terms) names.push_back(t.name(variable_names));
    return names;
}

CandidateLibrary build_library(const Eigen::MatrixXd& variables,
                               std::vector<std::string> variable_names, const LibrarySpec& spec,
                               int angle_variable) {
    if (variables.rows() == 0) {
        throw std::invalid_argument("cannot build a library from an empty dataset");
    }
    if (variable_names.size() != static_cast<std::size_t>(variables.cols())) {
        throw std::invalid_argument("variable name count does not match the column count");
    }
    const auto candidates = enumerate_terms(variable_names.size(), spec, angle_variable);

    CandidateLibrary lib;
    lib.variable_names = std::move(variable_names);
    const Eigen::Index n = variables.rows();
    std::vector<Eigen::VectorXd> columns;
    std::vector<double> scales;
    // Orthonormal basis of the kept columns, for the dependence test.
    std::vector<Eigen::VectorXd> basis;

    for (const auto& term : candidates) {
        Eigen::VectorXd col = evaluate_term(term, variables);
        const std::string name = term.name(lib.variable_names);
        if (!col.allFinite()) {
            throw std::invalid_argument("library term '" + name + "' is not finite");
        }
        const double peak = col.cwiseAbs().maxCoeff();
        if (peak == 0.0) {
            lib.warnings.push_back("term '" + name + "' is identically zero; dropped");
            continue;
        }
        const double scale = spec.normalization == Normalization::max_abs ? peak : 1.0;
        col /= scale;

        if (spec.prune_dependent) {
            Eigen::VectorXd r = col;
            for (int pass = 0; pass < 2; ++pass) {
                for (const auto& q : basis) r -= q.dot(r) * q;
            }
            const double rel = r.norm() / col.norm();
            if (rel < spec.dependence_tolerance) {
                char buf[64];
                std::snprintf(buf, sizeof(buf), "%.3g", rel);
                lib.warnings.push_back("term '" + name +
                                       "' is linearly dependent on earlier terms (relative "
                                       "residual " + buf + "); dropped");
                continue;
            }
            basis.push_back(r / r.norm());
        }
        lib.terms.push_back(term);
        columns.push_back(std::move(col));
        scales.push_back(scale);
    }
    if (lib.terms.empty()) {
        throw DegenerateDataError("every library column was dropped");
    }

    lib.theta.resize(n, static_cast<Eigen::Index>(columns.size()));
    lib.column_scales.resize(static_cast<Eigen::Index>(scales.size()));
    for (std::size_t k = 0; k < columns.size(); ++k) {
        lib.theta.col(static_cast<Eigen::Index>(k)) = columns[k];
        lib.column_scales(static_cast<Eigen::Index>(k)) = scales[k];
    }
    return lib;
}

CandidateLibrary build_library(const Dataset& ds, const LibrarySpec& spec) {
    return build_library(ds.variables(), Dataset::variable_names(), spec,
                         static_cast<int>(state::theta_oc));
}

void StlsqConfig::validate() const {
    if (!(threshold >= 0.0)) throw std::invalid_argument("sindy.stlsq.threshold must be >= 0");
    if (!(ridge >= 0.0)) throw std::invalid_argument("sindy.stlsq.ridge must be >= 0");
    if (max_iter < 1) throw std::invalid_argument("sindy.stlsq.max_iter must be >= 1");
}

void LassoConfig::validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("sindy.lasso.lambda must be >= 0");
    if (step && !(*step > 0.0)) throw std::invalid_argument("sindy.lasso.step must be > 0");
    if (max_iter < 1) throw std::invalid_argument("sindy.lasso.max_iter must be >= 1");
    if (!(tol >= 0.0)) throw std::invalid_argument("sindy.lasso.tol must be >= 0");
}

namespace {

void check_rows(const CandidateLibrary& library, const Eigen::VectorXd& target) {
    if (library.theta.rows() != target.size()) {
        throw std::invalid_argument("library and target row counts differ");
    }
    if (!target.allFinite()) {
        throw std::invalid_argument("regression target is not finite");
    }
}

/// Ridge least squares on a column subset via Householder QR of the
/// augmented system [A; sqrt(ridge) I].
Eigen::VectorXd ridge_solve(const Eigen::MatrixXd& theta, const std::vector<Eigen::Index>& cols,
                            const Eigen::VectorXd& y, double ridge) {
    const Eigen::Index n = theta.rows();
    const auto k = static_cast<Eigen::Index>(cols.size());
    const Eigen::Index extra = ridge > 0.0 ? k : 0;
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n + extra, k);
    for (Eigen::Index c = 0; c < k; ++c) {
        a.col(c).head(n) = theta.col(cols[static_cast<std::size_t>(c)]);
    }
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + extra);
    rhs.head(n) = y;
    if (extra > 0) {
        a.bottomRows(k).diagonal().setConstant(std::sqrt(ridge));
    }
    return a.colPivHouseholderQr().solve(rhs);
}

}  // namespace

Eigen::VectorXd stlsq(const CandidateLibrary& library, const Eigen::VectorXd& target,
                      const StlsqConfig& cfg) {
    cfg.validate();
    check_rows(library, target);
    const Eigen::Index p = library.theta.cols();

    std::vector<Eigen::Index> active(static_cast<std::size_t>(p));
    for (Eigen::Index k = 0; k < p; ++k) active[static_cast<std::size_t>(k)] = k;

    Eigen::VectorXd xi = Eigen::VectorXd::Zero(p);
    for (int it = 0; it < cfg.max_iter && !active.empty(); ++it) {
        const Eigen::VectorXd sub = ridge_solve(library.theta, active, target, cfg.ridge);
        xi.setZero();
        std::vector<Eigen::Index> keep;
        for (std::size_t k = 0; k < active.size(); ++k) {
            xi(active[k]) = sub(static_cast<Eigen::Index>(k));
            if (std::abs(sub(static_cast<Eigen::Index>(k))) >= cfg.threshold) {
                keep.push_back(active[k]);
            }
        }
        if (keep.size() == active.size()) {
            break;
        }
        active = std::move(keep);
        xi.setZero();
        if (!active.empty() && it + 1 == cfg.max_iter) {
            const Eigen::VectorXd last = ridge_solve(library.theta, active, target, cfg.ridge);
            for (std::size_t k = 0; k < active.size(); ++k) {
                xi(active[k]) = last(static_cast<Eigen::Index>(k));
            }
        }
    }
    return xi.cwiseQuotient(library.column_scales);
}

LassoResult lasso(const CandidateLibrary& library, const Eigen::VectorXd& target,
                  const LassoConfig& cfg) {
    cfg.validate();
    check_rows(library, target);
    const Eigen::MatrixXd& a = library.theta;
    const Eigen::MatrixXd gram = a.transpose() * a;
    const Eigen::VectorXd aty = a.transpose() * target;
    const double yty = target.squaredNorm();

    double step = 0.0;
    if (cfg.step) {
        step = *cfg.step;
    } else {
        const double top = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(
                               gram, Eigen::EigenvaluesOnly)
                               .eigenvalues()
                               .maxCoeff();
        // Gradient Lipschitz constant of ||y - A xi||^2 is 2 * sigma_max^2.
        step = top > 0.0 ? 1.0 / (2.0 * top) : 1.0;
    }

    auto objective = [&](const Eigen::VectorXd& xi) {
        const double fit = yty - 2.0 * aty.dot(xi) + xi.dot(gram * xi);
        return std::max(fit, 0.0) + cfg.lambda * xi.lpNorm<1>();
    };

    LassoResult result;
    Eigen::VectorXd xi = Eigen::VectorXd::Zero(a.cols());
    double current = objective(xi);
    result.objective.push_back(current);
    int rising = 0;
    const double shrink = step * cfg.lambda;
    for (int it = 0; it < cfg.max_iter; ++it) {
        const Eigen::VectorXd grad = 2.0 * (gram * xi - aty);
        Eigen::VectorXd next = xi - step * grad;
        for (Eigen::Index k = 0; k < next.size(); ++k) {
            const double v = next(k);
            next(k) = v > shrink ? v - shrink : (v < -shrink ? v + shrink : 0.0);
        }
        if (!next.allFinite()) {
            throw SolverError("lasso iterate became non-finite; use a smaller step");
        }
        const double value = objective(next);
        rising = value > current ? rising + 1 : 0;
        if (rising >= 10) {
            throw SolverError("lasso objective increased for 10 consecutive iterations; "
                              "use a smaller step");
        }
        const double change = (next - xi).norm();
        const double size = std::max(xi.norm(), std::numeric_limits<double>::min());
        xi = std::move(next);
        current = value;
        result.objective.push_back(current);
        result.iterations = it + 1;
        if (change <= cfg.tol * size || change == 0.0) {
            break;
        }
    }
    result.coefficients = xi.cwiseQuotient(library.column_scales);
    return result;
}

Eigen::MatrixXd SparseModel::predict(const Eigen::MatrixXd& variables) const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(variables.rows(), xi.cols());
    for (std::size_t k = 0; k < terms.size(); ++k) {
        const auto row = static_cast<Eigen::Index>(k);
        if ((xi.row(row).array() == 0.0).all()) continue;
        const Eigen::VectorXd col = evaluate_term(terms[k], variables);
        for (Eigen::Index j = 0; j < xi.cols(); ++j) {
            if (xi(row, j) != 0.0) out.col(j) += xi(row, j) * col;
        }
    }
    return out;
}

Eigen::MatrixXd SparseModel::predict(const Dataset& ds) const {
    return predict(ds.variables());
}

namespace {

void require_excitation(const Dataset& ds) {
    const Eigen::MatrixXd z = ds.variables();
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
        const double spread = z.col(c).maxCoeff() - z.col(c).minCoeff();
        const double level = std::max(1.0, z.col(c).cwiseAbs().maxCoeff());
        if (spread > 1e-9 * level) return;
    }
    throw DegenerateDataError(
        "dataset has no excitation: every state and input is constant, so the regression is "
        "ill-posed (add disturbance events)");
}

}  // namespace

SparseModel fit(const Dataset& ds, const LibrarySpec& spec, const SolverConfig& solver) {
    ds.validate();
    spec.validate();
    std::visit([](const auto& cfg) { cfg.validate(); }, solver);
    require_excitation(ds);

    const auto start = std::chrono::steady_clock::now();
    const CandidateLibrary lib = build_library(ds, spec);
    if (lib.size() < 2 && spec.include_bias) {
        throw DegenerateDataError("library collapsed to the bias column; no excitation in data");
    }
    const auto targets = static_cast<std::size_t>(ds.dX.cols());
    std::vector<Eigen::VectorXd> coefs(targets);
    tbb::parallel_for(std::size_t{0}, targets, [&](std::size_t j) {
        const Eigen::VectorXd y = ds.dX.col(static_cast<Eigen::Index>(j));
        coefs[j] = std::visit(
            [&](const auto& cfg) -> Eigen::VectorXd {
                using T = std::decay_t<decltype(cfg)>;
                if constexpr (std::is_same_v<T, StlsqConfig>) {
                    return stlsq(lib, y, cfg);
                } else {
                    return lasso(lib, y, cfg).coefficients;
                }
            },
            solver);
    });
    const auto stop = std::chrono::steady_clock::now();

    SparseModel model;
    model.terms = lib.terms;
    model.variable_names = lib.variable_names;
    for (std::size_t j = 0; j < targets; ++j) {
        model.target_names.emplace_back(kStateNames[j]);
    }
    model.xi.resize(static_cast<Eigen::Index>(lib.size()), static_cast<Eigen::Index>(targets));
    for (std::size_t j = 0; j < targets; ++j) {
        model.xi.col(static_cast<Eigen::Index>(j)) = coefs[j];
        model.active_counts.push_back(static_cast<int>((coefs[j].array() != 0.0).count()));
    }
    model.library = spec;
    model.solver = solver;
    model.warnings = lib.warnings;
    model.runtime_s = std::chrono::duration<double>(stop - start).count();

    const Eigen::MatrixXd pred = model.predict(ds);
    for (std::size_t j = 0; j < targets; ++j) {
        const auto c = static_cast<Eigen::Index>(j);
        model.train_mse.push_back((pred.col(c) - ds.dX.col(c)).squaredNorm() /
                                  static_cast<double>(ds.rows()));
    }
    return model;
}

namespace {

std::string format_coefficient(double c) {
    char buf[64];
    const double a = std::abs(c);
    if (a != 0.0 && (a < 1e-3 || a >= 1e15)) {
        std::snprintf(buf, sizeof(buf), "%.6e", a);
    } else {
        std::snprintf(buf, sizeof(buf), "%.6f", a);
    }
    return buf;
}

}  // namespace

std::vector<std::string> to_equations(const SparseModel& model) {
    std::vector<std::string> lines;
    for (Eigen::Index j = 0; j < model.xi.cols(); ++j) {
        std::string rhs;
        for (std::size_t k = 0; k < model.terms.size(); ++k) {
            const double c = model.xi(static_cast<Eigen::Index>(k), j);
            if (c == 0.0) continue;
            const std::string name = model.terms[k].name(model.variable_names);
            if (rhs.empty()) {
                rhs += c < 0.0 ? "-" : "";
            } else {
                rhs += c < 0.0 ? " - " : " + ";
            }
            rhs += format_coefficient(c);
            if (name != "1") rhs += "*" + name;
        }
        lines.push_back("d/dt " + model.target_names[static_cast<std::size_t>(j)] + " = " +
                        (rhs.empty() ? "0" : rhs));
    }
    return lines;
}

nlohmann::json to_json(const LibrarySpec& spec) {
    return {{"poly_degree", spec.poly_degree},
            {"include_trig", spec.include_trig},
            {"include_bias", spec.include_bias},
            {"normalization", to_string(spec.normalization)},
            {"prune_dependent", spec.prune_dependent},
            {"dependence_tolerance", spec.dependence_tolerance}};
}

nlohmann::json to_json(const SolverConfig& solver) {
    return std::visit(
        [](const auto& cfg) -> nlohmann::json {
            using T = std::decay_t<decltype(cfg)>;
            if constexpr (std::is_same_v<T, StlsqConfig>) {
                return {{"name", "stlsq"},
                        {"threshold", cfg.threshold},
                        {"ridge", cfg.ridge},
                        {"max_iter", cfg.max_iter}};
            } else {
                nlohmann::json j = {{"name", "lasso"},
                                    {"lambda", cfg.lambda},
                                    {"max_iter", cfg.max_iter},
                                    {"tol", cfg.tol}};
                j["step"] = cfg.step ? nlohmann::json(*cfg.step) : nlohmann::json(nullptr);
                return j;
            }
        },
        solver);
}

nlohmann::json to_json(const SparseModel& model) {
    nlohmann::json terms = nlohmann::json::array();
    for (const auto& t : model.terms) {
        terms.push_back({{"name", t.name(model.variable_names)},
                         {"exponents", t.exponents},
                         {"trig", to_string(t.trig)},
                         {"trig_variable", t.trig_variable}});
    }
    nlohmann::json coefficients = nlohmann::json::object();
    for (Eigen::Index j = 0; j < model.xi.cols(); ++j) {
        std::vector<double> col(model.xi.col(j).data(), model.xi.col(j).data() + model.xi.rows());
        coefficients[model.target_names[static_cast<std::size_t>(j)]] = col;
    }
    return {{"format", "gfmid.sindy_model/1"},
            {"variables", model.variable_names},
            {"targets", model.target_names},
            {"library", to_json(model.library)},
            {"solver", to_json(model.solver)},
            {"terms", terms},
            {"coefficients", coefficients},
            {"active_counts", model.active_counts},
            {"train_mse", model.train_mse},
            {"warnings", model.warnings}};
}

SparseModel model_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "gfmid.sindy_model/1") {
        throw std::invalid_argument("not a SINDy model file (format tag missing or unknown)");
    }
    SparseModel m;
    m.variable_names = j.at("variables").get<std::vector<std::string>>();
    m.target_names = j.at("targets").get<std::vector<std::string>>();

    const auto& lib = j.at("library");
    m.library.poly_degree = lib.at("poly_degree").get<int>();
    m.library.include_trig = lib.at("include_trig").get<bool>();
    m.library.include_bias = lib.at("include_bias").get<bool>();
    m.library.normalization = parse_normalization(lib.at("normalization").get<std::string>());
    m.library.prune_dependent = lib.at("prune_dependent").get<bool>();
    m.library.dependence_tolerance = lib.at("dependence_tolerance").get<double>();

    const auto& s = j.at("solver");
    if (s.at("name") == "stlsq") {
        m.solver = StlsqConfig{s.at("threshold").get<double>(), s.at("ridge").get<double>(),
                               s.at("max_iter").get<int>()};
    } else if (s.at("name") == "lasso") {
        LassoConfig c;
        c.lambda = s.at("lambda").get<double>();
        c.max_iter = s.at("max_iter").get<int>();
        c.tol = s.at("tol").get<double>();
        if (!s.at("step").is_null()) c.step = s.at("step").get<double>();
        m.solver = c;
    } else {
        throw std::invalid_argument("unknown solver in model file");
    }

    for (const auto& t : j.at("terms")) {
        Term term;
        term.exponents = t.at("exponents").get<std::vector<int>>();
        term.trig = parse_trig(t.at("trig").get<std::string>());
        term.trig_variable = t.at("trig_variable").get<int>();
        if (term.exponents.size() != m.variable_names.size()) {
            throw std::invalid_argument("model term has the wrong number of exponents");
        }
        m.terms.push_back(std::move(term));
    }
    m.xi.resize(static_cast<Eigen::Index>(m.terms.size()),
                static_cast<Eigen::Index>(m.target_names.size()));
    for (std::size_t c = 0; c < m.target_names.size(); ++c) {
        const auto col = j.at("coefficients").at(m.target_names[c]).get<std::vector<double>>();
        if (col.size() != m.terms.size()) {
            throw std::invalid_argument("coefficient column '" + m.target_names[c] +
                                        "' has the wrong length");
        }
        for (std::size_t k = 0; k < col.size(); ++k) {
            m.xi(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c)) = col[k];
        }
    }
    m.active_counts = j.at("active_counts").get<std::vector<int>>();
    m.train_mse = j.at("train_mse").get<std::vector<double>>();
    m.warnings = j.value("warnings", std::vector<std::string>{});
    return m;
}

}  // namespace gfmid::sindy
