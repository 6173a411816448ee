#include "gfmid/metrics.hpp"

#include "gfmid/plant.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

namespace gfmid::metrics {

namespace {

void check_lengths(const Eigen::VectorXd& pred, const Eigen::VectorXd& actual) {
    if (pred.size() != actual.size()) {
        throw std::invalid_argument("prediction length " + std::to_string(pred.size()) +
                                    " does not match actual length " +
                                    std::to_string(actual.size()));
    }
    if (actual.size() == 0) throw std::invalid_argument("metrics need at least one sample");
}

}  // namespace

double mse(const Eigen::VectorXd& pred, const Eigen::VectorXd& actual) {
    check_lengths(pred, actual);
    return (pred - actual).squaredNorm() / static_cast<double>(actual.size());
}

double r2(const Eigen::VectorXd& pred, const Eigen::VectorXd& actual) {
    check_lengths(pred, actual);
    const double mean = actual.mean();
    const double ss_tot = (actual.array() - mean).square().sum();
    if (!(ss_tot > 0.0)) {
        throw std::invalid_argument("R2 is undefined for a zero-variance target");
    }
    return 1.0 - (pred - actual).squaredNorm() / ss_tot;
}

std::string sha256_hex(std::string_view text) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(),
                                                                &EVP_MD_CTX_free);
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), text.data(), text.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
        throw std::runtime_error("SHA-256 digest failed");
    }
    std::string hex;
    char buf[3];
    for (unsigned int k = 0; k < len; ++k) {
        std::snprintf(buf, sizeof(buf), "%02x", digest[k]);
        hex += buf;
    }
    return hex;
}

std::string fingerprint(const Dataset& ds) {
    return sha256_hex(dataset_to_csv(ds));
}

void FitReport::validate() const {
    if (rows.size() != kMeasuredCount) {
        throw std::invalid_argument("report for '" + method + "' must have 9 rows");
    }
    for (std::size_t k = 0; k < rows.size(); ++k) {
        if (rows[k].target != kStateNames[k]) {
            throw std::invalid_argument("report row " + std::to_string(k) + " is '" +
                                        rows[k].target + "', expected '" +
                                        std::string(kStateNames[k]) + "'");
        }
        if (!(rows[k].mse >= 0.0) || !(rows[k].r2 <= 1.0)) {
            throw std::invalid_argument("report row '" + rows[k].target +
                                        "' has an impossible score");
        }
    }
}

FitReport evaluate_predictions(const std::string& method, const Eigen::MatrixXd& pred,
                               const Dataset& ds, const std::vector<int>& complexity,
                               double runtime_s) {
    if (pred.rows() != ds.rows() || pred.cols() != ds.dX.cols()) {
        throw std::invalid_argument("prediction matrix shape does not match the dataset");
    }
    if (complexity.size() != static_cast<std::size_t>(ds.dX.cols())) {
        throw std::invalid_argument("one complexity value per target is required");
    }
    FitReport r;
    r.method = method;
    r.runtime_s = runtime_s;
    r.fingerprint = fingerprint(ds);
    for (Eigen::Index j = 0; j < ds.dX.cols(); ++j) {
        const auto k = static_cast<std::size_t>(j);
        r.rows.push_back({std::string(kStateNames[k]), mse(pred.col(j), ds.dX.col(j)),
                          r2(pred.col(j), ds.dX.col(j)), complexity[k]});
    }
    return r;
}

FitReport evaluate_model(const sindy::SparseModel& model, const Dataset& ds) {
    if (model.variable_names != Dataset::variable_names() ||
        model.xi.cols() != static_cast<Eigen::Index>(kMeasuredCount)) {
        throw std::invalid_argument("SINDy model column layout does not match the dataset");
    }
    return evaluate_predictions("sindy", model.predict(ds), ds, model.active_counts,
                                model.runtime_s);
}

Eigen::MatrixXd dsr_predictions(const std::vector<dsr::Expression>& best,
                                const dsr::TokenSet& ts, const Dataset& ds) {
    if (best.size() != kMeasuredCount) {
        throw std::invalid_argument("one DSR expression per target is required");
    }
    if (ts.variables() != Dataset::variable_names()) {
        throw std::invalid_argument("DSR token set does not match the dataset columns");
    }
    const Eigen::MatrixXd vars = ds.variables();
    Eigen::MatrixXd pred(ds.rows(), static_cast<Eigen::Index>(best.size()));
    for (std::size_t k = 0; k < best.size(); ++k) {
        const auto e = dsr::evaluate(best[k], ts, vars);
        // An expression that fails on unseen rows scores as the zero predictor.
        pred.col(static_cast<Eigen::Index>(k)) =
            e.valid ? e.values : Eigen::VectorXd::Zero(ds.rows());
    }
    return pred;
}

FitReport evaluate_dsr(const std::vector<dsr::Expression>& best, const dsr::TokenSet& ts,
                       const Dataset& ds, double runtime_s) {
    std::vector<int> lengths;
    for (const auto& e : best) lengths.push_back(static_cast<int>(e.length()));
    return evaluate_predictions("dsr", dsr_predictions(best, ts, ds), ds, lengths, runtime_s);
}

Eigen::MatrixXd truth_predictions(const SimulationResult& run, const PlantParams& params) {
    const Dataset& ds = run.data;
    if (run.full_states.rows() != ds.rows()) {
        throw std::invalid_argument("full state trajectory does not match the dataset");
    }
    Eigen::MatrixXd pred(ds.rows(), static_cast<Eigen::Index>(kMeasuredCount));
    for (Eigen::Index r = 0; r < ds.rows(); ++r) {
        PlantState x{};
        for (std::size_t c = 0; c < kStateCount; ++c) {
            x[c] = run.full_states(r, static_cast<Eigen::Index>(c));
        }
        const ReferenceInput u{ds.U(r, 0), ds.U(r, 1), ds.U(r, 2)};
        const auto dx = rhs(x, u, params);
        for (std::size_t c = 0; c < kMeasuredCount; ++c) {
            pred(r, static_cast<Eigen::Index>(c)) = dx[c];
        }
    }
    return pred;
}

namespace {

int method_rank(const std::string& m) {
    if (m == "sindy") return 0;
    if (m == "dsr") return 1;
    return 2;
}

}  // namespace

std::optional<double> Comparison::runtime_ratio() const {
    const auto s = std::find(methods.begin(), methods.end(), "sindy");
    const auto d = std::find(methods.begin(), methods.end(), "dsr");
    if (s == methods.end() || d == methods.end()) return std::nullopt;
    return runtimes[static_cast<std::size_t>(d - methods.begin())] /
           runtimes[static_cast<std::size_t>(s - methods.begin())];
}

double Comparison::delta_mse(std::size_t row, std::size_t method) const {
    const auto& r = rows.at(row).per_method;
    return r.at(method).mse - r.at(0).mse;
}

double Comparison::delta_r2(std::size_t row, std::size_t method) const {
    const auto& r = rows.at(row).per_method;
    return r.at(method).r2 - r.at(0).r2;
}

Comparison compare(std::vector<FitReport> reports) {
    if (reports.size() < 2) throw std::invalid_argument("comparison needs at least two reports");
    for (const auto& r : reports) r.validate();
    for (const auto& r : reports) {
        if (r.fingerprint != reports.front().fingerprint) {
            throw FingerprintMismatch("reports '" + reports.front().method + "' and '" + r.method +
                                      "' were computed on different datasets (fingerprints " +
                                      reports.front().fingerprint.substr(0, 12) + " vs " +
                                      r.fingerprint.substr(0, 12) + ")");
        }
    }
    std::sort(reports.begin(), reports.end(), [](const FitReport& a, const FitReport& b) {
        const int ra = method_rank(a.method);
        const int rb = method_rank(b.method);
        return ra != rb ? ra < rb : a.method < b.method;
    });
    for (std::size_t k = 1; k < reports.size(); ++k) {
        if (reports[k].method == reports[k - 1].method) {
            throw std::invalid_argument("duplicate report for method '" + reports[k].method + "'");
        }
    }
    Comparison c;
    c.fingerprint = reports.front().fingerprint;
    for (const auto& r : reports) {
        c.methods.push_back(r.method);
        c.runtimes.push_back(r.runtime_s);
    }
    for (std::size_t t = 0; t < kMeasuredCount; ++t) {
        ComparisonRow row{reports.front().rows[t].target, {}};
        for (const auto& r : reports) row.per_method.push_back(r.rows[t]);
        c.rows.push_back(std::move(row));
    }
    return c;
}

std::string to_csv(const Comparison& c) {
    std::ostringstream out;
    out << "target";
    for (std::size_t m = 0; m < c.methods.size(); ++m) {
        const auto& n = c.methods[m];
        out << ',' << n << "_mse," << n << "_r2," << n << "_complexity";
    }
    for (std::size_t m = 1; m < c.methods.size(); ++m) {
        out << ",delta_mse_" << c.methods[m] << ",delta_r2_" << c.methods[m];
    }
    out << '\n';
    for (std::size_t r = 0; r < c.rows.size(); ++r) {
        out << c.rows[r].target;
        for (const auto& m : c.rows[r].per_method) {
            out << ',' << format_double(m.mse) << ',' << format_double(m.r2) << ','
                << m.complexity;
        }
        for (std::size_t m = 1; m < c.methods.size(); ++m) {
            out << ',' << format_double(c.delta_mse(r, m)) << ','
                << format_double(c.delta_r2(r, m));
        }
        out << '\n';
    }
    return out.str();
}

std::string to_text(const Comparison& c) {
    std::vector<std::vector<std::string>> cells;
    std::vector<std::string> header{"target"};
    for (const auto& m : c.methods) {
        header.push_back(m + " MSE");
        header.push_back(m + " R2");
        header.push_back(m + (m == "dsr" ? " length" : " terms"));
    }
    cells.push_back(header);
    char buf[64];
    for (const auto& row : c.rows) {
        std::vector<std::string> line{row.target};
        for (const auto& m : row.per_method) {
            std::snprintf(buf, sizeof(buf), "%.4g", m.mse);
            line.emplace_back(buf);
            std::snprintf(buf, sizeof(buf), "%.4f", m.r2);
            line.emplace_back(buf);
            line.push_back(std::to_string(m.complexity));
        }
        cells.push_back(std::move(line));
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& line : cells) {
        for (std::size_t k = 0; k < line.size(); ++k) width[k] = std::max(width[k], line[k].size());
    }
    std::ostringstream out;
    out << "dataset " << c.fingerprint << "\n\n";
    for (std::size_t r = 0; r < cells.size(); ++r) {
        for (std::size_t k = 0; k < cells[r].size(); ++k) {
            const auto& s = cells[r][k];
            if (k == 0) {
                out << s << std::string(width[k] - s.size(), ' ');
            } else {
                out << "  " << std::string(width[k] - s.size(), ' ') << s;
            }
        }
        out << '\n';
        if (r == 0) {
            std::size_t total = 0;
            for (auto w : width) total += w + 2;
            out << std::string(total - 2, '-') << '\n';
        }
    }
    return out.str();
}

std::string runtime_summary(const Comparison& c) {
    std::ostringstream out;
    char buf[128];
    for (std::size_t m = 0; m < c.methods.size(); ++m) {
        std::snprintf(buf, sizeof(buf), "%-8s %12.3f s\n", c.methods[m].c_str(), c.runtimes[m]);
        out << buf;
    }
    if (const auto ratio = c.runtime_ratio()) {
        std::snprintf(buf, sizeof(buf),
                      "dsr/sindy runtime ratio %.3g (published figure: about 11)\n", *ratio);
        out << buf;
    }
    return out.str();
}

nlohmann::json to_json(const FitReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows) {
        rows.push_back({{"target", row.target},
                        {"mse", row.mse},
                        {"r2", row.r2},
                        {"complexity", row.complexity}});
    }
    return {{"format", "gfmid.fit_report/1"},
            {"method", r.method},
            {"dataset_sha256", r.fingerprint},
            {"rows", rows}};
}

FitReport report_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "gfmid.fit_report/1") {
        throw std::invalid_argument("not a fit report (format tag missing or unknown)");
    }
    FitReport r;
    r.method = j.at("method").get<std::string>();
    r.fingerprint = j.at("dataset_sha256").get<std::string>();
    for (const auto& row : j.at("rows")) {
        r.rows.push_back({row.at("target").get<std::string>(), row.at("mse").get<double>(),
                          row.at("r2").get<double>(), row.at("complexity").get<int>()});
    }
    r.validate();
    return r;
}

void write_plot_csvs(const Dataset& ds, const std::map<std::string, Eigen::MatrixXd>& predictions,
                     const std::filesystem::path& dir) {
    for (const auto& [name, pred] : predictions) {
        if (pred.rows() != ds.rows() || pred.cols() != ds.dX.cols()) {
            throw std::invalid_argument("prediction matrix for '" + name +
                                        "' does not match the dataset");
        }
    }
    std::vector<std::pair<std::string, const Eigen::MatrixXd*>> ordered;
    for (const auto& [name, pred] : predictions) ordered.emplace_back(name, &pred);
    std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
        const int ra = method_rank(a.first);
        const int rb = method_rank(b.first);
        return ra != rb ? ra < rb : a.first < b.first;
    });
    std::filesystem::create_directories(dir);
    for (Eigen::Index j = 0; j < ds.dX.cols(); ++j) {
        const std::string target(kStateNames[static_cast<std::size_t>(j)]);
        std::ofstream out(dir / ("plot_" + target + ".csv"), std::ios::binary);
        if (!out) throw std::runtime_error("cannot write plot CSV for " + target);
        out << "t,actual";
        for (const auto& [name, pred] : ordered) out << ',' << name << "_pred";
        out << '\n';
        for (Eigen::Index r = 0; r < ds.rows(); ++r) {
            out << format_double(ds.time[static_cast<std::size_t>(r)]) << ','
                << format_double(ds.dX(r, j));
            for (const auto& [name, pred] : ordered) out << ',' << format_double((*pred)(r, j));
            out << '\n';
        }
    }
}

}  // namespace gfmid::metrics
