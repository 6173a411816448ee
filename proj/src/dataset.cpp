#include "gfmid/dataset.hpp"

#include "gfmid/plant.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace gfmid {

Eigen::MatrixXd Dataset::variables() const {
    Eigen::MatrixXd z(X.rows(), X.cols() + U.cols());
    z << X, U;
    return z;
}

void Dataset::validate() const {
    const auto n = static_cast<Eigen::Index>(time.size());
    if (X.rows() != n || U.rows() != n || dX.rows() != n) {
        throw std::invalid_argument("dataset: time, X, U and dX row counts differ");
    }
    if (X.cols() != static_cast<Eigen::Index>(kMeasuredCount) ||
        dX.cols() != static_cast<Eigen::Index>(kMeasuredCount) ||
        U.cols() != static_cast<Eigen::Index>(kInputCount)) {
        throw std::invalid_argument("dataset: unexpected column count");
    }
    if (!X.allFinite() || !U.allFinite() || !dX.allFinite()) {
        throw std::invalid_argument("dataset: non-finite entry");
    }
    for (double t : time) {
        if (!std::isfinite(t)) {
            throw std::invalid_argument("dataset: non-finite time stamp");
        }
    }
}

std::vector<std::string> Dataset::variable_names() {
    std::vector<std::string> names;
    for (std::size_t k = 0; k < kMeasuredCount; ++k) {
        names.emplace_back(kStateNames[k]);
    }
    for (auto n : kInputNames) {
        names.emplace_back(n);
    }
    return names;
}

std::vector<std::string> Dataset::target_names() {
    std::vector<std::string> names;
    for (std::size_t k = 0; k < kMeasuredCount; ++k) {
        names.push_back("d_" + std::string(kStateNames[k]));
    }
    return names;
}

std::vector<std::string> Dataset::column_names() {
    std::vector<std::string> names{"t"};
    for (auto& n : variable_names()) {
        names.push_back(std::move(n));
    }
    for (auto& n : target_names()) {
        names.push_back(std::move(n));
    }
    return names;
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

std::string dataset_to_csv(const Dataset& ds) {
    ds.validate();
    std::string out;
    const auto names = Dataset::column_names();
    for (std::size_t c = 0; c < names.size(); ++c) {
        out += names[c];
        out += c + 1 < names.size() ? ',' : '\n';
    }
    for (Eigen::Index r = 0; r < ds.rows(); ++r) {
        out += format_double(ds.time[static_cast<std::size_t>(r)]);
        for (const Eigen::MatrixXd* m : {&ds.X, &ds.U, &ds.dX}) {
            for (Eigen::Index c = 0; c < m->cols(); ++c) {
                out += ',';
                out += format_double((*m)(r, c));
            }
        }
        out += '\n';
    }
    return out;
}

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            cells.push_back(line.substr(start));
            return cells;
        }
        cells.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

double parse_cell(std::string_view cell, std::size_t line_no, const std::string& column) {
    double value = 0.0;
    const auto* first = cell.data();
    const auto* last = cell.data() + cell.size();
    auto res = std::from_chars(first, last, value);
    if (res.ec != std::errc{} || res.ptr != last || cell.empty()) {
        throw DatasetParseError(line_no, "non-numeric cell '" + std::string(cell) +
                                             "' in column '" + column + "'");
    }
    if (!std::isfinite(value)) {
        throw DatasetParseError(line_no, "non-finite value in column '" + column + "'");
    }
    return value;
}

}  // namespace

Dataset dataset_from_csv(const std::string& text) {
    const auto expected = Dataset::column_names();
    std::vector<std::vector<double>> rows;

    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            if (!have_header) {
                throw DatasetParseError(line_no, "missing header");
            }
            continue;
        }
        const auto cells = split_commas(line);
        if (!have_header) {
            if (cells.size() != expected.size()) {
                throw DatasetParseError(line_no, "header has " + std::to_string(cells.size()) +
                                                     " columns, expected " +
                                                     std::to_string(expected.size()));
            }
            for (std::size_t c = 0; c < cells.size(); ++c) {
                if (cells[c] != expected[c]) {
                    throw DatasetParseError(line_no, "header column " + std::to_string(c) +
                                                         " is '" + std::string(cells[c]) +
                                                         "', expected '" + expected[c] + "'");
                }
            }
            have_header = true;
            continue;
        }
        if (cells.size() != expected.size()) {
            throw DatasetParseError(line_no, "ragged row with " + std::to_string(cells.size()) +
                                                 " cells, expected " +
                                                 std::to_string(expected.size()));
        }
        std::vector<double> values(cells.size());
        for (std::size_t c = 0; c < cells.size(); ++c) {
            values[c] = parse_cell(cells[c], line_no, expected[c]);
        }
        rows.push_back(std::move(values));
    }
    if (!have_header) {
        throw DatasetParseError(line_no == 0 ? 1 : line_no, "empty dataset file");
    }
    if (rows.empty()) {
        throw DatasetParseError(line_no, "dataset has a header but no rows");
    }

    const auto n = static_cast<Eigen::Index>(rows.size());
    Dataset ds;
    ds.time.resize(rows.size());
    ds.X.resize(n, kMeasuredCount);
    ds.U.resize(n, kInputCount);
    ds.dX.resize(n, kMeasuredCount);
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto& v = rows[static_cast<std::size_t>(r)];
        ds.time[static_cast<std::size_t>(r)] = v[0];
        std::size_t c = 1;
        for (Eigen::Index k = 0; k < ds.X.cols(); ++k) ds.X(r, k) = v[c++];
        for (Eigen::Index k = 0; k < ds.U.cols(); ++k) ds.U(r, k) = v[c++];
        for (Eigen::Index k = 0; k < ds.dX.cols(); ++k) ds.dX(r, k) = v[c++];
    }
    return ds;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
    const std::string text = dataset_to_csv(ds);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    }
    out << text;
    if (!out) {
        throw std::runtime_error("failed writing '" + path.string() + "'");
    }
}

Dataset read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open dataset '" + path.string() + "'");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return dataset_from_csv(buf.str());
}

}  // namespace gfmid
