#include "gfmid/simulator.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

namespace gfmid {

std::string to_string(ReferenceTarget t) {
    switch (t) {
        case ReferenceTarget::p_ref: return "p_ref";
        case ReferenceTarget::q_ref: return "q_ref";
        case ReferenceTarget::v_ref: return "v_ref";
    }
    return "unknown";
}

ReferenceTarget parse_reference_target(const std::string& name) {
    if (name == "p_ref") return ReferenceTarget::p_ref;
    if (name == "q_ref") return ReferenceTarget::q_ref;
    if (name == "v_ref") return ReferenceTarget::v_ref;
    throw std::invalid_argument("unknown reference target '" + name +
                                "' (expected p_ref, q_ref or v_ref)");
}

std::vector<DisturbanceEvent> SimConfig::default_schedule() {
    return {{0.5, ReferenceTarget::p_ref, 0.7},
            {1.0, ReferenceTarget::q_ref, 0.2},
            {1.5, ReferenceTarget::v_ref, 0.9}};
}

void SimConfig::validate() const {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw std::invalid_argument("simulation.dt must be > 0");
    if (!(t_end > 0.0) || !std::isfinite(t_end)) {
        throw std::invalid_argument("simulation.t_end must be > 0");
    }
    if (sample_stride < 1) throw std::invalid_argument("simulation.sample_stride must be >= 1");
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
        throw std::invalid_argument("simulation.noise_std must be >= 0");
    }
    double previous = 0.0;
    for (std::size_t k = 0; k < schedule.size(); ++k) {
        const auto& e = schedule[k];
        const std::string where = "simulation.events[" + std::to_string(k) + "]";
        if (!(e.time >= 0.0) || !std::isfinite(e.time)) {
            throw std::invalid_argument(where + ".time must be >= 0");
        }
        if (!std::isfinite(e.value)) throw std::invalid_argument(where + ".value must be finite");
        if (e.time < previous) {
            throw std::invalid_argument(where + " is out of order; schedule must be sorted by time");
        }
        if (e.time > t_end) {
            throw std::invalid_argument(where + ".time exceeds simulation.t_end");
        }
        previous = e.time;
    }
    if (sample_count() < 2) {
        throw std::invalid_argument("simulation must record at least two samples");
    }
}

std::size_t SimConfig::sample_count() const {
    return static_cast<std::size_t>(std::floor(t_end / (dt * sample_stride) + 1e-9)) + 1;
}

PlantState rk4_step(const PlantState& x, const ReferenceInput& u, const PlantParams& params,
                    double dt, double t) {
    return rk4_step(x, [&](const PlantState& s) { return rhs(s, u, params); }, dt, t);
}

double max_abs(const PlantState& x) noexcept {
    double m = 0.0;
    for (double v : x) m = std::max(m, std::abs(v));
    return m;
}

ReferenceInput nominal_references(const ControlParams& ctl) noexcept {
    return {ctl.p_ref_nominal, ctl.q_ref_nominal, ctl.v_ref_nominal};
}

namespace {

using Vec15 = Eigen::Matrix<double, kStateCount, 1>;
using Mat15 = Eigen::Matrix<double, kStateCount, kStateCount>;

Vec15 to_vec(const PlantState& x) { return Eigen::Map<const Vec15>(x.data()); }

PlantState to_state(const Vec15& v) {
    PlantState x;
    Eigen::Map<Vec15>(x.data()) = v;
    return x;
}

PlantState flat_start(const ReferenceInput& u, const PlantParams& params) {
    const double ws = params.net.omega_s;
    const double cf = params.net.c_f;
    PlantState x{};
    x[state::v_filt_r] = u.v_ref;
    x[state::i_filt_r] = u.p_ref / u.v_ref;
    x[state::i_filt_i] = -u.q_ref / u.v_ref;
    x[state::i_cv_r] = x[state::i_filt_r];
    x[state::i_cv_i] = x[state::i_filt_i] + ws * cf * u.v_ref;
    x[state::p_m] = u.p_ref;
    x[state::q_m] = u.q_ref;
    x[state::phi_d] = u.v_ref;
    return x;
}

Mat15 jacobian(const PlantState& x, const ReferenceInput& u, const PlantParams& params) {
    Mat15 J;
    for (std::size_t k = 0; k < kStateCount; ++k) {
        const double h = 1e-7 * std::max(1.0, std::abs(x[k]));
        PlantState xp = x;
        PlantState xm = x;
        xp[k] += h;
        xm[k] -= h;
        J.col(static_cast<Eigen::Index>(k)) =
            (to_vec(rhs(xp, u, params)) - to_vec(rhs(xm, u, params))) / (2.0 * h);
    }
    return J;
}

/// Damped Newton on rhs = 0. Returns the best iterate found.
PlantState newton(PlantState x, const ReferenceInput& u, const PlantParams& params,
                  const EquilibriumOptions& opts) {
    double res = max_abs(rhs(x, u, params));
    for (int it = 0; it < opts.max_newton_iterations && res >= opts.tolerance; ++it) {
        const Vec15 f = to_vec(rhs(x, u, params));
        const Vec15 step = jacobian(x, u, params).colPivHouseholderQr().solve(-f);
        if (!step.allFinite()) break;
        double alpha = 1.0;
        bool improved = false;
        while (alpha > 1e-6) {
            const PlantState trial = to_state(to_vec(x) + alpha * step);
            if (all_finite(trial)) {
                try {
                    const double r = max_abs(rhs(trial, u, params));
                    if (r < res) {
                        x = trial;
                        res = r;
                        improved = true;
                        break;
                    }
                } catch (const NumericalBlowup&) {
                }
            }
            alpha *= 0.5;
        }
        if (!improved) break;
    }
    return x;
}

std::string describe_residual(const PlantState& f) {
    std::array<std::size_t, kStateCount> order;
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return std::abs(f[a]) > std::abs(f[b]); });
    std::ostringstream msg;
    for (std::size_t k = 0; k < 3; ++k) {
        msg << (k ? ", " : "") << kStateNames[order[k]] << "=" << f[order[k]];
    }
    return msg.str();
}

}  // namespace

PlantState find_equilibrium(const ReferenceInput& u0, const PlantParams& params,
                            const EquilibriumOptions& opts) {
    params.validate();
    u0.validate();

    PlantState x = newton(flat_start(u0, params), u0, params, opts);
    if (max_abs(rhs(x, u0, params)) < opts.tolerance) {
        return x;
    }

    // Settle from the flat start, then polish.
    PlantState settled = flat_start(u0, params);
    const auto steps = static_cast<long>(std::ceil(opts.settle_time / opts.settle_dt));
    try {
        for (long k = 0; k < steps; ++k) {
            settled = rk4_step(settled, u0, params, opts.settle_dt, k * opts.settle_dt);
        }
        settled = newton(settled, u0, params, opts);
    } catch (const NumericalBlowup& e) {
        throw EquilibriumError(std::string("equilibrium search failed: Newton did not converge (") +
                               describe_residual(rhs(x, u0, params)) +
                               ") and settling blew up: " + e.what());
    }
    const PlantState f = rhs(settled, u0, params);
    if (max_abs(f) < opts.tolerance) {
        return settled;
    }
    throw EquilibriumError("equilibrium search failed after Newton and settling; worst residuals: " +
                           describe_residual(f));
}

namespace {

void apply_event(ReferenceInput& u, const DisturbanceEvent& e) {
    switch (e.target) {
        case ReferenceTarget::p_ref: u.p_ref = e.value; break;
        case ReferenceTarget::q_ref: u.q_ref = e.value; break;
        case ReferenceTarget::v_ref: u.v_ref = e.value; break;
    }
}

}  // namespace

SimulationResult simulate_full(const SimConfig& config, const PlantParams& params) {
    config.validate();
    params.validate();

    ReferenceInput u = nominal_references(params.ctl);
    SimulationResult result;
    result.initial_state = find_equilibrium(u, params);

    const std::size_t n_rows = config.sample_count();
    const std::size_t n_steps = config.step_count();
    const auto stride = static_cast<std::size_t>(config.sample_stride);

    // Each event fires at the first step whose time is >= the event time.
    std::vector<std::size_t> event_steps;
    for (const auto& e : config.schedule) {
        event_steps.push_back(static_cast<std::size_t>(std::ceil(e.time / config.dt - 1e-9)));
    }

    Dataset& ds = result.data;
    const auto n = static_cast<Eigen::Index>(n_rows);
    ds.time.resize(n_rows);
    ds.X.resize(n, kMeasuredCount);
    ds.U.resize(n, kInputCount);
    ds.dX.resize(n, kMeasuredCount);
    result.full_states.resize(n, kStateCount);

    PlantState x = result.initial_state;
    std::size_t next_event = 0;
    for (std::size_t k = 0; k <= n_steps; ++k) {
        const double t = static_cast<double>(k) * config.dt;
        while (next_event < event_steps.size() && event_steps[next_event] <= k) {
            apply_event(u, config.schedule[next_event]);
            u.validate();
            ++next_event;
        }
        if (k % stride == 0) {
            const auto r = static_cast<Eigen::Index>(k / stride);
            const PlantState dx = rhs(x, u, params);
            ds.time[static_cast<std::size_t>(r)] = t;
            for (std::size_t c = 0; c < kStateCount; ++c) {
                result.full_states(r, static_cast<Eigen::Index>(c)) = x[c];
            }
            for (std::size_t c = 0; c < kMeasuredCount; ++c) {
                ds.X(r, static_cast<Eigen::Index>(c)) = x[c];
                ds.dX(r, static_cast<Eigen::Index>(c)) = dx[c];
            }
            ds.U(r, 0) = u.p_ref;
            ds.U(r, 1) = u.q_ref;
            ds.U(r, 2) = u.v_ref;
        }
        if (k == n_steps) break;
        x = rk4_step(x, u, params, config.dt, t);
    }

    if (config.noise_std > 0.0) {
        std::mt19937_64 rng(config.seed);
        std::normal_distribution<double> noise(0.0, config.noise_std);
        for (Eigen::Index c = 0; c < ds.X.cols(); ++c) {
            for (Eigen::Index r = 0; r < ds.X.rows(); ++r) {
                ds.X(r, c) += noise(rng);
            }
        }
    }
    if (config.derivative_source == DerivativeSource::finite_difference) {
        ds.dX = finite_difference_derivatives(ds);
    }
    ds.validate();
    return result;
}

Dataset simulate(const SimConfig& config, const PlantParams& params) {
    return simulate_full(config, params).data;
}

Eigen::MatrixXd finite_difference_derivatives(const Dataset& ds) {
    const Eigen::Index n = ds.rows();
    if (n < 2) {
        throw std::invalid_argument("finite differences need at least two samples");
    }
    Eigen::MatrixXd d(n, ds.X.cols());
    const auto t = [&](Eigen::Index r) { return ds.time[static_cast<std::size_t>(r)]; };
    d.row(0) = (ds.X.row(1) - ds.X.row(0)) / (t(1) - t(0));
    d.row(n - 1) = (ds.X.row(n - 1) - ds.X.row(n - 2)) / (t(n - 1) - t(n - 2));
    for (Eigen::Index r = 1; r + 1 < n; ++r) {
        d.row(r) = (ds.X.row(r + 1) - ds.X.row(r - 1)) / (t(r + 1) - t(r - 1));
    }
    return d;
}

}  // namespace gfmid
