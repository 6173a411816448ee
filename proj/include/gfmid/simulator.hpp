#pragma once

#include "gfmid/dataset.hpp"
#include "gfmid/plant.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace gfmid {

enum class ReferenceTarget { p_ref, q_ref, v_ref };

[[nodiscard]] std::string to_string(ReferenceTarget t);
[[nodiscard]] ReferenceTarget parse_reference_target(const std::string& name);

/// Step change of one reference input.
struct DisturbanceEvent {
    double time = 0.0;
    ReferenceTarget target = ReferenceTarget::p_ref;
    double value = 0.0;
};

enum class DerivativeSource { exact, finite_difference };

struct SimConfig {
    double dt = 1e-5;
    double t_end = 2.0;
    int sample_stride = 10;
    std::vector<DisturbanceEvent> schedule = default_schedule();
    double noise_std = 0.0;
    DerivativeSource derivative_source = DerivativeSource::exact;
    std::uint64_t seed = 0;

    /// p_ref -> 0.7 at 0.5 s, q_ref -> 0.2 at 1.0 s, v_ref -> 0.9 at 1.5 s.
    [[nodiscard]] static std::vector<DisturbanceEvent> default_schedule();

    void validate() const;
    [[nodiscard]] std::size_t sample_count() const;
    [[nodiscard]] std::size_t step_count() const { return (sample_count() - 1) * sample_stride; }
};

/// Classical fourth-order Runge-Kutta step for any fixed-size state and
/// time-invariant right-hand side. Throws NumericalBlowup, stamped with `t`,
/// if an intermediate stage is not finite.
template <std::size_t N, class Rhs>
[[nodiscard]] std::array<double, N> rk4_step(const std::array<double, N>& x, Rhs&& f, double dt,
                                             double t = 0.0) {
    auto axpy = [](const std::array<double, N>& a, double h, const std::array<double, N>& b) {
        std::array<double, N> out;
        for (std::size_t k = 0; k < N; ++k) out[k] = a[k] + h * b[k];
        return out;
    };
    auto check = [t](const std::array<double, N>& v) {
        for (double e : v) {
            if (!std::isfinite(e)) {
                throw NumericalBlowup("integration blew up at t = " + std::to_string(t) + " s");
            }
        }
    };
    const auto k1 = f(x);
    check(k1);
    const auto k2 = f(axpy(x, 0.5 * dt, k1));
    check(k2);
    const auto k3 = f(axpy(x, 0.5 * dt, k2));
    check(k3);
    const auto k4 = f(axpy(x, dt, k3));
    check(k4);
    std::array<double, N> next;
    for (std::size_t k = 0; k < N; ++k) {
        next[k] = x[k] + dt / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
    }
    check(next);
    return next;
}

/// One RK4 step of the plant with `u` held over the step.
[[nodiscard]] PlantState rk4_step(const PlantState& x, const ReferenceInput& u,
                                  const PlantParams& params, double dt, double t = 0.0);

[[nodiscard]] double max_abs(const PlantState& x) noexcept;

class EquilibriumError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct EquilibriumOptions {
    double tolerance = 1e-8;
    int max_newton_iterations = 50;
    double settle_time = 2.0;
    double settle_dt = 1e-5;
};

/// Fixed point of the plant for constant references: damped Newton with a
/// finite-difference Jacobian, falling back to settling from a flat start.
[[nodiscard]] PlantState find_equilibrium(const ReferenceInput& u0, const PlantParams& params,
                                          const EquilibriumOptions& opts = {});

/// Dataset plus the full 15-state trajectory at the recorded instants.
struct SimulationResult {
    Dataset data;
    Eigen::MatrixXd full_states;   // samples x 15, noiseless
    PlantState initial_state{};
};

[[nodiscard]] SimulationResult simulate_full(const SimConfig& config, const PlantParams& params);
[[nodiscard]] Dataset simulate(const SimConfig& config, const PlantParams& params);

/// References in effect before any event fires.
[[nodiscard]] ReferenceInput nominal_references(const ControlParams& ctl) noexcept;

/// Centered differences of the X columns (one-sided at the ends).
[[nodiscard]] Eigen::MatrixXd finite_difference_derivatives(const Dataset& ds);

}  // namespace gfmid
