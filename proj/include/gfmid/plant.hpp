#pragma once

// Converter + LCL filter + infinite bus plant under grid-forming control.
//
// Everything is per-unit on the converter base. The rectangular (r, i) frame
// rotates at the synchronous speed omega_s; the control (d, q) frame is
// rotated by theta_oc relative to it.

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>

namespace gfmid {

/// Raised when a state or derivative stops being finite.
class NumericalBlowup : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Rectangular per-unit phasor.
struct Phasor {
    double re = 0.0;
    double im = 0.0;

    [[nodiscard]] double magnitude() const noexcept { return std::hypot(re, im); }
    /// In (-pi, pi].
    [[nodiscard]] double angle() const noexcept { return std::atan2(im, re); }

    [[nodiscard]] static Phasor polar(double mag, double ang) noexcept {
        return {mag * std::cos(ang), mag * std::sin(ang)};
    }

    friend Phasor operator+(Phasor a, Phasor b) noexcept { return {a.re + b.re, a.im + b.im}; }
    friend Phasor operator-(Phasor a, Phasor b) noexcept { return {a.re - b.re, a.im - b.im}; }
    friend Phasor operator*(Phasor a, Phasor b) noexcept {
        return {a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re};
    }
    friend bool operator==(const Phasor&, const Phasor&) = default;
};

/// Nodal admittance entries of the PCC node.
struct Admittances {
    double g11, b11;   // line, 1 / (R + jX)
    double g12, b12;   // = -g11, -b11
    double gff, bff;   // grid-side filter branch, 1 / (r_g + j omega_s l_g)
    double g1f, b1f;   // = -gff, -bff
};

struct NetworkParams {
    double R = 0.0;
    double X = 0.0020625;
    double r_g = 0.003;
    double l_g = 0.002;
    double r_f = 0.016;
    double l_f = 0.009;
    double c_f = 2.5;
    double v2_mag = 1.0;
    double theta2 = 0.0;
    double omega_b = 2.0 * std::numbers::pi * 60.0;
    double omega_s = 1.0;

    /// Throws std::invalid_argument naming the first violated constraint.
    void validate() const;
    [[nodiscard]] Admittances admittances() const;
    [[nodiscard]] Phasor infinite_bus() const noexcept { return Phasor::polar(v2_mag, theta2); }
};

struct ControlParams {
    double omega_ref = 1.0;
    double k_p = 0.02;
    double k_q = 0.05;
    double omega_z = 2.0 * std::numbers::pi * 5.0;
    double omega_f = 2.0 * std::numbers::pi * 5.0;
    double k_p_v = 0.52;
    double k_i_v = 1000.0;
    double k_ffi = 0.0;
    double k_p_c = 0.74;
    double k_i_c = 14.3;
    double k_ffv = 1.0;
    double k_ad = 0.2;
    double omega_ad = 50.0;
    double r_v = 0.0;
    double l_v = 0.2;
    double v_ref_nominal = 1.0;
    double p_ref_nominal = 0.5;
    double q_ref_nominal = 0.0;

    void validate() const;
};

struct PlantParams {
    NetworkParams net;
    ControlParams ctl;

    void validate() const {
        net.validate();
        ctl.validate();
    }
};

struct ReferenceInput {
    double p_ref = 0.5;
    double q_ref = 0.0;
    double v_ref = 1.0;

    void validate() const;
    friend bool operator==(const ReferenceInput&, const ReferenceInput&) = default;
};

inline constexpr std::size_t kStateCount = 15;
inline constexpr std::size_t kMeasuredCount = 9;
inline constexpr std::size_t kInputCount = 3;

/// Full plant state. The index order is fixed; the first kMeasuredCount
/// entries are the measured states and define the dataset column order.
using PlantState = std::array<double, kStateCount>;

namespace state {
inline constexpr std::size_t i_cv_r = 0;
inline constexpr std::size_t i_cv_i = 1;
inline constexpr std::size_t v_filt_r = 2;
inline constexpr std::size_t v_filt_i = 3;
inline constexpr std::size_t i_filt_r = 4;
inline constexpr std::size_t i_filt_i = 5;
inline constexpr std::size_t theta_oc = 6;
inline constexpr std::size_t p_m = 7;
inline constexpr std::size_t q_m = 8;
inline constexpr std::size_t xi_d = 9;
inline constexpr std::size_t xi_q = 10;
inline constexpr std::size_t gamma_d = 11;
inline constexpr std::size_t gamma_q = 12;
inline constexpr std::size_t phi_d = 13;
inline constexpr std::size_t phi_q = 14;
}  // namespace state

inline constexpr std::array<std::string_view, kStateCount> kStateNames = {
    "i_cv_r", "i_cv_i", "v_filt_r", "v_filt_i", "i_filt_r", "i_filt_i", "theta_oc", "p_m",
    "q_m",    "xi_d",   "xi_q",     "gamma_d",  "gamma_q",  "phi_d",    "phi_q"};

inline constexpr std::array<std::string_view, kInputCount> kInputNames = {"p_ref", "q_ref",
                                                                          "v_ref"};

struct DqPair {
    double d = 0.0;
    double q = 0.0;
};

struct RectPair {
    double r = 0.0;
    double i = 0.0;
};

/// (r, i) -> (d, q) at control angle theta.
[[nodiscard]] DqPair park(double theta_oc, double r_component, double i_component) noexcept;
/// (d, q) -> (r, i) at control angle theta.
[[nodiscard]] RectPair inverse_park(double theta_oc, double d, double q) noexcept;

/// PCC voltage from current continuity: v_grid = v2 + (R + jX) i_filt.
[[nodiscard]] Phasor pcc_voltage(Phasor i_filt, const NetworkParams& net) noexcept;

/// Active-power balance at the PCC node, written in admittance form. Zero when
/// the static branch relations hold (equilibria).
[[nodiscard]] double power_balance_residual(Phasor v_grid, Phasor v_filt,
                                            const NetworkParams& net);

struct OuterSignals {
    double omega_oc = 0.0;
    double v_oc = 0.0;
};

[[nodiscard]] OuterSignals outer_signals(const PlantState& x, const ReferenceInput& u,
                                         const ControlParams& ctl) noexcept;

/// Park-transformed filter measurements at the current theta_oc.
struct DqMeasurements {
    DqPair v_filt;
    DqPair i_filt;
    DqPair i_cv;
};

[[nodiscard]] DqMeasurements measure_dq(const PlantState& x) noexcept;

/// Intermediate references of the cascaded voltage/current loops.
struct InnerReferences {
    DqPair v_vi_ref;   // after virtual impedance
    DqPair i_cv_ref;   // voltage-loop output
    DqPair v_cv_ref;   // current-loop output, converter voltage command
};

[[nodiscard]] InnerReferences inner_references(const PlantState& x, const OuterSignals& outer,
                                               const DqMeasurements& dq,
                                               const ControlParams& ctl,
                                               const NetworkParams& net) noexcept;

/// The six LCL filter states in the order i_cv, v_filt, i_filt (r then i).
using FilterState = std::array<double, 6>;

/// Filter derivatives for given converter and PCC terminal voltages.
[[nodiscard]] FilterState lcl_filter_rhs(const FilterState& f, Phasor v_cv, Phasor v_grid,
                                         const NetworkParams& net) noexcept;

/// Every algebraic signal of the closed loop at one instant.
struct PlantSignals {
    OuterSignals outer;
    DqMeasurements dq;
    InnerReferences inner;
    Phasor v_cv;
    Phasor v_grid;
};

[[nodiscard]] PlantSignals evaluate_signals(const PlantState& x, const ReferenceInput& u,
                                            const PlantParams& params) noexcept;

/// Exact time derivative of the full state (per second). Throws NumericalBlowup
/// on a non-finite state.
[[nodiscard]] PlantState rhs(const PlantState& x, const ReferenceInput& u,
                             const PlantParams& params);

/// Energy stored in the filter reactive elements.
[[nodiscard]] double filter_energy(const FilterState& f, const NetworkParams& net) noexcept;

[[nodiscard]] bool all_finite(const PlantState& x) noexcept;

}  // namespace gfmid
