#include "gfmid/plant.hpp"

#include <algorithm>
#include <numbers>

namespace gfmid {

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) {
        throw std::invalid_argument(what);
    }
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

void NetworkParams::validate() const {
    for (double v : {R, X, r_g, l_g, r_f, l_f, c_f, v2_mag, theta2, omega_b, omega_s}) {
        require(finite(v), "network parameters must be finite");
    }
    require(l_f > 0.0, "network.l_f must be > 0");
    require(l_g > 0.0, "network.l_g must be > 0");
    require(c_f > 0.0, "network.c_f must be > 0");
    require(omega_b > 0.0, "network.omega_b must be > 0");
    require(R >= 0.0, "network.R must be >= 0");
    require(r_f >= 0.0, "network.r_f must be >= 0");
    require(r_g >= 0.0, "network.r_g must be >= 0");
    require(R != 0.0 || X != 0.0, "network.R and network.X cannot both be zero");
}

Admittances NetworkParams::admittances() const {
    // 1 / (a + jb) = (a - jb) / (a^2 + b^2)
    const double line_den = R * R + X * X;
    const double g11 = R / line_den;
    const double b11 = -X / line_den;
    const double xg = omega_s * l_g;
    const double branch_den = r_g * r_g + xg * xg;
    const double gff = r_g / branch_den;
    const double bff = -xg / branch_den;
    return {g11, b11, -g11, -b11, gff, bff, -gff, -bff};
}

void ControlParams::validate() const {
    for (double v : {omega_ref, k_p, k_q, omega_z, omega_f, k_p_v, k_i_v, k_ffi, k_p_c, k_i_c,
                     k_ffv, k_ad, omega_ad, r_v, l_v, v_ref_nominal, p_ref_nominal,
                     q_ref_nominal}) {
        require(finite(v), "control parameters must be finite");
    }
    require(omega_z > 0.0, "control.omega_z must be > 0");
    require(omega_f > 0.0, "control.omega_f must be > 0");
    require(omega_ad > 0.0, "control.omega_ad must be > 0");
    require(k_i_v > 0.0, "control.k_i_v must be > 0");
    require(k_i_c > 0.0, "control.k_i_c must be > 0");
    ReferenceInput{p_ref_nominal, q_ref_nominal, v_ref_nominal}.validate();
}

void ReferenceInput::validate() const {
    for (double v : {p_ref, q_ref, v_ref}) {
        require(finite(v), "reference inputs must be finite");
        require(std::abs(v) <= 2.0, "reference inputs must lie within +-2 p.u.");
    }
}

DqPair park(double theta_oc, double r_component, double i_component) noexcept {
    const double s = std::sin(theta_oc + std::numbers::pi / 2.0);
    const double c = std::cos(theta_oc + std::numbers::pi / 2.0);
    return {s * r_component - c * i_component, c * r_component + s * i_component};
}

RectPair inverse_park(double theta_oc, double d, double q) noexcept {
    const double s = std::sin(theta_oc + std::numbers::pi / 2.0);
    const double c = std::cos(theta_oc + std::numbers::pi / 2.0);
    return {s * d + c * q, -c * d + s * q};
}

Phasor pcc_voltage(Phasor i_filt, const NetworkParams& net) noexcept {
    return net.infinite_bus() + Phasor{net.R, net.X} * i_filt;
}

double power_balance_residual(Phasor v_grid, Phasor v_filt, const NetworkParams& net) {
    const Admittances y = net.admittances();
    const double vg = v_grid.magnitude();
    const double vf = v_filt.magnitude();
    const double tg = v_grid.angle();
    const double tf = v_filt.angle();
    const double d2 = tg - net.theta2;
    const double df = tg - tf;
    return vg * vg * y.g11 + vg * net.v2_mag * y.g12 * std::cos(d2) +
           vg * net.v2_mag * y.b12 * std::sin(d2) + vg * vg * y.gff +
           vg * vf * y.g1f * std::cos(df) + vg * vf * y.b1f * std::sin(df);
}

OuterSignals outer_signals(const PlantState& x, const ReferenceInput& u,
                           const ControlParams& ctl) noexcept {
    return {ctl.omega_ref + ctl.k_p * (u.p_ref - x[state::p_m]),
            u.v_ref + ctl.k_q * (u.q_ref - x[state::q_m])};
}

DqMeasurements measure_dq(const PlantState& x) noexcept {
    const double th = x[state::theta_oc];
    return {park(th, x[state::v_filt_r], x[state::v_filt_i]),
            park(th, x[state::i_filt_r], x[state::i_filt_i]),
            park(th, x[state::i_cv_r], x[state::i_cv_i])};
}

InnerReferences inner_references(const PlantState& x, const OuterSignals& outer,
                                 const DqMeasurements& dq, const ControlParams& ctl,
                                 const NetworkParams& net) noexcept {
    const double w = outer.omega_oc;
    InnerReferences out;

    out.v_vi_ref.d = outer.v_oc - ctl.r_v * dq.i_filt.d + w * ctl.l_v * dq.i_filt.q;
    out.v_vi_ref.q = -ctl.r_v * dq.i_filt.q - w * ctl.l_v * dq.i_filt.d;

    out.i_cv_ref.d = ctl.k_p_v * (out.v_vi_ref.d - dq.v_filt.d) + ctl.k_i_v * x[state::xi_d] -
                     net.c_f * w * dq.v_filt.q + ctl.k_ffi * dq.i_filt.d;
    out.i_cv_ref.q = ctl.k_p_v * (out.v_vi_ref.q - dq.v_filt.q) + ctl.k_i_v * x[state::xi_q] +
                     net.c_f * w * dq.v_filt.d + ctl.k_ffi * dq.i_filt.q;

    out.v_cv_ref.d = ctl.k_p_c * (out.i_cv_ref.d - dq.i_cv.d) - w * net.l_f * dq.i_cv.q +
                     ctl.k_i_c * x[state::gamma_d] + ctl.k_ffv * dq.v_filt.d -
                     ctl.k_ad * (dq.v_filt.d - x[state::phi_d]);
    out.v_cv_ref.q = ctl.k_p_c * (out.i_cv_ref.q - dq.i_cv.q) + w * net.l_f * dq.i_cv.d +
                     ctl.k_i_c * x[state::gamma_q] + ctl.k_ffv * dq.v_filt.q -
                     ctl.k_ad * (dq.v_filt.q - x[state::phi_q]);
    return out;
}

FilterState lcl_filter_rhs(const FilterState& f, Phasor v_cv, Phasor v_grid,
                           const NetworkParams& net) noexcept {
    const auto [icr, ici, vr, vi, ir, ii] = f;
    const double wb = net.omega_b;
    const double ws = net.omega_s;
    return {
        wb / net.l_f * (v_cv.re - vr - net.r_f * icr + ws * net.l_f * ici),
        wb / net.l_f * (v_cv.im - vi - net.r_f * ici - ws * net.l_f * icr),
        wb / net.c_f * (icr - ir + ws * net.c_f * vi),
        wb / net.c_f * (ici - ii - ws * net.c_f * vr),
        wb / net.l_g * (vr - v_grid.re - net.r_g * ir + ws * net.l_g * ii),
        wb / net.l_g * (vi - v_grid.im - net.r_g * ii - ws * net.l_g * ir),
    };
}

PlantSignals evaluate_signals(const PlantState& x, const ReferenceInput& u,
                              const PlantParams& params) noexcept {
    PlantSignals s;
    s.outer = outer_signals(x, u, params.ctl);
    s.dq = measure_dq(x);
    s.inner = inner_references(x, s.outer, s.dq, params.ctl, params.net);
    const RectPair cv = inverse_park(x[state::theta_oc], s.inner.v_cv_ref.d, s.inner.v_cv_ref.q);
    s.v_cv = {cv.r, cv.i};
    s.v_grid = pcc_voltage({x[state::i_filt_r], x[state::i_filt_i]}, params.net);
    return s;
}

PlantState rhs(const PlantState& x, const ReferenceInput& u, const PlantParams& params) {
    if (!all_finite(x)) {
        throw NumericalBlowup("plant state is not finite");
    }
    const auto& net = params.net;
    const auto& ctl = params.ctl;
    const PlantSignals s = evaluate_signals(x, u, params);

    const FilterState filter{x[state::i_cv_r],   x[state::i_cv_i],   x[state::v_filt_r],
                             x[state::v_filt_i], x[state::i_filt_r], x[state::i_filt_i]};
    const FilterState df = lcl_filter_rhs(filter, s.v_cv, s.v_grid, net);

    const double vr = x[state::v_filt_r];
    const double vi = x[state::v_filt_i];
    const double ir = x[state::i_filt_r];
    const double ii = x[state::i_filt_i];

    PlantState dx{};
    std::copy(df.begin(), df.end(), dx.begin());
    dx[state::theta_oc] = net.omega_b * (s.outer.omega_oc - net.omega_s);
    dx[state::p_m] = ctl.omega_z * (vr * ir + vi * ii - x[state::p_m]);
    dx[state::q_m] = ctl.omega_f * (-vr * ii + vi * ir - x[state::q_m]);
    dx[state::xi_d] = s.inner.v_vi_ref.d - s.dq.v_filt.d;
    dx[state::xi_q] = s.inner.v_vi_ref.q - s.dq.v_filt.q;
    dx[state::gamma_d] = s.inner.i_cv_ref.d - s.dq.i_cv.d;
    dx[state::gamma_q] = s.inner.i_cv_ref.q - s.dq.i_cv.q;
    dx[state::phi_d] = ctl.omega_ad * (s.dq.v_filt.d - x[state::phi_d]);
    dx[state::phi_q] = ctl.omega_ad * (s.dq.v_filt.q - x[state::phi_q]);

    if (!all_finite(dx)) {
        throw NumericalBlowup("plant derivative is not finite");
    }
    return dx;
}

double filter_energy(const FilterState& f, const NetworkParams& net) noexcept {
    const auto [icr, ici, vr, vi, ir, ii] = f;
    return 0.5 * net.l_f * (icr * icr + ici * ici) + 0.5 * net.c_f * (vr * vr + vi * vi) +
           0.5 * net.l_g * (ir * ir + ii * ii);
}

bool all_finite(const PlantState& x) noexcept {
    return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace gfmid
