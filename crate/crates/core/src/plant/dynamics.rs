use super::{PlantConstants, State, N_STATE, N_Z};
use crate::error::CoreError;
use nalgebra::DMatrix;

/// Margin (insertion fraction) over which rod motion is smoothly blocked
/// at the travel limits, keeping x_bank inside [0, 1] with a C1 rate.
const ROD_LIMIT_MARGIN: f64 = 0.02;

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Cubic smoothstep on [0, 1], clamped outside.
fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

fn smoothstep_deriv(u: f64) -> f64 {
    if !(0.0..=1.0).contains(&u) {
        0.0
    } else {
        6.0 * u * (1.0 - u)
    }
}

/// Temperature program: target cold-leg temperature for a demanded power.
pub fn temperature_program(p_turb: f64, c: &PlantConstants) -> f64 {
    c.t_base + c.t_span * p_turb
}

/// Per-mesh rod-bank reactivity, anchored so that a fully withdrawn bank
/// (x_bank = 0) contributes exactly zero at every mesh. Mesh 0 is the core
/// bottom; the top mesh is affected first as the bank inserts.
pub fn rod_reactivity(x_bank: f64, c: &PlantConstants) -> Result<[f64; N_Z], CoreError> {
    if !x_bank.is_finite() || !(0.0..=1.0).contains(&x_bank) {
        return Err(CoreError::Domain(format!("x_bank = {x_bank} outside [0, 1]")));
    }
    Ok(rod_reactivity_unchecked(x_bank, c))
}

pub(crate) fn rod_reactivity_unchecked(x_bank: f64, c: &PlantConstants) -> [f64; N_Z] {
    let mut rho = [0.0; N_Z];
    for (i, r) in rho.iter_mut().enumerate() {
        let center = 1.0 - (i as f64 + 0.5) / N_Z as f64;
        let s = logistic((x_bank - center) / c.w_rod_width);
        let s0 = logistic(-center / c.w_rod_width);
        *r = -c.w_rod_total * (s - s0);
    }
    rho
}

fn rod_reactivity_deriv(x_bank: f64, c: &PlantConstants) -> [f64; N_Z] {
    let mut d = [0.0; N_Z];
    for (i, r) in d.iter_mut().enumerate() {
        let center = 1.0 - (i as f64 + 0.5) / N_Z as f64;
        let s = logistic((x_bank - center) / c.w_rod_width);
        *r = -c.w_rod_total * s * (1.0 - s) / c.w_rod_width;
    }
    d
}

/// Per-mesh total reactivity given flux, xenon, temperature and rods.
pub(crate) fn reactivity(
    n: &[f64],
    xenon: &[f64],
    t_cl: f64,
    rod: &[f64; N_Z],
    c: &PlantConstants,
) -> [f64; N_Z] {
    let mut rho = [0.0; N_Z];
    for i in 0..N_Z {
        rho[i] = rod[i]
            + c.alpha_pow * (n[i] - 1.0)
            + c.alpha_mod * (t_cl - c.t_ref)
            - c.c_x * (xenon[i] - 1.0);
    }
    rho
}

/// Smoothed rod-controller rate: deadband, speed saturation and travel
/// limits, all C1 so the implicit solver's Newton iteration stays clean.
fn bank_rate(t_cl: f64, x_bank: f64, p_turb: f64, c: &PlantConstants) -> f64 {
    let e = t_cl - temperature_program(p_turb, c);
    let dz = e - c.delta_db * (e / c.delta_db).tanh();
    let raw = c.v_max * (c.g_rod * dz / c.v_max).tanh();
    if raw > 0.0 {
        raw * smoothstep((1.0 - x_bank) / ROD_LIMIT_MARGIN)
    } else {
        raw * smoothstep(x_bank / ROD_LIMIT_MARGIN)
    }
}

/// Core right-hand side dx/dt on the flattened layout, without the domain
/// validation of [`rhs`]. Used by the integrator, which treats evaluation
/// failures as step rejections.
pub(crate) fn rhs_flat(y: &[f64], p_turb: f64, c: &PlantConstants, out: &mut [f64]) {
    let (n, rest) = y.split_at(N_Z);
    let (iodine, rest) = rest.split_at(N_Z);
    let (xenon, tail) = rest.split_at(N_Z);
    let t_cl = tail[0];
    let x_bank = tail[1];

    let rod = rod_reactivity_unchecked(x_bank, c);
    let rho = reactivity(n, xenon, t_cl, &rod, c);

    for i in 0..N_Z {
        let lap = match i {
            0 => n[1] - n[0],
            i if i == N_Z - 1 => n[N_Z - 2] - n[N_Z - 1],
            _ => n[i - 1] - 2.0 * n[i] + n[i + 1],
        };
        out[i] = rho[i] / c.lambda_prompt * n[i] + c.kappa * lap;
        out[N_Z + i] = c.lambda_i * (n[i] - iodine[i]);
        out[2 * N_Z + i] = (c.lambda_x + c.sigma_star)
            * (c.beta_i * iodine[i] + (1.0 - c.beta_i) * n[i])
            - c.lambda_x * xenon[i]
            - c.sigma_star * n[i] * xenon[i];
    }

    let mean_n = n.iter().sum::<f64>() / N_Z as f64;
    let t_prog = temperature_program(p_turb, c);
    out[3 * N_Z] = (t_prog + c.g_mismatch * (mean_n - p_turb) - t_cl) / c.tau_t;
    out[3 * N_Z + 1] = bank_rate(t_cl, x_bank, p_turb, c);
}

/// Derivatives of the non-stiff block only (iodine, xenon, temperature,
/// rod bank), for the explicit sub-stepper's inner loop: no validation,
/// no allocation, and the stiff flux derivative is skipped along with the
/// reactivity evaluation it needs.
#[derive(Debug, Clone, Copy)]
pub(crate) struct NonStiffRates {
    pub iodine: [f64; N_Z],
    pub xenon: [f64; N_Z],
    pub t_cl: f64,
    pub x_bank: f64,
}

pub(crate) fn rhs_nonstiff(x: &State, p_turb: f64, c: &PlantConstants) -> NonStiffRates {
    let mut out = NonStiffRates {
        iodine: [0.0; N_Z],
        xenon: [0.0; N_Z],
        t_cl: 0.0,
        x_bank: 0.0,
    };
    for i in 0..N_Z {
        out.iodine[i] = c.lambda_i * (x.n[i] - x.iodine[i]);
        out.xenon[i] = (c.lambda_x + c.sigma_star)
            * (c.beta_i * x.iodine[i] + (1.0 - c.beta_i) * x.n[i])
            - c.lambda_x * x.xenon[i]
            - c.sigma_star * x.n[i] * x.xenon[i];
    }
    let mean_n = x.n.iter().sum::<f64>() / N_Z as f64;
    let t_prog = temperature_program(p_turb, c);
    out.t_cl = (t_prog + c.g_mismatch * (mean_n - p_turb) - x.t_cl) / c.tau_t;
    out.x_bank = bank_rate(x.t_cl, x.x_bank, p_turb, c);
    out
}

/// Time derivative of the state for a demanded turbine power.
pub fn rhs(state: &State, p_turb: f64, c: &PlantConstants) -> Result<State, CoreError> {
    state.validate()?;
    if !p_turb.is_finite() || !(0.0..=1.2).contains(&p_turb) {
        return Err(CoreError::Domain(format!("p_turb = {p_turb} outside [0, 1.2]")));
    }
    let y = state.to_vec();
    let mut out = [0.0; N_STATE];
    rhs_flat(&y, p_turb, c, &mut out);
    State::from_derivative(&out)
}

impl State {
    /// Build a derivative-valued State (no positivity/range checks).
    fn from_derivative(v: &[f64; N_STATE]) -> Result<Self, CoreError> {
        let mut s = State::zeros();
        s.n.copy_from_slice(&v[0..N_Z]);
        s.iodine.copy_from_slice(&v[N_Z..2 * N_Z]);
        s.xenon.copy_from_slice(&v[2 * N_Z..3 * N_Z]);
        s.t_cl = v[3 * N_Z];
        s.x_bank = v[3 * N_Z + 1];
        Ok(s)
    }
}

/// Analytic Jacobian of the right-hand side on the flattened layout.
pub(crate) fn jacobian_flat(y: &[f64], p_turb: f64, c: &PlantConstants, j: &mut DMatrix<f64>) {
    debug_assert_eq!(j.nrows(), N_STATE);
    j.fill(0.0);

    let (n, rest) = y.split_at(N_Z);
    let (_iodine, rest) = rest.split_at(N_Z);
    let (xenon, tail) = rest.split_at(N_Z);
    let t_cl = tail[0];
    let x_bank = tail[1];

    let rod = rod_reactivity_unchecked(x_bank, c);
    let rod_d = rod_reactivity_deriv(x_bank, c);
    let rho = reactivity(n, xenon, t_cl, &rod, c);
    let il = c.lambda_prompt.recip();

    for i in 0..N_Z {
        // flux rows
        let self_coupling = if i == 0 || i == N_Z - 1 { -1.0 } else { -2.0 };
        j[(i, i)] = rho[i] * il + c.alpha_pow * n[i] * il + c.kappa * self_coupling;
        if i > 0 {
            j[(i, i - 1)] = c.kappa;
        }
        if i < N_Z - 1 {
            j[(i, i + 1)] = c.kappa;
        }
        j[(i, 2 * N_Z + i)] = -c.c_x * n[i] * il;
        j[(i, 3 * N_Z)] = c.alpha_mod * n[i] * il;
        j[(i, 3 * N_Z + 1)] = rod_d[i] * n[i] * il;

        // iodine rows
        j[(N_Z + i, i)] = c.lambda_i;
        j[(N_Z + i, N_Z + i)] = -c.lambda_i;

        // xenon rows
        j[(2 * N_Z + i, i)] =
            (c.lambda_x + c.sigma_star) * (1.0 - c.beta_i) - c.sigma_star * xenon[i];
        j[(2 * N_Z + i, N_Z + i)] = (c.lambda_x + c.sigma_star) * c.beta_i;
        j[(2 * N_Z + i, 2 * N_Z + i)] = -c.lambda_x - c.sigma_star * n[i];

        // temperature row (mean flux term)
        j[(3 * N_Z, i)] = c.g_mismatch / (N_Z as f64 * c.tau_t);
    }
    j[(3 * N_Z, 3 * N_Z)] = -1.0 / c.tau_t;

    // rod-bank row
    let e = t_cl - temperature_program(p_turb, c);
    let dz = e - c.delta_db * (e / c.delta_db).tanh();
    let u = c.g_rod * dz / c.v_max;
    let th_u = u.tanh();
    let raw = c.v_max * th_u;
    let dz_de = (e / c.delta_db).tanh().powi(2);
    let draw_de = (1.0 - th_u * th_u) * c.g_rod * dz_de;
    let (sat, dsat_dx) = if raw > 0.0 {
        let s = (1.0 - x_bank) / ROD_LIMIT_MARGIN;
        (smoothstep(s), -smoothstep_deriv(s) / ROD_LIMIT_MARGIN)
    } else {
        let s = x_bank / ROD_LIMIT_MARGIN;
        (smoothstep(s), smoothstep_deriv(s) / ROD_LIMIT_MARGIN)
    };
    j[(3 * N_Z + 1, 3 * N_Z)] = sat * draw_de;
    j[(3 * N_Z + 1, 3 * N_Z + 1)] = raw * dsat_dx;
}

/// Analytic Jacobian d(rhs)/d(state), N x N.
pub fn jacobian(state: &State, p_turb: f64, c: &PlantConstants) -> Result<DMatrix<f64>, CoreError> {
    state.validate()?;
    if !p_turb.is_finite() || !(0.0..=1.2).contains(&p_turb) {
        return Err(CoreError::Domain(format!("p_turb = {p_turb} outside [0, 1.2]")));
    }
    let y = state.to_vec();
    let mut j = DMatrix::zeros(N_STATE, N_STATE);
    jacobian_flat(&y, p_turb, c, &mut j);
    Ok(j)
}
