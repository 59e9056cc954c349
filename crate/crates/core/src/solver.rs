//! Adaptive implicit reference integrator and the explicit non-stiff
//! sub-stepper used inside the hybrid surrogate rollout.
//!
//! The reference scheme is the trapezoidal rule advanced by step doubling:
//! each step is taken once at h and twice at h/2, the Richardson difference
//! drives a weighted-RMS error controller, and the two-half-step value is
//! kept. Newton failures and rejection storms fall back to backward Euler,
//! which damps stiff transients the trapezoidal rule cannot.

use crate::dataset::{Provenance, Trajectory};
use crate::error::CoreError;
use crate::plant::{self, PlantConstants, PowerProfile, State, N_STATE, N_Z};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Tolerances and controls for the adaptive implicit solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step, s.
    pub dt_init: f64,
    /// Max step, s.
    pub dt_max: f64,
    /// Newton iterations per implicit solve.
    pub max_newton: usize,
    /// Step-controller safety factor.
    pub safety: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            dt_init: 1e-6,
            dt_max: 60.0,
            max_newton: 8,
            safety: 0.9,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(0.0 < self.rtol && self.rtol < 1.0) {
            return Err(CoreError::Config("rtol must lie in (0, 1)".into()));
        }
        if self.atol <= 0.0 {
            return Err(CoreError::Config("atol must be > 0".into()));
        }
        if self.dt_init > self.dt_max {
            return Err(CoreError::Config("dt_init must be <= dt_max".into()));
        }
        if !(0.0 < self.safety && self.safety < 1.0) {
            return Err(CoreError::Config("safety must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Work counters for one integration run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub steps_accepted: u64,
    pub steps_rejected: u64,
    pub newton_iters: u64,
    pub jacobian_evals: u64,
    pub wall_clock_s: f64,
}

impl StepStats {
    pub fn csv_header() -> &'static str {
        "steps_accepted,steps_rejected,newton_iters,jacobian_evals,wall_clock_s"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6}",
            self.steps_accepted,
            self.steps_rejected,
            self.newton_iters,
            self.jacobian_evals,
            self.wall_clock_s
        )
    }
}

/// Step-size update: dt * clamp(safety * err^(-1/(order+1)), 0.2, 5.0),
/// capped at dt_max. A step is accepted iff err_norm <= 1.
pub fn step_controller(err_norm: f64, dt: f64, order: usize, cfg: &SolverConfig) -> f64 {
    let factor = if err_norm <= 0.0 {
        5.0
    } else {
        (cfg.safety * err_norm.powf(-1.0 / (order as f64 + 1.0))).clamp(0.2, 5.0)
    };
    (dt * factor).min(cfg.dt_max)
}

/// A first-order ODE system dy/dt = f(t, y) with analytic Jacobian.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], out: &mut [f64]) -> Result<(), CoreError>;
    fn jacobian(&self, t: f64, y: &[f64], out: &mut DMatrix<f64>) -> Result<(), CoreError>;
    /// Times where the right-hand side is non-smooth; internal steps are
    /// aligned with these.
    fn kink_times(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// The plant ODE driven by a power profile.
pub struct PlantSystem<'a> {
    pub constants: &'a PlantConstants,
    pub profile: &'a PowerProfile,
}

impl OdeSystem for PlantSystem<'_> {
    fn dim(&self) -> usize {
        N_STATE
    }

    fn rhs(&self, t: f64, y: &[f64], out: &mut [f64]) -> Result<(), CoreError> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Domain("non-finite state in rhs".into()));
        }
        plant::rhs_flat(y, self.profile.eval(t), self.constants, out);
        Ok(())
    }

    fn jacobian(&self, t: f64, y: &[f64], out: &mut DMatrix<f64>) -> Result<(), CoreError> {
        plant::jacobian_flat(y, self.profile.eval(t), self.constants, out);
        Ok(())
    }

    fn kink_times(&self) -> Vec<f64> {
        self.profile.kink_times()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scheme {
    Trapezoidal,
    Bdf1,
}

impl Scheme {
    fn order(self) -> usize {
        match self {
            Scheme::Trapezoidal => 2,
            Scheme::Bdf1 => 1,
        }
    }
}

enum SolveOutcome {
    Converged(DVector<f64>),
    Failed,
}

struct Stepper<'a, S: OdeSystem> {
    sys: &'a S,
    cfg: &'a SolverConfig,
    dim: usize,
    jac: DMatrix<f64>,
    jac_fresh: bool,
    stats: StepStats,
}

impl<'a, S: OdeSystem> Stepper<'a, S> {
    fn new(sys: &'a S, cfg: &'a SolverConfig) -> Self {
        let dim = sys.dim();
        Self {
            sys,
            cfg,
            dim,
            jac: DMatrix::zeros(dim, dim),
            jac_fresh: false,
            stats: StepStats::default(),
        }
    }

    fn wrms(&self, e: &[f64], y_ref: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim {
            let w = self.cfg.atol + self.cfg.rtol * y_ref[i].abs();
            let r = e[i] / w;
            acc += r * r;
        }
        (acc / self.dim as f64).sqrt()
    }

    fn refresh_jacobian(&mut self, t: f64, y: &[f64]) -> Result<(), CoreError> {
        self.sys.jacobian(t, y, &mut self.jac)?;
        self.stats.jacobian_evals += 1;
        self.jac_fresh = true;
        Ok(())
    }

    /// Solve y = y0 + theta_h * f(t1, y) + const_term by damped Newton on
    /// the cached Jacobian. `degraded` is set if convergence was slow.
    fn solve_implicit(
        &mut self,
        t1: f64,
        y0: &[f64],
        const_term: &[f64],
        theta_h: f64,
        predictor: &[f64],
        degraded: &mut bool,
    ) -> Result<SolveOutcome, CoreError> {
        let m = {
            let mut m = self.jac.clone() * (-theta_h);
            for i in 0..self.dim {
                m[(i, i)] += 1.0;
            }
            m.lu()
        };
        let mut y = DVector::from_column_slice(predictor);
        let mut f = vec![0.0; self.dim];
        let mut prev_dnorm = f64::INFINITY;
        for k in 0..self.cfg.max_newton {
            if self.sys.rhs(t1, y.as_slice(), &mut f).is_err() {
                return Ok(SolveOutcome::Failed);
            }
            let mut g = DVector::zeros(self.dim);
            for i in 0..self.dim {
                g[i] = -(y[i] - y0[i] - theta_h * f[i] - const_term[i]);
            }
            let Some(delta) = m.solve(&g) else {
                return Ok(SolveOutcome::Failed);
            };
            y += &delta;
            self.stats.newton_iters += 1;
            let dnorm = self.wrms(delta.as_slice(), y.as_slice());
            if dnorm <= 0.05 {
                return Ok(SolveOutcome::Converged(y));
            }
            if k > 0 {
                let rate = dnorm / prev_dnorm;
                if rate > 0.9 && dnorm > 1.0 {
                    return Ok(SolveOutcome::Failed);
                }
                if rate > 0.5 {
                    *degraded = true;
                }
            }
            prev_dnorm = dnorm;
        }
        Ok(SolveOutcome::Failed)
    }

    /// One implicit step of the given scheme from (t, y0) to t + h.
    fn scheme_step(
        &mut self,
        scheme: Scheme,
        t: f64,
        y0: &[f64],
        f0: &[f64],
        h: f64,
        degraded: &mut bool,
    ) -> Result<SolveOutcome, CoreError> {
        let (theta_h, const_term): (f64, Vec<f64>) = match scheme {
            Scheme::Trapezoidal => (0.5 * h, f0.iter().map(|&v| 0.5 * h * v).collect()),
            Scheme::Bdf1 => (h, vec![0.0; self.dim]),
        };
        let predictor: Vec<f64> = y0.iter().zip(f0).map(|(&y, &f)| y + h * f).collect();
        self.solve_implicit(t + h, y0, &const_term, theta_h, &predictor, degraded)
    }
}

/// (sample times, sampled states, work counters) of one integration run.
pub type SampledRun = (Vec<f64>, Vec<Vec<f64>>, StepStats);

/// Generic adaptive integration with sampling at fixed intervals.
///
/// Returns (sample times, sampled states, stats). The caller guarantees
/// t_end is a multiple of sample_dt.
pub fn integrate_adaptive<S: OdeSystem>(
    sys: &S,
    y0: &[f64],
    t_end: f64,
    sample_dt: f64,
    cfg: &SolverConfig,
) -> Result<SampledRun, CoreError> {
    cfg.validate()?;
    if sample_dt <= 0.0 || t_end <= 0.0 {
        return Err(CoreError::Domain("horizon and sample step must be > 0".into()));
    }
    let n_samples = (t_end / sample_dt).round() as usize;
    if ((n_samples as f64) * sample_dt - t_end).abs() > 1e-9 * t_end {
        return Err(CoreError::Domain(format!(
            "horizon {t_end} is not a multiple of sample step {sample_dt}"
        )));
    }
    let dim = sys.dim();
    let mut stepper = Stepper::new(sys, cfg);

    let mut kinks: Vec<f64> = sys
        .kink_times()
        .into_iter()
        .filter(|&k| k > 1e-12 && k < t_end - 1e-12)
        .collect();
    kinks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    kinks.dedup();
    let mut kink_idx = 0usize;

    let mut t = 0.0;
    let mut y = y0.to_vec();
    let mut f0 = vec![0.0; dim];
    sys.rhs(t, &y, &mut f0)?;
    stepper.refresh_jacobian(t, &y)?;

    let mut times = Vec::with_capacity(n_samples + 1);
    let mut states = Vec::with_capacity(n_samples + 1);
    times.push(0.0);
    states.push(y.clone());
    let mut next_sample = 1usize;

    let mut h = cfg.dt_init.min(cfg.dt_max);
    let mut scheme = Scheme::Trapezoidal;
    let mut bdf1_steps_left = 0usize;
    let mut consecutive_rejects = 0usize;
    let mut f1 = vec![0.0; dim];

    while t < t_end - 1e-9 {
        // advance the kink cursor and clip the step to the next kink
        while kink_idx < kinks.len() && kinks[kink_idx] <= t + 1e-9 {
            kink_idx += 1;
        }
        let mut h_try = h.min(cfg.dt_max).min(t_end - t);
        if kink_idx < kinks.len() {
            let gap = kinks[kink_idx] - t;
            if h_try > gap {
                h_try = gap;
            }
        }
        if h_try < 1e-12 {
            return Err(CoreError::IntegrationFailure {
                t,
                reason: format!("step size underflow ({h_try:.3e} s) after {} samples", states.len()),
            });
        }

        let mut degraded = false;
        // full step, then two half steps
        let full = stepper.scheme_step(scheme, t, &y, &f0, h_try, &mut degraded)?;
        let result = match full {
            SolveOutcome::Failed => None,
            SolveOutcome::Converged(y_full) => {
                match stepper.scheme_step(scheme, t, &y, &f0, 0.5 * h_try, &mut degraded)? {
                    SolveOutcome::Failed => None,
                    SolveOutcome::Converged(y_mid) => {
                        let mut f_mid = vec![0.0; dim];
                        if sys.rhs(t + 0.5 * h_try, y_mid.as_slice(), &mut f_mid).is_err() {
                            None
                        } else {
                            match stepper.scheme_step(
                                scheme,
                                t + 0.5 * h_try,
                                y_mid.as_slice(),
                                &f_mid,
                                0.5 * h_try,
                                &mut degraded,
                            )? {
                                SolveOutcome::Failed => None,
                                SolveOutcome::Converged(y_half2) => Some((y_full, y_half2)),
                            }
                        }
                    }
                }
            }
        };

        let Some((y_full, y_half2)) = result else {
            // Newton failure: refresh the Jacobian once, else shrink and
            // fall back to backward Euler.
            if !stepper.jac_fresh {
                stepper.refresh_jacobian(t, &y)?;
                continue;
            }
            stepper.stats.steps_rejected += 1;
            consecutive_rejects += 1;
            h = 0.5 * h_try;
            scheme = Scheme::Bdf1;
            bdf1_steps_left = 5;
            stepper.jac_fresh = false;
            continue;
        };

        let richardson = match scheme {
            Scheme::Trapezoidal => 3.0,
            Scheme::Bdf1 => 1.0,
        };
        let err: Vec<f64> = (0..dim).map(|i| (y_half2[i] - y_full[i]) / richardson).collect();
        let err_norm = stepper.wrms(&err, y_half2.as_slice());

        if err_norm <= 1.0 {
            let t1 = t + h_try;
            if sys.rhs(t1, y_half2.as_slice(), &mut f1).is_err() {
                stepper.stats.steps_rejected += 1;
                h = 0.5 * h_try;
                continue;
            }
            // cubic Hermite dense output at pending sample instants
            while next_sample <= n_samples {
                let ts = next_sample as f64 * sample_dt;
                if ts > t1 + 1e-9 {
                    break;
                }
                let theta = ((ts - t) / h_try).clamp(0.0, 1.0);
                let (t2, t3) = (theta * theta, theta * theta * theta);
                let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
                let h10 = t3 - 2.0 * t2 + theta;
                let h01 = -2.0 * t3 + 3.0 * t2;
                let h11 = t3 - t2;
                let ys: Vec<f64> = (0..dim)
                    .map(|i| {
                        h00 * y[i] + h10 * h_try * f0[i] + h01 * y_half2[i] + h11 * h_try * f1[i]
                    })
                    .collect();
                times.push(ts);
                states.push(ys);
                next_sample += 1;
            }
            t = t1;
            y = y_half2.as_slice().to_vec();
            std::mem::swap(&mut f0, &mut f1);
            stepper.stats.steps_accepted += 1;
            consecutive_rejects = 0;
            if degraded {
                stepper.jac_fresh = false;
                stepper.refresh_jacobian(t, &y)?;
            }
            h = step_controller(err_norm, h_try, scheme.order(), cfg);
            if scheme == Scheme::Bdf1 {
                bdf1_steps_left = bdf1_steps_left.saturating_sub(1);
                if bdf1_steps_left == 0 {
                    scheme = Scheme::Trapezoidal;
                }
            }
        } else {
            stepper.stats.steps_rejected += 1;
            consecutive_rejects += 1;
            h = step_controller(err_norm, h_try, scheme.order(), cfg).min(0.5 * h_try);
            if consecutive_rejects >= 5 && scheme == Scheme::Trapezoidal {
                // rejection storm: damp with backward Euler for a while
                scheme = Scheme::Bdf1;
                bdf1_steps_left = 10;
            }
            if !degraded {
                stepper.jac_fresh = false;
                stepper.refresh_jacobian(t, &y)?;
            }
        }
    }

    // exact landing on t_end can leave the final sample pending
    while next_sample <= n_samples {
        times.push(next_sample as f64 * sample_dt);
        states.push(y.clone());
        next_sample += 1;
    }
    Ok((times, states, stepper.stats))
}

/// Reference integration of the plant over a power profile, sampled on a
/// fixed grid. Wall clock covers the integration loop only.
pub fn integrate_reference(
    x0: &State,
    profile: &PowerProfile,
    horizon_s: f64,
    sample_dt_s: f64,
    cfg: &SolverConfig,
    c: &PlantConstants,
) -> Result<(Trajectory, StepStats), CoreError> {
    x0.validate()?;
    let sys = PlantSystem { constants: c, profile };
    let y0 = x0.to_vec();
    let start = Instant::now();
    let (times, flat_states, mut stats) = integrate_adaptive(&sys, &y0, horizon_s, sample_dt_s, cfg)?;
    stats.wall_clock_s = start.elapsed().as_secs_f64();
    let mut states = Vec::with_capacity(flat_states.len());
    for fs in &flat_states {
        let mut fs = fs.clone();
        // Concentrations are nonnegative physically; dense output can
        // undershoot collapsed meshes by O(tolerance). Project tiny
        // negatives back onto the physical manifold, fail on real ones.
        for v in fs.iter_mut().take(3 * N_Z) {
            if *v < 0.0 {
                if *v < -1e-6 {
                    return Err(CoreError::IntegrationFailure {
                        t: horizon_s,
                        reason: format!("sampled concentration {v:.3e} below -1e-6"),
                    });
                }
                *v = 0.0;
            }
        }
        // The rod bank saturates at its travel limits; dense output can
        // overshoot them by rounding error. Same projection rule.
        let xb = &mut fs[3 * N_Z + 1];
        if !(0.0..=1.0).contains(xb) {
            if *xb < -1e-6 || *xb > 1.0 + 1e-6 {
                return Err(CoreError::IntegrationFailure {
                    t: horizon_s,
                    reason: format!("sampled rod position {xb:.3e} outside [0, 1]"),
                });
            }
            *xb = xb.clamp(0.0, 1.0);
        }
        states.push(State::from_slice(&fs)?);
    }
    Ok((
        Trajectory {
            times,
            states,
            profile: profile.clone(),
            provenance: Provenance::Reference,
        },
        stats,
    ))
}

/// Heun sub-steps for the fast temperature/rod pair inside
/// [`step_nonstiff_explicit`]. tau_t = 30 s makes a single 60 s Euler step
/// linearly unstable (|1 - dt/tau_t| >= 1) once the flux responds
/// quasi-statically to temperature, so these two components are advanced
/// on a finer grid; iodine and xenon (time constants ~1e5 s) keep the
/// single Euler update.
const TEMP_ROD_SUBSTEPS: usize = 4;

/// One explicit Euler step of the non-stiff block (iodine, xenon, cold-leg
/// temperature, rod bank), with the flux block overwritten by `n_next`.
/// Iodine and xenon use the step's starting flux `x.n`; the fast
/// temperature/rod pair sees the flux sliding quasi-statically with them
/// (anchored at `x.n`) during the sub-steps.
pub fn step_nonstiff_explicit(
    x: &State,
    n_next: &[f64; N_Z],
    p_turb: f64,
    dt_s: f64,
    c: &PlantConstants,
) -> Result<State, CoreError> {
    step_nonstiff_profiled(x, n_next, |_| p_turb, 0.0, dt_s, c)
}

/// Same advance as [`step_nonstiff_explicit`] but with the turbine demand
/// sampled from a profile during the temperature/rod sub-steps. Holding
/// the demand constant over a 60 s step biases every ramp sample of the
/// fast pair by O(ramp rate x dt); the rod bank integrates that bias, and
/// the quasi-static flux amplifies rod-position errors by up to ~17 near
/// mesh-reactivation points.
pub fn step_nonstiff_profiled(
    x: &State,
    n_next: &[f64; N_Z],
    p_of_t: impl Fn(f64) -> f64,
    t0_s: f64,
    dt_s: f64,
    c: &PlantConstants,
) -> Result<State, CoreError> {
    if n_next.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Domain("non-finite n_next".into()));
    }
    if n_next.iter().any(|&v| v < 0.0) {
        return Err(CoreError::Domain("negative n_next".into()));
    }
    if dt_s <= 0.0 {
        return Err(CoreError::Domain("dt_s must be > 0".into()));
    }
    x.validate()?;
    let dx = plant::rhs_nonstiff(x, p_of_t(t0_s), c);
    let mut out = x.clone();
    for i in 0..N_Z {
        out.iodine[i] = x.iodine[i] + dt_s * dx.iodine[i];
        out.xenon[i] = x.xenon[i] + dt_s * dx.xenon[i];
    }
    let h = dt_s / TEMP_ROD_SUBSTEPS as f64;
    let mut tmp = x.clone();
    // Within the sub-steps the flux must track the fast variables
    // quasi-statically: with it frozen, the temperature relaxes toward a
    // frozen-flux target and overshoots the coupled equilibrium by the
    // loop-gain factor G*dn/dT. The closure is the per-mesh critical flux
    // from rho_i = 0 with xenon frozen (the spatial coupling is
    // O(Lambda kappa) ~ 1e-7 and negligible here; a subcritical mesh maps
    // to 0), applied as a delta anchored at the step's starting flux.
    // Coupled quasi-static flux at a sub-step point: seed with the larger
    // of the previous flux and the per-mesh critical value from rho_i = 0
    // (so liftoffs are not trapped at the spurious n = 0 root), then
    // polish with two warm Newton iterations on the full tridiagonal
    // system.
    let qs_at = |t_cl: f64, x_bank: f64, xenon: &[f64; N_Z], prev: &[f64; N_Z]| -> [f64; N_Z] {
        let rod = plant::rod_reactivity_unchecked(x_bank.clamp(0.0, 1.0), c);
        let mut n: [f64; N_Z] = std::array::from_fn(|i| {
            let bias = rod[i] + c.alpha_mod * (t_cl - c.t_ref) - c.c_x * (xenon[i] - 1.0);
            prev[i].max((1.0 - bias / c.alpha_pow).max(0.0))
        });
        plant::qs_polish(&mut n, xenon, t_cl, &rod, c, 2);
        n
    };
    let base = qs_at(x.t_cl, x.x_bank, &x.xenon, &x.n);
    let mut qs_prev = base;
    // Heun (explicit trapezoidal) sub-steps: the first-order Euler bias of
    // the fast pair accumulates through the rod integrator, so second
    // order buys roughly an order of magnitude in sub-step count.
    for k in 0..TEMP_ROD_SUBSTEPS {
        let q = qs_at(tmp.t_cl, tmp.x_bank, &tmp.xenon, &qs_prev);
        for i in 0..N_Z {
            tmp.n[i] = (x.n[i] + q[i] - base[i]).max(0.0);
        }
        qs_prev = q;
        // iodine/xenon drift matters here only through the critical flux
        // (the exported update for them is the single Euler step above)
        let d1 = plant::rhs_nonstiff(&tmp, p_of_t(t0_s + k as f64 * h), c);
        let mut pred = tmp.clone();
        for i in 0..N_Z {
            pred.iodine[i] += h * d1.iodine[i];
            pred.xenon[i] += h * d1.xenon[i];
        }
        pred.t_cl += h * d1.t_cl;
        pred.x_bank = (pred.x_bank + h * d1.x_bank).clamp(0.0, 1.0);
        let q2 = qs_at(pred.t_cl, pred.x_bank, &pred.xenon, &qs_prev);
        for i in 0..N_Z {
            pred.n[i] = (x.n[i] + q2[i] - base[i]).max(0.0);
        }
        let d2 = plant::rhs_nonstiff(&pred, p_of_t(t0_s + (k + 1) as f64 * h), c);
        for i in 0..N_Z {
            tmp.iodine[i] += 0.5 * h * (d1.iodine[i] + d2.iodine[i]);
            tmp.xenon[i] += 0.5 * h * (d1.xenon[i] + d2.xenon[i]);
        }
        tmp.t_cl += 0.5 * h * (d1.t_cl + d2.t_cl);
        tmp.x_bank = (tmp.x_bank + 0.5 * h * (d1.x_bank + d2.x_bank)).clamp(0.0, 1.0);
    }
    out.t_cl = tmp.t_cl;
    out.x_bank = tmp.x_bank;
    out.n = *n_next;
    Ok(out)
}
