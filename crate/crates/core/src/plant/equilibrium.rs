use super::dynamics::{reactivity, rod_reactivity_unchecked, temperature_program};
use super::{PlantConstants, State, N_Z};
use crate::error::CoreError;
use nalgebra::{DMatrix, DVector};

/// Closed-form xenon equilibrium for a frozen per-mesh flux u.
pub(crate) fn xenon_equilibrium(u: f64, c: &PlantConstants) -> f64 {
    u * (c.lambda_x + c.sigma_star) / (c.lambda_x + c.sigma_star * u)
}

fn xenon_equilibrium_deriv(u: f64, c: &PlantConstants) -> f64 {
    (c.lambda_x + c.sigma_star) * c.lambda_x / (c.lambda_x + c.sigma_star * u).powi(2)
}

fn laplacian(n: &[f64; N_Z], i: usize) -> f64 {
    match i {
        0 => n[1] - n[0],
        i if i == N_Z - 1 => n[N_Z - 2] - n[N_Z - 1],
        _ => n[i - 1] - 2.0 * n[i] + n[i + 1],
    }
}

fn laplacian_diag(i: usize) -> f64 {
    if i == 0 || i == N_Z - 1 {
        -1.0
    } else {
        -2.0
    }
}

/// Scale a Newton step so no flux component goes negative. The flux
/// equation rho(n) n = 0 has a spurious root at n = 0; keeping iterates
/// positive steers Newton to the critical root when one exists.
fn damp_positive(n: &[f64; N_Z], delta: &DVector<f64>) -> f64 {
    let mut alpha = 1.0f64;
    for i in 0..N_Z {
        if delta[i] < 0.0 {
            let limit = -n[i] / delta[i];
            if limit < alpha {
                alpha = 0.9 * limit;
            }
        }
    }
    alpha
}

/// Per-mesh critical flux ignoring coupling, with xenon held fixed.
/// rho_i(n) is affine in n, so the root is closed-form; a mesh whose
/// reactivity cannot reach zero at positive flux collapses to ~0.
fn scalar_flux_guess(xenon: &[f64; N_Z], t_cl: f64, rod: &[f64; N_Z], c: &PlantConstants) -> [f64; N_Z] {
    std::array::from_fn(|i| {
        let intercept =
            rod[i] - c.alpha_pow + c.alpha_mod * (t_cl - c.t_ref) - c.c_x * (xenon[i] - 1.0);
        let root = -intercept / c.alpha_pow;
        if root > 0.0 {
            root
        } else {
            1e-8
        }
    })
}

/// Per-mesh critical flux ignoring coupling with xenon at its closed-form
/// equilibrium in the local flux; rho is monotone decreasing, bisected.
fn scalar_equilibrium_guess(t_cl: f64, rod: &[f64; N_Z], c: &PlantConstants) -> [f64; N_Z] {
    std::array::from_fn(|i| {
        let rho = |n: f64| {
            rod[i]
                + c.alpha_pow * (n - 1.0)
                + c.alpha_mod * (t_cl - c.t_ref)
                - c.c_x * (xenon_equilibrium(n, c) - 1.0)
        };
        if rho(0.0) <= 0.0 {
            return 1e-8;
        }
        let (mut lo, mut hi) = (0.0f64, 4.0f64);
        if rho(hi) > 0.0 {
            return hi;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if rho(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    })
}

/// A few damped Newton iterations on the quasi-static flux constraint from
/// a warm starting guess, using the tridiagonal structure of the Jacobian
/// (Thomas solve). Cheap enough for per-sub-step use inside the hybrid
/// integrator; does not check convergence, so callers must supply a guess
/// already near the solution (e.g. the previous sub-step's flux).
pub(crate) fn qs_polish(
    n: &mut [f64; N_Z],
    xenon: &[f64; N_Z],
    t_cl: f64,
    rod: &[f64; N_Z],
    c: &PlantConstants,
    iters: usize,
) {
    let lk = c.lambda_prompt * c.kappa;
    for _ in 0..iters {
        let rho = reactivity(n, xenon, t_cl, rod, c);
        let mut diag = [0.0; N_Z];
        let mut rhs = [0.0; N_Z];
        for i in 0..N_Z {
            rhs[i] = -(rho[i] * n[i] + lk * laplacian(n, i));
            diag[i] = rho[i] + c.alpha_pow * n[i] + lk * laplacian_diag(i);
        }
        // Thomas forward sweep, off-diagonals all equal to lk
        let mut cp = [0.0; N_Z];
        let mut dp = [0.0; N_Z];
        let mut denom = diag[0];
        if denom.abs() < 1e-300 {
            return;
        }
        cp[0] = lk / denom;
        dp[0] = rhs[0] / denom;
        for i in 1..N_Z {
            denom = diag[i] - lk * cp[i - 1];
            if denom.abs() < 1e-300 {
                return;
            }
            cp[i] = lk / denom;
            dp[i] = (rhs[i] - lk * dp[i - 1]) / denom;
        }
        let mut delta = [0.0; N_Z];
        delta[N_Z - 1] = dp[N_Z - 1];
        for i in (0..N_Z - 1).rev() {
            delta[i] = dp[i] - cp[i] * delta[i + 1];
        }
        // per-component clamp: collapsed meshes may sit exactly at the
        // spurious root n = 0, where a global positivity damping would
        // zero the whole update; cap the step to stay in the warm basin
        for i in 0..N_Z {
            n[i] = (n[i] + delta[i].clamp(-0.5, 0.5)).max(0.0);
        }
    }
}

/// Newton solve of the quasi-static flux constraint F_n(n, .) = 0 with
/// iodine/xenon/temperature/rods held fixed.
///
/// The flux equation is handled in Lambda-scaled form (rho_i n_i +
/// Lambda kappa lap(n) = 0) so residual terms are O(1e-2) and the
/// unscaled dn/dt residual lands well below 1e-10.
pub fn solve_quasistatic_flux(
    iodine: &[f64; N_Z],
    xenon: &[f64; N_Z],
    t_cl: f64,
    x_bank: f64,
    c: &PlantConstants,
) -> Result<[f64; N_Z], CoreError> {
    for v in xenon.iter().chain(iodine.iter()) {
        if !v.is_finite() {
            return Err(CoreError::Domain("non-finite quasi-static input".into()));
        }
    }
    if !t_cl.is_finite() || !x_bank.is_finite() {
        return Err(CoreError::Domain("non-finite quasi-static input".into()));
    }
    if xenon.iter().any(|&x| x < 0.0) {
        return Err(CoreError::Domain("negative xenon in quasi-static solve".into()));
    }
    let rod = rod_reactivity_unchecked(x_bank, c);
    let lk = c.lambda_prompt * c.kappa;
    let mut n = scalar_flux_guess(xenon, t_cl, &rod, c);
    let mut jac = DMatrix::zeros(N_Z, N_Z);
    let mut res = DVector::zeros(N_Z);
    let tol = 1e-10 * c.lambda_prompt; // |dn/dt| < 1e-10 after unscaling

    for _ in 0..50 {
        let rho = reactivity(&n, xenon, t_cl, &rod, c);
        let mut max_res = 0.0f64;
        for i in 0..N_Z {
            let g = rho[i] * n[i] + lk * laplacian(&n, i);
            res[i] = -g;
            max_res = max_res.max(g.abs());
        }
        if max_res < tol {
            if n.iter().any(|&v| v < 0.0) {
                return Err(CoreError::Domain(
                    "quasi-static flux solve converged to a negative solution".into(),
                ));
            }
            return Ok(n);
        }
        jac.fill(0.0);
        for i in 0..N_Z {
            jac[(i, i)] = rho[i] + c.alpha_pow * n[i] + lk * laplacian_diag(i);
            if i > 0 {
                jac[(i, i - 1)] = lk;
            }
            if i < N_Z - 1 {
                jac[(i, i + 1)] = lk;
            }
        }
        let lu = jac.clone().lu();
        let delta = lu
            .solve(&res)
            .ok_or_else(|| CoreError::Convergence("singular quasi-static Jacobian".into()))?;
        let alpha = damp_positive(&n, &delta);
        for i in 0..N_Z {
            n[i] += alpha * delta[i];
        }
    }
    Err(CoreError::Convergence(
        "quasi-static flux Newton did not converge in 50 iterations".into(),
    ))
}

/// Self-consistent flux for a given rod position, with iodine at its
/// flux-equal equilibrium and xenon at its closed-form equilibrium.
fn equilibrium_flux_for_bank(
    t_cl: f64,
    x_bank: f64,
    c: &PlantConstants,
) -> Result<[f64; N_Z], CoreError> {
    let rod = rod_reactivity_unchecked(x_bank, c);
    let lk = c.lambda_prompt * c.kappa;
    let mut n = scalar_equilibrium_guess(t_cl, &rod, c);
    let mut jac = DMatrix::zeros(N_Z, N_Z);
    let mut res = DVector::zeros(N_Z);

    for _ in 0..60 {
        let xe: [f64; N_Z] = std::array::from_fn(|i| xenon_equilibrium(n[i], c));
        let rho = reactivity(&n, &xe, t_cl, &rod, c);
        let mut max_res = 0.0f64;
        for i in 0..N_Z {
            let g = rho[i] * n[i] + lk * laplacian(&n, i);
            res[i] = -g;
            max_res = max_res.max(g.abs());
        }
        if max_res < 1e-11 * c.lambda_prompt {
            return Ok(n);
        }
        jac.fill(0.0);
        for i in 0..N_Z {
            let drho = c.alpha_pow - c.c_x * xenon_equilibrium_deriv(n[i], c);
            jac[(i, i)] = rho[i] + drho * n[i] + lk * laplacian_diag(i);
            if i > 0 {
                jac[(i, i - 1)] = lk;
            }
            if i < N_Z - 1 {
                jac[(i, i + 1)] = lk;
            }
        }
        let lu = jac.clone().lu();
        let delta = lu
            .solve(&res)
            .ok_or_else(|| CoreError::Convergence("singular equilibrium Jacobian".into()))?;
        let alpha = damp_positive(&n, &delta);
        for i in 0..N_Z {
            n[i] += alpha * delta[i];
        }
    }
    Err(CoreError::Convergence(
        "equilibrium flux Newton did not converge".into(),
    ))
}

/// Steady state for a constant demanded power p0.
///
/// The cold leg sits exactly on the temperature program, iodine equals the
/// flux, xenon takes its closed form, and the rod position is found by a
/// bracketed bisection on mean-flux mismatch followed by a joint Newton
/// polish on (flux, rod position).
pub fn equilibrium_state(p0: f64, c: &PlantConstants) -> Result<State, CoreError> {
    if !(0.2..=1.0).contains(&p0) {
        return Err(CoreError::Domain(format!("p0 = {p0} outside [0.2, 1.0]")));
    }
    let t_cl = temperature_program(p0, c);

    let mismatch = |x: f64| -> Result<(f64, [f64; N_Z]), CoreError> {
        let n = equilibrium_flux_for_bank(t_cl, x, c)?;
        let mean = n.iter().sum::<f64>() / N_Z as f64;
        Ok((mean - p0, n))
    };

    let (f_lo, n_lo) = mismatch(0.0)?;
    let mut n = n_lo;
    let mut x_bank = 0.0;
    if f_lo < -1e-12 {
        return Err(CoreError::InfeasibleEquilibrium(format!(
            "withdrawn bank already gives mean flux deficit {f_lo:.3e} at p0 = {p0}"
        )));
    }
    if f_lo > 1e-12 {
        let (f_hi, _) = mismatch(1.0)?;
        if f_hi > 0.0 {
            return Err(CoreError::InfeasibleEquilibrium(format!(
                "fully inserted bank still leaves mean flux excess {f_hi:.3e} at p0 = {p0}"
            )));
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let (fm, nm) = mismatch(mid)?;
            if fm > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            n = nm;
            x_bank = mid;
        }
    }

    // Joint Newton polish on (n, x_bank): flux balance per mesh plus the
    // mean-flux constraint, driving the unscaled residual to roundoff.
    if x_bank > 0.0 {
        let lk = c.lambda_prompt * c.kappa;
        for _ in 0..10 {
            let rod = rod_reactivity_unchecked(x_bank, c);
            let xe: [f64; N_Z] = std::array::from_fn(|i| xenon_equilibrium(n[i], c));
            let rho = reactivity(&n, &xe, t_cl, &rod, c);
            let mut jac = DMatrix::zeros(N_Z + 1, N_Z + 1);
            let mut res = DVector::zeros(N_Z + 1);
            let rod_d: [f64; N_Z] = {
                let h = 1e-7;
                let up = rod_reactivity_unchecked((x_bank + h).min(1.0), c);
                let dn = rod_reactivity_unchecked((x_bank - h).max(0.0), c);
                std::array::from_fn(|i| (up[i] - dn[i]) / (2.0 * h))
            };
            for i in 0..N_Z {
                res[i] = -(rho[i] * n[i] + lk * laplacian(&n, i));
                let drho = c.alpha_pow - c.c_x * xenon_equilibrium_deriv(n[i], c);
                jac[(i, i)] = rho[i] + drho * n[i] + lk * laplacian_diag(i);
                if i > 0 {
                    jac[(i, i - 1)] = lk;
                }
                if i < N_Z - 1 {
                    jac[(i, i + 1)] = lk;
                }
                jac[(i, N_Z)] = rod_d[i] * n[i];
                jac[(N_Z, i)] = 1.0 / N_Z as f64;
            }
            res[N_Z] = p0 - n.iter().sum::<f64>() / N_Z as f64;
            let lu = jac.lu();
            let Some(delta) = lu.solve(&res) else { break };
            let flux_delta = DVector::from_iterator(N_Z, (0..N_Z).map(|i| delta[i]));
            let alpha = damp_positive(&n, &flux_delta);
            for i in 0..N_Z {
                n[i] += alpha * delta[i];
            }
            x_bank = (x_bank + alpha * delta[N_Z]).clamp(0.0, 1.0);
            if delta.amax() < 1e-15 {
                break;
            }
        }
    }

    let state = State {
        n,
        iodine: n,
        xenon: std::array::from_fn(|i| xenon_equilibrium(n[i], c)),
        t_cl,
        x_bank,
    };
    state.validate()?;
    Ok(state)
}
