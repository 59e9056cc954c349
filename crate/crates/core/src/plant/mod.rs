//! Normalized reactor-core plant model.
//!
//! State layout (flattened, length `N_STATE` = 20): six meshes of neutron
//! density, six of iodine, six of xenon, then cold-leg temperature and the
//! rod-bank insertion fraction. Flux, iodine and xenon are dimensionless
//! (1.0 = full-power equilibrium); temperature is in degrees Celsius.

mod dynamics;
mod equilibrium;
mod profile;

pub use dynamics::{jacobian, rhs, rod_reactivity, temperature_program};
pub(crate) use dynamics::{
    jacobian_flat, reactivity, rhs_flat, rhs_nonstiff, rod_reactivity_unchecked,
};
pub use equilibrium::{equilibrium_state, solve_quasistatic_flux};
pub(crate) use equilibrium::qs_polish;
pub use profile::PowerProfile;

use crate::error::CoreError;
use serde::{Deserialize, Serialize};

/// Number of vertical core meshes.
pub const N_Z: usize = 6;
/// Flattened state dimension: 3 * N_Z + 2.
pub const N_STATE: usize = 3 * N_Z + 2;

/// Core state in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    /// Normalized neutron density per mesh, mesh 0 = core bottom.
    pub n: [f64; N_Z],
    /// Normalized iodine concentration per mesh.
    pub iodine: [f64; N_Z],
    /// Normalized xenon concentration per mesh.
    pub xenon: [f64; N_Z],
    /// Cold-leg temperature, degrees C.
    pub t_cl: f64,
    /// Rod-bank insertion fraction in [0, 1], 0 = fully withdrawn.
    pub x_bank: f64,
}

impl State {
    pub fn zeros() -> Self {
        Self {
            n: [0.0; N_Z],
            iodine: [0.0; N_Z],
            xenon: [0.0; N_Z],
            t_cl: 0.0,
            x_bank: 0.0,
        }
    }

    /// Flatten in the documented order: n, iodine, xenon, t_cl, x_bank.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(N_STATE);
        v.extend_from_slice(&self.n);
        v.extend_from_slice(&self.iodine);
        v.extend_from_slice(&self.xenon);
        v.push(self.t_cl);
        v.push(self.x_bank);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, CoreError> {
        if v.len() != N_STATE {
            return Err(CoreError::Shape(format!(
                "state slice has length {}, expected {}",
                v.len(),
                N_STATE
            )));
        }
        let mut s = State::zeros();
        s.n.copy_from_slice(&v[0..N_Z]);
        s.iodine.copy_from_slice(&v[N_Z..2 * N_Z]);
        s.xenon.copy_from_slice(&v[2 * N_Z..3 * N_Z]);
        s.t_cl = v[3 * N_Z];
        s.x_bank = v[3 * N_Z + 1];
        Ok(s)
    }

    /// Check the domain invariants: finiteness, non-negative
    /// concentrations, rod fraction inside [0, 1].
    pub fn validate(&self) -> Result<(), CoreError> {
        for (name, block) in [("n", &self.n), ("iodine", &self.iodine), ("xenon", &self.xenon)] {
            for (i, &x) in block.iter().enumerate() {
                if !x.is_finite() {
                    return Err(CoreError::Domain(format!("{name}[{i}] is not finite")));
                }
                if x < 0.0 {
                    return Err(CoreError::Domain(format!("{name}[{i}] = {x} is negative")));
                }
            }
        }
        if !self.t_cl.is_finite() {
            return Err(CoreError::Domain("t_cl is not finite".into()));
        }
        if !self.x_bank.is_finite() || !(0.0..=1.0).contains(&self.x_bank) {
            return Err(CoreError::Domain(format!(
                "x_bank = {} outside [0, 1]",
                self.x_bank
            )));
        }
        Ok(())
    }

    pub fn mean_flux(&self) -> f64 {
        self.n.iter().sum::<f64>() / N_Z as f64
    }
}

/// Fixed plant parameters in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConstants {
    /// Mesh count (fixed at 6; kept in the config for documentation).
    pub n_z: usize,
    /// Effective prompt time constant, s.
    pub lambda_prompt: f64,
    /// Inter-mesh neutron coupling, 1/s.
    pub kappa: f64,
    /// Power reactivity coefficient, dk per unit normalized power.
    pub alpha_pow: f64,
    /// Moderator coefficient, dk per degree C.
    pub alpha_mod: f64,
    /// Xenon worth, dk per unit normalized xenon deviation.
    pub c_x: f64,
    /// Total rod worth, dk.
    pub w_rod_total: f64,
    /// Rod overlap width, dimensionless.
    pub w_rod_width: f64,
    /// Iodine decay constant, 1/s.
    pub lambda_i: f64,
    /// Xenon decay constant, 1/s.
    pub lambda_x: f64,
    /// Iodine branch fraction y_I / (y_I + y_X).
    pub beta_i: f64,
    /// Normalized xenon burnup rate at nominal flux, 1/s.
    pub sigma_star: f64,
    /// Temperature program intercept, degrees C.
    pub t_base: f64,
    /// Temperature program span, degrees C.
    pub t_span: f64,
    /// Degrees C per unit core/turbine power mismatch.
    pub g_mismatch: f64,
    /// Cold-leg time constant, s.
    pub tau_t: f64,
    /// Max rod speed, fraction/s.
    pub v_max: f64,
    /// Rod controller gain, fraction/(degC * s).
    pub g_rod: f64,
    /// Temperature deadband, degrees C.
    pub delta_db: f64,
    /// Reference temperature for moderator feedback, degrees C.
    pub t_ref: f64,
}

impl Default for PlantConstants {
    fn default() -> Self {
        Self {
            n_z: N_Z,
            lambda_prompt: 1.0e-5,
            kappa: 1.0e-2,
            alpha_pow: -0.02,
            alpha_mod: -3.0e-4,
            c_x: 0.03,
            w_rod_total: 0.08,
            w_rod_width: 0.05,
            lambda_i: 2.9e-5,
            lambda_x: 2.1e-5,
            beta_i: 0.96,
            sigma_star: 3.5e-5,
            t_base: 286.0,
            t_span: 20.0,
            g_mismatch: 30.0,
            tau_t: 30.0,
            v_max: 1.7e-3,
            g_rod: 2.0e-4,
            delta_db: 0.8,
            t_ref: 306.0,
        }
    }
}

impl PlantConstants {
    /// Check physical validity, including that the parameter set is
    /// genuinely stiff (fast flux modes against slow xenon decay).
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.n_z != N_Z {
            return Err(CoreError::Config(format!(
                "n_z = {} unsupported, state layout is fixed at {}",
                self.n_z, N_Z
            )));
        }
        if self.lambda_prompt <= 0.0 {
            return Err(CoreError::Config("lambda_prompt must be > 0".into()));
        }
        for (name, v) in [
            ("lambda_i", self.lambda_i),
            ("lambda_x", self.lambda_x),
            ("sigma_star", self.sigma_star),
            ("tau_t", self.tau_t),
            ("v_max", self.v_max),
            ("delta_db", self.delta_db),
            ("w_rod_width", self.w_rod_width),
        ] {
            if v <= 0.0 {
                return Err(CoreError::Config(format!("{name} must be > 0")));
            }
        }
        if !(0.0 < self.beta_i && self.beta_i < 1.0) {
            return Err(CoreError::Config("beta_i must lie in (0, 1)".into()));
        }
        let stiffness = (self.alpha_pow.abs() / self.lambda_prompt) / self.lambda_x;
        if stiffness < 1e6 {
            return Err(CoreError::Config(format!(
                "stiffness ratio {stiffness:.3e} below 1e6; system not stiff"
            )));
        }
        Ok(())
    }
}
