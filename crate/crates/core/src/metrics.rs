//! Accuracy and timing metrics for surrogate-versus-reference rollouts.
//!
//! All accuracy metrics live in the corpus's normalized coordinates so
//! every component is comparable. Scaled MSE values are reported ×10³
//! (column headers say so) to land in the same magnitude range as the
//! usual tabulations.

use crate::dataset::{Normalizer, Trajectory};
use crate::error::CoreError;
use crate::plant::{N_STATE, N_Z};
#[cfg(test)]
use crate::plant::State;
use serde::{Deserialize, Serialize};

/// Per-variable scaled MSE, each value ×10³. Flux, iodine and xenon
/// entries average their six mesh components; `overall` sums the five
/// group values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledMse {
    pub n: f64,
    pub iodine: f64,
    pub xenon: f64,
    pub t_cl: f64,
    pub x_bank: f64,
    pub overall: f64,
}

impl ScaledMse {
    pub fn values(&self) -> [f64; 6] {
        [self.n, self.iodine, self.xenon, self.t_cl, self.x_bank, self.overall]
    }

    pub const LABELS: [&'static str; 6] = ["n", "iodine", "xenon", "t_cl", "x_bank", "overall"];
}

fn check_aligned(pred: &Trajectory, reference: &Trajectory) -> Result<(), CoreError> {
    if pred.len() != reference.len() {
        return Err(CoreError::Shape(format!(
            "trajectories have {} and {} samples",
            pred.len(),
            reference.len()
        )));
    }
    for (a, b) in pred.times.iter().zip(&reference.times) {
        if (a - b).abs() > 1e-9 {
            return Err(CoreError::Domain(format!(
                "trajectory times misaligned: {a} vs {b}"
            )));
        }
    }
    Ok(())
}

/// Per-variable MSE between two aligned trajectories in normalized
/// coordinates, ×10³. Group values average their components; `overall`
/// is the sum of the five group values.
pub fn scaled_mse(
    pred: &Trajectory,
    reference: &Trajectory,
    norm: &Normalizer,
) -> Result<ScaledMse, CoreError> {
    check_aligned(pred, reference)?;
    if pred.is_empty() {
        return Err(CoreError::Domain("empty trajectories".into()));
    }
    let mut comp = [0.0f64; N_STATE];
    let mut zp = vec![0.0; N_STATE];
    let mut zr = vec![0.0; N_STATE];
    for (sp, sr) in pred.states.iter().zip(&reference.states) {
        norm.normalize_slice(&sp.to_vec(), &mut zp);
        norm.normalize_slice(&sr.to_vec(), &mut zr);
        for i in 0..N_STATE {
            let d = zp[i] - zr[i];
            comp[i] += d * d;
        }
    }
    let inv = 1.0 / pred.len() as f64;
    for c in &mut comp {
        *c *= inv;
    }
    let group_mean = |lo: usize| comp[lo..lo + N_Z].iter().sum::<f64>() / N_Z as f64;
    let n = group_mean(0);
    let iodine = group_mean(N_Z);
    let xenon = group_mean(2 * N_Z);
    let t_cl = comp[3 * N_Z];
    let x_bank = comp[3 * N_Z + 1];
    let overall = n + iodine + xenon + t_cl + x_bank;
    Ok(ScaledMse {
        n: n * 1e3,
        iodine: iodine * 1e3,
        xenon: xenon * 1e3,
        t_cl: t_cl * 1e3,
        x_bank: x_bank * 1e3,
        overall: overall * 1e3,
    })
}

/// Core-power error in (%NP)²: mean over samples of the squared
/// difference of mesh-averaged flux, with flux 1.0 = 100 %NP.
pub fn mse_per_min_np(pred: &Trajectory, reference: &Trajectory) -> Result<f64, CoreError> {
    check_aligned(pred, reference)?;
    if pred.is_empty() {
        return Err(CoreError::Domain("empty trajectories".into()));
    }
    let mut acc = 0.0;
    for (sp, sr) in pred.states.iter().zip(&reference.states) {
        let mp = sp.n.iter().sum::<f64>() / N_Z as f64;
        let mr = sr.n.iter().sum::<f64>() / N_Z as f64;
        let d = 100.0 * (mp - mr);
        acc += d * d;
    }
    Ok(acc / pred.len() as f64)
}

/// The persistence baseline: the initial state held for the whole
/// horizon, on the reference's time grid.
pub fn persistence_trajectory(reference: &Trajectory) -> Trajectory {
    Trajectory {
        times: reference.times.clone(),
        states: vec![reference.states[0].clone(); reference.len()],
        profile: reference.profile.clone(),
        provenance: reference.provenance,
    }
}

/// Mean and (population) standard deviation of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    MeanStd { mean, std: var.sqrt() }
}

/// Aggregate accuracy/timing report over a test set for one surrogate
/// method. Scaled MSE fields are ×10³; speedup is reference wall clock
/// over surrogate wall clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub n_scenarios: usize,
    pub seed: u64,
    pub scaled_mse_n: MeanStd,
    pub scaled_mse_iodine: MeanStd,
    pub scaled_mse_xenon: MeanStd,
    pub scaled_mse_t_cl: MeanStd,
    pub scaled_mse_x_bank: MeanStd,
    pub scaled_mse_overall: MeanStd,
    pub mse_per_min_np: MeanStd,
    /// Mean squared physics residual, when the method defines one.
    pub pi_residual: Option<f64>,
    pub speedup: MeanStd,
}

impl MetricsReport {
    /// Assemble a report from per-scenario values.
    pub fn from_runs(
        method: &str,
        seed: u64,
        per_scenario: &[ScaledMse],
        np_vals: &[f64],
        speedups: &[f64],
        pi_residual: Option<f64>,
    ) -> Result<Self, CoreError> {
        if per_scenario.is_empty()
            || per_scenario.len() != np_vals.len()
            || per_scenario.len() != speedups.len()
        {
            return Err(CoreError::Shape("per-scenario metric lengths differ".into()));
        }
        let col = |f: fn(&ScaledMse) -> f64| {
            mean_std(&per_scenario.iter().map(f).collect::<Vec<_>>())
        };
        Ok(Self {
            method: method.to_string(),
            n_scenarios: per_scenario.len(),
            seed,
            scaled_mse_n: col(|m| m.n),
            scaled_mse_iodine: col(|m| m.iodine),
            scaled_mse_xenon: col(|m| m.xenon),
            scaled_mse_t_cl: col(|m| m.t_cl),
            scaled_mse_x_bank: col(|m| m.x_bank),
            scaled_mse_overall: col(|m| m.overall),
            mse_per_min_np: mean_std(np_vals),
            pi_residual,
            speedup: mean_std(speedups),
        })
    }
}

/// Build a trajectory with a uniform additive offset on selected
/// components — test helper for metric arithmetic.
#[cfg(test)]
fn offset_trajectory(reference: &Trajectory, component: usize, delta_raw: f64) -> Trajectory {
    let mut out = reference.clone();
    for s in &mut out.states {
        let mut v = s.to_vec();
        v[component] += delta_raw;
        *s = State::from_slice(&v).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_corpus, Normalizer};
    use crate::rng::SplitMix64;
    use crate::solver::SolverConfig;
    use crate::PlantConstants;

    fn small_pair() -> (Trajectory, Trajectory, Normalizer) {
        let c = PlantConstants::default();
        let (train, test, norm) = build_corpus(2, 1, 0x3e7, &SolverConfig::default(), &c).unwrap();
        (train[0].clone(), test[0].clone(), norm)
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let (a, _, norm) = small_pair();
        let m = scaled_mse(&a, &a, &norm).unwrap();
        assert_eq!(m.values(), [0.0; 6]);
        assert_eq!(mse_per_min_np(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn misaligned_times_rejected() {
        let (a, _, norm) = small_pair();
        let mut b = a.clone();
        b.times[3] += 1.0;
        assert!(scaled_mse(&a, &b, &norm).is_err());
        assert!(mse_per_min_np(&a, &b).is_err());
        b = a.clone();
        b.times.pop();
        b.states.pop();
        assert!(scaled_mse(&a, &b, &norm).is_err());
    }

    #[test]
    fn constant_normalized_offset_arithmetic() {
        let (a, _, norm) = small_pair();
        // a raw t_cl offset equal to 0.1 of the t_cl normalization span
        // gives normalized offset 0.1, so group MSE 0.01 and 10.0 after
        // the x1e3 reporting convention.
        let span = {
            let z0 = norm.normalize(&a.states[0]);
            let mut v = a.states[0].to_vec();
            v[18] += 1.0;
            let z1 = norm.normalize(&State::from_slice(&v).unwrap());
            1.0 / (z1[18] - z0[18])
        };
        let b = offset_trajectory(&a, 18, 0.1 * span);
        let m = scaled_mse(&b, &a, &norm).unwrap();
        assert!((m.t_cl - 10.0).abs() < 1e-9, "t_cl {} != 10.0", m.t_cl);
        assert!((m.overall - m.t_cl).abs() < 1e-12);
        assert_eq!(m.n, 0.0);
        assert_eq!(m.x_bank, 0.0);
    }

    #[test]
    fn uniform_flux_offset_gives_one_np_squared() {
        let (a, _, _) = small_pair();
        let mut b = a.clone();
        for s in &mut b.states {
            for ni in &mut s.n {
                *ni += 0.01;
            }
        }
        let v = mse_per_min_np(&b, &a).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn brute_force_oracle_agreement() {
        let (a, b_src, norm) = small_pair();
        // perturb b pseudo-randomly so every component differs
        let mut rng = SplitMix64::new(42);
        let mut b = a.clone();
        for s in &mut b.states {
            let mut v = s.to_vec();
            for x in &mut v {
                *x += rng.uniform(-0.01, 0.01) * (1.0 + x.abs());
            }
            *s = State::from_slice(&v).unwrap();
        }
        drop(b_src);
        let m = scaled_mse(&b, &a, &norm).unwrap();
        // independent two-loop recomputation
        let len = a.len() as f64;
        let mut comp = [0.0f64; N_STATE];
        for k in 0..a.len() {
            let zp = norm.normalize(&b.states[k]);
            let zr = norm.normalize(&a.states[k]);
            for i in 0..N_STATE {
                comp[i] += (zp[i] - zr[i]).powi(2) / len;
            }
        }
        let g = |lo: usize, w: usize| comp[lo..lo + w].iter().sum::<f64>() / w as f64 * 1e3;
        assert!((m.n - g(0, 6)).abs() < 1e-12);
        assert!((m.iodine - g(6, 6)).abs() < 1e-12);
        assert!((m.xenon - g(12, 6)).abs() < 1e-12);
        assert!((m.t_cl - g(18, 1)).abs() < 1e-12);
        assert!((m.x_bank - g(19, 1)).abs() < 1e-12);
        let overall = g(0, 6) + g(6, 6) + g(12, 6) + g(18, 1) + g(19, 1);
        assert!((m.overall - overall).abs() < 1e-10);
        // scalar-loop oracle for the %NP metric
        let mut acc = 0.0;
        for k in 0..a.len() {
            let mut mp = 0.0;
            let mut mr = 0.0;
            for i in 0..N_Z {
                mp += b.states[k].n[i];
                mr += a.states[k].n[i];
            }
            let d = 100.0 * (mp / 6.0 - mr / 6.0);
            acc += d * d;
        }
        let oracle = acc / len;
        assert!((mse_per_min_np(&b, &a).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn mean_std_and_report() {
        let ms = mean_std(&[1.0, 3.0]);
        assert_eq!(ms.mean, 2.0);
        assert_eq!(ms.std, 1.0);
        let m = ScaledMse { n: 1.0, iodine: 2.0, xenon: 3.0, t_cl: 4.0, x_bank: 5.0, overall: 15.0 };
        let r = MetricsReport::from_runs("gbt", 7, &[m], &[0.5], &[100.0], None).unwrap();
        assert_eq!(r.n_scenarios, 1);
        assert_eq!(r.scaled_mse_overall.mean, 15.0);
        assert_eq!(r.scaled_mse_overall.std, 0.0);
        assert_eq!(r.speedup.mean, 100.0);
        assert!(MetricsReport::from_runs("gbt", 7, &[m], &[0.5], &[], None).is_err());
    }
}
