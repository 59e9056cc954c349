use crate::error::CoreError;
use serde::{Deserialize, Serialize};

/// Piecewise-linear turbine power demand, the sole exogenous control.
///
/// Breakpoints are (time s, power fraction) with strictly increasing times
/// starting at 0; evaluation holds the last value beyond the final
/// breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerProfile {
    pub breakpoints: Vec<(f64, f64)>,
}

impl PowerProfile {
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self, CoreError> {
        if breakpoints.is_empty() {
            return Err(CoreError::Domain("profile needs at least one breakpoint".into()));
        }
        if breakpoints[0].0 != 0.0 {
            return Err(CoreError::Domain("profile must start at t = 0".into()));
        }
        for w in breakpoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(CoreError::Domain(format!(
                    "breakpoint times not strictly increasing: {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        for &(t, p) in &breakpoints {
            if !t.is_finite() || !p.is_finite() {
                return Err(CoreError::Domain("non-finite breakpoint".into()));
            }
        }
        Ok(Self { breakpoints })
    }

    /// Constant profile at the given power.
    pub fn constant(p: f64) -> Self {
        Self { breakpoints: vec![(0.0, p)] }
    }

    /// The canonical benchmark transient: 100 -> 70 %NP starting at
    /// t = 30 min at 1 %NP/min, back to 100 at t = 180 min, down to 50 at
    /// t = 480 min, up to 100 at t = 1200 min, all at the same rate.
    pub fn canonical_benchmark() -> Self {
        let m = 60.0; // minutes -> seconds
        Self {
            breakpoints: vec![
                (0.0, 1.0),
                (30.0 * m, 1.0),
                (60.0 * m, 0.7),
                (180.0 * m, 0.7),
                (210.0 * m, 1.0),
                (480.0 * m, 1.0),
                (530.0 * m, 0.5),
                (1200.0 * m, 0.5),
                (1250.0 * m, 1.0),
            ],
        }
    }

    /// Evaluate the demanded power fraction at time t (seconds).
    pub fn eval(&self, t: f64) -> f64 {
        let bp = &self.breakpoints;
        if t <= bp[0].0 {
            return bp[0].1;
        }
        for w in bp.windows(2) {
            let (t0, p0) = w[0];
            let (t1, p1) = w[1];
            if t <= t1 {
                return p0 + (p1 - p0) * (t - t0) / (t1 - t0);
            }
        }
        bp[bp.len() - 1].1
    }

    /// Times at which the profile slope changes; the integrator aligns
    /// internal steps with these to keep the right-hand side smooth within
    /// a step.
    pub fn kink_times(&self) -> Vec<f64> {
        self.breakpoints.iter().map(|&(t, _)| t).collect()
    }

    pub fn end_time(&self) -> f64 {
        self.breakpoints.last().unwrap().0
    }
}
