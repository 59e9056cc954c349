//! Scenario generation, corpus construction, min-max normalization, and the
//! on-disk formats (JSONL trajectories, CSV manifest, key=value normalizer).

use crate::error::CoreError;
use crate::plant::{equilibrium_state, PlantConstants, PowerProfile, State, N_STATE, N_Z};
use crate::rng::SplitMix64;
use crate::solver::{integrate_reference, SolverConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Who produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "reference")]
    Reference,
    #[serde(rename = "pinn-hybrid")]
    PinnHybrid,
    #[serde(rename = "gbt-rollout")]
    GbtRollout,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Reference => "reference",
            Provenance::PinnHybrid => "pinn-hybrid",
            Provenance::GbtRollout => "gbt-rollout",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CoreError> {
        match s {
            "reference" => Ok(Provenance::Reference),
            "pinn-hybrid" => Ok(Provenance::PinnHybrid),
            "gbt-rollout" => Ok(Provenance::GbtRollout),
            other => Err(CoreError::Corpus(format!("unknown provenance '{other}'"))),
        }
    }
}

/// One randomized load-following scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub seed: u64,
    /// Down/up ramp pairs (0 = constant power).
    pub n_ramps: u32,
    /// Lowest admissible power level, fraction of nominal.
    pub power_floor: f64,
    /// Ramp rate, %NP per minute.
    pub ramp_rate: f64,
    pub horizon_s: f64,
    pub initial_power: f64,
    /// Informational only; the model has no boron state.
    pub boron_ppm: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_ramps: 2,
            power_floor: 0.3,
            ramp_rate: 1.0,
            horizon_s: 86_400.0,
            initial_power: 1.0,
            boron_ppm: 1296.0,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.power_floor < 0.2 {
            return Err(CoreError::Config("power_floor must be >= 0.2".into()));
        }
        if self.ramp_rate <= 0.0 {
            return Err(CoreError::Config("ramp_rate must be > 0".into()));
        }
        if self.horizon_s <= 0.0 {
            return Err(CoreError::Config("horizon_s must be > 0".into()));
        }
        if self.n_ramps > 4 {
            return Err(CoreError::Config("n_ramps must be <= 4".into()));
        }
        if !(self.power_floor..=1.0).contains(&self.initial_power) {
            return Err(CoreError::Config(
                "initial_power must lie in [power_floor, 1.0]".into(),
            ));
        }
        Ok(())
    }
}

/// A sampled state history with the profile that drove it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Sample instants, s; uniform step.
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub profile: PowerProfile,
    pub provenance: Provenance,
}

impl Trajectory {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.times.len() != self.states.len() || self.times.is_empty() {
            return Err(CoreError::Corpus("times/states length mismatch or empty".into()));
        }
        for w in self.times.windows(2) {
            if w[1] <= w[0] {
                return Err(CoreError::Corpus("times must be strictly increasing".into()));
            }
        }
        for s in &self.states {
            s.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Turbine demand at sample index k.
    pub fn p_turb_at(&self, k: usize) -> f64 {
        self.profile.eval(self.times[k])
    }
}

/// Dwell bounds between ramps, s.
const DWELL_MIN_S: f64 = 1_800.0;
const DWELL_MAX_S: f64 = 10_800.0;

/// Random load-following profile: `n_ramps` down/up pairs at `ramp_rate`,
/// with seeded uniform target levels and dwell times. An infeasible draw
/// (schedule exceeding the horizon) is regenerated with one ramp pair
/// fewer, up to 10 retries.
pub fn generate_profile(spec: &ScenarioSpec) -> Result<PowerProfile, CoreError> {
    spec.validate()?;
    if spec.n_ramps == 0 {
        return Ok(PowerProfile::constant(spec.initial_power));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let mut n_ramps = spec.n_ramps;
    for _ in 0..10 {
        let mut bp = vec![(0.0, spec.initial_power)];
        let mut t = rng.uniform(DWELL_MIN_S, 0.5 * DWELL_MAX_S);
        bp.push((t, spec.initial_power));
        let mut feasible = true;
        for _ in 0..n_ramps {
            // down to a random level, dwell, back up, dwell
            let hi = spec.initial_power - 0.05;
            let target = if hi <= spec.power_floor {
                spec.power_floor
            } else {
                rng.uniform(spec.power_floor, hi)
            };
            let ramp_s = (spec.initial_power - target).abs() * 100.0 / spec.ramp_rate * 60.0;
            t += ramp_s;
            bp.push((t, target));
            t += rng.uniform(DWELL_MIN_S, DWELL_MAX_S);
            bp.push((t, target));
            t += ramp_s;
            bp.push((t, spec.initial_power));
            t += rng.uniform(DWELL_MIN_S, DWELL_MAX_S);
            bp.push((t, spec.initial_power));
            if t > spec.horizon_s {
                feasible = false;
                break;
            }
        }
        if feasible {
            return PowerProfile::new(bp);
        }
        n_ramps = n_ramps.saturating_sub(1).max(1);
    }
    Err(CoreError::Generation(format!(
        "no feasible schedule for seed {} within 10 retries",
        spec.seed
    )))
}

/// Per-component min-max scaler over flattened State order
/// (n, iodine, xenon, t_cl, x_bank).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    /// Fit bounds over every state of every trajectory. A component that is
    /// constant over the corpus gets its bounds widened by ±0.5 so the scale
    /// stays invertible (the constant value maps to 0.5).
    pub fn fit(trajectories: &[Trajectory]) -> Result<Self, CoreError> {
        if trajectories.is_empty() || trajectories.iter().all(|t| t.states.is_empty()) {
            return Err(CoreError::Corpus("cannot fit normalizer on empty corpus".into()));
        }
        let mut min = vec![f64::INFINITY; N_STATE];
        let mut max = vec![f64::NEG_INFINITY; N_STATE];
        for traj in trajectories {
            for s in &traj.states {
                for (i, v) in s.to_vec().iter().enumerate() {
                    min[i] = min[i].min(*v);
                    max[i] = max[i].max(*v);
                }
            }
        }
        for i in 0..N_STATE {
            if max[i] - min[i] < 1e-9 {
                min[i] -= 0.5;
                max[i] += 0.5;
            }
        }
        let out = Self { min, max };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.min.len() != N_STATE || self.max.len() != N_STATE {
            return Err(CoreError::Shape(format!(
                "normalizer must have {N_STATE} components"
            )));
        }
        for i in 0..N_STATE {
            // NaN bounds must fail too, hence the negated comparison
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(self.max[i] > self.min[i]) {
                return Err(CoreError::Config(format!(
                    "normalizer component {i}: max must exceed min"
                )));
            }
        }
        Ok(())
    }

    pub fn normalize_slice(&self, raw: &[f64], out: &mut [f64]) {
        for i in 0..N_STATE {
            out[i] = (raw[i] - self.min[i]) / (self.max[i] - self.min[i]);
        }
    }

    pub fn normalize(&self, s: &State) -> Vec<f64> {
        let raw = s.to_vec();
        let mut out = vec![0.0; N_STATE];
        self.normalize_slice(&raw, &mut out);
        out
    }

    pub fn invert_slice(&self, z: &[f64], out: &mut [f64]) {
        for i in 0..N_STATE {
            out[i] = self.min[i] + z[i] * (self.max[i] - self.min[i]);
        }
    }

    pub fn invert(&self, z: &[f64]) -> Result<State, CoreError> {
        let mut raw = vec![0.0; N_STATE];
        self.invert_slice(z, &mut raw);
        State::from_slice(&raw)
    }

    /// key=value text, keys min_0..min_19 then max_0..max_19.
    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        let mut f = BufWriter::new(std::fs::File::create(path)?);
        for (i, v) in self.min.iter().enumerate() {
            writeln!(f, "min_{i}={v}")?;
        }
        for (i, v) in self.max.iter().enumerate() {
            writeln!(f, "max_{i}={v}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let text = std::fs::read_to_string(path)?;
        let mut min = vec![f64::NAN; N_STATE];
        let mut max = vec![f64::NAN; N_STATE];
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("bad normalizer line '{line}'")))?;
            let v: f64 = val
                .parse()
                .map_err(|_| CoreError::Config(format!("bad normalizer value '{val}'")))?;
            let (dest, idx_str) = if let Some(rest) = key.strip_prefix("min_") {
                (&mut min, rest)
            } else if let Some(rest) = key.strip_prefix("max_") {
                (&mut max, rest)
            } else {
                return Err(CoreError::Config(format!("unknown normalizer key '{key}'")));
            };
            let idx: usize = idx_str
                .parse()
                .map_err(|_| CoreError::Config(format!("bad normalizer key '{key}'")))?;
            if idx >= N_STATE {
                return Err(CoreError::Config(format!("normalizer index {idx} out of range")));
            }
            dest[idx] = v;
        }
        if min.iter().chain(max.iter()).any(|v| v.is_nan()) {
            return Err(CoreError::Config("normalizer file is missing keys".into()));
        }
        let out = Self { min, max };
        out.validate()?;
        Ok(out)
    }

    /// SHA-256 hex digest of the saved text form; embedded in model files
    /// so a model is never applied with the wrong scaling.
    pub fn sha256_hex(&self) -> String {
        let mut text = String::new();
        for (i, v) in self.min.iter().enumerate() {
            text.push_str(&format!("min_{i}={v}\n"));
        }
        for (i, v) in self.max.iter().enumerate() {
            text.push_str(&format!("max_{i}={v}\n"));
        }
        hex_digest(text.as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable digest of the plant constants, stored in file headers so corpora
/// and models can be matched to the physics that produced them.
pub fn constants_hash(c: &PlantConstants) -> String {
    let json = serde_json::to_string(c).expect("constants serialize");
    hex_digest(json.as_bytes())
}

/// Reference-integrate `n_train` + `n_test` seeded scenarios in parallel,
/// split by whole trajectory, and fit the normalizer on the train set only.
///
/// Failed integrations are skipped (logged to stderr); more than 10%
/// failures is a corpus error.
pub fn build_corpus(
    n_train: usize,
    n_test: usize,
    base_seed: u64,
    cfg: &SolverConfig,
    c: &PlantConstants,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>, Normalizer), CoreError> {
    if n_train == 0 || n_test == 0 {
        return Err(CoreError::Config("n_train and n_test must be >= 1".into()));
    }
    let total = n_train + n_test;
    let specs: Vec<ScenarioSpec> = (0..total)
        .map(|i| ScenarioSpec {
            seed: base_seed.wrapping_add(i as u64),
            n_ramps: 1 + (base_seed.wrapping_add(i as u64) % 4) as u32,
            ..ScenarioSpec::default()
        })
        .collect();
    let x0 = equilibrium_state(ScenarioSpec::default().initial_power, c)?;

    let results: Vec<(usize, Result<Trajectory, CoreError>)> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let run = generate_profile(spec).and_then(|profile| {
                integrate_reference(&x0, &profile, spec.horizon_s, 60.0, cfg, c)
                    .map(|(traj, _)| traj)
            });
            (i, run)
        })
        .collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut failures = 0usize;
    for (i, res) in results {
        match res {
            Ok(traj) => {
                if i < n_train {
                    train.push(traj);
                } else {
                    test.push(traj);
                }
            }
            Err(e) => {
                eprintln!("scenario seed {} skipped: {e}", specs[i].seed);
                failures += 1;
            }
        }
    }
    if failures * 10 > total {
        return Err(CoreError::Corpus(format!(
            "{failures}/{total} scenarios failed integration"
        )));
    }
    let normalizer = Normalizer::fit(&train)?;
    Ok((train, test, normalizer))
}

/// (input features, flattened target block) pair.
pub type SupervisedSample = (Vec<f64>, Vec<f64>);

/// Supervised block samples: input = state(t) followed by the next
/// `n_block` turbine-demand values (20 + n_block features); target = the
/// flattened states t+1 .. t+n_block (20·n_block values).
pub fn slice_supervised(
    traj: &Trajectory,
    n_block: usize,
) -> Result<Vec<SupervisedSample>, CoreError> {
    if n_block == 0 {
        return Err(CoreError::Config("n_block must be >= 1".into()));
    }
    if traj.len() < n_block + 1 {
        return Err(CoreError::Corpus(format!(
            "trajectory of {} samples is too short for blocks of {n_block}",
            traj.len()
        )));
    }
    let mut out = Vec::with_capacity(traj.len() - n_block);
    for t in 0..traj.len() - n_block {
        let mut features = traj.states[t].to_vec();
        for k in 1..=n_block {
            features.push(traj.p_turb_at(t + k));
        }
        let mut target = Vec::with_capacity(N_STATE * n_block);
        for k in 1..=n_block {
            target.extend_from_slice(&traj.states[t + k].to_vec());
        }
        out.push((features, target));
    }
    Ok(out)
}

/// Header line of a trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub spec: Option<ScenarioSpec>,
    pub provenance: Provenance,
    pub constants_hash: String,
    /// Breakpoints of the driving profile, needed to rebuild it on read.
    pub profile: Vec<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: TrajectoryMeta,
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    t: f64,
    p_turb: f64,
    n: [f64; N_Z],
    iodine: [f64; N_Z],
    xenon: [f64; N_Z],
    t_cl: f64,
    x_bank: f64,
}

/// JSON-lines trajectory: a `{"meta": ...}` header, then one object per
/// sample.
pub fn write_trajectory(
    path: &Path,
    traj: &Trajectory,
    spec: Option<&ScenarioSpec>,
    c: &PlantConstants,
) -> Result<(), CoreError> {
    traj.validate()?;
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    let meta = MetaLine {
        meta: TrajectoryMeta {
            spec: spec.cloned(),
            provenance: traj.provenance,
            constants_hash: constants_hash(c),
            profile: traj.profile.breakpoints.clone(),
        },
    };
    writeln!(f, "{}", serde_json::to_string(&meta)?)?;
    for (k, s) in traj.states.iter().enumerate() {
        let line = SampleLine {
            t: traj.times[k],
            p_turb: traj.p_turb_at(k),
            n: s.n,
            iodine: s.iodine,
            xenon: s.xenon,
            t_cl: s.t_cl,
            x_bank: s.x_bank,
        };
        writeln!(f, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<(Trajectory, TrajectoryMeta), CoreError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines
        .next()
        .ok_or_else(|| CoreError::Corpus(format!("{}: empty file", path.display())))??;
    let meta: MetaLine = serde_json::from_str(&header)?;
    let profile = PowerProfile::new(meta.meta.profile.clone())?;
    let mut times = Vec::new();
    let mut states = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SampleLine = serde_json::from_str(&line)?;
        times.push(s.t);
        states.push(State {
            n: s.n,
            iodine: s.iodine,
            xenon: s.xenon,
            t_cl: s.t_cl,
            x_bank: s.x_bank,
        });
    }
    let traj = Trajectory {
        times,
        states,
        profile,
        provenance: meta.meta.provenance,
    };
    traj.validate()?;
    Ok((traj, meta.meta))
}

/// One row of the corpus manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub file: String,
    pub provenance: Provenance,
    pub n_samples: usize,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), CoreError> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "seed,file,provenance,n_samples")?;
    for e in entries {
        writeln!(f, "{},{},{},{}", e.seed, e.file, e.provenance.as_str(), e.n_samples)?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, CoreError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("seed,file,provenance,n_samples") => {}
        _ => return Err(CoreError::Corpus("bad manifest header".into())),
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(CoreError::Corpus(format!("bad manifest row '{line}'")));
        }
        out.push(ManifestEntry {
            seed: parts[0]
                .parse()
                .map_err(|_| CoreError::Corpus(format!("bad seed '{}'", parts[0])))?,
            file: parts[1].to_string(),
            provenance: Provenance::parse(parts[2])?,
            n_samples: parts[3]
                .parse()
                .map_err(|_| CoreError::Corpus(format!("bad n_samples '{}'", parts[3])))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short_traj() -> Trajectory {
        let c = PlantConstants::default();
        let x0 = equilibrium_state(1.0, &c).unwrap();
        let profile = PowerProfile::constant(1.0);
        let cfg = SolverConfig::default();
        let (traj, _) = integrate_reference(&x0, &profile, 1200.0, 60.0, &cfg, &c).unwrap();
        traj
    }

    #[test]
    fn profile_deterministic_and_shaped() {
        let spec = ScenarioSpec { seed: 42, n_ramps: 2, ..ScenarioSpec::default() };
        let a = generate_profile(&spec).unwrap();
        let b = generate_profile(&spec).unwrap();
        assert_eq!(a.breakpoints, b.breakpoints);
        assert_eq!(a.eval(0.0), 1.0);
        // ramp slopes are exactly ramp_rate or zero
        for w in a.breakpoints.windows(2) {
            let slope = (w[1].1 - w[0].1).abs() / (w[1].0 - w[0].0) * 6000.0;
            assert!(slope.abs() < 1e-9 || (slope - 1.0).abs() < 1e-9, "slope {slope} %NP/min");
        }
        // levels stay within [floor, 1]
        for (_, p) in &a.breakpoints {
            assert!(*p >= spec.power_floor - 1e-12 && *p <= 1.0 + 1e-12);
        }
        assert!(a.end_time() <= spec.horizon_s);
    }

    #[test]
    fn profile_zero_ramps_is_constant() {
        let spec = ScenarioSpec { seed: 7, n_ramps: 0, ..ScenarioSpec::default() };
        let p = generate_profile(&spec).unwrap();
        assert_eq!(p.eval(0.0), 1.0);
        assert_eq!(p.eval(50_000.0), 1.0);
        assert_eq!(p.kink_times().len(), 1);
    }

    #[test]
    fn profiles_differ_across_seeds() {
        let a = generate_profile(&ScenarioSpec { seed: 1, ..ScenarioSpec::default() }).unwrap();
        let b = generate_profile(&ScenarioSpec { seed: 2, ..ScenarioSpec::default() }).unwrap();
        assert_ne!(a.breakpoints, b.breakpoints);
    }

    #[test]
    fn slice_supervised_shapes() {
        let traj = short_traj();
        assert_eq!(traj.len(), 21);
        let samples = slice_supervised(&traj, 10).unwrap();
        assert_eq!(samples.len(), 11);
        assert_eq!(samples[0].0.len(), 30);
        assert_eq!(samples[0].1.len(), 200);
        let one = slice_supervised(&traj, 1).unwrap();
        assert_eq!(one.len(), 20);
        assert_eq!(one[0].0.len(), 21);
        // features start with state(t), targets start with state(t+1)
        assert_eq!(&samples[0].0[..N_STATE], &traj.states[0].to_vec()[..]);
        assert_eq!(&samples[0].1[..N_STATE], &traj.states[1].to_vec()[..]);
        assert!(slice_supervised(&traj, 21).is_err());
        assert!(slice_supervised(&traj, 0).is_err());
    }

    #[test]
    fn normalizer_roundtrip_and_bounds() {
        let traj = short_traj();
        let norm = Normalizer::fit(std::slice::from_ref(&traj)).unwrap();
        norm.validate().unwrap();
        for s in &traj.states {
            let z = norm.normalize(s);
            for v in &z {
                assert!(*v >= -1e-12 && *v <= 1.0 + 1e-12, "normalized value {v}");
            }
            let back = norm.invert(&z).unwrap();
            for (a, b) in back.to_vec().iter().zip(s.to_vec()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn normalizer_file_roundtrip_bitwise() {
        let traj = short_traj();
        let norm = Normalizer::fit(std::slice::from_ref(&traj)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("norm.txt");
        norm.save(&path).unwrap();
        let back = Normalizer::load(&path).unwrap();
        assert_eq!(norm, back);
        assert_eq!(norm.sha256_hex(), back.sha256_hex());
    }

    #[test]
    fn normalizer_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "bogus_0=1.0\n").unwrap();
        assert!(Normalizer::load(&path).is_err());
    }

    #[test]
    fn trajectory_file_roundtrip_bitwise() {
        let c = PlantConstants::default();
        let spec = ScenarioSpec { seed: 3, n_ramps: 1, ..ScenarioSpec::default() };
        let profile = generate_profile(&spec).unwrap();
        let cfg = SolverConfig::default();
        let x0 = equilibrium_state(1.0, &c).unwrap();
        let (traj, _) = integrate_reference(&x0, &profile, 3600.0, 60.0, &cfg, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.jsonl");
        write_trajectory(&path, &traj, Some(&spec), &c).unwrap();
        let (back, meta) = read_trajectory(&path).unwrap();
        assert_eq!(traj, back);
        assert_eq!(meta.spec.as_ref(), Some(&spec));
        assert_eq!(meta.provenance, Provenance::Reference);
        assert_eq!(meta.constants_hash, constants_hash(&c));
    }

    #[test]
    fn manifest_roundtrip() {
        let entries = vec![
            ManifestEntry { seed: 1, file: "a.jsonl".into(), provenance: Provenance::Reference, n_samples: 1441 },
            ManifestEntry { seed: 2, file: "b.jsonl".into(), provenance: Provenance::GbtRollout, n_samples: 145 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(entries, back);
    }
}
