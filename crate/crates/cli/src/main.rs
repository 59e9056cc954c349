//! `lflab` — command-line surface for the load-following lab: corpus
//! generation, reference simulation, surrogate training, rollouts, and
//! the accuracy/timing benchmark.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lf_core::config::{from_key_values, to_key_values};
use lf_core::dataset::{
    build_corpus, read_trajectory, write_manifest, write_trajectory, ManifestEntry, Normalizer,
    Trajectory,
};
use lf_core::gbt::{recursive_rollout, train_gbt, GbtConfig, GradientBoostedEnsemble};
use lf_core::metrics::{mse_per_min_np, scaled_mse, MetricsReport, ScaledMse};
use lf_core::pinn::{
    hybrid_rollout, mean_squared_residual, train_pinn, training_log_csv, PinnConfig,
    PinnInference, PinnModel, QuasistaticOracle,
};
use lf_core::plant::equilibrium_state;
use lf_core::solver::integrate_reference;
use lf_core::{PlantConstants, PowerProfile, SolverConfig, N_Z};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "lflab",
    version,
    about = "Reactor-core load-following lab: reference stiff solver and surrogate integrators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a train/test corpus of reference transients.
    Gen {
        /// Number of training trajectories.
        #[arg(long)]
        train: usize,
        /// Number of test trajectories.
        #[arg(long)]
        test: usize,
        /// Base seed; scenario i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Integrate one scenario with the reference solver.
    Simulate {
        /// Demand profile file: `t_s,power_fraction` CSV lines.
        #[arg(long, conflicts_with = "canonical")]
        profile: Option<PathBuf>,
        /// Use the canonical 24 h benchmark transient.
        #[arg(long)]
        canonical: bool,
        /// Horizon in seconds (defaults to the profile end, minimum 1 h).
        #[arg(long)]
        horizon_s: Option<f64>,
        /// Output trajectory (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the attention flux surrogate on a corpus.
    TrainPinn {
        #[arg(long)]
        corpus: PathBuf,
        /// Optional key=value config file (PinnConfig fields).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output model file; a training_log.csv is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the gradient-boosted block forecaster on a corpus.
    TrainGbt {
        #[arg(long)]
        corpus: PathBuf,
        /// Optional key=value config file (GbtConfig fields).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll a surrogate over one scenario's profile.
    Rollout {
        /// Scenario: a reference trajectory file (profile + initial state).
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Trained model file (required for pinn/gbt).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Normalizer file from the corpus the model was trained on.
        #[arg(long)]
        normalizer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmark every test scenario: reference vs both surrogates.
    Bench {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory holding pinn.json and gbt.json.
        #[arg(long)]
        models: PathBuf,
        /// Output directory for report.csv, summary.json, plotdata/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the active plant constants as key = value lines.
    Constants,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Method {
    Pinn,
    Gbt,
    Quasistatic,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { train, test, seed, out } => cmd_gen(train, test, seed, &out),
        Command::Simulate { profile, canonical, horizon_s, out } => {
            cmd_simulate(profile.as_deref(), canonical, horizon_s, &out)
        }
        Command::TrainPinn { corpus, config, seed, out } => {
            cmd_train_pinn(&corpus, config.as_deref(), seed, &out)
        }
        Command::TrainGbt { corpus, config, out } => cmd_train_gbt(&corpus, config.as_deref(), &out),
        Command::Rollout { scenario, method, model, normalizer, out } => {
            cmd_rollout(&scenario, method, model.as_deref(), normalizer.as_deref(), &out)
        }
        Command::Bench { corpus, models, out } => cmd_bench(&corpus, &models, &out),
        Command::Constants => {
            print!("{}", to_key_values(&PlantConstants::default())?);
            Ok(())
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn cmd_gen(train: usize, test: usize, seed: u64, out: &Path) -> Result<()> {
    let c = PlantConstants::default();
    let solver_cfg = SolverConfig::default();
    fs::create_dir_all(out)?;
    let (train_trajs, test_trajs, norm) = build_corpus(train, test, seed, &solver_cfg, &c)?;
    let mut entries = Vec::new();
    for (split, trajs) in [("train", &train_trajs), ("test", &test_trajs)] {
        for (i, traj) in trajs.iter().enumerate() {
            let file = format!("{split}_{i:03}.jsonl");
            write_trajectory(&out.join(&file), traj, None, &c)?;
            entries.push(ManifestEntry {
                seed: seed.wrapping_add(if split == "train" { i } else { train + i } as u64),
                file,
                provenance: traj.provenance,
                n_samples: traj.len(),
            });
        }
    }
    write_manifest(&out.join("manifest.csv"), &entries)?;
    norm.save(&out.join("normalizer.txt"))?;
    println!(
        "wrote {} train + {} test trajectories, manifest.csv, normalizer.txt to {}",
        train_trajs.len(),
        test_trajs.len(),
        out.display()
    );
    Ok(())
}

fn parse_profile_csv(path: &Path) -> Result<PowerProfile> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading profile {}", path.display()))?;
    let mut bp = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (t, p) = line
            .split_once(',')
            .ok_or_else(|| anyhow!("line {}: expected t_s,power", lineno + 1))?;
        bp.push((t.trim().parse::<f64>()?, p.trim().parse::<f64>()?));
    }
    Ok(PowerProfile::new(bp)?)
}

fn cmd_simulate(profile: Option<&Path>, canonical: bool, horizon_s: Option<f64>, out: &Path) -> Result<()> {
    let profile = match (profile, canonical) {
        (_, true) => PowerProfile::canonical_benchmark(),
        (Some(p), false) => parse_profile_csv(p)?,
        (None, false) => bail!("pass either --profile FILE or --canonical"),
    };
    let horizon =
        horizon_s.unwrap_or_else(|| if canonical { 86_400.0 } else { profile.end_time().max(3600.0) });
    let c = PlantConstants::default();
    let x0 = equilibrium_state(profile.eval(0.0), &c)?;
    let (traj, stats) = integrate_reference(&x0, &profile, horizon, 60.0, &SolverConfig::default(), &c)?;
    ensure_parent(out)?;
    write_trajectory(out, &traj, None, &c)?;
    println!(
        "reference run: {} samples, {} accepted steps, {:.3} s wall -> {}",
        traj.len(),
        stats.steps_accepted,
        stats.wall_clock_s,
        out.display()
    );
    Ok(())
}

fn load_split(dir: &Path, prefix: &str) -> Result<Vec<Trajectory>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading corpus dir {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with(prefix) && n.ends_with(".jsonl"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no {prefix}_*.jsonl trajectories in {}", dir.display());
    }
    files
        .iter()
        .map(|p| Ok(read_trajectory(p)?.0))
        .collect()
}

fn load_normalizer(dir: &Path) -> Result<Normalizer> {
    Normalizer::load(&dir.join("normalizer.txt"))
        .with_context(|| format!("loading {}/normalizer.txt", dir.display()))
}

fn read_config<T>(path: Option<&Path>) -> Result<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned + Default,
{
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(from_key_values(&text)?)
        }
    }
}

fn cmd_train_pinn(corpus: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let train = load_split(corpus, "train")?;
    let norm = load_normalizer(corpus)?;
    let mut cfg: PinnConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let c = PlantConstants::default();
    let (model, log) = train_pinn(&train, &norm, &cfg, &c)?;
    ensure_parent(out)?;
    model.save(out)?;
    let log_path = out.with_file_name("training_log.csv");
    fs::write(&log_path, training_log_csv(&log))?;
    let last = log.last().map(|e| e.loss_total).unwrap_or(f64::NAN);
    println!(
        "trained flux surrogate ({} parameters, {} epochs, final loss {last:.3e}) -> {}",
        model.n_parameters(),
        log.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train_gbt(corpus: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let train = load_split(corpus, "train")?;
    let norm = load_normalizer(corpus)?;
    let cfg: GbtConfig = read_config(config)?;
    let ens = train_gbt(&train, &cfg, &norm)?;
    ensure_parent(out)?;
    ens.save(out)?;
    println!(
        "trained boosted forecaster ({} trees, {} nodes, final train MSE {:.3e}) -> {}",
        ens.trees.len(),
        ens.n_nodes(),
        ens.train_mse.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_rollout(
    scenario: &Path,
    method: Method,
    model: Option<&Path>,
    normalizer: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (reference, _) = read_trajectory(scenario)?;
    let c = PlantConstants::default();
    let x0 = reference.states[0].clone();
    let horizon = *reference.times.last().unwrap() - reference.times[0];
    let load_norm = |required: bool| -> Result<Normalizer> {
        match normalizer {
            Some(p) => Ok(Normalizer::load(p)?),
            None if required => bail!("--normalizer is required for this method"),
            None => Ok(Normalizer::fit(std::slice::from_ref(&reference))?),
        }
    };
    let (traj, wall) = match method {
        Method::Quasistatic => {
            let norm = load_norm(false)?;
            hybrid_rollout(&mut QuasistaticOracle, 1, &x0, &reference.profile, horizon, &norm, &c)?
        }
        Method::Pinn => {
            let path = model.ok_or_else(|| anyhow!("--model is required for pinn"))?;
            let norm = load_norm(true)?;
            let model = PinnModel::load(path)?;
            if model.normalizer_hash != norm.sha256_hex() {
                bail!("normalizer does not match the one the model was trained with");
            }
            let mut inf = PinnInference::new(&model)?;
            hybrid_rollout(&mut inf, model.cfg.window_w, &x0, &reference.profile, horizon, &norm, &c)?
        }
        Method::Gbt => {
            let path = model.ok_or_else(|| anyhow!("--model is required for gbt"))?;
            let norm = load_norm(true)?;
            let ens = GradientBoostedEnsemble::load(path)?;
            recursive_rollout(&ens, &x0, &reference.profile, horizon, &norm, &c)?
        }
    };
    ensure_parent(out)?;
    write_trajectory(out, &traj, None, &c)?;
    println!("rollout: {} samples in {:.4} s wall -> {}", traj.len(), wall, out.display());
    Ok(())
}

struct ReportRow {
    scenario: String,
    method: &'static str,
    mse: ScaledMse,
    np: f64,
    wall_s: f64,
    speedup: f64,
}

fn cmd_bench(corpus: &Path, models: &Path, out: &Path) -> Result<()> {
    let pinn_path = models.join("pinn.json");
    let gbt_path = models.join("gbt.json");
    let missing: Vec<String> = [&pinn_path, &gbt_path]
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!("missing model artifacts: {}", missing.join(", "));
    }
    let test = load_split(corpus, "test")?;
    let norm = load_normalizer(corpus)?;
    let pinn = PinnModel::load(&pinn_path)?;
    if pinn.normalizer_hash != norm.sha256_hex() {
        bail!("pinn model was trained with a different normalizer");
    }
    let gbt = GradientBoostedEnsemble::load(&gbt_path)?;
    let c = PlantConstants::default();
    let solver_cfg = SolverConfig::default();

    fs::create_dir_all(out.join("plotdata"))?;
    let mut rows: Vec<ReportRow> = Vec::new();
    // Per method: scaled MSEs, power-error MSEs, and speedups per scenario.
    type MethodStats = (Vec<ScaledMse>, Vec<f64>, Vec<f64>);
    let mut per_method: std::collections::BTreeMap<&str, MethodStats> =
        std::collections::BTreeMap::new();
    let mut pinn_residuals = Vec::new();

    for (i, scenario) in test.iter().enumerate() {
        let name = format!("test_{i:03}");
        let x0 = scenario.states[0].clone();
        let horizon = *scenario.times.last().unwrap();
        // re-run the reference here so every method is timed in this
        // process on this hardware
        let (reference, stats) =
            integrate_reference(&x0, &scenario.profile, horizon, 60.0, &solver_cfg, &c)?;
        let t_ref = stats.wall_clock_s;

        let mut inf = PinnInference::new(&pinn)?;
        let (traj_pinn, wall_pinn) = hybrid_rollout(
            &mut inf,
            pinn.cfg.window_w,
            &x0,
            &scenario.profile,
            horizon,
            &norm,
            &c,
        )?;
        pinn_residuals.push(mean_squared_residual(&traj_pinn, &c)?);
        let (traj_gbt, wall_gbt) = recursive_rollout(&gbt, &x0, &scenario.profile, horizon, &norm, &c)?;

        for (method, traj, wall) in [
            ("pinn-hybrid", &traj_pinn, wall_pinn),
            ("gbt", &traj_gbt, wall_gbt),
        ] {
            let mse = scaled_mse(traj, &reference, &norm)?;
            let np = mse_per_min_np(traj, &reference)?;
            let speedup = t_ref / wall;
            rows.push(ReportRow { scenario: name.clone(), method, mse, np, wall_s: wall, speedup });
            let e = per_method.entry(method).or_default();
            e.0.push(mse);
            e.1.push(np);
            e.2.push(speedup);
            write_plotdata(&out.join("plotdata").join(format!("{name}_{method}.csv")), &reference, traj)?;
        }
        rows.push(ReportRow {
            scenario: name.clone(),
            method: "reference",
            mse: ScaledMse { n: 0.0, iodine: 0.0, xenon: 0.0, t_cl: 0.0, x_bank: 0.0, overall: 0.0 },
            np: 0.0,
            wall_s: t_ref,
            speedup: 1.0,
        });
    }

    let mut csv = String::from(
        "scenario,method,scaled_mse_n_x1e3,scaled_mse_iodine_x1e3,scaled_mse_xenon_x1e3,\
         scaled_mse_t_cl_x1e3,scaled_mse_x_bank_x1e3,scaled_mse_overall_x1e3,\
         mse_per_min_np,wall_s,speedup\n",
    );
    for r in &rows {
        let v = r.mse.values();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.scenario, r.method, v[0], v[1], v[2], v[3], v[4], v[5], r.np, r.wall_s, r.speedup
        ));
    }
    fs::write(out.join("report.csv"), csv)?;

    let mut reports = Vec::new();
    for (method, (mses, nps, speedups)) in &per_method {
        let pi = if *method == "pinn-hybrid" {
            Some(pinn_residuals.iter().sum::<f64>() / pinn_residuals.len() as f64)
        } else {
            None
        };
        reports.push(MetricsReport::from_runs(method, 0, mses, nps, speedups, pi)?);
    }
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&reports)?)?;
    println!(
        "benchmarked {} scenarios x 2 surrogates -> {}",
        test.len(),
        out.display()
    );
    for r in &reports {
        println!(
            "  {}: overall scaled MSE (x1e3) {:.3} +/- {:.3}, speedup {:.1} +/- {:.1}",
            r.method,
            r.scaled_mse_overall.mean,
            r.scaled_mse_overall.std,
            r.speedup.mean,
            r.speedup.std
        );
    }
    Ok(())
}

/// Per-scenario plot series: minutes, then ref/pred pairs for the
/// mesh-mean flux, mesh-mean iodine and xenon, cold-leg temperature, and
/// rod position.
fn write_plotdata(path: &Path, reference: &Trajectory, pred: &Trajectory) -> Result<()> {
    let mut s = String::from(
        "t_min,ref_n_mean,pred_n_mean,ref_iodine_mean,pred_iodine_mean,\
         ref_xenon_mean,pred_xenon_mean,ref_t_cl,pred_t_cl,ref_x_bank,pred_x_bank\n",
    );
    let mean = |a: &[f64; N_Z]| a.iter().sum::<f64>() / N_Z as f64;
    for k in 0..reference.len().min(pred.len()) {
        let r = &reference.states[k];
        let p = &pred.states[k];
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            reference.times[k] / 60.0,
            mean(&r.n),
            mean(&p.n),
            mean(&r.iodine),
            mean(&p.iodine),
            mean(&r.xenon),
            mean(&p.xenon),
            r.t_cl,
            p.t_cl,
            r.x_bank,
            p.x_bank
        ));
    }
    fs::write(path, s)?;
    Ok(())
}
