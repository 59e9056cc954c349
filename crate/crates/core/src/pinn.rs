//! Physics-informed attention Seq2Seq surrogate for the stiff flux block,
//! its two-term loss, the training loop, and the hybrid rollout driver.
//!
//! The encoder reads a window of W past normalized states plus turbine
//! demand; the decoder query is the non-stiff part of the target step; the
//! head emits the six flux values through a softplus positive map. The
//! physics loss penalizes the discretized flux equation residual on the
//! prediction.

use crate::dataset::{Normalizer, Provenance, Trajectory};
use crate::error::CoreError;
use crate::plant::{self, PlantConstants, PowerProfile, State, N_STATE, N_Z};
use crate::rng::SplitMix64;
use crate::solver::step_nonstiff_profiled;
use crate::tensor::{NodeId, ParamId, ParamStore, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

/// Shift so a zero pre-activation maps to softplus(shift) = 1 (full power).
pub const SOFTPLUS_SHIFT: f64 = 0.541_324_854_612_918_3;

/// Token width: normalized state (20) + turbine demand (1).
pub const TOKEN_DIM: usize = N_STATE + 1;
/// Query width: normalized non-stiff components (14) + turbine demand (1).
pub const QUERY_DIM: usize = N_STATE - N_Z + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinnConfig {
    /// Encoder window length W.
    pub window_w: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ffn_width: usize,
    /// Data-loss weight.
    pub alpha_d: f64,
    /// Physics-loss weight.
    pub alpha_phi: f64,
    /// Boundary-loss weight; fixed at 0.
    pub alpha_boundary: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Keep every k-th window start when building training samples.
    pub window_stride: usize,
    pub seed: u64,
}

impl Default for PinnConfig {
    fn default() -> Self {
        Self {
            window_w: 30,
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            ffn_width: 128,
            alpha_d: 1.0,
            alpha_phi: 0.1,
            alpha_boundary: 0.0,
            lr: 1e-3,
            epochs: 10,
            batch_size: 32,
            window_stride: 1,
            seed: 0,
        }
    }
}

impl PinnConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.alpha_boundary != 0.0 {
            return Err(CoreError::Config("alpha_boundary is fixed at 0".into()));
        }
        if self.alpha_d < 0.0 || self.alpha_phi < 0.0 || (self.alpha_d == 0.0 && self.alpha_phi == 0.0)
        {
            return Err(CoreError::Config(
                "alpha_d, alpha_phi must be >= 0 and not both 0".into(),
            ));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(CoreError::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.window_w == 0 || self.encoder_layers == 0 || self.ffn_width == 0 {
            return Err(CoreError::Config("window_w, encoder_layers, ffn_width must be >= 1".into()));
        }
        if self.batch_size == 0 || self.window_stride == 0 {
            return Err(CoreError::Config("batch_size and window_stride must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(CoreError::Config("lr must be > 0".into()));
        }
        Ok(())
    }
}

/// Parameter handles for one forward pass.
struct PinnParamIds {
    embed_w: ParamId,
    embed_b: ParamId,
    layers: Vec<EncLayerIds>,
    query_w: ParamId,
    query_b: ParamId,
    cross_wq: ParamId,
    cross_wk: ParamId,
    cross_wv: ParamId,
    cross_wo: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

struct EncLayerIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

/// Trained flux surrogate: config, parameters, and the hash of the
/// normalizer it expects.
pub struct PinnModel {
    pub cfg: PinnConfig,
    pub params: ParamStore,
    pub normalizer_hash: String,
}

fn init_params(cfg: &PinnConfig, rng: &mut SplitMix64) -> Result<(ParamStore, PinnParamIds), CoreError> {
    let mut s = ParamStore::new();
    let d = cfg.d_model;
    let embed_w = s.add_xavier("embed.w", TOKEN_DIM, d, rng)?;
    let embed_b = s.add_zeros("embed.b", vec![d])?;
    let mut layers = Vec::with_capacity(cfg.encoder_layers);
    for l in 0..cfg.encoder_layers {
        layers.push(EncLayerIds {
            wq: s.add_xavier(&format!("enc{l}.wq"), d, d, rng)?,
            wk: s.add_xavier(&format!("enc{l}.wk"), d, d, rng)?,
            wv: s.add_xavier(&format!("enc{l}.wv"), d, d, rng)?,
            wo: s.add_xavier(&format!("enc{l}.wo"), d, d, rng)?,
            ffn_w1: s.add_xavier(&format!("enc{l}.ffn.w1"), d, cfg.ffn_width, rng)?,
            ffn_b1: s.add_zeros(&format!("enc{l}.ffn.b1"), vec![cfg.ffn_width])?,
            ffn_w2: s.add_xavier(&format!("enc{l}.ffn.w2"), cfg.ffn_width, d, rng)?,
            ffn_b2: s.add_zeros(&format!("enc{l}.ffn.b2"), vec![d])?,
        });
    }
    let query_w = s.add_xavier("query.w", QUERY_DIM, d, rng)?;
    let query_b = s.add_zeros("query.b", vec![d])?;
    let cross_wq = s.add_xavier("cross.wq", d, d, rng)?;
    let cross_wk = s.add_xavier("cross.wk", d, d, rng)?;
    let cross_wv = s.add_xavier("cross.wv", d, d, rng)?;
    let cross_wo = s.add_xavier("cross.wo", d, d, rng)?;
    let head_w = s.add_xavier("head.w", d, N_Z, rng)?;
    let head_b = s.add_zeros("head.b", vec![N_Z])?;
    let ids = PinnParamIds {
        embed_w,
        embed_b,
        layers,
        query_w,
        query_b,
        cross_wq,
        cross_wk,
        cross_wv,
        cross_wo,
        head_w,
        head_b,
    };
    Ok((s, ids))
}

fn param_ids(cfg: &PinnConfig, s: &ParamStore) -> Result<PinnParamIds, CoreError> {
    let get = |name: &str| {
        s.id_by_name(name)
            .ok_or_else(|| CoreError::Config(format!("checkpoint is missing parameter '{name}'")))
    };
    let mut layers = Vec::with_capacity(cfg.encoder_layers);
    for l in 0..cfg.encoder_layers {
        layers.push(EncLayerIds {
            wq: get(&format!("enc{l}.wq"))?,
            wk: get(&format!("enc{l}.wk"))?,
            wv: get(&format!("enc{l}.wv"))?,
            wo: get(&format!("enc{l}.wo"))?,
            ffn_w1: get(&format!("enc{l}.ffn.w1"))?,
            ffn_b1: get(&format!("enc{l}.ffn.b1"))?,
            ffn_w2: get(&format!("enc{l}.ffn.w2"))?,
            ffn_b2: get(&format!("enc{l}.ffn.b2"))?,
        });
    }
    Ok(PinnParamIds {
        embed_w: get("embed.w")?,
        embed_b: get("embed.b")?,
        layers,
        query_w: get("query.w")?,
        query_b: get("query.b")?,
        cross_wq: get("cross.wq")?,
        cross_wk: get("cross.wk")?,
        cross_wv: get("cross.wv")?,
        cross_wo: get("cross.wo")?,
        head_w: get("head.w")?,
        head_b: get("head.b")?,
    })
}

/// Sinusoidal positional encoding, (w, d) row-major.
pub fn positional_encoding(w: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; w * d];
    for pos in 0..w {
        for i in 0..d {
            let exponent = 2.0 * (i / 2) as f64 / d as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Nodes bound once per tape and reused across the samples of a batch.
struct BoundParams {
    embed_w: NodeId,
    embed_b: NodeId,
    layers: Vec<[NodeId; 8]>,
    query_w: NodeId,
    query_b: NodeId,
    cross: [NodeId; 4],
    head_w: NodeId,
    head_b: NodeId,
    pe: NodeId,
}

fn bind_params(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &PinnParamIds,
    cfg: &PinnConfig,
) -> Result<BoundParams, CoreError> {
    let pe = Tensor::new(
        vec![cfg.window_w, cfg.d_model],
        positional_encoding(cfg.window_w, cfg.d_model),
    )?;
    Ok(BoundParams {
        embed_w: store.bind(tape, ids.embed_w),
        embed_b: store.bind(tape, ids.embed_b),
        layers: ids
            .layers
            .iter()
            .map(|l| {
                [
                    store.bind(tape, l.wq),
                    store.bind(tape, l.wk),
                    store.bind(tape, l.wv),
                    store.bind(tape, l.wo),
                    store.bind(tape, l.ffn_w1),
                    store.bind(tape, l.ffn_b1),
                    store.bind(tape, l.ffn_w2),
                    store.bind(tape, l.ffn_b2),
                ]
            })
            .collect(),
        query_w: store.bind(tape, ids.query_w),
        query_b: store.bind(tape, ids.query_b),
        cross: [
            store.bind(tape, ids.cross_wq),
            store.bind(tape, ids.cross_wk),
            store.bind(tape, ids.cross_wv),
            store.bind(tape, ids.cross_wo),
        ],
        head_w: store.bind(tape, ids.head_w),
        head_b: store.bind(tape, ids.head_b),
        pe: tape.constant(pe),
    })
}

/// Forward pass for one sample: window (W, 21) and query (1, 15) to raw
/// positive flux (1, 6).
fn forward(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &PinnConfig,
    window: NodeId,
    query: NodeId,
) -> Result<NodeId, CoreError> {
    let emb = tape.linear(window, bp.embed_w, bp.embed_b)?;
    let mut x = tape.add(emb, bp.pe)?;
    for l in &bp.layers {
        let attn = tape.multi_head_attention(x, x, x, cfg.heads, l[0], l[1], l[2], l[3])?;
        let res = tape.add(x, attn)?;
        x = tape.layer_norm(res)?;
        let h1 = tape.linear(x, l[4], l[5])?;
        let a1 = tape.relu(h1)?;
        let h2 = tape.linear(a1, l[6], l[7])?;
        let res2 = tape.add(x, h2)?;
        x = tape.layer_norm(res2)?;
    }
    let q = tape.linear(query, bp.query_w, bp.query_b)?;
    let cross = tape.multi_head_attention(q, x, x, cfg.heads, bp.cross[0], bp.cross[1], bp.cross[2], bp.cross[3])?;
    let qres = tape.add(q, cross)?;
    let qn = tape.layer_norm(qres)?;
    let z = tape.linear(qn, bp.head_w, bp.head_b)?;
    let shifted = tape.offset(z, SOFTPLUS_SHIFT)?;
    tape.softplus(shifted)
}

/// Non-stiff context of one step, in raw (physical) units.
#[derive(Debug, Clone, Copy)]
pub struct NonStiffStep {
    pub iodine: [f64; N_Z],
    pub xenon: [f64; N_Z],
    pub t_cl: f64,
    pub x_bank: f64,
    pub p_turb: f64,
}

impl NonStiffStep {
    pub fn from_state(s: &State, p_turb: f64) -> Self {
        Self { iodine: s.iodine, xenon: s.xenon, t_cl: s.t_cl, x_bank: s.x_bank, p_turb }
    }
}

/// Per-mesh bias of the affine-in-n reactivity at fixed non-stiff state:
/// rho_i(n) = bias_i + alpha_pow * n_i with the -alpha_pow constant folded
/// into the bias.
fn residual_bias(ns: &NonStiffStep, c: &PlantConstants) -> [f64; N_Z] {
    let rod = plant::rod_reactivity_unchecked(ns.x_bank.clamp(0.0, 1.0), c);
    let mut bias = [0.0; N_Z];
    for i in 0..N_Z {
        bias[i] = rod[i] + c.alpha_mod * (ns.t_cl - c.t_ref) - c.c_x * (ns.xenon[i] - 1.0)
            - c.alpha_pow;
    }
    bias
}

/// Reflective-end Laplacian as a (6, 6) matrix acting on row vectors from
/// the right: (n L^T)_i = lap(n)_i.
fn laplacian_matrix_t() -> Vec<f64> {
    let mut l = vec![0.0; N_Z * N_Z];
    // row i of L
    for i in 0..N_Z {
        if i == 0 {
            l[i * N_Z] = -1.0;
            l[i * N_Z + 1] = 1.0;
        } else if i == N_Z - 1 {
            l[i * N_Z + N_Z - 2] = 1.0;
            l[i * N_Z + N_Z - 1] = -1.0;
        } else {
            l[i * N_Z + i - 1] = 1.0;
            l[i * N_Z + i] = -2.0;
            l[i * N_Z + i + 1] = 1.0;
        }
    }
    // transpose so matmul(n_row, out) applies L
    let mut lt = vec![0.0; N_Z * N_Z];
    for r in 0..N_Z {
        for cc in 0..N_Z {
            lt[cc * N_Z + r] = l[r * N_Z + cc];
        }
    }
    lt
}

/// Mean squared physics residual over a full trajectory (all steps and
/// meshes), using the trajectory's own demand samples.
pub fn mean_squared_residual(traj: &Trajectory, c: &PlantConstants) -> Result<f64, CoreError> {
    let n_seq: Vec<[f64; N_Z]> = traj.states.iter().map(|s| s.n).collect();
    let ns_seq: Vec<NonStiffStep> = traj
        .states
        .iter()
        .enumerate()
        .map(|(k, s)| NonStiffStep::from_state(s, traj.p_turb_at(k)))
        .collect();
    let dt = if traj.times.len() >= 2 {
        traj.times[1] - traj.times[0]
    } else {
        return Err(CoreError::Shape("residual needs >= 2 samples".into()));
    };
    let res = physics_residual(&n_seq, &ns_seq, dt, c)?;
    let total: f64 = res.iter().flat_map(|r| r.iter()).map(|&v| v * v).sum();
    Ok(total / (res.len() * N_Z) as f64)
}

/// Discrete, Lambda-scaled flux-equation residual:
/// r_i(t) = rho_i(x(t))·n_i(t) + Lambda·kappa·lap(n(t))_i
///          − Lambda·(n_i(t) − n_i(t−Δt))/Δt,
/// evaluated at steps 1..len for a flux sequence and its non-stiff context.
pub fn physics_residual(
    n_seq: &[[f64; N_Z]],
    nonstiff_seq: &[NonStiffStep],
    dt_s: f64,
    c: &PlantConstants,
) -> Result<Vec<[f64; N_Z]>, CoreError> {
    if n_seq.len() != nonstiff_seq.len() {
        return Err(CoreError::Shape(format!(
            "flux sequence length {} != non-stiff sequence length {}",
            n_seq.len(),
            nonstiff_seq.len()
        )));
    }
    if n_seq.len() < 2 {
        return Err(CoreError::Shape("residual needs sequences of length >= 2".into()));
    }
    if dt_s <= 0.0 {
        return Err(CoreError::Domain("dt_s must be > 0".into()));
    }
    let mut out = Vec::with_capacity(n_seq.len() - 1);
    for t in 1..n_seq.len() {
        let n = &n_seq[t];
        let ns = &nonstiff_seq[t];
        let rod = plant::rod_reactivity_unchecked(ns.x_bank.clamp(0.0, 1.0), c);
        let rho = plant::reactivity(n, &ns.xenon, ns.t_cl, &rod, c);
        let mut r = [0.0; N_Z];
        for i in 0..N_Z {
            let lap = match i {
                0 => n[1] - n[0],
                i if i == N_Z - 1 => n[N_Z - 2] - n[N_Z - 1],
                _ => n[i - 1] - 2.0 * n[i] + n[i + 1],
            };
            r[i] = rho[i] * n[i] + c.lambda_prompt * c.kappa * lap
                - c.lambda_prompt * (n[i] - n_seq[t - 1][i]) / dt_s;
        }
        out.push(r);
    }
    Ok(out)
}

/// Tape version of the single-step residual; differentiable through the
/// predicted flux node `n_pred` (shape (1, 6)).
fn residual_node(
    tape: &mut Tape,
    n_pred: NodeId,
    n_prev: &[f64; N_Z],
    ns_next: &NonStiffStep,
    dt_s: f64,
    c: &PlantConstants,
) -> Result<NodeId, CoreError> {
    let bias = residual_bias(ns_next, c);
    let bias_node = tape.constant(Tensor::new(vec![N_Z], bias.to_vec())?);
    let a = tape.scale(n_pred, c.alpha_pow)?;
    let rho = tape.add_bias(a, bias_node)?;
    let rho_n = tape.mul(rho, n_pred)?;
    let lt = tape.constant(Tensor::new(vec![N_Z, N_Z], laplacian_matrix_t())?);
    let lap = tape.matmul(n_pred, lt)?;
    let lap_term = tape.scale(lap, c.lambda_prompt * c.kappa)?;
    let prev = tape.constant(Tensor::new(vec![1, N_Z], n_prev.to_vec())?);
    let diff = tape.sub(n_pred, prev)?;
    let deriv = tape.scale(diff, c.lambda_prompt / dt_s)?;
    let s = tape.add(rho_n, lap_term)?;
    tape.sub(s, deriv)
}

/// One training sample, referencing its trajectory's token matrix.
#[derive(Debug, Clone, Copy)]
struct SampleRef {
    traj: usize,
    /// Target step index (predicts states[t] from the window ending at t-1).
    t: usize,
}

/// Precomputed per-trajectory training arrays.
struct TrajData {
    /// (len, TOKEN_DIM) row-major normalized tokens.
    tokens: Vec<f64>,
    /// Raw flux per step.
    flux: Vec<[f64; N_Z]>,
    /// Raw non-stiff context per step (with turbine demand).
    nonstiff: Vec<NonStiffStep>,
    /// Normalized query features per step.
    query: Vec<[f64; QUERY_DIM]>,
    len: usize,
}

fn prepare_trajectory(traj: &Trajectory, norm: &Normalizer) -> TrajData {
    let len = traj.len();
    let mut tokens = vec![0.0; len * TOKEN_DIM];
    let mut flux = Vec::with_capacity(len);
    let mut nonstiff = Vec::with_capacity(len);
    let mut query = Vec::with_capacity(len);
    for k in 0..len {
        let z = norm.normalize(&traj.states[k]);
        let p = traj.p_turb_at(k);
        tokens[k * TOKEN_DIM..k * TOKEN_DIM + N_STATE].copy_from_slice(&z);
        tokens[k * TOKEN_DIM + N_STATE] = p;
        flux.push(traj.states[k].n);
        nonstiff.push(NonStiffStep::from_state(&traj.states[k], p));
        let mut q = [0.0; QUERY_DIM];
        q[..N_STATE - N_Z].copy_from_slice(&z[N_Z..]);
        q[QUERY_DIM - 1] = p;
        query.push(q);
    }
    TrajData { tokens, flux, nonstiff, query, len }
}

/// Window tensor (W, TOKEN_DIM) ending at step `end` inclusive; steps
/// before the trajectory start are replicas of step 0.
fn window_tokens(td: &TrajData, end: usize, w: usize, out: &mut Vec<f64>) {
    out.clear();
    for k in 0..w {
        let idx = (end + k + 1).saturating_sub(w).min(td.len - 1);
        out.extend_from_slice(&td.tokens[idx * TOKEN_DIM..(idx + 1) * TOKEN_DIM]);
    }
}

/// Batch loss: total = alpha_D·L_D + alpha_phi·L_phi. Returns the three
/// scalar nodes (total, data, physics).
fn batch_loss(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &PinnConfig,
    data: &[TrajData],
    batch: &[SampleRef],
    dt_s: f64,
    c: &PlantConstants,
) -> Result<(NodeId, NodeId, NodeId), CoreError> {
    if batch.is_empty() {
        return Err(CoreError::Training("empty batch".into()));
    }
    let mut wbuf = Vec::new();
    let mut data_terms = Vec::with_capacity(batch.len());
    let mut phys_terms = Vec::with_capacity(batch.len());
    for s in batch {
        let td = &data[s.traj];
        window_tokens(td, s.t - 1, cfg.window_w, &mut wbuf);
        let window = tape.constant(Tensor::new(vec![cfg.window_w, TOKEN_DIM], wbuf.clone())?);
        let query = tape.constant(Tensor::new(vec![1, QUERY_DIM], td.query[s.t].to_vec())?);
        let n_pred = forward(tape, bp, cfg, window, query)?;
        let target = tape.constant(Tensor::new(vec![1, N_Z], td.flux[s.t].to_vec())?);
        data_terms.push(tape.mse(n_pred, target)?);
        let r = residual_node(tape, n_pred, &td.flux[s.t - 1], &td.nonstiff[s.t], dt_s, c)?;
        let r2 = tape.mul(r, r)?;
        phys_terms.push(tape.mean(r2)?);
    }
    let mean_of = |tape: &mut Tape, terms: &[NodeId]| -> Result<NodeId, CoreError> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        tape.scale(acc, 1.0 / terms.len() as f64)
    };
    let l_d = mean_of(tape, &data_terms)?;
    let l_phi = mean_of(tape, &phys_terms)?;
    let a = tape.scale(l_d, cfg.alpha_d)?;
    let b = tape.scale(l_phi, cfg.alpha_phi)?;
    let total = tape.add(a, b)?;
    Ok((total, l_d, l_phi))
}

/// Finite-difference check of the end-to-end training loss gradient.
///
/// Builds the batch loss on a freshly initialised model (deterministic in
/// `seed`), backpropagates, and compares the analytic gradient against
/// central differences at three probe positions of every parameter tensor.
/// Returns the worst relative error observed.
pub fn loss_gradcheck(
    train: &[Trajectory],
    norm: &Normalizer,
    cfg: &PinnConfig,
    c: &PlantConstants,
    seed: u64,
) -> Result<f64, CoreError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::Training("empty training corpus".into()));
    }
    let dt_s = 60.0;
    let data: Vec<TrajData> = train.iter().map(|t| prepare_trajectory(t, norm)).collect();
    if data[0].len < 3 {
        return Err(CoreError::Training("trajectory too short for a gradcheck batch".into()));
    }
    let batch = [SampleRef { traj: 0, t: 1 }, SampleRef { traj: 0, t: data[0].len - 1 }];
    let mut rng = SplitMix64::new(seed);
    let (store, ids) = init_params(cfg, &mut rng)?;
    let mut tape = Tape::new();
    let bp = bind_params(&mut tape, &store, &ids, cfg)?;
    let (total, _, _) = batch_loss(&mut tape, &bp, cfg, &data, &batch, dt_s, c)?;
    let grads = tape.backward(total)?;

    let eval = |pid: ParamId, j: usize, delta: f64| -> Result<f64, CoreError> {
        let mut st2 = ParamStore::new();
        for i in 0..store.len() {
            let mut tensor = store.value(i).clone();
            if i == pid {
                tensor.data[j] += delta;
            }
            st2.add(store.name(i), tensor)?;
        }
        let ids2 = param_ids(cfg, &st2)?;
        let mut t2 = Tape::new();
        let bp2 = bind_params(&mut t2, &st2, &ids2, cfg)?;
        let (tt, _, _) = batch_loss(&mut t2, &bp2, cfg, &data, &batch, dt_s, c)?;
        Ok(t2.value(tt).scalar_value())
    };

    let h = 1e-6;
    let mut worst = 0.0f64;
    // Parameter tensors enter the tape in store order, so the node id of
    // parameter `pid` is `pid` itself (bound before any op nodes).
    for (pid, grad) in grads.iter().enumerate().take(store.len()) {
        let g = grad
            .as_ref()
            .ok_or_else(|| CoreError::Training(format!("no gradient for {}", store.name(pid))))?;
        let n = g.data.len();
        for &j in &[0, n / 2, n - 1] {
            let fd = (eval(pid, j, h)? - eval(pid, j, -h)?) / (2.0 * h);
            let an = g.data[j];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// One row of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_data: f64,
    pub loss_phys: f64,
    pub seconds: f64,
}

pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss_total,loss_data,loss_phys,seconds\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            e.epoch, e.loss_total, e.loss_data, e.loss_phys, e.seconds
        ));
    }
    s
}

/// Mini-batch Adam training of the flux surrogate on normalized
/// trajectories. Deterministic in `cfg.seed`. A non-finite loss aborts the
/// run and returns the last epoch's parameters.
pub fn train_pinn(
    train: &[Trajectory],
    norm: &Normalizer,
    cfg: &PinnConfig,
    c: &PlantConstants,
) -> Result<(PinnModel, Vec<EpochLog>), CoreError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::Training("empty training corpus".into()));
    }
    let dt_s = 60.0;
    let data: Vec<TrajData> = train.iter().map(|t| prepare_trajectory(t, norm)).collect();
    let mut samples = Vec::new();
    for (ti, td) in data.iter().enumerate() {
        let mut t = 1;
        while t < td.len {
            samples.push(SampleRef { traj: ti, t });
            t += 1.max(cfg.window_stride);
        }
    }
    if samples.is_empty() {
        return Err(CoreError::Training("no training windows (trajectories too short)".into()));
    }

    let mut rng = SplitMix64::new(cfg.seed);
    let (mut store, ids) = init_params(cfg, &mut rng)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut snapshot = store.clone();
    let start = Instant::now();

    'epochs: for epoch in 0..cfg.epochs {
        // Fisher-Yates shuffle, seeded
        for i in (1..samples.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            samples.swap(i, j);
        }
        let (mut sum_t, mut sum_d, mut sum_p, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in samples.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bp = bind_params(&mut tape, &store, &ids, cfg)?;
            let built = batch_loss(&mut tape, &bp, cfg, &data, chunk, dt_s, c);
            let (total, l_d, l_phi) = match built {
                Ok(v) => v,
                Err(CoreError::Training(msg)) => {
                    eprintln!("training aborted at epoch {epoch}: {msg}; keeping last checkpoint");
                    store = snapshot;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let grads = tape.backward(total)?;
            store.zero_grad();
            let mut apply = |pid: ParamId, nid: NodeId| -> Result<(), CoreError> {
                if let Some(g) = &grads[nid] {
                    store.accumulate_grad(pid, g)?;
                }
                Ok(())
            };
            apply(ids.embed_w, bp.embed_w)?;
            apply(ids.embed_b, bp.embed_b)?;
            for (l, n) in ids.layers.iter().zip(&bp.layers) {
                apply(l.wq, n[0])?;
                apply(l.wk, n[1])?;
                apply(l.wv, n[2])?;
                apply(l.wo, n[3])?;
                apply(l.ffn_w1, n[4])?;
                apply(l.ffn_b1, n[5])?;
                apply(l.ffn_w2, n[6])?;
                apply(l.ffn_b2, n[7])?;
            }
            apply(ids.query_w, bp.query_w)?;
            apply(ids.query_b, bp.query_b)?;
            apply(ids.cross_wq, bp.cross[0])?;
            apply(ids.cross_wk, bp.cross[1])?;
            apply(ids.cross_wv, bp.cross[2])?;
            apply(ids.cross_wo, bp.cross[3])?;
            apply(ids.head_w, bp.head_w)?;
            apply(ids.head_b, bp.head_b)?;
            store.adam_step(cfg.lr, 0.9, 0.999, 1e-8)?;
            sum_t += tape.value(total).scalar_value();
            sum_d += tape.value(l_d).scalar_value();
            sum_p += tape.value(l_phi).scalar_value();
            batches += 1;
        }
        snapshot = store.clone();
        log.push(EpochLog {
            epoch,
            loss_total: sum_t / batches as f64,
            loss_data: sum_d / batches as f64,
            loss_phys: sum_p / batches as f64,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let model = PinnModel { cfg: cfg.clone(), params: store, normalizer_hash: norm.sha256_hex() };
    Ok((model, log))
}

impl PinnModel {
    /// Slow (tape-based) single prediction; the rollout uses
    /// [`PinnInference`] instead.
    pub fn predict(&self, window: &[f64], query: &[f64; QUERY_DIM]) -> Result<[f64; N_Z], CoreError> {
        let cfg = &self.cfg;
        if window.len() != cfg.window_w * TOKEN_DIM {
            return Err(CoreError::Shape(format!(
                "window must have {} values, got {}",
                cfg.window_w * TOKEN_DIM,
                window.len()
            )));
        }
        let ids = param_ids(cfg, &self.params)?;
        let mut tape = Tape::new();
        let bp = bind_params(&mut tape, &self.params, &ids, cfg)?;
        let w = tape.constant(Tensor::new(vec![cfg.window_w, TOKEN_DIM], window.to_vec())?);
        let q = tape.constant(Tensor::new(vec![1, QUERY_DIM], query.to_vec())?);
        let out = forward(&mut tape, &bp, cfg, w, q)?;
        let mut n = [0.0; N_Z];
        n.copy_from_slice(&tape.value(out).data);
        Ok(n)
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        let meta = serde_json::json!({
            "kind": "pinn-flux-surrogate",
            "config": self.cfg,
            "normalizer_hash": self.normalizer_hash,
        });
        self.params.save_with_meta(path, meta)
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let (params, meta) = ParamStore::load_with_meta(path)?;
        let cfg: PinnConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| CoreError::Config("checkpoint header has no config".into()))?,
        )?;
        let normalizer_hash = meta
            .get("normalizer_hash")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        cfg.validate()?;
        param_ids(&cfg, &params)?;
        Ok(Self { cfg, params, normalizer_hash })
    }
}

/// Allocation-free forward pass over raw weight slices, used inside the
/// timed rollout loop.
pub struct PinnInference {
    cfg: PinnConfig,
    // weights, copied out of the store
    embed_w: Vec<f64>,
    embed_b: Vec<f64>,
    layers: Vec<InferLayer>,
    query_w: Vec<f64>,
    query_b: Vec<f64>,
    cross: [Vec<f64>; 4],
    head_w: Vec<f64>,
    head_b: Vec<f64>,
    pe: Vec<f64>,
    // scratch buffers
    x: Vec<f64>,
    qkv: [Vec<f64>; 3],
    scores: Vec<f64>,
    ctx: Vec<f64>,
    tmp: Vec<f64>,
    hid: Vec<f64>,
    qrow: Vec<f64>,
    qtmp: Vec<f64>,
}

struct InferLayer {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

fn gemm_rm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn layer_norm_rows(x: &mut [f64], rows: usize, d: usize) {
    for r in 0..rows {
        let row = &mut x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + crate::tensor::LAYER_NORM_EPS).sqrt();
        for v in row {
            *v = (*v - mean) * inv;
        }
    }
}

impl PinnInference {
    pub fn new(model: &PinnModel) -> Result<Self, CoreError> {
        let cfg = model.cfg.clone();
        let ids = param_ids(&cfg, &model.params)?;
        let get = |id: ParamId| model.params.value(id).data.clone();
        let w = cfg.window_w;
        let d = cfg.d_model;
        let f = cfg.ffn_width;
        Ok(Self {
            embed_w: get(ids.embed_w),
            embed_b: get(ids.embed_b),
            layers: ids
                .layers
                .iter()
                .map(|l| InferLayer {
                    wq: get(l.wq),
                    wk: get(l.wk),
                    wv: get(l.wv),
                    wo: get(l.wo),
                    w1: get(l.ffn_w1),
                    b1: get(l.ffn_b1),
                    w2: get(l.ffn_w2),
                    b2: get(l.ffn_b2),
                })
                .collect(),
            query_w: get(ids.query_w),
            query_b: get(ids.query_b),
            cross: [get(ids.cross_wq), get(ids.cross_wk), get(ids.cross_wv), get(ids.cross_wo)],
            head_w: get(ids.head_w),
            head_b: get(ids.head_b),
            pe: positional_encoding(w, d),
            x: vec![0.0; w * d],
            qkv: [vec![0.0; w * d], vec![0.0; w * d], vec![0.0; w * d]],
            scores: vec![0.0; w * w],
            ctx: vec![0.0; w * d],
            tmp: vec![0.0; w * d],
            hid: vec![0.0; w * f],
            qrow: vec![0.0; d],
            qtmp: vec![0.0; d],
            cfg,
        })
    }

    /// Self-attention of `x` (rows, d) into `out`, heads split on columns.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        heads: usize,
        d: usize,
        s_q: usize,
        s_k: usize,
        q: &[f64],
        k: &[f64],
        v: &[f64],
        scores: &mut [f64],
        out: &mut [f64],
    ) {
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        out[..s_q * d].fill(0.0);
        for h in 0..heads {
            let off = h * dh;
            for iq in 0..s_q {
                let qrow = &q[iq * d + off..iq * d + off + dh];
                let mut mx = f64::NEG_INFINITY;
                for ik in 0..s_k {
                    let krow = &k[ik * d + off..ik * d + off + dh];
                    let mut dot = 0.0;
                    for j in 0..dh {
                        dot += qrow[j] * krow[j];
                    }
                    let sc = dot * scale;
                    scores[iq * s_k + ik] = sc;
                    mx = mx.max(sc);
                }
                let mut sum = 0.0;
                for ik in 0..s_k {
                    let e = (scores[iq * s_k + ik] - mx).max(-700.0).exp();
                    scores[iq * s_k + ik] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                let orow = &mut out[iq * d + off..iq * d + off + dh];
                for ik in 0..s_k {
                    let wgt = scores[iq * s_k + ik] * inv;
                    let vrow = &v[ik * d + off..ik * d + off + dh];
                    for j in 0..dh {
                        orow[j] += wgt * vrow[j];
                    }
                }
            }
        }
    }

    /// Predict the next raw flux from a normalized window (W*21) and query.
    pub fn predict(&mut self, window: &[f64], query: &[f64; QUERY_DIM]) -> Result<[f64; N_Z], CoreError> {
        let w = self.cfg.window_w;
        let d = self.cfg.d_model;
        let f = self.cfg.ffn_width;
        let h = self.cfg.heads;
        if window.len() != w * TOKEN_DIM {
            return Err(CoreError::Shape(format!(
                "window must have {} values, got {}",
                w * TOKEN_DIM,
                window.len()
            )));
        }
        // embed + positional encoding
        gemm_rm(w, TOKEN_DIM, d, window, &self.embed_w, &mut self.x);
        for r in 0..w {
            for j in 0..d {
                self.x[r * d + j] += self.embed_b[j] + self.pe[r * d + j];
            }
        }
        for layer in &self.layers {
            gemm_rm(w, d, d, &self.x, &layer.wq, &mut self.qkv[0]);
            gemm_rm(w, d, d, &self.x, &layer.wk, &mut self.qkv[1]);
            gemm_rm(w, d, d, &self.x, &layer.wv, &mut self.qkv[2]);
            Self::attention(h, d, w, w, &self.qkv[0], &self.qkv[1], &self.qkv[2], &mut self.scores, &mut self.ctx);
            gemm_rm(w, d, d, &self.ctx, &layer.wo, &mut self.tmp);
            for i in 0..w * d {
                self.x[i] += self.tmp[i];
            }
            layer_norm_rows(&mut self.x, w, d);
            gemm_rm(w, d, f, &self.x, &layer.w1, &mut self.hid);
            for r in 0..w {
                for j in 0..f {
                    let v = self.hid[r * f + j] + layer.b1[j];
                    self.hid[r * f + j] = v.max(0.0);
                }
            }
            gemm_rm(w, f, d, &self.hid, &layer.w2, &mut self.tmp);
            for r in 0..w {
                for j in 0..d {
                    self.x[r * d + j] += self.tmp[r * d + j] + layer.b2[j];
                }
            }
            layer_norm_rows(&mut self.x, w, d);
        }
        // decoder query + cross attention
        gemm_rm(1, QUERY_DIM, d, query, &self.query_w, &mut self.qrow);
        for j in 0..d {
            self.qrow[j] += self.query_b[j];
        }
        gemm_rm(1, d, d, &self.qrow, &self.cross[0], &mut self.qtmp);
        let qproj = self.qtmp.clone();
        gemm_rm(w, d, d, &self.x, &self.cross[1], &mut self.qkv[0]);
        gemm_rm(w, d, d, &self.x, &self.cross[2], &mut self.qkv[1]);
        Self::attention(h, d, 1, w, &qproj, &self.qkv[0], &self.qkv[1], &mut self.scores, &mut self.ctx);
        gemm_rm(1, d, d, &self.ctx[..d], &self.cross[3], &mut self.qtmp);
        for j in 0..d {
            self.qrow[j] += self.qtmp[j];
        }
        layer_norm_rows(&mut self.qrow, 1, d);
        let mut z = [0.0; N_Z];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut acc = self.head_b[j];
            for i in 0..d {
                acc += self.qrow[i] * self.head_w[i * N_Z + j];
            }
            let v = acc + SOFTPLUS_SHIFT;
            *zj = v.max(0.0) + (-v.abs()).exp().ln_1p();
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Training("non-finite flux prediction".into()));
        }
        Ok(z)
    }
}

/// Anything that can stand in for the flux surrogate in a hybrid rollout.
pub trait FluxPredictor {
    fn predict_flux(
        &mut self,
        window: &[f64],
        query: &[f64; QUERY_DIM],
        next_nonstiff: &State,
        c: &PlantConstants,
    ) -> Result<[f64; N_Z], CoreError>;
}

impl FluxPredictor for PinnInference {
    fn predict_flux(
        &mut self,
        window: &[f64],
        query: &[f64; QUERY_DIM],
        _next: &State,
        _c: &PlantConstants,
    ) -> Result<[f64; N_Z], CoreError> {
        self.predict(window, query)
    }
}

/// Quasi-static flux oracle: solves the algebraic flux equation instead of
/// calling a learned model. Validates the rollout plumbing.
pub struct QuasistaticOracle;

impl FluxPredictor for QuasistaticOracle {
    fn predict_flux(
        &mut self,
        _window: &[f64],
        _query: &[f64; QUERY_DIM],
        next: &State,
        c: &PlantConstants,
    ) -> Result<[f64; N_Z], CoreError> {
        plant::solve_quasistatic_flux(&next.iodine, &next.xenon, next.t_cl, next.x_bank, c)
    }
}

/// Hybrid 60 s-step rollout: the surrogate predicts the stiff flux, the
/// explicit Euler sub-stepper advances the non-stiff block. The window
/// warms up with `window_w` replicas of x0. Returns the trajectory and the
/// wall clock of the rollout loop only.
pub fn hybrid_rollout<P: FluxPredictor>(
    predictor: &mut P,
    window_w: usize,
    x0: &State,
    profile: &PowerProfile,
    horizon_s: f64,
    norm: &Normalizer,
    c: &PlantConstants,
) -> Result<(Trajectory, f64), CoreError> {
    x0.validate()?;
    let dt_s = 60.0;
    let n_steps = (horizon_s / dt_s).round() as usize;
    if n_steps == 0 || (n_steps as f64 * dt_s - horizon_s).abs() > 1e-9 {
        return Err(CoreError::Domain("horizon must be a positive multiple of 60 s".into()));
    }
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    states.push(x0.clone());

    // ring-free window buffer of normalized tokens, oldest first
    let mut window = vec![0.0; window_w * TOKEN_DIM];
    let token_of = |s: &State, p: f64, out: &mut [f64]| {
        let z = norm.normalize(s);
        out[..N_STATE].copy_from_slice(&z);
        out[N_STATE] = p;
    };
    let mut tok = vec![0.0; TOKEN_DIM];
    token_of(x0, profile.eval(0.0), &mut tok);
    for kk in 0..window_w {
        window[kk * TOKEN_DIM..(kk + 1) * TOKEN_DIM].copy_from_slice(&tok);
    }

    let start = Instant::now();
    let mut x = x0.clone();
    for k in 0..n_steps {
        let t = k as f64 * dt_s;
        let t_next = t + dt_s;
        let p_next = profile.eval(t_next);
        // advance the non-stiff block first; flux is overwritten below
        let mut x_next =
            step_nonstiff_profiled(&x, &x.n, |s| profile.eval(s), t, dt_s, c)?;
        let zq = norm.normalize(&x_next);
        let mut query = [0.0; QUERY_DIM];
        query[..N_STATE - N_Z].copy_from_slice(&zq[N_Z..]);
        query[QUERY_DIM - 1] = p_next;
        let n_next = predictor
            .predict_flux(&window, &query, &x_next, c)
            .map_err(|e| CoreError::Training(format!("flux prediction failed at step {k}: {e}")))?;
        if n_next.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Training(format!("non-finite flux at step {k}")));
        }
        x_next.n = n_next;
        // Redo the iodine/xenon update with the midpoint flux now that the
        // end-of-step flux is known; the start-flux Euler update lags ramps
        // by half a step, and the xenon bias that accumulates shifts the
        // rod bank's settling position.
        let mut x_mid = x.clone();
        for (m, (&a, &b)) in x_mid.n.iter_mut().zip(x.n.iter().zip(&n_next)) {
            *m = 0.5 * (a + b);
        }
        let d_mid = plant::rhs_nonstiff(&x_mid, p_next, c);
        for i in 0..N_Z {
            x_next.iodine[i] = x.iodine[i] + dt_s * d_mid.iodine[i];
            x_next.xenon[i] = x.xenon[i] + dt_s * d_mid.xenon[i];
        }
        // slide the window
        window.copy_within(TOKEN_DIM.., 0);
        let off = (window_w - 1) * TOKEN_DIM;
        token_of(&x_next, p_next, &mut window[off..]);
        times.push(t_next);
        states.push(x_next.clone());
        x = x_next;
    }
    let wall = start.elapsed().as_secs_f64();
    Ok((
        Trajectory { times, states, profile: profile.clone(), provenance: Provenance::PinnHybrid },
        wall,
    ))
}
