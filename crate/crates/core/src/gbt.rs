//! Gradient-boosted block forecaster for the full plant state.
//!
//! Multi-output regression trees with vector-valued leaves predict the
//! next `n_block` states (flattened, 20·n_block values) from the current
//! state plus the next `n_block` turbine-demand samples (20 + n_block
//! features). Boosting fits each tree to the squared-loss residuals of
//! the running prediction; a 24 h rollout chains block predictions, each
//! block's last state feeding the next call.

use crate::dataset::{Normalizer, Provenance, Trajectory};
use crate::error::CoreError;
use crate::plant::{PlantConstants, PowerProfile, State, N_STATE};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

/// Minimum total-variance gain for a split to beat "no split".
pub const MIN_GAIN: f64 = 1e-12;

/// Boosting hyperparameters. Defaults follow standard squared-loss
/// boosting practice; `n_rounds` and `n_block` are the experiment's
/// headline settings (100 base estimators, 10-step blocks). The 200-wide
/// multi-output targets need deeper trees than the scalar-target norm,
/// hence `max_depth` 8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtConfig {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub n_block: usize,
    /// When true, trees fit state deltas (next − current, tiled over the
    /// block) instead of absolute next states.
    pub delta_targets: bool,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            n_rounds: 100,
            learning_rate: 0.1,
            max_depth: 8,
            min_samples_leaf: 5,
            n_block: 10,
            delta_targets: false,
        }
    }
}

impl GbtConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.n_rounds == 0 {
            return Err(CoreError::Config("n_rounds must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate < 2.0) {
            return Err(CoreError::Config(
                "learning_rate must lie in (0, 2) for monotone training MSE".into(),
            ));
        }
        if self.max_depth == 0 {
            return Err(CoreError::Config("max_depth must be >= 1".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(CoreError::Config("min_samples_leaf must be >= 1".into()));
        }
        if self.n_block == 0 {
            return Err(CoreError::Config("n_block must be >= 1".into()));
        }
        Ok(())
    }

    /// Feature width: normalized state plus the future demand block.
    pub fn n_features(&self) -> usize {
        N_STATE + self.n_block
    }

    /// Target width: flattened normalized state block.
    pub fn n_targets(&self) -> usize {
        N_STATE * self.n_block
    }
}

/// One tree node. `feature < 0` marks a leaf and `left` then indexes the
/// tree's leaf-vector table; internal nodes route `x[feature] <= threshold`
/// to `left`, else `right` (child indices into the same node array).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: i32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
}

/// A multi-output regression tree: flat node array (root at 0) plus a
/// table of vector-valued leaves, each the mean of its training residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
    pub leaves: Vec<Vec<f64>>,
}

impl RegressionTree {
    /// Route a feature vector to its leaf vector.
    pub fn predict(&self, x: &[f64]) -> &[f64] {
        let mut i = 0usize;
        loop {
            let node = &self.nodes[i];
            if node.feature < 0 {
                return &self.leaves[node.left as usize];
            }
            i = if x[node.feature as usize] <= node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            let node = &nodes[i];
            if node.feature < 0 {
                return 0;
            }
            1 + walk(nodes, node.left as usize).max(walk(nodes, node.right as usize))
        }
        walk(&self.nodes, 0)
    }
}

/// Best split of one node: maximizes the total variance reduction summed
/// over all output dimensions, which for mean leaves equals maximizing
/// Σ_d (S_L²/n_L + S_R²/n_R). Ties break toward the lowest feature index,
/// then the lowest threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

fn better(a: &Option<Split>, b: &Option<Split>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => {
            (a.gain, b.feature, b.threshold) > (b.gain, a.feature, a.threshold)
        }
        (Some(_), None) => true,
        _ => false,
    }
}

/// Exact best-split scan for one feature over the given sample indices.
/// `targets` is row-major n_samples × n_targets.
#[allow(clippy::too_many_arguments)]
fn best_split_for_feature(
    feature: usize,
    idx: &[u32],
    features: &[Vec<f64>],
    targets: &[f64],
    n_targets: usize,
    total: &[f64],
    parent_score: f64,
    min_samples_leaf: usize,
) -> Option<Split> {
    let n = idx.len();
    let mut order: Vec<u32> = idx.to_vec();
    order.sort_unstable_by(|&a, &b| {
        features[a as usize][feature]
            .partial_cmp(&features[b as usize][feature])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut sum_left = vec![0.0f64; n_targets];
    let mut best: Option<Split> = None;
    for (k, &s) in order.iter().enumerate().take(n - 1) {
        let row = &targets[s as usize * n_targets..(s as usize + 1) * n_targets];
        for (acc, &t) in sum_left.iter_mut().zip(row) {
            *acc += t;
        }
        let v = features[s as usize][feature];
        let v_next = features[order[k + 1] as usize][feature];
        if v == v_next {
            continue;
        }
        let n_left = k + 1;
        let n_right = n - n_left;
        if n_left < min_samples_leaf || n_right < min_samples_leaf {
            continue;
        }
        let mut score = 0.0;
        for (d, &sl) in sum_left.iter().enumerate() {
            let sr = total[d] - sl;
            score += sl * sl / n_left as f64 + sr * sr / n_right as f64;
        }
        let gain = score - parent_score;
        if gain > MIN_GAIN {
            let cand = Some(Split {
                feature,
                threshold: 0.5 * (v + v_next),
                gain,
            });
            if better(&cand, &best) {
                best = cand;
            }
        }
    }
    best
}

/// Greedy best split over all features (parallel scan, deterministic
/// reduction), or `None` when no split improves the variance.
pub fn best_split(
    idx: &[u32],
    features: &[Vec<f64>],
    targets: &[f64],
    n_targets: usize,
    min_samples_leaf: usize,
) -> Option<Split> {
    let n = idx.len();
    if n < 2 * min_samples_leaf {
        return None;
    }
    let n_features = features[0].len();
    let mut total = vec![0.0f64; n_targets];
    for &s in idx {
        let row = &targets[s as usize * n_targets..(s as usize + 1) * n_targets];
        for (acc, &t) in total.iter_mut().zip(row) {
            *acc += t;
        }
    }
    let parent_score: f64 = total.iter().map(|&s| s * s / n as f64).sum();
    (0..n_features)
        .into_par_iter()
        .map(|f| {
            best_split_for_feature(
                f,
                idx,
                features,
                targets,
                n_targets,
                &total,
                parent_score,
                min_samples_leaf,
            )
        })
        .reduce(
            || None,
            |a, b| if better(&b, &a) { b } else { a },
        )
}

fn leaf_mean(idx: &[u32], targets: &[f64], n_targets: usize) -> Vec<f64> {
    let mut mean = vec![0.0f64; n_targets];
    for &s in idx {
        let row = &targets[s as usize * n_targets..(s as usize + 1) * n_targets];
        for (acc, &t) in mean.iter_mut().zip(row) {
            *acc += t;
        }
    }
    let inv = 1.0 / idx.len() as f64;
    for m in &mut mean {
        *m *= inv;
    }
    mean
}

/// Fit one multi-output regression tree to `targets` by recursive greedy
/// variance-reduction splitting.
pub fn fit_tree(
    features: &[Vec<f64>],
    targets: &[f64],
    n_targets: usize,
    max_depth: usize,
    min_samples_leaf: usize,
) -> Result<RegressionTree, CoreError> {
    let n = features.len();
    if n == 0 || targets.len() != n * n_targets {
        return Err(CoreError::Shape(format!(
            "targets length {} does not match {} samples x {} outputs",
            targets.len(),
            n,
            n_targets
        )));
    }
    let mut tree = RegressionTree {
        nodes: Vec::new(),
        leaves: Vec::new(),
    };
    let all: Vec<u32> = (0..n as u32).collect();
    build_node(&mut tree, &all, features, targets, n_targets, 0, max_depth, min_samples_leaf);
    Ok(tree)
}

#[allow(clippy::too_many_arguments)]
fn build_node(
    tree: &mut RegressionTree,
    idx: &[u32],
    features: &[Vec<f64>],
    targets: &[f64],
    n_targets: usize,
    depth: usize,
    max_depth: usize,
    min_samples_leaf: usize,
) -> u32 {
    let split = if depth < max_depth {
        best_split(idx, features, targets, n_targets, min_samples_leaf)
    } else {
        None
    };
    let node_id = tree.nodes.len() as u32;
    match split {
        None => {
            let leaf_id = tree.leaves.len() as u32;
            tree.leaves.push(leaf_mean(idx, targets, n_targets));
            tree.nodes.push(TreeNode {
                feature: -1,
                threshold: 0.0,
                left: leaf_id,
                right: 0,
            });
            node_id
        }
        Some(sp) => {
            tree.nodes.push(TreeNode {
                feature: sp.feature as i32,
                threshold: sp.threshold,
                left: 0,
                right: 0,
            });
            let (left_idx, right_idx): (Vec<u32>, Vec<u32>) = idx
                .iter()
                .partition(|&&s| features[s as usize][sp.feature] <= sp.threshold);
            let left = build_node(
                tree, &left_idx, features, targets, n_targets, depth + 1, max_depth,
                min_samples_leaf,
            );
            let right = build_node(
                tree, &right_idx, features, targets, n_targets, depth + 1, max_depth,
                min_samples_leaf,
            );
            tree.nodes[node_id as usize].left = left;
            tree.nodes[node_id as usize].right = right;
            node_id
        }
    }
}

/// Additive ensemble: prediction = base + learning_rate · Σ tree outputs,
/// everything in the corpus's normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBoostedEnsemble {
    pub version: u32,
    pub config: GbtConfig,
    /// Feature layout: normalized state components, then demand block.
    pub n_state_features: usize,
    pub n_power_features: usize,
    pub normalizer_sha256: String,
    pub base: Vec<f64>,
    pub trees: Vec<RegressionTree>,
    /// True when the data admitted no split at all (all-identical
    /// features): the ensemble is the base prediction only.
    pub degenerate: bool,
    /// Training MSE (mean over samples and output dimensions) after each
    /// boosting round; non-increasing by construction.
    pub train_mse: Vec<f64>,
}

impl GradientBoostedEnsemble {
    /// Predict the normalized flattened target block for one normalized
    /// feature vector.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, CoreError> {
        if x.len() != self.config.n_features() {
            return Err(CoreError::Shape(format!(
                "feature vector has width {}, expected {}",
                x.len(),
                self.config.n_features()
            )));
        }
        let mut out = self.base.clone();
        for tree in &self.trees {
            let leaf = tree.predict(x);
            for (o, &l) in out.iter_mut().zip(leaf) {
                *o += self.config.learning_rate * l;
            }
        }
        Ok(out)
    }

    /// Predict the next `n_block` de-normalized states from a raw state
    /// and the future demand block.
    pub fn predict_block(
        &self,
        state: &State,
        power_block: &[f64],
        norm: &Normalizer,
    ) -> Result<Vec<State>, CoreError> {
        if power_block.len() != self.config.n_block {
            return Err(CoreError::Shape(format!(
                "power block has {} entries, expected {}",
                power_block.len(),
                self.config.n_block
            )));
        }
        if norm.sha256_hex() != self.normalizer_sha256 {
            return Err(CoreError::Config(
                "normalizer does not match the one this ensemble was trained with".into(),
            ));
        }
        let mut x = norm.normalize(state);
        x.extend_from_slice(power_block);
        let z = self.predict(&x)?;
        let state_vec = state.to_vec();
        let mut out = Vec::with_capacity(self.config.n_block);
        for k in 0..self.config.n_block {
            let block = &z[k * N_STATE..(k + 1) * N_STATE];
            let mut s = norm.invert(block)?;
            if self.config.delta_targets {
                let sv = s.to_vec();
                // delta mode’s normalized target is z(next) − z(current);
                // invert() maps affinely, so add back the current state.
                let zero = norm.invert(&[0.0; N_STATE])?.to_vec();
                let restored: Vec<f64> = sv
                    .iter()
                    .zip(zero.iter())
                    .zip(state_vec.iter())
                    .map(|((&v, &z0), &cur)| v - z0 + cur)
                    .collect();
                s = State::from_slice(&restored)?;
            }
            out.push(s);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let text = std::fs::read_to_string(path)?;
        let ens: Self = serde_json::from_str(&text)?;
        if ens.version != 1 {
            return Err(CoreError::Config(format!(
                "unsupported ensemble version {}",
                ens.version
            )));
        }
        ens.config.validate()?;
        Ok(ens)
    }

    pub fn n_nodes(&self) -> usize {
        self.trees.iter().map(|t| t.nodes.len()).sum()
    }
}

/// Assemble the normalized supervised matrices for boosting from raw
/// trajectories: rows of (normalized state ⧺ demand block) and flattened
/// normalized target blocks.
pub fn make_dataset(
    trajectories: &[Trajectory],
    cfg: &GbtConfig,
    norm: &Normalizer,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), CoreError> {
    cfg.validate()?;
    let n_targets = cfg.n_targets();
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for traj in trajectories {
        let samples = crate::dataset::slice_supervised(traj, cfg.n_block)?;
        for (raw_x, raw_y) in samples {
            let mut x = vec![0.0; cfg.n_features()];
            norm.normalize_slice(&raw_x[..N_STATE], &mut x[..N_STATE]);
            x[N_STATE..].copy_from_slice(&raw_x[N_STATE..]);
            let mut y = vec![0.0; n_targets];
            for k in 0..cfg.n_block {
                norm.normalize_slice(
                    &raw_y[k * N_STATE..(k + 1) * N_STATE],
                    &mut y[k * N_STATE..(k + 1) * N_STATE],
                );
                if cfg.delta_targets {
                    for i in 0..N_STATE {
                        y[k * N_STATE + i] -= x[i];
                    }
                }
            }
            features.push(x);
            targets.extend_from_slice(&y);
        }
    }
    if features.is_empty() {
        return Err(CoreError::Training("empty training set".into()));
    }
    Ok((features, targets))
}

/// Fit the boosted ensemble on normalized matrices. Round m fits a tree
/// to the residuals (targets − current prediction) and adds
/// learning_rate times its output; the logged training MSE is
/// non-increasing round over round.
pub fn fit_boosted(
    features: &[Vec<f64>],
    targets: &[f64],
    cfg: &GbtConfig,
    normalizer_sha256: &str,
) -> Result<GradientBoostedEnsemble, CoreError> {
    cfg.validate()?;
    let n = features.len();
    let n_targets = cfg.n_targets();
    if n == 0 {
        return Err(CoreError::Training("empty training set".into()));
    }
    if targets.len() != n * n_targets {
        return Err(CoreError::Shape(format!(
            "targets length {} does not match {} samples x {} outputs",
            targets.len(),
            n,
            n_targets
        )));
    }
    for x in features {
        if x.len() != cfg.n_features() {
            return Err(CoreError::Shape(format!(
                "feature vector has width {}, expected {}",
                x.len(),
                cfg.n_features()
            )));
        }
    }
    let all: Vec<u32> = (0..n as u32).collect();
    let base = leaf_mean(&all, targets, n_targets);
    let mut pred: Vec<f64> = Vec::with_capacity(n * n_targets);
    for _ in 0..n {
        pred.extend_from_slice(&base);
    }
    let mut residuals = vec![0.0f64; n * n_targets];
    let mut trees = Vec::with_capacity(cfg.n_rounds);
    let mut train_mse = Vec::with_capacity(cfg.n_rounds);
    let mut degenerate = false;
    for round in 0..cfg.n_rounds {
        for (r, (&t, &p)) in residuals.iter_mut().zip(targets.iter().zip(&pred)) {
            *r = t - p;
        }
        let tree = fit_tree(features, &residuals, n_targets, cfg.max_depth, cfg.min_samples_leaf)?;
        if round == 0 && tree.nodes.len() == 1 {
            degenerate = true;
        }
        for (s, x) in features.iter().enumerate() {
            let leaf = tree.predict(x);
            let row = &mut pred[s * n_targets..(s + 1) * n_targets];
            for (p, &l) in row.iter_mut().zip(leaf) {
                *p += cfg.learning_rate * l;
            }
        }
        let mse = targets
            .iter()
            .zip(&pred)
            .map(|(&t, &p)| (t - p) * (t - p))
            .sum::<f64>()
            / (n * n_targets) as f64;
        train_mse.push(mse);
        trees.push(tree);
    }
    if degenerate {
        eprintln!("gbt: no usable split found; ensemble reduces to the base prediction");
    }
    Ok(GradientBoostedEnsemble {
        version: 1,
        config: cfg.clone(),
        n_state_features: N_STATE,
        n_power_features: cfg.n_block,
        normalizer_sha256: normalizer_sha256.to_string(),
        base,
        trees,
        degenerate,
        train_mse,
    })
}

/// Train on raw trajectories end to end.
pub fn train_gbt(
    trajectories: &[Trajectory],
    cfg: &GbtConfig,
    norm: &Normalizer,
) -> Result<GradientBoostedEnsemble, CoreError> {
    let (features, targets) = make_dataset(trajectories, cfg, norm)?;
    fit_boosted(&features, &targets, cfg, &norm.sha256_hex())
}

/// Chain block predictions over the horizon: each block's last state
/// feeds the next ensemble call; a 24 h / 60 s / N_block = 10 run makes
/// exactly 144 calls. Returns the trajectory and the rollout wall time
/// (prediction loop only).
pub fn recursive_rollout(
    ens: &GradientBoostedEnsemble,
    x0: &State,
    profile: &PowerProfile,
    horizon_s: f64,
    norm: &Normalizer,
    _c: &PlantConstants,
) -> Result<(Trajectory, f64), CoreError> {
    let dt = 60.0;
    let block_s = ens.config.n_block as f64 * dt;
    let n_blocks = (horizon_s / block_s).round() as usize;
    if n_blocks == 0 || (n_blocks as f64 * block_s - horizon_s).abs() > 1e-9 {
        return Err(CoreError::Domain(format!(
            "horizon {horizon_s} s is not a positive multiple of the {block_s} s block"
        )));
    }
    let mut times = Vec::with_capacity(n_blocks * ens.config.n_block + 1);
    let mut states = Vec::with_capacity(n_blocks * ens.config.n_block + 1);
    times.push(0.0);
    states.push(x0.clone());
    let mut power_block = vec![0.0; ens.config.n_block];
    let started = Instant::now();
    let mut x = x0.clone();
    for b in 0..n_blocks {
        let t0 = b as f64 * block_s;
        for (k, p) in power_block.iter_mut().enumerate() {
            *p = profile.eval(t0 + (k + 1) as f64 * dt);
        }
        let block = ens.predict_block(&x, &power_block, norm)?;
        for (k, s) in block.iter().enumerate() {
            if s.to_vec().iter().any(|v| !v.is_finite()) {
                return Err(CoreError::IntegrationFailure {
                    t: t0 + (k + 1) as f64 * dt,
                    reason: format!("non-finite state in rollout block {b}"),
                });
            }
        }
        x = block.last().unwrap().clone();
        for (k, s) in block.into_iter().enumerate() {
            times.push(t0 + (k + 1) as f64 * dt);
            states.push(s);
        }
    }
    let wall = started.elapsed().as_secs_f64();
    Ok((
        Trajectory {
            times,
            states,
            profile: profile.clone(),
            provenance: Provenance::GbtRollout,
        },
        wall,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_corpus;
    use crate::plant::equilibrium_state;
    use crate::rng::SplitMix64;
    use crate::solver::SolverConfig;

    /// Independent exhaustive split search: every (feature, midpoint
    /// threshold) candidate, score recomputed from scratch per candidate.
    fn brute_force_split(
        features: &[Vec<f64>],
        targets: &[f64],
        n_targets: usize,
        min_samples_leaf: usize,
    ) -> Option<Split> {
        let n = features.len();
        let n_features = features[0].len();
        let mut total = vec![0.0; n_targets];
        for s in 0..n {
            for d in 0..n_targets {
                total[d] += targets[s * n_targets + d];
            }
        }
        let parent: f64 = total.iter().map(|&s| s * s / n as f64).sum();
        let mut best: Option<Split> = None;
        for f in 0..n_features {
            let mut vals: Vec<f64> = features.iter().map(|x| x[f]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            for w in vals.windows(2) {
                let thr = 0.5 * (w[0] + w[1]);
                let mut sl = vec![0.0; n_targets];
                let mut nl = 0usize;
                for s in 0..n {
                    if features[s][f] <= thr {
                        nl += 1;
                        for d in 0..n_targets {
                            sl[d] += targets[s * n_targets + d];
                        }
                    }
                }
                let nr = n - nl;
                if nl < min_samples_leaf || nr < min_samples_leaf {
                    continue;
                }
                let mut score = 0.0;
                for d in 0..n_targets {
                    let sr = total[d] - sl[d];
                    score += sl[d] * sl[d] / nl as f64 + sr * sr / nr as f64;
                }
                let gain = score - parent;
                if gain > MIN_GAIN {
                    let cand = Some(Split { feature: f, threshold: thr, gain });
                    if better(&cand, &best) {
                        best = cand;
                    }
                }
            }
        }
        best
    }

    fn random_instance(
        rng: &mut SplitMix64,
        n: usize,
        n_features: usize,
        n_targets: usize,
    ) -> (Vec<Vec<f64>>, Vec<f64>) {
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n_features).map(|_| rng.uniform(0.0, 1.0)).collect())
            .collect();
        let targets: Vec<f64> = (0..n * n_targets).map(|_| rng.uniform(-1.0, 1.0)).collect();
        (features, targets)
    }

    #[test]
    fn two_separable_samples_fit_perfectly() {
        let features = vec![vec![0.0], vec![1.0]];
        let targets = vec![1.0, 2.0, 3.0, 4.0];
        let tree = fit_tree(&features, &targets, 2, 1, 1).unwrap();
        assert_eq!(tree.predict(&[0.0]), &[1.0, 2.0]);
        assert_eq!(tree.predict(&[1.0]), &[3.0, 4.0]);
        assert_eq!(tree.depth(), 1);
    }

    #[test]
    fn constant_targets_give_single_leaf() {
        let features = vec![vec![0.0], vec![1.0], vec![2.0]];
        let targets = vec![5.0; 3];
        let tree = fit_tree(&features, &targets, 1, 4, 1).unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.predict(&[7.0]), &[5.0]);
    }

    #[test]
    fn greedy_split_matches_brute_force() {
        let mut rng = SplitMix64::new(0x05ee_d6b7);
        for _ in 0..20 {
            let n = 10 + (rng.next_u64() % 41) as usize;
            let nf = 1 + (rng.next_u64() % 8) as usize;
            let nt = 1 + (rng.next_u64() % 5) as usize;
            let (features, targets) = random_instance(&mut rng, n, nf, nt);
            let idx: Vec<u32> = (0..n as u32).collect();
            let greedy = best_split(&idx, &features, &targets, nt, 2);
            let brute = brute_force_split(&features, &targets, nt, 2);
            match (greedy, brute) {
                (Some(g), Some(b)) => {
                    assert_eq!(g.feature, b.feature);
                    assert!((g.threshold - b.threshold).abs() < 1e-15);
                }
                (g, b) => assert_eq!(g.is_some(), b.is_some()),
            }
        }
    }

    #[test]
    fn one_sample_one_round_memorizes() {
        let cfg = GbtConfig {
            n_rounds: 1,
            learning_rate: 1.0,
            n_block: 1,
            min_samples_leaf: 1,
            ..GbtConfig::default()
        };
        let features = vec![vec![0.5; cfg.n_features()]];
        let targets: Vec<f64> = (0..cfg.n_targets()).map(|i| i as f64 * 0.01).collect();
        let ens = fit_boosted(&features, &targets, &cfg, "test").unwrap();
        let pred = ens.predict(&features[0]).unwrap();
        for (p, t) in pred.iter().zip(&targets) {
            assert!((p - t).abs() < 1e-15);
        }
        assert_eq!(ens.train_mse.len(), 1);
        assert!(ens.train_mse[0] < 1e-28);
    }

    #[test]
    fn feature_width_checked() {
        let cfg = GbtConfig { n_rounds: 1, n_block: 10, min_samples_leaf: 1, ..GbtConfig::default() };
        let mut rng = SplitMix64::new(3);
        let (features, targets) = random_instance(&mut rng, 12, cfg.n_features(), cfg.n_targets());
        let ens = fit_boosted(&features, &targets, &cfg, "test").unwrap();
        assert!(ens.predict(&vec![0.0; 30]).is_ok());
        assert!(matches!(ens.predict(&vec![0.0; 29]), Err(CoreError::Shape(_))));
    }

    #[test]
    fn training_mse_is_monotone_and_ensemble_roundtrips() {
        let mut rng = SplitMix64::new(0xabc);
        let cfg = GbtConfig {
            n_rounds: 25,
            n_block: 2,
            min_samples_leaf: 2,
            max_depth: 3,
            ..GbtConfig::default()
        };
        let (features, targets) = random_instance(&mut rng, 80, cfg.n_features(), cfg.n_targets());
        let ens = fit_boosted(&features, &targets, &cfg, "test").unwrap();
        assert_eq!(ens.trees.len(), 25);
        for w in ens.train_mse.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "MSE increased: {} -> {}", w[0], w[1]);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ens.json");
        ens.save(&path).unwrap();
        let back = GradientBoostedEnsemble::load(&path).unwrap();
        assert_eq!(ens, back);
        for _ in 0..50 {
            let x: Vec<f64> = (0..cfg.n_features()).map(|_| rng.uniform(-1.0, 2.0)).collect();
            let a = ens.predict(&x).unwrap();
            let b = back.predict(&x).unwrap();
            assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn rollout_on_trained_corpus_is_deterministic_and_block_counted() {
        let c = PlantConstants::default();
        let solver_cfg = SolverConfig::default();
        let (train, _test, norm) = build_corpus(3, 1, 0x90b7, &solver_cfg, &c).unwrap();
        // short trees and few rounds: this is a plumbing test, not accuracy
        let cfg = GbtConfig { n_rounds: 5, max_depth: 3, ..GbtConfig::default() };
        let ens = train_gbt(&train, &cfg, &norm).unwrap();
        let x0 = equilibrium_state(1.0, &c).unwrap();
        let profile = PowerProfile::canonical_benchmark();
        let horizon = 86_400.0;
        let (traj_a, _) = recursive_rollout(&ens, &x0, &profile, horizon, &norm, &c).unwrap();
        let (traj_b, _) = recursive_rollout(&ens, &x0, &profile, horizon, &norm, &c).unwrap();
        assert_eq!(traj_a.len(), 1441);
        assert_eq!(traj_a.provenance, Provenance::GbtRollout);
        for (a, b) in traj_a.states.iter().zip(&traj_b.states) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
        assert!(matches!(
            recursive_rollout(&ens, &x0, &profile, 86_401.0, &norm, &c),
            Err(CoreError::Domain(_))
        ));
    }
}
