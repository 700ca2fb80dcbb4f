//! Loss assembly and the optimization loop.
//!
//! Every training step freezes its stochasticity first (anchor, users,
//! timesteps, noise, mined cells and contrast picks) into a [`FrozenBatch`];
//! the loss is then a pure function of the parameters. The same code path
//! serves the optimizer, the finite-difference gradient checks, and the
//! deterministic re-runs the reproducibility contract requires.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::alignment::{c2i_loss_grad, i2c_loss_grad, peak_thresholds, AlignError, ContrastiveBatch};
use crate::denoiser::{JointDenoiser, SeqToken};
use crate::diffusion::{forward_noise, DiffusionSchedule};
use crate::domain::{RegionId, TimeStep, INFLOW};
use crate::eval::ChronoSplit;
use crate::linalg::ridge_solve;
use crate::model::{Model, ModelConfig};
use crate::predict::FlowHead;
use crate::rng::{normal_vec, stream, StreamId};
use crate::synth::Corpus;
use crate::tokenizer::{
    encode_flow, encode_trajectory, flow_window_targets, FlowNormStats, Role, TokenBatch,
    TokenModality,
};

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    NonFiniteLoss,
    DivergedLoss { step: usize },
    DataModalityMissing(&'static str),
    UnknownVariant(String),
    BadConfig(String),
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::NonFiniteLoss => write!(f, "loss is not finite"),
            TrainError::DivergedLoss { step } => write!(f, "loss diverged at step {step}"),
            TrainError::DataModalityMissing(m) => write!(f, "dataset lacks {m} data"),
            TrainError::UnknownVariant(v) => write!(f, "unknown variant `{v}`"),
            TrainError::BadConfig(msg) => write!(f, "bad training config: {msg}"),
        }
    }
}

impl core::error::Error for TrainError {}

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5, beta: 0.5, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(TrainError::BadConfig("loss weights must be non-negative".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 {
            return Err(TrainError::BadConfig("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Deployment variants over {backbone shared?} x {both modalities at test?}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Variant {
    V1,
    V2,
    V3,
    V4,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant, TrainError> {
        match s {
            "v1" | "V1" => Ok(Variant::V1),
            "v2" | "V2" => Ok(Variant::V2),
            "v3" | "V3" => Ok(Variant::V3),
            "v4" | "V4" => Ok(Variant::V4),
            other => Err(TrainError::UnknownVariant(other.into())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::V4 => "v4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VariantConfig {
    pub shared_backbone: bool,
    pub joint_inference: bool,
}

pub fn configure_variant(v: Variant) -> VariantConfig {
    match v {
        Variant::V1 => VariantConfig { shared_backbone: true, joint_inference: false },
        Variant::V2 => VariantConfig { shared_backbone: true, joint_inference: true },
        Variant::V3 => VariantConfig { shared_backbone: false, joint_inference: false },
        Variant::V4 => VariantConfig { shared_backbone: false, joint_inference: true },
    }
}

/// Ablation toggles mirroring the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationSwitches {
    pub use_i2c: bool,
    pub use_c2i: bool,
    pub shared_transformer: bool,
    pub use_flow_data: bool,
    pub use_traj_data: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches {
            use_i2c: true,
            use_c2i: true,
            shared_transformer: true,
            use_flow_data: true,
            use_traj_data: true,
        }
    }
}

impl AblationSwitches {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.use_flow_data && !self.use_traj_data {
            return Err(TrainError::BadConfig("at least one data modality must be enabled".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    /// Optimizer steps (one mini-batch each).
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of replacing one modality of a pair with max-timestep
    /// noise during training, which makes single-modality (marginal)
    /// inference an in-distribution case.
    pub marginal_dropout: f64,
    /// Cap on contrastive batches evaluated per step.
    pub max_c2i_per_step: usize,
    /// Cap on alignment cells evaluated per step.
    pub max_i2c_per_step: usize,
    /// Learning-rate multiplier for the embedding tables. The decode paths
    /// pseudo-invert the tables, so they drift at a tenth of the backbone
    /// rate to stay well conditioned.
    pub table_lr_mult: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 32,
            lr: 1e-3,
            seed: 1,
            marginal_dropout: 0.15,
            max_c2i_per_step: 32,
            max_i2c_per_step: 128,
            table_lr_mult: 0.1,
        }
    }
}

/// Per-run diagnostics and instrumentation counters.
#[derive(Debug, Clone, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainReport {
    pub pred_losses: Vec<f64>,
    pub i2c_losses: Vec<f64>,
    pub c2i_losses: Vec<f64>,
    pub total_losses: Vec<f64>,
    /// Populated alignment cells read (stays zero with use_i2c = false).
    pub i2c_cells_read: usize,
    pub c2i_batches_read: usize,
    pub zero_vector_skips: usize,
    /// Probe token root-mean-square, sampled periodically.
    pub token_rms_trace: Vec<f64>,
}

/// Weighted sum of the three loss terms; disabled switches zero their term
/// before weighting.
pub fn total_loss(
    pred: f64,
    i2c: f64,
    c2i: f64,
    w: &LossWeights,
    switches: &AblationSwitches,
) -> Result<f64, TrainError> {
    if !pred.is_finite() || !i2c.is_finite() || !c2i.is_finite() {
        return Err(TrainError::NonFiniteLoss);
    }
    let i = if switches.use_i2c { i2c } else { 0.0 };
    let c = if switches.use_c2i { c2i } else { 0.0 };
    let total = w.alpha * i + w.beta * c + w.gamma * pred;
    if !total.is_finite() {
        return Err(TrainError::NonFiniteLoss);
    }
    Ok(total)
}

/// Frozen stochasticity of one denoising pair.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t_traj: usize,
    pub t_flow: usize,
    /// Side replaced wholesale by max-timestep noise (marginal training).
    pub drop: Option<TokenModality>,
    /// One noise vector per trajectory token (used where the token is noised).
    pub eps_traj: Vec<Vec<f64>>,
    pub eps_flow: Vec<Vec<f64>>,
}

/// Sample timesteps and noise for a pair with the given token counts.
pub fn draw_noise<R: Rng + ?Sized>(
    rng: &mut R,
    sched: &DiffusionSchedule,
    n_traj_tokens: usize,
    n_flow_tokens: usize,
    width: usize,
    marginal_dropout: f64,
) -> NoiseDraw {
    let t_traj = rng.gen_range(1..=sched.n_steps);
    let t_flow = rng.gen_range(1..=sched.n_steps);
    let drop = if n_traj_tokens > 0 && n_flow_tokens > 0 && rng.gen::<f64>() < marginal_dropout {
        Some(if rng.gen::<bool>() { TokenModality::Trajectory } else { TokenModality::Flow })
    } else {
        None
    };
    let eps_traj = (0..n_traj_tokens).map(|_| normal_vec(rng, width)).collect();
    let eps_flow = (0..n_flow_tokens).map(|_| normal_vec(rng, width)).collect();
    NoiseDraw { t_traj, t_flow, drop, eps_traj, eps_flow }
}

/// Sum of squared prediction errors over future-token elements, divided by
/// the element count. Factored out so a perfect-oracle test double can call
/// it directly.
pub fn mse_over_futures(eps_hat: &[Vec<f64>], eps: &[Vec<f64>], future: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..eps_hat.len() {
        if !future[i] {
            continue;
        }
        for (a, b) in eps_hat[i].iter().zip(&eps[i]) {
            sum += (a - b) * (a - b);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

struct PairRun {
    seq: Vec<SeqToken>,
    /// Targets aligned with seq (zero vectors at history positions).
    targets: Vec<Vec<f64>>,
    future: Vec<bool>,
    /// d x0 / d x_t factor per sequence position.
    x0_scale: Vec<f64>,
    /// Sequence position -> (is_traj_side, token index within its batch).
    origin: Vec<(bool, usize)>,
}

fn build_pair_run(
    sched: &DiffusionSchedule,
    traj: Option<&TokenBatch>,
    flow: Option<&TokenBatch>,
    draw: &NoiseDraw,
) -> PairRun {
    let t_max = sched.n_steps;
    let mut run = PairRun {
        seq: Vec::new(),
        targets: Vec::new(),
        future: Vec::new(),
        x0_scale: Vec::new(),
        origin: Vec::new(),
    };
    let mut push_side = |batch: &TokenBatch, is_traj: bool, t_side: usize, eps: &[Vec<f64>]| {
        let dropped = match draw.drop {
            Some(TokenModality::Trajectory) => is_traj,
            Some(TokenModality::Flow) => !is_traj,
            None => false,
        };
        for (idx, tok) in batch.tokens.iter().enumerate() {
            let is_future = batch.roles[idx] == Role::Future;
            let noised = is_future || dropped;
            let t_eff = if dropped { t_max } else { t_side };
            let (x, diff_t, scale) = if noised {
                let x = forward_noise(tok, t_eff, &eps[idx], sched).expect("shape");
                (x, t_eff, sched.alpha_bar(t_eff).sqrt())
            } else {
                (tok.clone(), 0, 1.0)
            };
            run.seq.push(SeqToken {
                x,
                modality: if is_traj { TokenModality::Trajectory } else { TokenModality::Flow },
                role: batch.roles[idx],
                pos: idx,
                diff_t,
            });
            run.targets.push(if is_future { eps[idx].clone() } else { vec![0.0; tok.len()] });
            run.future.push(is_future);
            run.x0_scale.push(scale);
            run.origin.push((is_traj, idx));
        }
    };
    if let Some(batch) = traj {
        push_side(batch, true, draw.t_traj, &draw.eps_traj);
    }
    if let Some(batch) = flow {
        push_side(batch, false, draw.t_flow, &draw.eps_flow);
    }
    run
}

/// Denoising loss of one clean pair under a frozen draw (deterministic).
pub fn prediction_loss_at(
    den: &JointDenoiser,
    params: &[f64],
    sched: &DiffusionSchedule,
    traj: Option<&TokenBatch>,
    flow: Option<&TokenBatch>,
    draw: &NoiseDraw,
) -> f64 {
    let run = build_pair_run(sched, traj, flow, draw);
    let refs: Vec<&SeqToken> = run.seq.iter().collect();
    let eps_hat = den.predict_noise_refs(params, &refs).expect("valid sequence");
    mse_over_futures(&eps_hat, &run.targets, &run.future)
}

/// Denoising loss with freshly sampled timesteps and noise (the expectation
/// integrand): timesteps uniform on {1..T} independently per modality,
/// Gaussian noise per future-token element.
pub fn prediction_loss<R: Rng + ?Sized>(
    den: &JointDenoiser,
    params: &[f64],
    sched: &DiffusionSchedule,
    traj: Option<&TokenBatch>,
    flow: Option<&TokenBatch>,
    rng: &mut R,
) -> f64 {
    let width = den.cfg.token_width;
    let draw = draw_noise(
        rng,
        sched,
        traj.map(|b| b.n_tokens()).unwrap_or(0),
        flow.map(|b| b.n_tokens()).unwrap_or(0),
        width,
        0.0,
    );
    prediction_loss_at(den, params, sched, traj, flow, &draw)
}

/// One frozen mini-batch: everything random is decided here, so the loss
/// below is a pure deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct FrozenBatch {
    pub start: TimeStep,
    pub anchor: TimeStep,
    pub end: TimeStep,
    /// Trajectory users (indices into the corpus), empty when trajectories
    /// are disabled.
    pub users: Vec<usize>,
    /// Paired flow region slot per user (index into `regions`).
    pub user_region_slot: Vec<Option<usize>>,
    /// Distinct flow regions in the batch, sorted.
    pub regions: Vec<RegionId>,
    pub draws: Vec<NoiseDraw>,
    pub i2c_cells: Vec<I2cCellSpec>,
    pub c2i_picks: Vec<C2iPickSpec>,
}

#[derive(Debug, Clone)]
pub struct I2cCellSpec {
    pub region_slot: usize,
    pub flow_tok: usize,
    /// (pair index, trajectory token index) of every user in the cell.
    pub members: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct C2iPickSpec {
    pub anchor: (usize, usize),
    pub positive: (usize, usize),
    pub negatives: Vec<(usize, usize)>,
}

/// Internals shared by training and gradient checks.
pub struct TrainContext<'a> {
    pub corpus: &'a Corpus,
    pub split: &'a ChronoSplit,
    pub weights: LossWeights,
    pub switches: AblationSwitches,
    pub tcfg: TrainConfig,
    /// Per-region inflow peak thresholds over the training split.
    pub peak_thr: Vec<f64>,
    pub mining: crate::alignment::MiningConfig,
}

impl<'a> TrainContext<'a> {
    pub fn new(
        corpus: &'a Corpus,
        split: &'a ChronoSplit,
        weights: LossWeights,
        switches: AblationSwitches,
        tcfg: TrainConfig,
        mining: crate::alignment::MiningConfig,
    ) -> Result<Self, TrainError> {
        weights.validate()?;
        switches.validate()?;
        if switches.use_traj_data && corpus.trajectories.is_empty() {
            return Err(TrainError::DataModalityMissing("trajectory"));
        }
        if switches.use_flow_data && corpus.flow.values.iter().all(|v| *v == 0.0) {
            return Err(TrainError::DataModalityMissing("flow"));
        }
        let peak_thr = if switches.use_c2i && switches.use_traj_data && switches.use_flow_data {
            // thresholds come from the training split only
            let mut train_flow = crate::domain::FlowField::zeros(
                corpus.flow.n_channels,
                split.train_end,
                corpus.flow.n_regions,
            );
            for c in 0..corpus.flow.n_channels {
                for t in 0..split.train_end {
                    for l in 0..corpus.flow.n_regions {
                        *train_flow.get_mut(c, t, l) = corpus.flow.get(c, t, l);
                    }
                }
            }
            match peak_thresholds(&train_flow, mining.peak_quantile) {
                Ok(thr) => thr,
                Err(AlignError::BadQuantile(q)) => {
                    return Err(TrainError::BadConfig(alloc::format!("bad peak quantile {q}")))
                }
                Err(_) => Vec::new(),
            }
        } else {
            Vec::new()
        };
        Ok(TrainContext { corpus, split, weights, switches, tcfg, peak_thr, mining })
    }

    fn is_peak(&self, region: RegionId, t: TimeStep) -> bool {
        !self.peak_thr.is_empty()
            && t < self.corpus.flow.n_steps
            && self.corpus.flow.get(INFLOW, t, region) > self.peak_thr[region]
    }

    /// Anchors eligible for training windows.
    pub fn train_anchors(&self, p: usize, k: usize) -> Vec<TimeStep> {
        let hi = self.split.train_end.saturating_sub(k);
        if hi < p {
            return Vec::new();
        }
        (p..=hi).collect()
    }

    /// Freeze one mini-batch worth of stochasticity.
    pub fn draw_batch<R: Rng + ?Sized>(
        &self,
        model: &Model,
        rng: &mut R,
        report: &mut TrainReport,
    ) -> Result<FrozenBatch, TrainError> {
        let tok = &model.cfg.tokenizer;
        let (p, k) = (tok.history_len, tok.horizon);
        let anchors = self.train_anchors(p, k);
        if anchors.is_empty() {
            return Err(TrainError::BadConfig(
                "training split too short for history + horizon".into(),
            ));
        }
        let anchor = anchors[rng.gen_range(0..anchors.len())];
        let (start, end) = (anchor - p, anchor + k);

        let use_traj = self.switches.use_traj_data;
        let use_flow = self.switches.use_flow_data;
        let n_users_total = self.corpus.trajectories.len();
        let bsz = self.tcfg.batch_size;

        let mut users = Vec::new();
        if use_traj {
            // sample without replacement when possible
            if bsz >= n_users_total {
                users.extend(0..n_users_total);
            } else {
                let mut idx: Vec<usize> = (0..n_users_total).collect();
                for i in 0..bsz {
                    let j = rng.gen_range(i..idx.len());
                    idx.swap(i, j);
                }
                users.extend_from_slice(&idx[..bsz]);
            }
        }

        // paired flow regions: the user's location entering the anchor
        let mut region_set = BTreeSet::new();
        let mut user_regions: Vec<Option<RegionId>> = Vec::new();
        if use_flow {
            if use_traj {
                for &u in &users {
                    let traj = &self.corpus.trajectories[u];
                    let loc = traj.location_at(anchor - 1);
                    let loc = match loc {
                        Some(l) if !self.corpus.missing_regions.contains(&l) => Some(l),
                        _ => None,
                    };
                    if let Some(l) = loc {
                        region_set.insert(l);
                    }
                    user_regions.push(loc);
                }
            } else {
                // flow-only model: random non-missing regions
                let avail: Vec<RegionId> = (0..self.corpus.grid.n_regions())
                    .filter(|r| !self.corpus.missing_regions.contains(r))
                    .collect();
                if avail.is_empty() {
                    return Err(TrainError::DataModalityMissing("flow"));
                }
                for _ in 0..bsz {
                    region_set.insert(avail[rng.gen_range(0..avail.len())]);
                }
            }
        }
        let regions: Vec<RegionId> = region_set.into_iter().collect();
        let slot_of = |r: RegionId| regions.binary_search(&r).ok();
        let user_region_slot: Vec<Option<usize>> = if use_traj {
            users
                .iter()
                .zip(&user_regions)
                .map(|(_, r)| r.and_then(slot_of))
                .collect()
        } else {
            Vec::new()
        };

        // noise draws per pair (trajectory pairs, or one pseudo-pair per
        // region for flow-only training)
        let n_traj_tokens = if use_traj { end - start } else { 0 };
        let n_flow_tokens = if use_flow { (end - start) / tok.token_len_flow } else { 0 };
        let n_pairs = if use_traj { users.len() } else { regions.len() };
        let dropout = if use_traj && use_flow { self.tcfg.marginal_dropout } else { 0.0 };
        let draws: Vec<NoiseDraw> = (0..n_pairs)
            .map(|i| {
                let has_flow = if use_traj {
                    use_flow && user_region_slot[i].is_some()
                } else {
                    true
                };
                draw_noise(
                    rng,
                    &model.sched,
                    n_traj_tokens,
                    if has_flow { n_flow_tokens } else { 0 },
                    tok.embed_width,
                    dropout,
                )
            })
            .collect();

        // alignment cell mining (data-dependent only)
        let mut i2c_cells = Vec::new();
        let mut c2i_picks = Vec::new();
        if use_traj && use_flow && (self.switches.use_i2c || self.switches.use_c2i) {
            // user positions per step
            let mut locs: Vec<Vec<RegionId>> = Vec::with_capacity(users.len());
            for &u in &users {
                locs.push(
                    self.corpus.trajectories[u]
                        .resample(start, end)
                        .unwrap_or_default(),
                );
            }
            if self.switches.use_i2c {
                let mut cells: alloc::collections::BTreeMap<(usize, TimeStep), Vec<(usize, usize)>> =
                    alloc::collections::BTreeMap::new();
                for (pi, l) in locs.iter().enumerate() {
                    for (ti, &r) in l.iter().enumerate() {
                        if let Some(slot) = slot_of(r) {
                            cells.entry((slot, start + ti)).or_default().push((pi, ti));
                        }
                    }
                }
                for ((slot, t), members) in cells {
                    i2c_cells.push(I2cCellSpec {
                        region_slot: slot,
                        flow_tok: (t - start) / tok.token_len_flow,
                        members,
                    });
                }
                if i2c_cells.len() > self.tcfg.max_i2c_per_step {
                    // deterministic thinning
                    let stride = i2c_cells.len() / self.tcfg.max_i2c_per_step + 1;
                    i2c_cells = i2c_cells
                        .into_iter()
                        .enumerate()
                        .filter(|(i, _)| i % stride == 0)
                        .map(|(_, c)| c)
                        .collect();
                }
                report.i2c_cells_read += i2c_cells.len();
            }
            if self.switches.use_c2i && !self.peak_thr.is_empty() {
                // positives: batch trajectory tokens at peak cells with an
                // in-batch flow anchor
                let mut positives = Vec::new();
                for (pi, l) in locs.iter().enumerate() {
                    for (ti, &r) in l.iter().enumerate() {
                        let t = start + ti;
                        if self.is_peak(r, t) {
                            if let Some(slot) = slot_of(r) {
                                positives.push((pi, ti, slot, t));
                            }
                        }
                    }
                }
                for &(pi, ti, slot, t) in positives.iter() {
                    if c2i_picks.len() >= self.tcfg.max_c2i_per_step {
                        break;
                    }
                    let pos_region = locs[pi][ti];
                    // negative pool per the mining rule
                    let mut pool = Vec::new();
                    for (pj, lj) in locs.iter().enumerate() {
                        for (tj, &rj) in lj.iter().enumerate() {
                            if pj == pi && tj == ti {
                                continue;
                            }
                            let tt = start + tj;
                            if self.is_peak(rj, tt) {
                                continue;
                            }
                            let same_time_other_region = tt == t && rj != pos_region;
                            let same_region_other_time = rj == pos_region && tt != t;
                            if same_time_other_region || same_region_other_time {
                                pool.push((pj, tj));
                            }
                        }
                    }
                    if pool.is_empty() {
                        report.zero_vector_skips += 1;
                        continue;
                    }
                    let take = self.mining.n_negatives.min(pool.len());
                    let mut idx: Vec<usize> = (0..pool.len()).collect();
                    for i in 0..take {
                        let j = rng.gen_range(i..idx.len());
                        idx.swap(i, j);
                    }
                    let negatives = idx[..take].iter().map(|&i| pool[i]).collect();
                    c2i_picks.push(C2iPickSpec {
                        anchor: (slot, (t - start) / tok.token_len_flow),
                        positive: (pi, ti),
                        negatives,
                    });
                }
                report.c2i_batches_read += c2i_picks.len();
            }
        }

        Ok(FrozenBatch {
            start,
            anchor,
            end,
            users,
            user_region_slot,
            regions,
            draws,
            i2c_cells,
            c2i_picks,
        })
    }

    /// Loss (and optionally gradients) of a frozen batch at `params`.
    ///
    /// Returns (pred, i2c, c2i, total). With `grads` present, parameter
    /// gradients of the weighted total accumulate into it.
    pub fn frozen_loss(
        &self,
        model: &Model,
        params: &[f64],
        batch: &FrozenBatch,
        mut grads: Option<&mut [f64]>,
        report: Option<&mut TrainReport>,
    ) -> Result<(f64, f64, f64, f64), TrainError> {
        let tok = &model.cfg.tokenizer;
        let use_traj = self.switches.use_traj_data;
        let use_flow = self.switches.use_flow_data;
        let traj_view = model.traj_view_in(params);
        let flow_view = model.flow_view_in(params);

        // encode all batch sequences from the current parameters
        let mut traj_batches: Vec<TokenBatch> = Vec::new();
        if use_traj {
            for &u in &batch.users {
                let tb = encode_trajectory(
                    &self.corpus.trajectories[u],
                    batch.start,
                    batch.end,
                    batch.anchor,
                    &self.corpus.grid,
                    &traj_view,
                    tok,
                )
                .map_err(|e| TrainError::BadConfig(alloc::format!("{e}")))?;
                traj_batches.push(tb);
            }
        }
        let mut flow_batches: Vec<TokenBatch> = Vec::new();
        let mut flow_targets: Vec<Vec<Vec<f64>>> = Vec::new();
        if use_flow {
            for &r in &batch.regions {
                let fb = encode_flow(
                    &self.corpus.flow,
                    r,
                    batch.start,
                    batch.end,
                    batch.anchor,
                    &self.corpus.grid,
                    &flow_view,
                    tok,
                    &model.norm,
                )
                .map_err(|e| TrainError::BadConfig(alloc::format!("{e}")))?;
                // normalized window values per token (value-map inputs)
                let zs: Vec<Vec<f64>> = fb
                    .steps
                    .iter()
                    .map(|&a| {
                        flow_window_targets(
                            &self.corpus.flow,
                            r,
                            a,
                            a + tok.token_len_flow,
                            &model.norm,
                        )
                    })
                    .collect();
                flow_batches.push(fb);
                flow_targets.push(zs);
            }
        }

        // token gradient buffers
        let width = tok.embed_width;
        let mut d_traj: Vec<Vec<Vec<f64>>> = traj_batches
            .iter()
            .map(|b| vec![vec![0.0; width]; b.n_tokens()])
            .collect();
        let mut d_flow: Vec<Vec<Vec<f64>>> = flow_batches
            .iter()
            .map(|b| vec![vec![0.0; width]; b.n_tokens()])
            .collect();

        // ---- prediction loss over pairs ----
        let n_pairs = batch.draws.len();
        let mut pred_sum = 0.0;
        for pi in 0..n_pairs {
            let traj_b = if use_traj { Some(&traj_batches[pi]) } else { None };
            let flow_slot = if use_traj {
                batch.user_region_slot.get(pi).copied().flatten()
            } else {
                Some(pi)
            };
            let flow_b = flow_slot.map(|s| &flow_batches[s]);
            if traj_b.is_none() && flow_b.is_none() {
                continue;
            }
            let draw = &batch.draws[pi];
            let run = build_pair_run(&model.sched, traj_b, flow_b, draw);
            let refs: Vec<&SeqToken> = run.seq.iter().collect();
            if self.weights.gamma == 0.0 {
                continue;
            }
            if let Some(g) = grads.as_deref_mut() {
                let pass = model
                    .den
                    .forward(params, &refs)
                    .map_err(|e| TrainError::BadConfig(alloc::format!("{e}")))?;
                let n_elems: usize = run
                    .future
                    .iter()
                    .filter(|f| **f)
                    .count()
                    * width;
                let mut loss = 0.0;
                let d_outputs: Vec<Vec<f64>> = (0..run.seq.len())
                    .map(|i| {
                        if run.future[i] {
                            pass.outputs[i]
                                .iter()
                                .zip(&run.targets[i])
                                .map(|(o, t)| {
                                    loss += (o - t) * (o - t);
                                    2.0 * (o - t) / n_elems as f64
                                        * (self.weights.gamma / n_pairs as f64)
                                })
                                .collect()
                        } else {
                            vec![0.0; width]
                        }
                    })
                    .collect();
                loss /= n_elems as f64;
                pred_sum += loss;
                let d_x = model.den.backward(params, &pass, &d_outputs, g);
                // route input-token gradients back to the clean encodings,
                // scaled through the noising coefficient
                for (si, (is_traj, idx)) in run.origin.iter().enumerate() {
                    let scale = run.x0_scale[si];
                    if *is_traj {
                        for (a, b) in d_traj[pi][*idx].iter_mut().zip(&d_x[si]) {
                            *a += scale * b;
                        }
                    } else if let Some(s) = flow_slot {
                        for (a, b) in d_flow[s][*idx].iter_mut().zip(&d_x[si]) {
                            *a += scale * b;
                        }
                    }
                }
            } else {
                let eps_hat = model
                    .den
                    .predict_noise_refs(params, &refs)
                    .map_err(|e| TrainError::BadConfig(alloc::format!("{e}")))?;
                pred_sum += mse_over_futures(&eps_hat, &run.targets, &run.future);
            }
        }
        let pred = if n_pairs == 0 { 0.0 } else { pred_sum / n_pairs as f64 };

        // ---- individual-to-collective ----
        let mut i2c_val = 0.0;
        let mut zero_skips = 0usize;
        if self.switches.use_i2c && !batch.i2c_cells.is_empty() {
            let mut used = 0usize;
            let mut cell_grads: Vec<Option<(Vec<f64>, Vec<f64>)>> = Vec::new();
            for cell in &batch.i2c_cells {
                let mut u = vec![0.0; width];
                for &(pi, ti) in &cell.members {
                    for (a, b) in u.iter_mut().zip(&traj_batches[pi].tokens[ti]) {
                        *a += b;
                    }
                }
                let v = &flow_batches[cell.region_slot].tokens[cell.flow_tok];
                match i2c_loss_grad(&u, v) {
                    Ok((l, du, dv)) => {
                        i2c_val += l;
                        used += 1;
                        cell_grads.push(Some((du, dv)));
                    }
                    Err(_) => {
                        zero_skips += 1;
                        cell_grads.push(None);
                    }
                }
            }
            if used > 0 {
                i2c_val /= used as f64;
                if grads.is_some() {
                    let scale = self.weights.alpha / used as f64;
                    for (cell, cg) in batch.i2c_cells.iter().zip(&cell_grads) {
                        let Some((du, dv)) = cg else { continue };
                        // the sum over members distributes its gradient
                        // unchanged to every member token
                        for &(pi, ti) in &cell.members {
                            for (a, b) in d_traj[pi][ti].iter_mut().zip(du) {
                                *a += scale * b;
                            }
                        }
                        for (a, b) in
                            d_flow[cell.region_slot][cell.flow_tok].iter_mut().zip(dv)
                        {
                            *a += scale * b;
                        }
                    }
                }
            } else {
                i2c_val = 0.0;
            }
        }

        // ---- collective-to-individual ----
        let mut c2i_val = 0.0;
        if self.switches.use_c2i && !batch.c2i_picks.is_empty() {
            let batches: Vec<ContrastiveBatch> = batch
                .c2i_picks
                .iter()
                .map(|pick| ContrastiveBatch {
                    anchor_flow: flow_batches[pick.anchor.0].tokens[pick.anchor.1].clone(),
                    positive: traj_batches[pick.positive.0].tokens[pick.positive.1].clone(),
                    negatives: pick
                        .negatives
                        .iter()
                        .map(|&(pj, tj)| traj_batches[pj].tokens[tj].clone())
                        .collect(),
                    temperature: self.mining.temperature,
                    cell: crate::alignment::CellKey { region: 0, time_step: 0 },
                })
                .collect();
            match c2i_loss_grad(&batches) {
                Ok(cg) => {
                    c2i_val = cg.loss;
                    if grads.is_some() {
                        let w = self.weights.beta;
                        for (bi, pick) in batch.c2i_picks.iter().enumerate() {
                            for (a, b) in d_flow[pick.anchor.0][pick.anchor.1]
                                .iter_mut()
                                .zip(&cg.d_anchor[bi])
                            {
                                *a += w * b;
                            }
                            for (a, b) in d_traj[pick.positive.0][pick.positive.1]
                                .iter_mut()
                                .zip(&cg.d_positive[bi])
                            {
                                *a += w * b;
                            }
                            for (nj, &(pj, tj)) in pick.negatives.iter().enumerate() {
                                for (a, b) in
                                    d_traj[pj][tj].iter_mut().zip(&cg.d_negatives[bi][nj])
                                {
                                    *a += w * b;
                                }
                            }
                        }
                    }
                }
                Err(_) => {
                    zero_skips += 1;
                }
            }
        }

        // ---- scatter token gradients into the tables ----
        if let Some(g) = grads.as_deref_mut() {
            for (pi, tb) in traj_batches.iter().enumerate() {
                for i in 0..tb.n_tokens() {
                    if d_traj[pi][i].iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let (hour, day) = tb.times[i];
                    model.scatter_traj_token_grad(g, tb.region_ids[i], hour, day, &d_traj[pi][i]);
                }
            }
            for (si, fb) in flow_batches.iter().enumerate() {
                for i in 0..fb.n_tokens() {
                    if d_flow[si][i].iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let (hour, day) = fb.times[i];
                    model.scatter_flow_token_grad(
                        g,
                        fb.region_ids[i],
                        hour,
                        day,
                        &flow_targets[si][i],
                        &d_flow[si][i],
                    );
                }
            }
        }

        if let Some(rep) = report {
            rep.zero_vector_skips += zero_skips;
        }
        let total = total_loss(pred, i2c_val, c2i_val, &self.weights, &self.switches)?;
        Ok((pred, i2c_val, c2i_val, total))
    }
}

/// Adam optimizer over the flat parameter vector, with an optional
/// per-index learning-rate scale.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    lr_scale: Option<Vec<f64>>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_scale: None,
        }
    }

    pub fn with_scales(n: usize, lr: f64, scales: Vec<f64>) -> Self {
        debug_assert_eq!(scales.len(), n);
        let mut adam = Self::new(n, lr);
        adam.lr_scale = Some(scales);
        adam
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            let lr = match &self.lr_scale {
                Some(s) => self.lr * s[i],
                None => self.lr,
            };
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Train a model on the corpus. Deterministic given the seed in `tcfg`.
pub fn train(
    corpus: &Corpus,
    split: &ChronoSplit,
    mut model_cfg: ModelConfig,
    variant: &VariantConfig,
    switches: &AblationSwitches,
    weights: &LossWeights,
    tcfg: &TrainConfig,
    mining: &crate::alignment::MiningConfig,
) -> Result<(Model, TrainReport), TrainError> {
    // ablation switches and variant resolve the effective model shape
    model_cfg.use_traj = switches.use_traj_data;
    model_cfg.use_flow = switches.use_flow_data;
    model_cfg.shared_backbone = variant.shared_backbone && switches.shared_transformer;

    let mut model = Model::init(corpus.grid.clone(), model_cfg, tcfg.seed)
        .map_err(|e| TrainError::BadConfig(alloc::format!("{e}")))?;
    model.norm = FlowNormStats::fit(&corpus.flow, 0, split.train_end);

    let ctx = TrainContext::new(corpus, split, *weights, *switches, tcfg.clone(), *mining)?;
    let mut report = TrainReport::default();
    let mut lr_scale = vec![1.0; model.params.len()];
    for tables in [&model.traj_tables, &model.flow_tables] {
        for range in [
            Some(tables.spatial.clone()),
            Some(tables.hour.clone()),
            Some(tables.day.clone()),
            tables.value_w.clone(),
            tables.value_b.clone(),
        ]
        .into_iter()
        .flatten()
        {
            lr_scale[range].fill(tcfg.table_lr_mult);
        }
    }
    let mut adam = Adam::with_scales(model.params.len(), tcfg.lr, lr_scale);
    let mut rng = stream(tcfg.seed, StreamId::Batch);
    let mut grads = vec![0.0; model.params.len()];

    for step in 0..tcfg.steps {
        let batch = ctx.draw_batch(&model, &mut rng, &mut report)?;
        grads.fill(0.0);
        let (pred, i2c, c2i, total) =
            ctx.frozen_loss(&model, &model.params, &batch, Some(&mut grads), Some(&mut report))?;
        if !total.is_finite() {
            return Err(TrainError::DivergedLoss { step });
        }
        adam.step(&mut model.params, &grads);
        report.pred_losses.push(pred);
        report.i2c_losses.push(i2c);
        report.c2i_losses.push(c2i);
        report.total_losses.push(total);
        if step % 50 == 0 {
            // probe token scale with the first user (or region) window
            let rms = probe_rms(&model, corpus, &batch);
            report.token_rms_trace.push(rms);
        }
    }

    if model.cfg.use_flow {
        model.flow_head = Some(fit_flow_head(&model, corpus, split)?);
    }
    Ok((model, report))
}

fn probe_rms(model: &Model, corpus: &Corpus, batch: &FrozenBatch) -> f64 {
    if model.cfg.use_traj && !batch.users.is_empty() {
        if let Ok(tb) = encode_trajectory(
            &corpus.trajectories[batch.users[0]],
            batch.start,
            batch.end,
            batch.anchor,
            &corpus.grid,
            &model.traj_view(),
            &model.cfg.tokenizer,
        ) {
            return model.token_rms(&tb.tokens);
        }
    }
    if model.cfg.use_flow && !batch.regions.is_empty() {
        if let Ok(fb) = encode_flow(
            &corpus.flow,
            batch.regions[0],
            batch.start,
            batch.end,
            batch.anchor,
            &corpus.grid,
            &model.flow_view(),
            &model.cfg.tokenizer,
            &model.norm,
        ) {
            return model.token_rms(&fb.tokens);
        }
    }
    0.0
}

/// Ridge-fit the flow regression head on clean future tokens of the
/// training split. The denoiser's training signal never touches the head,
/// so it is fitted once after optimization.
pub fn fit_flow_head(
    model: &Model,
    corpus: &Corpus,
    split: &ChronoSplit,
) -> Result<FlowHead, TrainError> {
    let tok = &model.cfg.tokenizer;
    let (p, k) = (tok.history_len, tok.horizon);
    let width = tok.embed_width;
    let out_dim = model.cfg.n_channels * tok.token_len_flow;
    let hi = split.train_end.saturating_sub(k);
    if hi < p {
        return Err(TrainError::BadConfig("training split too short for flow head".into()));
    }
    let regions: Vec<RegionId> = (0..corpus.grid.n_regions())
        .filter(|r| !corpus.missing_regions.contains(r))
        .collect();
    if regions.is_empty() {
        return Err(TrainError::DataModalityMissing("flow"));
    }
    // cap the design matrix at ~4000 rows
    let anchors: Vec<TimeStep> = (p..=hi).collect();
    let toks_per_anchor = (k / tok.token_len_flow).max(1) * regions.len();
    let stride = (anchors.len() * toks_per_anchor / 4000).max(1);
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    let view = model.flow_view();
    for (ai, &anchor) in anchors.iter().enumerate() {
        if ai % stride != 0 {
            continue;
        }
        for &r in &regions {
            let fb = encode_flow(
                &corpus.flow,
                r,
                anchor - p,
                anchor + k,
                anchor,
                &corpus.grid,
                &view,
                tok,
                &model.norm,
            )
            .map_err(|e| TrainError::BadConfig(alloc::format!("{e}")))?;
            for i in 0..fb.n_tokens() {
                if fb.roles[i] != Role::Future {
                    continue;
                }
                let a = fb.steps[i];
                xs.extend_from_slice(&fb.tokens[i]);
                ys.extend(flow_window_targets(
                    &corpus.flow,
                    r,
                    a,
                    a + tok.token_len_flow,
                    &model.norm,
                ));
                rows += 1;
            }
        }
    }
    if rows < width {
        return Err(TrainError::BadConfig("too few samples to fit the flow head".into()));
    }
    // ridge scaled with the sample count keeps the head norm bounded even
    // when the trained value map loses conditioning
    let lambda = 1e-3 * rows as f64;
    let w = ridge_solve(&xs, &ys, rows, width, out_dim, lambda)
        .ok_or(TrainError::BadConfig("flow head normal equations singular".into()))?;
    // ridge returns (width, out_dim); the head stores (out_dim, width)
    let mut weight = vec![0.0; out_dim * width];
    for i in 0..width {
        for j in 0..out_dim {
            weight[j * width + i] = w[i * out_dim + j];
        }
    }
    Ok(FlowHead {
        weight,
        bias: vec![0.0; out_dim],
        n_channels: model.cfg.n_channels,
        steps_per_token: tok.token_len_flow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{GridSpec, Trajectory, Visit};
    use crate::synth::Corpus;

    fn mini_grid() -> GridSpec {
        // 2x3 grid, 4 steps per day (interval 21600 s)
        GridSpec::new(2, 3, 100.0, (0.0, 0.0), 21_600).unwrap()
    }

    fn mini_corpus() -> Corpus {
        let grid = mini_grid();
        let t_total = 16;
        let mk = |user: u64, locs: &[(usize, usize)]| {
            let visits = (0..t_total)
                .map(|t| Visit {
                    location: locs
                        .iter()
                        .rev()
                        .find(|(at, _)| *at <= t)
                        .map(|(_, l)| *l)
                        .unwrap(),
                    time: t,
                })
                .collect();
            Trajectory::new(user, visits)
        };
        let trajs = vec![
            mk(0, &[(0, 0), (6, 1)]),
            mk(1, &[(0, 0), (6, 1)]),
            mk(2, &[(0, 2)]),
            mk(3, &[(0, 3), (8, 4)]),
        ];
        let flow = crate::domain::aggregate_flows(&trajs, &grid, t_total).unwrap();
        Corpus {
            grid,
            trajectories: trajs,
            flow,
            missing_regions: alloc::collections::BTreeSet::new(),
            n_steps: t_total,
            homes: vec![0, 0, 2, 3],
            works: vec![1, 1, 2, 4],
        }
    }

    fn mini_model_cfg() -> ModelConfig {
        ModelConfig {
            tokenizer: crate::tokenizer::TokenizerConfig {
                token_len_traj: 1,
                token_len_flow: 2,
                stride: 2,
                embed_width: 8,
                history_len: 4,
                horizon: 2,
            },
            denoiser: crate::denoiser::DenoiserConfig {
                token_width: 8,
                d_model: 8,
                n_layers: 1,
                n_heads: 1,
                mlp_ratio: 2,
            },
            shared_backbone: true,
            use_traj: true,
            use_flow: true,
            n_channels: 2,
            diffusion_steps: 6,
            beta_start: 1e-3,
            beta_end: 0.3,
        }
    }

    fn mini_split() -> ChronoSplit {
        ChronoSplit { train_end: 12, val_end: 13, n_steps: 16 }
    }

    #[test]
    fn total_loss_weighting_and_switches() {
        let w = LossWeights { alpha: 1.0, beta: 1.0, gamma: 1.0 };
        let s = AblationSwitches::default();
        assert_eq!(total_loss(0.2, 0.5, 0.3, &w, &s).unwrap(), 1.0);
        let w2 = LossWeights { alpha: 0.0, beta: 0.0, gamma: 1.0 };
        assert_eq!(total_loss(0.7, 9.0, 9.0, &w2, &s).unwrap(), 0.7);
        let mut s2 = s;
        s2.use_i2c = false;
        assert_eq!(total_loss(0.2, 123.0, 0.3, &w, &s2).unwrap(), 0.5);
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0, &w, &s),
            Err(TrainError::NonFiniteLoss)
        ));
    }

    #[test]
    fn variant_grid_matches_expected_mapping() {
        assert_eq!(
            configure_variant(Variant::V1),
            VariantConfig { shared_backbone: true, joint_inference: false }
        );
        assert_eq!(
            configure_variant(Variant::V2),
            VariantConfig { shared_backbone: true, joint_inference: true }
        );
        assert_eq!(
            configure_variant(Variant::V3),
            VariantConfig { shared_backbone: false, joint_inference: false }
        );
        assert_eq!(
            configure_variant(Variant::V4),
            VariantConfig { shared_backbone: false, joint_inference: true }
        );
        assert!(matches!(Variant::parse("v9"), Err(TrainError::UnknownVariant(_))));
    }

    #[test]
    fn perfect_oracle_prediction_has_zero_loss() {
        // test double: the "denoiser" output equals the injected noise
        let eps = vec![vec![0.3, -0.7], vec![1.1, 0.0]];
        let future = vec![true, true];
        assert_eq!(mse_over_futures(&eps, &eps, &future), 0.0);
    }

    #[test]
    fn zero_head_prediction_loss_is_mean_square_noise() {
        // with a zero-initialized output head the prediction is 0 and the
        // loss is the mean of eps^2, which concentrates near 1
        let corpus = mini_corpus();
        let model = Model::init(corpus.grid.clone(), mini_model_cfg(), 3).unwrap();
        let traj = encode_trajectory(
            &corpus.trajectories[0],
            4,
            10,
            8,
            &corpus.grid,
            &model.traj_view(),
            &model.cfg.tokenizer,
        )
        .unwrap();
        let mut rng = stream(9, StreamId::TrainNoise);
        let mut sum = 0.0;
        let mut n_draws = 0;
        // 2 future tokens x width 8 = 16 elements per draw
        while n_draws * 16 < 10_000 {
            sum += prediction_loss(&model.den, &model.params, &model.sched, Some(&traj), None, &mut rng);
            n_draws += 1;
        }
        let mean = sum / n_draws as f64;
        assert!((mean - 1.0).abs() < 0.1, "mean loss {mean}");
    }

    #[test]
    fn prediction_loss_is_deterministic_given_stream_state() {
        let corpus = mini_corpus();
        let model = Model::init(corpus.grid.clone(), mini_model_cfg(), 3).unwrap();
        let traj = encode_trajectory(
            &corpus.trajectories[0],
            4,
            10,
            8,
            &corpus.grid,
            &model.traj_view(),
            &model.cfg.tokenizer,
        )
        .unwrap();
        let a = {
            let mut rng = stream(4, StreamId::TrainNoise);
            prediction_loss(&model.den, &model.params, &model.sched, Some(&traj), None, &mut rng)
        };
        let b = {
            let mut rng = stream(4, StreamId::TrainNoise);
            prediction_loss(&model.den, &model.params, &model.sched, Some(&traj), None, &mut rng)
        };
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_match_finite_differences_with_all_terms_active() {
        let corpus = mini_corpus();
        let split = mini_split();
        let weights = LossWeights { alpha: 0.5, beta: 0.5, gamma: 1.0 };
        let switches = AblationSwitches::default();
        let tcfg = TrainConfig { batch_size: 4, seed: 5, marginal_dropout: 0.0, ..Default::default() };
        let mining = crate::alignment::MiningConfig { n_negatives: 3, ..Default::default() };
        let model = Model::init(corpus.grid.clone(), mini_model_cfg(), 5).unwrap();
        let ctx =
            TrainContext::new(&corpus, &split, weights, switches, tcfg, mining).unwrap();
        let mut report = TrainReport::default();
        let mut rng = stream(5, StreamId::Batch);
        let batch = ctx.draw_batch(&model, &mut rng, &mut report).unwrap();
        assert!(!batch.i2c_cells.is_empty(), "batch must exercise the I2C term");
        assert!(!batch.c2i_picks.is_empty(), "batch must exercise the C2I term");

        let mut grads = vec![0.0; model.params.len()];
        let (_, _, _, total) = ctx
            .frozen_loss(&model, &model.params, &batch, Some(&mut grads), None)
            .unwrap();
        assert!(total.is_finite());

        let loss_at = |params: &[f64]| -> f64 {
            ctx.frozen_loss(&model, params, &batch, None, None).unwrap().3
        };
        let h = 1e-6;
        let n = model.params.len();
        let stride = (n / 220).max(1);
        let mut checked = 0;
        for idx in (0..n).step_by(stride) {
            let mut pp = model.params.clone();
            pp[idx] += h;
            let lp = loss_at(&pp);
            pp[idx] -= 2.0 * h;
            let lm = loss_at(&pp);
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[idx];
            let denom = fd.abs().max(an.abs()).max(1e-4);
            assert!(
                ((fd - an) / denom).abs() < 1e-4,
                "param {idx}: fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn zero_steps_training_returns_initialization() {
        let corpus = mini_corpus();
        let split = mini_split();
        let tcfg = TrainConfig { steps: 0, batch_size: 4, seed: 7, ..Default::default() };
        let (model, report) = train(
            &corpus,
            &split,
            mini_model_cfg(),
            &configure_variant(Variant::V2),
            &AblationSwitches::default(),
            &LossWeights::default(),
            &tcfg,
            &crate::alignment::MiningConfig::default(),
        )
        .unwrap();
        let fresh = Model::init(corpus.grid.clone(), model.cfg.clone(), 7).unwrap();
        assert_eq!(model.params, fresh.params);
        assert!(report.pred_losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let corpus = mini_corpus();
        let split = mini_split();
        let tcfg = TrainConfig { steps: 5, batch_size: 3, seed: 11, ..Default::default() };
        let run = || {
            train(
                &corpus,
                &split,
                mini_model_cfg(),
                &configure_variant(Variant::V1),
                &AblationSwitches::default(),
                &LossWeights::default(),
                &tcfg,
                &crate::alignment::MiningConfig { n_negatives: 3, ..Default::default() },
            )
            .unwrap()
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a.params, b.params);
        assert_eq!(ra.total_losses, rb.total_losses);
    }

    #[test]
    fn disabling_i2c_never_reads_alignment_cells() {
        let corpus = mini_corpus();
        let split = mini_split();
        let tcfg = TrainConfig { steps: 4, batch_size: 4, seed: 13, ..Default::default() };
        let mut switches = AblationSwitches::default();
        switches.use_i2c = false;
        let (_, report) = train(
            &corpus,
            &split,
            mini_model_cfg(),
            &configure_variant(Variant::V1),
            &switches,
            &LossWeights::default(),
            &tcfg,
            &crate::alignment::MiningConfig { n_negatives: 3, ..Default::default() },
        )
        .unwrap();
        assert_eq!(report.i2c_cells_read, 0);
        assert!(report.c2i_batches_read > 0);
    }

    #[test]
    fn missing_modality_is_rejected() {
        let corpus = mini_corpus();
        let mut empty = corpus.clone();
        empty.trajectories.clear();
        let split = mini_split();
        let err = train(
            &empty,
            &split,
            mini_model_cfg(),
            &configure_variant(Variant::V1),
            &AblationSwitches::default(),
            &LossWeights::default(),
            &TrainConfig { steps: 1, ..Default::default() },
            &crate::alignment::MiningConfig::default(),
        );
        assert!(matches!(err, Err(TrainError::DataModalityMissing(_))));
    }

    #[test]
    fn loss_decreases_on_the_mini_corpus() {
        let corpus = mini_corpus();
        let split = mini_split();
        let tcfg = TrainConfig { steps: 60, batch_size: 4, seed: 17, ..Default::default() };
        let (_, report) = train(
            &corpus,
            &split,
            mini_model_cfg(),
            &configure_variant(Variant::V2),
            &AblationSwitches::default(),
            &LossWeights::default(),
            &tcfg,
            &crate::alignment::MiningConfig { n_negatives: 3, ..Default::default() },
        )
        .unwrap();
        let early: f64 = report.pred_losses[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = report.pred_losses[50..].iter().sum::<f64>() / 10.0;
        assert!(late < early, "prediction loss should trend down: {early} -> {late}");
    }
}
