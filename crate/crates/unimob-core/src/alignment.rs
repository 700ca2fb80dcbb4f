//! Bidirectional individual/collective alignment losses.
//!
//! The individual-to-collective loss pulls the summed trajectory-token
//! embedding of a (region, step) cell toward that cell's flow embedding via
//! cosine similarity. The collective-to-individual loss is an InfoNCE
//! contrast anchored at flow peaks: trajectory tokens at a peak cell are
//! positives, spatiotemporally inconsistent tokens are negatives.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec;
use alloc::vec::Vec;

use crate::domain::{FlowField, RegionId, TimeStep, INFLOW};
use crate::linalg::{dot, norm2};
use crate::tokenizer::{TokenBatch, TokenModality};

/// Norm floor below which a vector counts as zero for cosine losses.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum AlignError {
    EmptyCell,
    ZeroVector,
    /// The peak quantile exceeds every value of the series.
    NoPeaks,
    NoNegatives,
    WidthMismatch,
    BadQuantile(f64),
}

impl core::fmt::Display for AlignError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            AlignError::EmptyCell => write!(f, "no user embeddings in cell"),
            AlignError::ZeroVector => write!(f, "zero vector in cosine loss"),
            AlignError::NoPeaks => write!(f, "no flow peaks above the quantile"),
            AlignError::NoNegatives => write!(f, "no negative samples available"),
            AlignError::WidthMismatch => write!(f, "embedding widths disagree"),
            AlignError::BadQuantile(q) => write!(f, "quantile {q} outside (0, 1)"),
        }
    }
}

impl core::error::Error for AlignError {}

/// Spacetime cell indexing the alignment pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub region: RegionId,
    pub time_step: TimeStep,
}

/// One InfoNCE contrast: a peak cell's flow embedding against one matching
/// trajectory embedding and sampled mismatching ones.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub anchor_flow: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
    pub temperature: f64,
    /// Cell the anchor came from (bookkeeping for tests and counters).
    pub cell: CellKey,
}

/// Element-wise sum of the user embeddings present in one cell.
pub fn aggregate_user_embeddings(per_user: &[&[f64]]) -> Result<Vec<f64>, AlignError> {
    let first = per_user.first().ok_or(AlignError::EmptyCell)?;
    let width = first.len();
    let mut out = vec![0.0; width];
    for emb in per_user {
        if emb.len() != width {
            return Err(AlignError::WidthMismatch);
        }
        for (o, e) in out.iter_mut().zip(*emb) {
            *o += e;
        }
    }
    Ok(out)
}

/// Individual-to-collective loss: `1 - cos(u, v)`, in [0, 2].
pub fn i2c_loss(u: &[f64], v: &[f64]) -> Result<f64, AlignError> {
    if u.len() != v.len() {
        return Err(AlignError::WidthMismatch);
    }
    let nu = norm2(u);
    let nv = norm2(v);
    if nu < ZERO_NORM_EPS || nv < ZERO_NORM_EPS {
        return Err(AlignError::ZeroVector);
    }
    Ok(1.0 - dot(u, v) / (nu * nv))
}

/// Gradient of [`i2c_loss`] with respect to both inputs.
/// d/du (1 - u.v/(|u||v|)) = -( v/(|u||v|) - (u.v) u / (|u|^3 |v|) ).
pub fn i2c_loss_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), AlignError> {
    if u.len() != v.len() {
        return Err(AlignError::WidthMismatch);
    }
    let nu = norm2(u);
    let nv = norm2(v);
    if nu < ZERO_NORM_EPS || nv < ZERO_NORM_EPS {
        return Err(AlignError::ZeroVector);
    }
    let uv = dot(u, v);
    let loss = 1.0 - uv / (nu * nv);
    let mut du = vec![0.0; u.len()];
    let mut dv = vec![0.0; v.len()];
    for i in 0..u.len() {
        du[i] = -(v[i] / (nu * nv) - uv * u[i] / (nu * nu * nu * nv));
        dv[i] = -(u[i] / (nu * nv) - uv * v[i] / (nv * nv * nv * nu));
    }
    Ok((loss, du, dv))
}

/// Batched I2C: mean over populated cells, skipping zero-norm pairs.
/// Returns (mean loss, cells used, cells skipped).
pub fn i2c_loss_batched(pairs: &[(Vec<f64>, Vec<f64>)]) -> (f64, usize, usize) {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (u, v) in pairs {
        match i2c_loss(u, v) {
            Ok(l) => {
                sum += l;
                used += 1;
            }
            Err(_) => skipped += 1,
        }
    }
    (if used == 0 { 0.0 } else { sum / used as f64 }, used, skipped)
}

/// InfoNCE over contrastive batches:
/// `-(1/N) sum log( phi(F, R+) / (phi(F, R+) + sum phi(F, R-)) )`
/// with `phi(a, b) = exp(cos(a, b) / temperature)`.
pub fn c2i_loss(batches: &[ContrastiveBatch]) -> Result<f64, AlignError> {
    if batches.is_empty() {
        return Err(AlignError::EmptyCell);
    }
    let mut total = 0.0;
    for b in batches {
        if b.negatives.is_empty() {
            return Err(AlignError::NoNegatives);
        }
        let pos = dot_cos(&b.anchor_flow, &b.positive)? / b.temperature;
        // log-sum-exp over {pos} + negatives, stabilized
        let mut sims = Vec::with_capacity(b.negatives.len() + 1);
        sims.push(pos);
        for neg in &b.negatives {
            sims.push(dot_cos(&b.anchor_flow, neg)? / b.temperature);
        }
        let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + sims.iter().map(|s| (s - mx).exp()).sum::<f64>().ln();
        total += -(pos - lse);
    }
    Ok(total / batches.len() as f64)
}

fn dot_cos(a: &[f64], b: &[f64]) -> Result<f64, AlignError> {
    if a.len() != b.len() {
        return Err(AlignError::WidthMismatch);
    }
    let na = norm2(a);
    let nb = norm2(b);
    if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS {
        return Err(AlignError::ZeroVector);
    }
    Ok(dot(a, b) / (na * nb))
}

/// Gradient of cosine(a, b) with respect to `a`.
fn cos_grad_wrt_a(a: &[f64], b: &[f64]) -> Vec<f64> {
    let na = norm2(a);
    let nb = norm2(b);
    let ab = dot(a, b);
    let mut g = vec![0.0; a.len()];
    for i in 0..a.len() {
        g[i] = b[i] / (na * nb) - ab * a[i] / (na * na * na * nb);
    }
    g
}

/// Per-batch gradients of [`c2i_loss`]: with softmax weights p over
/// {positive} + negatives, dL/d sim_pos = (p_pos - 1)/tau and
/// dL/d sim_neg_j = p_j / tau, each averaged over batches.
pub struct C2iGrads {
    pub loss: f64,
    /// One gradient vector per batch for the anchor.
    pub d_anchor: Vec<Vec<f64>>,
    /// One gradient vector per batch for the positive.
    pub d_positive: Vec<Vec<f64>>,
    /// Per batch, one gradient vector per negative.
    pub d_negatives: Vec<Vec<Vec<f64>>>,
}

pub fn c2i_loss_grad(batches: &[ContrastiveBatch]) -> Result<C2iGrads, AlignError> {
    if batches.is_empty() {
        return Err(AlignError::EmptyCell);
    }
    let nb = batches.len() as f64;
    let mut out = C2iGrads {
        loss: 0.0,
        d_anchor: Vec::with_capacity(batches.len()),
        d_positive: Vec::with_capacity(batches.len()),
        d_negatives: Vec::with_capacity(batches.len()),
    };
    for b in batches {
        if b.negatives.is_empty() {
            return Err(AlignError::NoNegatives);
        }
        let tau = b.temperature;
        let mut sims = Vec::with_capacity(b.negatives.len() + 1);
        sims.push(dot_cos(&b.anchor_flow, &b.positive)? / tau);
        for neg in &b.negatives {
            sims.push(dot_cos(&b.anchor_flow, neg)? / tau);
        }
        let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sims.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
        out.loss += -(sims[0] - (mx + z.ln()));

        // d loss / d sim: positive gets (p0 - 1), negative j gets p_j
        let mut d_anchor = vec![0.0; b.anchor_flow.len()];
        let coef_pos = (p[0] - 1.0) / (tau * nb);
        let g_pos_a = cos_grad_wrt_a(&b.anchor_flow, &b.positive);
        let g_pos_p = cos_grad_wrt_a(&b.positive, &b.anchor_flow);
        for i in 0..d_anchor.len() {
            d_anchor[i] += coef_pos * g_pos_a[i];
        }
        let d_positive: Vec<f64> = g_pos_p.iter().map(|g| coef_pos * g).collect();
        let mut d_negs = Vec::with_capacity(b.negatives.len());
        for (j, neg) in b.negatives.iter().enumerate() {
            let coef = p[j + 1] / (tau * nb);
            let g_a = cos_grad_wrt_a(&b.anchor_flow, neg);
            for i in 0..d_anchor.len() {
                d_anchor[i] += coef * g_a[i];
            }
            let g_n = cos_grad_wrt_a(neg, &b.anchor_flow);
            d_negs.push(g_n.iter().map(|g| coef * g).collect());
        }
        out.d_anchor.push(d_anchor);
        out.d_positive.push(d_positive);
        out.d_negatives.push(d_negs);
    }
    out.loss /= nb;
    Ok(out)
}

/// Per-region inflow peak thresholds at the given quantile.
///
/// The threshold is the empirical quantile of the region's own inflow
/// series (linear-interpolated order statistic); a cell is a peak when its
/// inflow strictly exceeds the threshold.
pub fn peak_thresholds(flow: &FlowField, quantile: f64) -> Result<Vec<f64>, AlignError> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(AlignError::BadQuantile(quantile));
    }
    let mut out = Vec::with_capacity(flow.n_regions);
    let mut series = vec![0.0; flow.n_steps];
    for l in 0..flow.n_regions {
        for t in 0..flow.n_steps {
            series[t] = flow.get(INFLOW, t, l);
        }
        series.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = quantile * (flow.n_steps - 1) as f64;
        let lo = pos as usize;
        let hi = (lo + 1).min(flow.n_steps - 1);
        let frac = pos - lo as f64;
        out.push(series[lo] * (1.0 - frac) + series[hi] * frac);
    }
    Ok(out)
}

/// Options for [`mine_contrastive_pairs`].
#[derive(Debug, Clone, Copy)]
pub struct MiningConfig {
    pub peak_quantile: f64,
    pub n_negatives: usize,
    pub temperature: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { peak_quantile: 0.8, n_negatives: 8, temperature: 0.1 }
    }
}

/// Positive/negative mining against a flow field.
///
/// A cell (l, t) is a peak when its inflow exceeds region l's own quantile
/// threshold. Every trajectory token at a peak cell becomes a positive for
/// that cell's flow embedding; negatives are trajectory tokens at the same
/// step in non-peak regions plus tokens in the same region at non-peak
/// steps, sampled uniformly without replacement.
pub fn mine_contrastive_pairs<R: rand::Rng + ?Sized>(
    flow: &FlowField,
    traj_tokens: &[&TokenBatch],
    flow_tokens: &[&TokenBatch],
    cfg: &MiningConfig,
    rng: &mut R,
) -> Result<Vec<ContrastiveBatch>, AlignError> {
    let thresholds = peak_thresholds(flow, cfg.peak_quantile)?;
    let is_peak = |l: RegionId, t: TimeStep| flow.get(INFLOW, t, l) > thresholds[l];

    // any peak at all in the field?
    let mut any_peak = false;
    'outer: for l in 0..flow.n_regions {
        for t in 0..flow.n_steps {
            if is_peak(l, t) {
                any_peak = true;
                break 'outer;
            }
        }
    }
    if !any_peak {
        return Err(AlignError::NoPeaks);
    }

    // collect trajectory tokens with their cells
    struct Tok<'a> {
        cell: CellKey,
        emb: &'a [f64],
        peak: bool,
    }
    let mut toks: Vec<Tok> = Vec::new();
    for batch in traj_tokens {
        debug_assert_eq!(batch.modality, TokenModality::Trajectory);
        for i in 0..batch.n_tokens() {
            let cell = CellKey { region: batch.region_ids[i], time_step: batch.steps[i] };
            if cell.region >= flow.n_regions || cell.time_step >= flow.n_steps {
                continue;
            }
            toks.push(Tok {
                cell,
                emb: &batch.tokens[i],
                peak: is_peak(cell.region, cell.time_step),
            });
        }
    }

    let mut out = Vec::new();
    for (pi, pos) in toks.iter().enumerate() {
        if !pos.peak {
            continue;
        }
        // anchor: the flow token covering this peak cell
        let mut anchor = None;
        for fb in flow_tokens {
            if fb.region_ids.first() == Some(&pos.cell.region) {
                if let Some(idx) = fb.token_covering(pos.cell.time_step) {
                    anchor = Some(fb.tokens[idx].clone());
                    break;
                }
            }
        }
        let Some(anchor) = anchor else { continue };

        // negative pool: same step / other non-peak region, or same region /
        // other non-peak step
        let pool: Vec<usize> = toks
            .iter()
            .enumerate()
            .filter(|(j, t)| {
                *j != pi
                    && !t.peak
                    && ((t.cell.time_step == pos.cell.time_step && t.cell.region != pos.cell.region)
                        || (t.cell.region == pos.cell.region
                            && t.cell.time_step != pos.cell.time_step))
            })
            .map(|(j, _)| j)
            .collect();
        if pool.is_empty() {
            return Err(AlignError::NoNegatives);
        }
        let take = cfg.n_negatives.min(pool.len());
        let negatives = sample_without_replacement(&pool, take, rng)
            .into_iter()
            .map(|j| toks[j].emb.to_vec())
            .collect();
        out.push(ContrastiveBatch {
            anchor_flow: anchor,
            positive: pos.emb.to_vec(),
            negatives,
            temperature: cfg.temperature,
            cell: pos.cell,
        });
    }
    Ok(out)
}

fn sample_without_replacement<R: rand::Rng + ?Sized>(
    pool: &[usize],
    take: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    // partial Fisher-Yates
    for i in 0..take {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..take].iter().map(|&i| pool[i]).collect()
}
