//! Chronological splits and evaluation harness shared by the model and the
//! classical baselines.
//!
//! Every evaluator takes two corpora: `data` (possibly corrupted inputs the
//! models actually see) and `truth` (clean ground truth the metrics compare
//! against). The standard benchmark passes the same corpus twice.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::baselines::{ha_predict, MarkovModel, VarModel};
use crate::domain::{FlowField, RegionId, TimeStep};
use crate::metrics::{flow_error_metrics_raw, top_k_contains, MetricReport, MAPE_EPSILON};
use crate::model::Model;
use crate::predict::{predict, FlowHistory, PredictError};
use crate::rng::{combine_seed, stream, StreamId};
use crate::synth::Corpus;
use crate::train::VariantConfig;

/// Chronological train/validation/test boundary steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ChronoSplit {
    pub train_end: TimeStep,
    pub val_end: TimeStep,
    pub n_steps: usize,
}

impl ChronoSplit {
    /// Standard 7:1:2 chronological split.
    pub fn from_ratios(n_steps: usize, train_frac: f64, val_frac: f64) -> Self {
        let train_end = (n_steps as f64 * train_frac).floor() as usize;
        let val_end = (n_steps as f64 * (train_frac + val_frac)).floor() as usize;
        ChronoSplit { train_end, val_end: val_end.min(n_steps), n_steps }
    }

    pub fn standard(n_steps: usize) -> Self {
        Self::from_ratios(n_steps, 0.7, 0.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalConfig {
    /// Trajectory evaluation covers at most this many users.
    pub n_users: usize,
    /// Test anchors are taken every `anchor_stride` steps.
    pub anchor_stride: usize,
    /// Predictive distributions average over this many sampling draws.
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_users: 150, anchor_stride: 6, n_draws: 1, seed: 1 }
    }
}

/// Anchors in the test span such that `[t0 - p, t0 + k)` stays in range.
pub fn test_anchors(split: &ChronoSplit, p: usize, k: usize, stride: usize) -> Vec<TimeStep> {
    let lo = split.val_end.max(p);
    let hi = split.n_steps.saturating_sub(k);
    if hi < lo {
        return Vec::new();
    }
    (lo..=hi).step_by(stride.max(1)).collect()
}

/// Deterministic evaluation subset of users.
pub fn eval_users(n_total: usize, cfg: &EvalConfig) -> Vec<usize> {
    if cfg.n_users >= n_total {
        return (0..n_total).collect();
    }
    let mut rng = stream(cfg.seed, StreamId::Eval);
    let mut idx: Vec<usize> = (0..n_total).collect();
    use rand::Rng;
    for i in 0..cfg.n_users {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    let mut out = idx[..cfg.n_users].to_vec();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrajPredRow {
    pub user_id: u64,
    pub step: TimeStep,
    pub location: RegionId,
    pub prob_top1: f64,
    pub truth: RegionId,
}

#[derive(Debug, Clone)]
pub struct TrajEvalOutput {
    pub report: MetricReport,
    pub rows: Vec<TrajPredRow>,
}

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlowPredRow {
    pub region: RegionId,
    pub step: TimeStep,
    pub channel: usize,
    pub value: f64,
    pub truth: f64,
}

#[derive(Debug, Clone)]
pub struct FlowEvalOutput {
    pub report: MetricReport,
    pub rows: Vec<FlowPredRow>,
}

fn acc_report(hits: &BTreeMap<usize, usize>, n: usize) -> MetricReport {
    let mut report = MetricReport::empty();
    report.n_samples = n;
    for (&k, &h) in hits {
        report
            .acc_at_k
            .insert(k, if n == 0 { 0.0 } else { h as f64 / n as f64 });
    }
    report
}

fn flow_report(pred: &[f64], truth: &[f64]) -> Result<MetricReport, EvalError> {
    let (mae, mape, rmse) =
        flow_error_metrics_raw(pred, truth, MAPE_EPSILON).map_err(|e| EvalError::Metric(alloc::format!("{e}")))?;
    let mut report = MetricReport::empty();
    report.mae = mae;
    report.mape = mape;
    report.rmse = rmse;
    report.n_samples = pred.len();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    NoAnchors,
    Predict(String),
    Metric(String),
}

impl core::fmt::Display for EvalError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EvalError::NoAnchors => write!(f, "test span leaves no evaluation anchors"),
            EvalError::Predict(m) => write!(f, "prediction failed: {m}"),
            EvalError::Metric(m) => write!(f, "metric failed: {m}"),
        }
    }
}

impl core::error::Error for EvalError {}

impl From<PredictError> for EvalError {
    fn from(e: PredictError) -> Self {
        EvalError::Predict(alloc::format!("{e}"))
    }
}

pub const ACC_KS: [usize; 3] = [1, 3, 5];

/// Trajectory-task evaluation of the trained model.
pub fn eval_unimob_trajectory(
    model: &Model,
    data: &Corpus,
    truth: &Corpus,
    split: &ChronoSplit,
    variant: &VariantConfig,
    cfg: &EvalConfig,
) -> Result<TrajEvalOutput, EvalError> {
    let p = model.cfg.tokenizer.history_len;
    let k = model.cfg.tokenizer.horizon;
    let anchors = test_anchors(split, p, k, cfg.anchor_stride);
    if anchors.is_empty() {
        return Err(EvalError::NoAnchors);
    }
    let users = eval_users(data.trajectories.len(), cfg);
    let l = data.grid.n_regions();
    let mut hits: BTreeMap<usize, usize> = ACC_KS.iter().map(|&k| (k, 0)).collect();
    let mut n_points = 0usize;
    let mut rows = Vec::new();

    for &u in &users {
        let traj = &data.trajectories[u];
        let truth_traj = truth
            .trajectories
            .iter()
            .find(|t| t.user_id == traj.user_id)
            .unwrap_or(traj);
        for &t0 in &anchors {
            let Some(truth_locs) = truth_traj.resample(t0, t0 + k) else { continue };
            // joint partner: the user's region entering the anchor
            let partner = traj.location_at(t0 - 1).filter(|r| !data.missing_regions.contains(r));
            let (var_eff, flow_hist);
            if variant.joint_inference && partner.is_some() {
                var_eff = *variant;
                flow_hist = partner.map(|r| FlowHistory { flow: &data.flow, region: r });
            } else {
                var_eff = VariantConfig { joint_inference: false, ..*variant };
                flow_hist = None;
            }
            // average the decoded distributions over sampling draws
            let mut avg: Vec<Vec<f64>> = vec![vec![0.0; l]; k];
            for d in 0..cfg.n_draws.max(1) {
                let seed = combine_seed(cfg.seed, &[u as u64, t0 as u64, d as u64]);
                let out = predict(model, Some(traj), flow_hist.as_ref(), t0, &var_eff, seed)?;
                let forecast = out
                    .traj
                    .ok_or_else(|| EvalError::Predict("no trajectory output".into()))?;
                for (j, dist) in forecast.distributions.iter().enumerate() {
                    for (a, b) in avg[j].iter_mut().zip(dist) {
                        *a += b / cfg.n_draws.max(1) as f64;
                    }
                }
            }
            for (j, dist) in avg.iter().enumerate() {
                let truth_loc = truth_locs[j];
                for &kk in ACC_KS.iter() {
                    if top_k_contains(dist, kk, truth_loc) {
                        *hits.get_mut(&kk).unwrap() += 1;
                    }
                }
                n_points += 1;
                let loc = crate::predict::argmax_first(dist);
                rows.push(TrajPredRow {
                    user_id: traj.user_id,
                    step: t0 + j,
                    location: loc,
                    prob_top1: dist[loc],
                    truth: truth_loc,
                });
            }
        }
    }
    Ok(TrajEvalOutput { report: acc_report(&hits, n_points), rows })
}

/// Flow-task evaluation of the trained model over all unmasked regions.
pub fn eval_unimob_flow(
    model: &Model,
    data: &Corpus,
    truth: &Corpus,
    split: &ChronoSplit,
    variant: &VariantConfig,
    cfg: &EvalConfig,
) -> Result<FlowEvalOutput, EvalError> {
    let p = model.cfg.tokenizer.history_len;
    let k = model.cfg.tokenizer.horizon;
    let anchors = test_anchors(split, p, k, cfg.anchor_stride);
    if anchors.is_empty() {
        return Err(EvalError::NoAnchors);
    }
    let n_ch = model.cfg.n_channels;
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let mut rows = Vec::new();

    // occupancy index for joint partners, per anchor
    for &t0 in &anchors {
        let mut occupant: BTreeMap<RegionId, u64> = BTreeMap::new();
        if variant.joint_inference {
            for traj in &data.trajectories {
                if let Some(r) = traj.location_at(t0 - 1) {
                    occupant.entry(r).or_insert(traj.user_id);
                }
            }
        }
        for r in 0..data.grid.n_regions() {
            if data.missing_regions.contains(&r) {
                continue;
            }
            let partner = occupant
                .get(&r)
                .and_then(|uid| data.trajectories.iter().find(|t| t.user_id == *uid));
            let (var_eff, traj_hist) = if variant.joint_inference && partner.is_some() {
                (*variant, partner)
            } else {
                (VariantConfig { joint_inference: false, ..*variant }, None)
            };
            let fh = FlowHistory { flow: &data.flow, region: r };
            let mut avg = vec![0.0; n_ch * k];
            for d in 0..cfg.n_draws.max(1) {
                let seed = combine_seed(cfg.seed, &[r as u64, t0 as u64, d as u64, 7]);
                let out = predict(model, traj_hist, Some(&fh), t0, &var_eff, seed)?;
                let forecast = out
                    .flow
                    .ok_or_else(|| EvalError::Predict("no flow output".into()))?;
                for (a, b) in avg.iter_mut().zip(&forecast.values) {
                    *a += b / cfg.n_draws.max(1) as f64;
                }
            }
            for c in 0..n_ch {
                for j in 0..k {
                    let pred = avg[c * k + j];
                    let tv = truth.flow.get(c, t0 + j, r);
                    preds.push(pred);
                    truths.push(tv);
                    rows.push(FlowPredRow { region: r, step: t0 + j, channel: c, value: pred, truth: tv });
                }
            }
        }
    }
    Ok(FlowEvalOutput { report: flow_report(&preds, &truths)?, rows })
}

/// Markov baseline on the trajectory task, fitted on the training span.
pub fn eval_markov_trajectory(
    data: &Corpus,
    truth: &Corpus,
    split: &ChronoSplit,
    horizon: usize,
    history_len: usize,
    cfg: &EvalConfig,
) -> Result<TrajEvalOutput, EvalError> {
    let anchors = test_anchors(split, history_len, horizon, cfg.anchor_stride);
    if anchors.is_empty() {
        return Err(EvalError::NoAnchors);
    }
    let model = MarkovModel::fit(&data.trajectories, data.grid.n_regions(), split.train_end);
    let users = eval_users(data.trajectories.len(), cfg);
    let mut hits: BTreeMap<usize, usize> = ACC_KS.iter().map(|&k| (k, 0)).collect();
    let mut n_points = 0usize;
    let mut rows = Vec::new();
    for &u in &users {
        let traj = &data.trajectories[u];
        let truth_traj = truth
            .trajectories
            .iter()
            .find(|t| t.user_id == traj.user_id)
            .unwrap_or(traj);
        for &t0 in &anchors {
            let Some(last) = traj.location_at(t0 - 1) else { continue };
            let Some(truth_locs) = truth_traj.resample(t0, t0 + horizon) else { continue };
            let (ids, dists) = model.predict(last, horizon);
            for j in 0..horizon {
                for &kk in ACC_KS.iter() {
                    if top_k_contains(&dists[j], kk, truth_locs[j]) {
                        *hits.get_mut(&kk).unwrap() += 1;
                    }
                }
                n_points += 1;
                rows.push(TrajPredRow {
                    user_id: traj.user_id,
                    step: t0 + j,
                    location: ids[j],
                    prob_top1: dists[j][ids[j]],
                    truth: truth_locs[j],
                });
            }
        }
    }
    Ok(TrajEvalOutput { report: acc_report(&hits, n_points), rows })
}

fn flow_prefix(data: &FlowField, t0: TimeStep) -> FlowField {
    let mut out = FlowField::zeros(data.n_channels, t0, data.n_regions);
    for c in 0..data.n_channels {
        for t in 0..t0 {
            for l in 0..data.n_regions {
                *out.get_mut(c, t, l) = data.get(c, t, l);
            }
        }
    }
    out
}

fn collect_flow_rows(
    pred: &FlowField,
    truth: &Corpus,
    t0: TimeStep,
    horizon: usize,
    preds: &mut Vec<f64>,
    truths: &mut Vec<f64>,
    rows: &mut Vec<FlowPredRow>,
) {
    for c in 0..pred.n_channels {
        for j in 0..horizon {
            for r in 0..pred.n_regions {
                if truth.missing_regions.contains(&r) {
                    continue;
                }
                let pv = pred.get(c, j, r);
                let tv = truth.flow.get(c, t0 + j, r);
                preds.push(pv);
                truths.push(tv);
                rows.push(FlowPredRow { region: r, step: t0 + j, channel: c, value: pv, truth: tv });
            }
        }
    }
}

/// Historical-average baseline on the flow task. The phase means use all
/// data before each anchor.
pub fn eval_ha_flow(
    data: &Corpus,
    truth: &Corpus,
    split: &ChronoSplit,
    horizon: usize,
    history_len: usize,
    season_len: usize,
    cfg: &EvalConfig,
) -> Result<FlowEvalOutput, EvalError> {
    let anchors = test_anchors(split, history_len, horizon, cfg.anchor_stride);
    if anchors.is_empty() {
        return Err(EvalError::NoAnchors);
    }
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let mut rows = Vec::new();
    for &t0 in &anchors {
        let hist = flow_prefix(&data.flow, t0);
        let pred = ha_predict(&hist, horizon, season_len);
        collect_flow_rows(&pred, truth, t0, horizon, &mut preds, &mut truths, &mut rows);
    }
    Ok(FlowEvalOutput { report: flow_report(&preds, &truths)?, rows })
}

/// VAR baseline on the flow task, fitted once on the training span.
pub fn eval_var_flow(
    data: &Corpus,
    truth: &Corpus,
    split: &ChronoSplit,
    horizon: usize,
    history_len: usize,
    lag: usize,
    cfg: &EvalConfig,
) -> Result<FlowEvalOutput, EvalError> {
    let anchors = test_anchors(split, history_len.max(lag), horizon, cfg.anchor_stride);
    if anchors.is_empty() {
        return Err(EvalError::NoAnchors);
    }
    let train_hist = flow_prefix(&data.flow, split.train_end);
    let model = crate::baselines::var_fit(&train_hist, lag)
        .map_err(|e| EvalError::Predict(alloc::format!("{e}")))?;
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let mut rows = Vec::new();
    for &t0 in &anchors {
        let hist = flow_prefix(&data.flow, t0);
        let pred = model
            .predict(&hist, horizon)
            .map_err(|e| EvalError::Predict(alloc::format!("{e}")))?;
        collect_flow_rows(&pred, truth, t0, horizon, &mut preds, &mut truths, &mut rows);
    }
    Ok(FlowEvalOutput { report: flow_report(&preds, &truths)?, rows })
}

/// Expose the VAR branch flag for results manifests.
pub fn var_branch_is_joint(data: &Corpus, split: &ChronoSplit, lag: usize) -> Option<bool> {
    let train_hist = flow_prefix(&data.flow, split.train_end);
    crate::baselines::var_fit(&train_hist, lag).ok().map(|m: VarModel| m.joint)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_ratios_are_chronological() {
        let s = ChronoSplit::standard(168);
        assert_eq!(s.train_end, 117);
        assert_eq!(s.val_end, 134);
        assert!(s.train_end < s.val_end && s.val_end < s.n_steps);
    }

    #[test]
    fn anchors_stay_inside_the_test_span() {
        let s = ChronoSplit::standard(168);
        let anchors = test_anchors(&s, 12, 6, 6);
        assert!(!anchors.is_empty());
        for t0 in &anchors {
            assert!(*t0 >= s.val_end);
            assert!(t0 + 6 <= s.n_steps);
        }
    }

    #[test]
    fn eval_user_subset_is_deterministic_and_sorted() {
        let cfg = EvalConfig { n_users: 5, ..Default::default() };
        let a = eval_users(20, &cfg);
        let b = eval_users(20, &cfg);
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(eval_users(3, &cfg), vec![0, 1, 2]);
    }

    #[test]
    fn combine_seed_disperses() {
        let a = combine_seed(1, &[1, 2, 3]);
        let b = combine_seed(1, &[1, 2, 4]);
        let c = combine_seed(1, &[1, 2, 3]);
        assert_eq!(a, c);
        assert_ne!(a, b);
    }
}
