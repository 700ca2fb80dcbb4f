//! Evaluation metrics: MAE / MAPE / RMSE for flows, Accuracy@k for locations.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::domain::{DomainError, FlowField, RegionId};

/// Zero-denominator guard for MAPE: cells with truth at or below this are
/// excluded from the percentage average.
pub const MAPE_EPSILON: f64 = 1e-6;

/// Aggregated evaluation results for one (model, task) pair.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub mae: f64,
    pub mape: f64,
    pub rmse: f64,
    pub acc_at_k: BTreeMap<usize, f64>,
    pub n_samples: usize,
}

impl MetricReport {
    pub fn empty() -> Self {
        MetricReport {
            mae: 0.0,
            mape: 0.0,
            rmse: 0.0,
            acc_at_k: BTreeMap::new(),
            n_samples: 0,
        }
    }
}

/// MAE / MAPE(%) / RMSE between two equally shaped flow fields.
///
/// MAPE averages only cells with `truth > epsilon`; MAE and RMSE use all
/// cells.
pub fn flow_error_metrics(
    pred: &FlowField,
    truth: &FlowField,
    epsilon: f64,
) -> Result<(f64, f64, f64), DomainError> {
    if !pred.same_shape(truth) {
        return Err(DomainError::ShapeMismatch);
    }
    flow_error_metrics_raw(&pred.values, &truth.values, epsilon)
}

/// Same as [`flow_error_metrics`] over raw equally sized buffers.
pub fn flow_error_metrics_raw(
    pred: &[f64],
    truth: &[f64],
    epsilon: f64,
) -> Result<(f64, f64, f64), DomainError> {
    if pred.len() != truth.len() {
        return Err(DomainError::ShapeMismatch);
    }
    if pred.is_empty() {
        return Err(DomainError::EmptyInput);
    }
    let n = pred.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut pct_sum = 0.0;
    let mut pct_n = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        let d = p - t;
        abs_sum += d.abs();
        sq_sum += d * d;
        if t > epsilon {
            pct_sum += d.abs() / t * 100.0;
            pct_n += 1;
        }
    }
    let mae = abs_sum / n;
    let rmse = (sq_sum / n).sqrt();
    let mape = if pct_n == 0 { 0.0 } else { pct_sum / pct_n as f64 };
    Ok((mae, mape, rmse))
}

/// Fraction of samples whose true location ranks in the k most probable.
///
/// Ranking sorts by probability descending with ties broken by the lower
/// location id, so the result is deterministic.
pub fn acc_at_k(
    ranked: &[Vec<f64>],
    truth: &[RegionId],
    k: usize,
) -> Result<f64, DomainError> {
    if ranked.is_empty() || ranked.len() != truth.len() {
        return Err(DomainError::EmptyInput);
    }
    let mut hits = 0usize;
    for (dist, &target) in ranked.iter().zip(truth) {
        if top_k_contains(dist, k, target) {
            hits += 1;
        }
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// True when `target` is among the k highest entries of `dist` under the
/// (probability desc, id asc) order. Selection scan instead of a full sort.
pub fn top_k_contains(dist: &[f64], k: usize, target: RegionId) -> bool {
    if target >= dist.len() {
        return false;
    }
    if k >= dist.len() {
        return true;
    }
    let pt = dist[target];
    // entries ranked strictly ahead of the target
    let mut ahead = 0usize;
    for (id, &p) in dist.iter().enumerate() {
        if p > pt || (p == pt && id < target) {
            ahead += 1;
            if ahead >= k {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamId};
    use alloc::vec;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn identical_fields_give_zero_errors() {
        let mut f = FlowField::zeros(2, 3, 4);
        for (i, v) in f.values.iter_mut().enumerate() {
            *v = i as f64;
        }
        let (mae, mape, rmse) = flow_error_metrics(&f, &f, MAPE_EPSILON).unwrap();
        assert_eq!((mae, mape, rmse), (0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_offset_has_known_errors() {
        let mut truth = FlowField::zeros(2, 3, 4);
        truth.values.iter_mut().for_each(|v| *v = 10.0);
        let mut pred = truth.clone();
        pred.values.iter_mut().for_each(|v| *v += 1.0);
        let (mae, mape, rmse) = flow_error_metrics(&pred, &truth, MAPE_EPSILON).unwrap();
        assert_relative_eq!(mae, 1.0);
        assert_relative_eq!(mape, 10.0);
        assert_relative_eq!(rmse, 1.0);
    }

    #[test]
    fn metrics_match_scalar_loop_oracle() {
        let mut rng = stream(3, StreamId::Eval);
        let mut pred = FlowField::zeros(2, 8, 4);
        let mut truth = FlowField::zeros(2, 8, 4);
        for v in pred.values.iter_mut() {
            *v = rng.gen_range(0.0..5.0);
        }
        for v in truth.values.iter_mut() {
            // leave some exact zeros to exercise the MAPE guard
            *v = if rng.gen::<f64>() < 0.2 { 0.0 } else { rng.gen_range(0.0..5.0) };
        }
        let (mae, mape, rmse) = flow_error_metrics(&pred, &truth, MAPE_EPSILON).unwrap();

        // independent scalar computation
        let n = pred.values.len();
        let mut s_abs = 0.0;
        let mut s_sq = 0.0;
        let mut s_pct = 0.0;
        let mut n_pct = 0;
        for i in 0..n {
            let d: f64 = pred.values[i] - truth.values[i];
            s_abs += d.abs();
            s_sq += d * d;
            if truth.values[i] > MAPE_EPSILON {
                s_pct += d.abs() / truth.values[i] * 100.0;
                n_pct += 1;
            }
        }
        assert_relative_eq!(mae, s_abs / n as f64, epsilon = 1e-12);
        assert_relative_eq!(rmse, (s_sq / n as f64).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(mape, s_pct / n_pct as f64, epsilon = 1e-12);
        // Jensen: rmse >= mae
        assert!(rmse >= mae);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = FlowField::zeros(2, 3, 4);
        let b = FlowField::zeros(2, 4, 3);
        assert!(matches!(
            flow_error_metrics(&a, &b, MAPE_EPSILON),
            Err(DomainError::ShapeMismatch)
        ));
    }

    #[test]
    fn one_hot_distribution_scores_full_accuracy() {
        let mut d = vec![0.0; 10];
        d[7] = 1.0;
        assert_eq!(acc_at_k(&[d], &[7], 1).unwrap(), 1.0);
    }

    #[test]
    fn uniform_distribution_breaks_ties_toward_low_ids() {
        let d = vec![0.1; 10];
        // all equal: rank is id order, so top-1 is id 0 and truth 7 misses
        assert_eq!(acc_at_k(&[d.clone()], &[7], 1).unwrap(), 0.0);
        assert_eq!(acc_at_k(&[d], &[0], 1).unwrap(), 1.0);
    }

    #[test]
    fn acc_matches_sort_and_scan_oracle() {
        let mut rng = stream(9, StreamId::Eval);
        let l = 12;
        let n = 100;
        let dists: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..l).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let truths: Vec<usize> = (0..n).map(|_| rng.gen_range(0..l)).collect();
        for k in [1usize, 3, 5] {
            let got = acc_at_k(&dists, &truths, k).unwrap();
            // oracle: full sort by (prob desc, id asc), scan top k
            let mut hits = 0;
            for (d, &t) in dists.iter().zip(&truths) {
                let mut order: Vec<usize> = (0..l).collect();
                order.sort_by(|&a, &b| {
                    d[b].partial_cmp(&d[a]).unwrap().then(a.cmp(&b))
                });
                if order[..k].contains(&t) {
                    hits += 1;
                }
            }
            assert_eq!(got, hits as f64 / n as f64);
        }
    }

    #[test]
    fn acc_is_monotone_in_k() {
        let mut rng = stream(10, StreamId::Eval);
        let dists: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..8).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let truths: Vec<usize> = (0..50).map(|_| rng.gen_range(0..8)).collect();
        let mut prev = 0.0;
        for k in 1..=8 {
            let a = acc_at_k(&dists, &truths, k).unwrap();
            assert!(a >= prev);
            prev = a;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(acc_at_k(&[], &[], 1), Err(DomainError::EmptyInput)));
    }
}
