//! Classical comparison models: historical average (HA), vector
//! autoregression (VAR), and a first-order Markov location model.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec;
use alloc::vec::Vec;

use crate::domain::{FlowField, RegionId, TimeStep, Trajectory};
use crate::linalg::ridge_solve;

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineError {
    /// Not enough history rows for the requested lag.
    SingularDesign,
    EmptyInput,
}

impl core::fmt::Display for BaselineError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            BaselineError::SingularDesign => write!(f, "design matrix is singular or empty"),
            BaselineError::EmptyInput => write!(f, "empty input"),
        }
    }
}

impl core::error::Error for BaselineError {}

/// Historical average: the prediction at step `t0 + j` is the mean of all
/// history values sharing its seasonal phase `(t0 + j) mod season_len`.
/// Phases never observed fall back to the region-channel mean.
pub fn ha_predict(history: &FlowField, horizon: usize, season_len: usize) -> FlowField {
    let t0 = history.n_steps;
    let mut out = FlowField::zeros(history.n_channels, horizon, history.n_regions);
    for c in 0..history.n_channels {
        for l in 0..history.n_regions {
            // phase buckets over this region's history
            let mut sums = vec![0.0; season_len];
            let mut counts = vec![0usize; season_len];
            let mut total = 0.0;
            for t in 0..t0 {
                let v = history.get(c, t, l);
                sums[t % season_len] += v;
                counts[t % season_len] += 1;
                total += v;
            }
            let global = if t0 == 0 { 0.0 } else { total / t0 as f64 };
            for j in 0..horizon {
                let phase = (t0 + j) % season_len;
                let v = if counts[phase] > 0 {
                    sums[phase] / counts[phase] as f64
                } else {
                    global
                };
                *out.get_mut(c, j, l) = v;
            }
        }
    }
    out
}

/// Fitted vector-autoregression coefficients.
///
/// For small region counts every region feeds every other; above
/// [`VAR_JOINT_LIMIT`] regions the model falls back to independent scalar
/// autoregressions per region to keep the parameter count sane. The flag
/// records which branch was taken for the results manifest.
#[derive(Debug, Clone)]
pub struct VarModel {
    pub lag: usize,
    pub n_channels: usize,
    pub n_regions: usize,
    pub joint: bool,
    /// Joint: per channel, ((L * lag + 1) x L) coefficients.
    /// Scalar: per channel per region, (lag + 1) coefficients.
    coeffs: Vec<Vec<f64>>,
}

pub const VAR_JOINT_LIMIT: usize = 64;
const VAR_RIDGE: f64 = 1e-6;

/// Least-squares fit of an order-`lag` autoregression on the history.
pub fn var_fit(history: &FlowField, lag: usize) -> Result<VarModel, BaselineError> {
    let t = history.n_steps;
    if lag == 0 || t < lag + 1 {
        return Err(BaselineError::SingularDesign);
    }
    let l = history.n_regions;
    let rows = t - lag;
    let joint = l <= VAR_JOINT_LIMIT;
    let mut coeffs = Vec::new();
    if joint {
        let cols = l * lag + 1;
        for c in 0..history.n_channels {
            let mut x = vec![0.0; rows * cols];
            let mut y = vec![0.0; rows * l];
            for r in 0..rows {
                let t_pred = lag + r;
                for j in 0..lag {
                    for reg in 0..l {
                        x[r * cols + j * l + reg] = history.get(c, t_pred - 1 - j, reg);
                    }
                }
                x[r * cols + cols - 1] = 1.0;
                for reg in 0..l {
                    y[r * l + reg] = history.get(c, t_pred, reg);
                }
            }
            let w = ridge_solve(&x, &y, rows, cols, l, VAR_RIDGE)
                .ok_or(BaselineError::SingularDesign)?;
            coeffs.push(w);
        }
    } else {
        for c in 0..history.n_channels {
            for reg in 0..l {
                let cols = lag + 1;
                let mut x = vec![0.0; rows * cols];
                let mut y = vec![0.0; rows];
                for r in 0..rows {
                    let t_pred = lag + r;
                    for j in 0..lag {
                        x[r * cols + j] = history.get(c, t_pred - 1 - j, reg);
                    }
                    x[r * cols + lag] = 1.0;
                    y[r] = history.get(c, t_pred, reg);
                }
                let w = ridge_solve(&x, &y, rows, cols, 1, VAR_RIDGE)
                    .ok_or(BaselineError::SingularDesign)?;
                coeffs.push(w);
            }
        }
    }
    Ok(VarModel { lag, n_channels: history.n_channels, n_regions: l, joint, coeffs })
}

impl VarModel {
    /// Iterated single-step forecasts from the tail of `history`.
    pub fn predict(&self, history: &FlowField, horizon: usize) -> Result<FlowField, BaselineError> {
        let t0 = history.n_steps;
        if t0 < self.lag {
            return Err(BaselineError::SingularDesign);
        }
        let l = self.n_regions;
        // rolling buffer of the last `lag` vectors per channel
        let mut out = FlowField::zeros(self.n_channels, horizon, l);
        for c in 0..self.n_channels {
            let mut recent: Vec<Vec<f64>> = (0..self.lag)
                .map(|j| (0..l).map(|reg| history.get(c, t0 - 1 - j, reg)).collect())
                .collect();
            for h in 0..horizon {
                let mut next = vec![0.0; l];
                if self.joint {
                    let cols = l * self.lag + 1;
                    let w = &self.coeffs[c];
                    for reg in 0..l {
                        let mut s = w[(cols - 1) * l + reg];
                        for j in 0..self.lag {
                            for r2 in 0..l {
                                s += w[(j * l + r2) * l + reg] * recent[j][r2];
                            }
                        }
                        next[reg] = s;
                    }
                } else {
                    for reg in 0..l {
                        let w = &self.coeffs[c * l + reg];
                        let mut s = w[self.lag];
                        for j in 0..self.lag {
                            s += w[j] * recent[j][reg];
                        }
                        next[reg] = s;
                    }
                }
                for reg in 0..l {
                    *out.get_mut(c, h, reg) = next[reg];
                }
                recent.rotate_right(1);
                recent[0] = next;
            }
        }
        Ok(out)
    }
}

/// Convenience: fit on the history and forecast `horizon` steps.
pub fn var_fit_predict(
    history: &FlowField,
    horizon: usize,
    lag: usize,
) -> Result<FlowField, BaselineError> {
    var_fit(history, lag)?.predict(history, horizon)
}

/// First-order location transition model with additive smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovModel {
    pub n_locations: usize,
    pub smoothing: f64,
    counts: Vec<f64>,
}

pub const MARKOV_SMOOTHING: f64 = 1e-3;

impl MarkovModel {
    /// Count transitions between consecutive visits with `time < max_time`.
    pub fn fit(trajs: &[Trajectory], n_locations: usize, max_time: TimeStep) -> Self {
        let mut counts = vec![0.0; n_locations * n_locations];
        for traj in trajs {
            for w in traj.visits.windows(2) {
                if w[1].time >= max_time {
                    break;
                }
                counts[w[0].location * n_locations + w[1].location] += 1.0;
            }
        }
        MarkovModel { n_locations, smoothing: MARKOV_SMOOTHING, counts }
    }

    /// Smoothed transition probabilities out of `from` (sums to one).
    pub fn row(&self, from: RegionId) -> Vec<f64> {
        let l = self.n_locations;
        let row = &self.counts[from * l..(from + 1) * l];
        let total: f64 = row.iter().sum::<f64>() + self.smoothing * l as f64;
        row.iter().map(|c| (c + self.smoothing) / total).collect()
    }

    /// Iterated argmax prediction for `k` steps; also returns the step-wise
    /// distributions used for ranked accuracy.
    pub fn predict(&self, last: RegionId, k: usize) -> (Vec<RegionId>, Vec<Vec<f64>>) {
        let mut ids = Vec::with_capacity(k);
        let mut dists = Vec::with_capacity(k);
        let mut cur = last;
        for _ in 0..k {
            let row = self.row(cur);
            let next = crate::predict::argmax_first(&row);
            ids.push(next);
            dists.push(row);
            cur = next;
        }
        (ids, dists)
    }
}

/// Fit a Markov model and predict from the last observed location.
pub fn markov_fit_predict(
    trajs_train: &[Trajectory],
    n_locations: usize,
    max_time: TimeStep,
    last: RegionId,
    k: usize,
) -> (Vec<RegionId>, Vec<Vec<f64>>) {
    MarkovModel::fit(trajs_train, n_locations, max_time).predict(last, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Visit;
    use crate::rng::{stream, StreamId};
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn ha_is_exact_on_periodic_input() {
        let season = 6;
        let mut hist = FlowField::zeros(1, 24, 2);
        for t in 0..24 {
            for l in 0..2 {
                *hist.get_mut(0, t, l) = ((t % season) as f64 + 1.0) * (l as f64 + 1.0);
            }
        }
        let pred = ha_predict(&hist, 6, season);
        for j in 0..6 {
            for l in 0..2 {
                let want = (((24 + j) % season) as f64 + 1.0) * (l as f64 + 1.0);
                assert_relative_eq!(pred.get(0, j, l), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn ha_predicts_the_constant_for_constant_input() {
        let mut hist = FlowField::zeros(2, 30, 3);
        hist.values.iter_mut().for_each(|v| *v = 4.5);
        let pred = ha_predict(&hist, 5, 7);
        assert!(pred.values.iter().all(|v| (*v - 4.5).abs() < 1e-12));
    }

    #[test]
    fn ha_matches_phase_bucket_oracle() {
        let mut rng = stream(1, StreamId::Eval);
        let mut hist = FlowField::zeros(2, 40, 3);
        for v in hist.values.iter_mut() {
            *v = rng.gen_range(0.0..10.0);
        }
        let season = 7;
        let horizon = 9;
        let pred = ha_predict(&hist, horizon, season);
        for c in 0..2 {
            for l in 0..3 {
                for j in 0..horizon {
                    let phase = (40 + j) % season;
                    // oracle: scan matching phases
                    let mut s = 0.0;
                    let mut n = 0.0;
                    for t in 0..40 {
                        if t % season == phase {
                            s += hist.get(c, t, l);
                            n += 1.0;
                        }
                    }
                    assert_relative_eq!(pred.get(c, j, l), s / n, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn var_recovers_known_ar1_coefficient() {
        // x_t = 0.5 x_{t-1} exactly, one region, one channel
        let mut hist = FlowField::zeros(1, 60, 1);
        let mut x = 100.0;
        for t in 0..60 {
            *hist.get_mut(0, t, 0) = x;
            x *= 0.5;
        }
        let model = var_fit(&hist, 1).unwrap();
        assert!(model.joint);
        // coefficient matrix is (cols x L) = (2 x 1): [phi, intercept]
        let phi = model.coeffs[0][0];
        assert!((phi - 0.5).abs() < 1e-6, "phi {phi}");
    }

    #[test]
    fn var_predicts_constant_series() {
        let mut hist = FlowField::zeros(1, 30, 2);
        hist.values.iter_mut().for_each(|v| *v = 7.0);
        let pred = var_fit_predict(&hist, 4, 3).unwrap();
        for v in &pred.values {
            assert_relative_eq!(*v, 7.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn var_rejects_short_history() {
        let hist = FlowField::zeros(1, 3, 2);
        assert!(matches!(var_fit(&hist, 3), Err(BaselineError::SingularDesign)));
        assert!(matches!(var_fit(&hist, 0), Err(BaselineError::SingularDesign)));
    }

    #[test]
    fn var_scalar_branch_engages_for_many_regions() {
        let mut hist = FlowField::zeros(1, 20, VAR_JOINT_LIMIT + 1);
        let mut rng = stream(2, StreamId::Eval);
        for v in hist.values.iter_mut() {
            *v = rng.gen_range(0.0..5.0);
        }
        let model = var_fit(&hist, 2).unwrap();
        assert!(!model.joint);
        let pred = model.predict(&hist, 3).unwrap();
        assert_eq!(pred.n_steps, 3);
    }

    #[test]
    fn markov_learns_a_deterministic_cycle() {
        let t = Trajectory::new(
            1,
            vec![
                Visit { location: 0, time: 0 },
                Visit { location: 1, time: 1 },
                Visit { location: 0, time: 2 },
                Visit { location: 1, time: 3 },
            ],
        );
        let m = MarkovModel::fit(&[t], 3, 10);
        let (ids, dists) = m.predict(0, 2);
        assert_eq!(ids, vec![1, 0]);
        assert!(dists[0][1] > 0.9);
    }

    #[test]
    fn markov_unseen_location_predicts_id_zero() {
        let m = MarkovModel::fit(&[], 5, 10);
        let (ids, dists) = m.predict(3, 1);
        assert_eq!(ids, vec![0]);
        for p in &dists[0] {
            assert_relative_eq!(*p, 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn markov_matrix_matches_count_and_normalize_oracle() {
        let mut rng = stream(3, StreamId::Eval);
        let l = 3;
        let trajs: Vec<Trajectory> = (0..10)
            .map(|u| {
                let visits = (0..20)
                    .map(|t| Visit { location: rng.gen_range(0..l), time: t })
                    .collect();
                Trajectory::new(u, visits)
            })
            .collect();
        let m = MarkovModel::fit(&trajs, l, 100);
        // oracle: raw counting
        let mut counts = vec![vec![0.0f64; l]; l];
        for t in &trajs {
            for w in t.visits.windows(2) {
                counts[w[0].location][w[1].location] += 1.0;
            }
        }
        for from in 0..l {
            let row = m.row(from);
            let total: f64 = counts[from].iter().sum::<f64>() + MARKOV_SMOOTHING * l as f64;
            for to in 0..l {
                let want = (counts[from][to] + MARKOV_SMOOTHING) / total;
                assert_relative_eq!(row[to], want, epsilon = 1e-12);
            }
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn markov_fit_respects_time_cutoff() {
        let t = Trajectory::new(
            1,
            vec![
                Visit { location: 0, time: 0 },
                Visit { location: 1, time: 1 },
                Visit { location: 2, time: 5 },
            ],
        );
        let m = MarkovModel::fit(&[t], 3, 2);
        // transition 1 -> 2 happens at time 5, beyond the cutoff
        let row = m.row(1);
        assert!(row[2] < 0.5);
    }

    #[test]
    fn deterministic_baselines_repeat_exactly() {
        let mut rng = stream(4, StreamId::Eval);
        let mut hist = FlowField::zeros(2, 25, 4);
        for v in hist.values.iter_mut() {
            *v = rng.gen_range(0.0..3.0);
        }
        assert_eq!(ha_predict(&hist, 5, 6), ha_predict(&hist, 5, 6));
        assert_eq!(
            var_fit_predict(&hist, 5, 2).unwrap(),
            var_fit_predict(&hist, 5, 2).unwrap()
        );
    }
}
