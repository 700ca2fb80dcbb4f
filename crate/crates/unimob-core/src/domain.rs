//! Canonical mobility data types: grids, trajectories, flow fields.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Index of a grid region in `[0, L)`.
pub type RegionId = usize;
/// Discrete time-step index (raw timestamps are quantized at ingestion).
pub type TimeStep = usize;

pub const SECONDS_PER_DAY: u64 = 86_400;
pub const DAYS_PER_WEEK: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub enum DomainError {
    /// Timestamps not strictly increasing.
    NonMonotonicTime { user: u64, at: TimeStep },
    /// Location id at or beyond the number of regions.
    LocationOutOfRange { user: u64, location: RegionId, regions: usize },
    EmptyTrajectory { user: u64 },
    TimestampOutOfRange { user: u64, time: TimeStep, limit: TimeStep },
    /// Tensor shapes disagree.
    ShapeMismatch,
    EmptyInput,
    /// Grid dimensions or interval are inconsistent.
    BadGrid(String),
}

impl core::fmt::Display for DomainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DomainError::NonMonotonicTime { user, at } => {
                write!(f, "user {user}: timestamps not strictly increasing at step {at}")
            }
            DomainError::LocationOutOfRange { user, location, regions } => {
                write!(f, "user {user}: location {location} outside [0, {regions})")
            }
            DomainError::EmptyTrajectory { user } => write!(f, "user {user}: empty trajectory"),
            DomainError::TimestampOutOfRange { user, time, limit } => {
                write!(f, "user {user}: timestamp {time} outside [0, {limit})")
            }
            DomainError::ShapeMismatch => write!(f, "tensor shapes disagree"),
            DomainError::EmptyInput => write!(f, "empty input"),
            DomainError::BadGrid(msg) => write!(f, "bad grid: {msg}"),
        }
    }
}

impl core::error::Error for DomainError {}

/// Uniform rectangular grid over the study area.
///
/// Regions are numbered row-major: region `r` sits at row `r / cols`,
/// column `r % cols`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    /// Meters per cell side.
    pub cell_size: f64,
    /// Latitude/longitude of cell (0, 0); metadata only.
    pub origin: (f64, f64),
    /// Seconds per time step.
    pub interval: u64,
    /// Time slots in a day (86400 / interval).
    pub steps_per_day: usize,
    /// Fixed at 7.
    pub days_per_week: usize,
}

impl GridSpec {
    pub fn new(
        rows: usize,
        cols: usize,
        cell_size: f64,
        origin: (f64, f64),
        interval: u64,
    ) -> Result<Self, DomainError> {
        if rows == 0 || cols == 0 {
            return Err(DomainError::BadGrid("rows and cols must be positive".into()));
        }
        if !(cell_size > 0.0) {
            return Err(DomainError::BadGrid("cell_size must be positive".into()));
        }
        if interval == 0 || SECONDS_PER_DAY % interval != 0 {
            return Err(DomainError::BadGrid(
                "interval must divide 86400 seconds".into(),
            ));
        }
        Ok(GridSpec {
            rows,
            cols,
            cell_size,
            origin,
            interval,
            steps_per_day: (SECONDS_PER_DAY / interval) as usize,
            days_per_week: DAYS_PER_WEEK,
        })
    }

    /// Total number of regions L.
    pub fn n_regions(&self) -> usize {
        self.rows * self.cols
    }

    /// Cell-center coordinates in meters relative to the grid origin.
    pub fn cell_center(&self, region: RegionId) -> (f64, f64) {
        let row = region / self.cols;
        let col = region % self.cols;
        (
            (col as f64 + 0.5) * self.cell_size,
            (row as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn hour_of(&self, t: TimeStep) -> usize {
        t % self.steps_per_day
    }

    pub fn day_of(&self, t: TimeStep) -> usize {
        (t / self.steps_per_day) % self.days_per_week
    }
}

/// One visit: the user was at `location` during step `time`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Visit {
    pub location: RegionId,
    pub time: TimeStep,
}

/// Time-ordered visit sequence of one user.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trajectory {
    pub user_id: u64,
    pub visits: Vec<Visit>,
}

impl Trajectory {
    pub fn new(user_id: u64, visits: Vec<Visit>) -> Self {
        Trajectory { user_id, visits }
    }

    /// Location occupied at step `t`: the most recent visit at or before `t`.
    /// None before the first visit.
    pub fn location_at(&self, t: TimeStep) -> Option<RegionId> {
        let mut loc = None;
        for v in &self.visits {
            if v.time > t {
                break;
            }
            loc = Some(v.location);
        }
        loc
    }

    /// Forward-filled location per step over `[start, end)`.
    /// None if the trajectory starts after `start`.
    pub fn resample(&self, start: TimeStep, end: TimeStep) -> Option<Vec<RegionId>> {
        if self.visits.is_empty() || self.visits[0].time > start {
            return None;
        }
        let mut out = Vec::with_capacity(end - start);
        let mut idx = 0;
        let mut cur = self.visits[0].location;
        for t in start..end {
            while idx < self.visits.len() && self.visits[idx].time <= t {
                cur = self.visits[idx].location;
                idx += 1;
            }
            out.push(cur);
        }
        Some(out)
    }
}

/// Per-region, per-step flow counts for the whole grid.
///
/// Stored row-major as `[channel][step][region]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlowField {
    pub n_channels: usize,
    pub n_steps: usize,
    pub n_regions: usize,
    pub values: Vec<f64>,
    pub channel_names: Vec<String>,
}

pub const INFLOW: usize = 0;
pub const OUTFLOW: usize = 1;

impl FlowField {
    pub fn zeros(n_channels: usize, n_steps: usize, n_regions: usize) -> Self {
        let channel_names = if n_channels == 2 {
            vec!["inflow".into(), "outflow".into()]
        } else {
            (0..n_channels)
                .map(|c| alloc::format!("channel{c}"))
                .collect()
        };
        FlowField {
            n_channels,
            n_steps,
            n_regions,
            values: vec![0.0; n_channels * n_steps * n_regions],
            channel_names,
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, t: TimeStep, l: RegionId) -> usize {
        debug_assert!(c < self.n_channels && t < self.n_steps && l < self.n_regions);
        (c * self.n_steps + t) * self.n_regions + l
    }

    #[inline]
    pub fn get(&self, c: usize, t: TimeStep, l: RegionId) -> f64 {
        self.values[self.idx(c, t, l)]
    }

    #[inline]
    pub fn get_mut(&mut self, c: usize, t: TimeStep, l: RegionId) -> &mut f64 {
        let i = self.idx(c, t, l);
        &mut self.values[i]
    }

    pub fn same_shape(&self, other: &FlowField) -> bool {
        self.n_channels == other.n_channels
            && self.n_steps == other.n_steps
            && self.n_regions == other.n_regions
    }

    /// Mean and standard deviation of one channel over steps `[t0, t1)`.
    pub fn channel_stats(&self, c: usize, t0: TimeStep, t1: TimeStep) -> (f64, f64) {
        let mut n = 0usize;
        let mut sum = 0.0;
        for t in t0..t1 {
            for l in 0..self.n_regions {
                sum += self.get(c, t, l);
                n += 1;
            }
        }
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        let mut sq = 0.0;
        for t in t0..t1 {
            for l in 0..self.n_regions {
                let d = self.get(c, t, l) - mean;
                sq += d * d;
            }
        }
        #[allow(unused_imports)]
        use num_traits::Float;
        let std = if n == 0 { 0.0 } else { (sq / n as f64).sqrt() };
        (mean, std)
    }
}

/// What a prediction run is asked to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Modality {
    Trajectory,
    Flow,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PredictionTask {
    /// Steps of history context (p).
    pub history_len: usize,
    /// Steps to predict (k).
    pub horizon: usize,
    pub modality: Modality,
}

impl PredictionTask {
    pub fn new(history_len: usize, horizon: usize, modality: Modality) -> Self {
        PredictionTask { history_len, horizon, modality }
    }
}

/// Checks Definition-1 well-formedness and returns the trajectory unchanged.
pub fn validate_trajectory(traj: Trajectory, grid: &GridSpec) -> Result<Trajectory, DomainError> {
    if traj.visits.is_empty() {
        return Err(DomainError::EmptyTrajectory { user: traj.user_id });
    }
    let regions = grid.n_regions();
    let mut prev: Option<TimeStep> = None;
    for v in &traj.visits {
        if v.location >= regions {
            return Err(DomainError::LocationOutOfRange {
                user: traj.user_id,
                location: v.location,
                regions,
            });
        }
        if let Some(p) = prev {
            if v.time <= p {
                return Err(DomainError::NonMonotonicTime { user: traj.user_id, at: v.time });
            }
        }
        prev = Some(v.time);
    }
    Ok(traj)
}

/// Bottom-up aggregation of trajectories into a two-channel flow field.
///
/// A user entering region `l` at step `t` (previous visit elsewhere, or the
/// first visit) counts one inflow at `(t, l)`; the region left counts one
/// outflow at `(t, old_l)`. Staying put contributes nothing after arrival.
pub fn aggregate_flows(
    trajs: &[Trajectory],
    grid: &GridSpec,
    n_steps: usize,
) -> Result<FlowField, DomainError> {
    let mut flow = FlowField::zeros(2, n_steps, grid.n_regions());
    for traj in trajs {
        let mut prev: Option<Visit> = None;
        for v in &traj.visits {
            if v.time >= n_steps {
                return Err(DomainError::TimestampOutOfRange {
                    user: traj.user_id,
                    time: v.time,
                    limit: n_steps,
                });
            }
            match prev {
                None => {
                    // first appearance counts as inflow
                    *flow.get_mut(INFLOW, v.time, v.location) += 1.0;
                }
                Some(p) if p.location != v.location => {
                    *flow.get_mut(INFLOW, v.time, v.location) += 1.0;
                    *flow.get_mut(OUTFLOW, v.time, p.location) += 1.0;
                }
                Some(_) => {}
            }
            prev = Some(*v);
        }
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamId};
    use rand::Rng;

    fn grid_4x4() -> GridSpec {
        GridSpec::new(4, 4, 100.0, (0.0, 0.0), 3600).unwrap()
    }

    #[test]
    fn validate_accepts_well_formed() {
        let t = Trajectory::new(
            1,
            vec![Visit { location: 3, time: 0 }, Visit { location: 5, time: 1 }],
        );
        let out = validate_trajectory(t.clone(), &grid_4x4()).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn validate_rejects_non_monotonic_time() {
        let t = Trajectory::new(
            1,
            vec![Visit { location: 3, time: 1 }, Visit { location: 5, time: 0 }],
        );
        assert!(matches!(
            validate_trajectory(t, &grid_4x4()),
            Err(DomainError::NonMonotonicTime { .. })
        ));
    }

    #[test]
    fn validate_rejects_out_of_range_location() {
        let t = Trajectory::new(1, vec![Visit { location: 99, time: 0 }]);
        assert!(matches!(
            validate_trajectory(t, &grid_4x4()),
            Err(DomainError::LocationOutOfRange { .. })
        ));
    }

    #[test]
    fn validate_rejects_empty() {
        let t = Trajectory::new(1, vec![]);
        assert!(matches!(
            validate_trajectory(t, &grid_4x4()),
            Err(DomainError::EmptyTrajectory { .. })
        ));
    }

    #[test]
    fn aggregate_counts_moves_and_first_visits() {
        let grid = grid_4x4();
        let a = 2;
        let b = 7;
        let t = Trajectory::new(
            1,
            vec![Visit { location: a, time: 0 }, Visit { location: b, time: 1 }],
        );
        let flow = aggregate_flows(&[t], &grid, 4).unwrap();
        assert_eq!(flow.get(INFLOW, 0, a), 1.0);
        assert_eq!(flow.get(INFLOW, 1, b), 1.0);
        assert_eq!(flow.get(OUTFLOW, 1, a), 1.0);
        let total: f64 = flow.values.iter().sum();
        assert_eq!(total, 3.0);
    }

    #[test]
    fn stationary_user_only_counts_arrival() {
        let grid = grid_4x4();
        let t = Trajectory::new(
            1,
            vec![Visit { location: 2, time: 0 }, Visit { location: 2, time: 1 }],
        );
        let flow = aggregate_flows(&[t], &grid, 4).unwrap();
        assert_eq!(flow.get(INFLOW, 0, 2), 1.0);
        let total: f64 = flow.values.iter().sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn aggregate_conserves_event_counts_on_random_agents() {
        // 50 random agents on a 3x3 grid; oracle counts region-change events
        // directly off the agent log.
        let grid = GridSpec::new(3, 3, 100.0, (0.0, 0.0), 3600).unwrap();
        let steps = 24;
        let mut rng = stream(11, StreamId::Data);
        let mut trajs = Vec::new();
        for u in 0..50u64 {
            let visits: Vec<Visit> = (0..steps)
                .map(|t| Visit { location: rng.gen_range(0..9), time: t })
                .collect();
            trajs.push(Trajectory::new(u, visits));
        }
        let flow = aggregate_flows(&trajs, &grid, steps).unwrap();

        // independent event counter
        let mut changes = 0usize;
        for traj in &trajs {
            for w in traj.visits.windows(2) {
                if w[0].location != w[1].location {
                    changes += 1;
                }
            }
        }
        let total_inflow: f64 = (0..steps)
            .flat_map(|t| (0..9).map(move |l| (t, l)))
            .map(|(t, l)| flow.get(INFLOW, t, l))
            .sum();
        let total_outflow: f64 = (0..steps)
            .flat_map(|t| (0..9).map(move |l| (t, l)))
            .map(|(t, l)| flow.get(OUTFLOW, t, l))
            .sum();
        assert_eq!(total_inflow, (changes + trajs.len()) as f64);
        assert_eq!(total_outflow, changes as f64);
    }

    #[test]
    fn aggregate_rejects_out_of_range_timestamp() {
        let grid = grid_4x4();
        let t = Trajectory::new(1, vec![Visit { location: 0, time: 10 }]);
        assert!(matches!(
            aggregate_flows(&[t], &grid, 4),
            Err(DomainError::TimestampOutOfRange { .. })
        ));
    }

    #[test]
    fn resample_forward_fills() {
        let t = Trajectory::new(
            1,
            vec![Visit { location: 4, time: 1 }, Visit { location: 6, time: 3 }],
        );
        assert_eq!(t.resample(1, 6).unwrap(), vec![4, 4, 6, 6, 6]);
        assert!(t.resample(0, 4).is_none());
    }
}
