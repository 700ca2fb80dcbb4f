//! Multi-view mobility tokenizer.
//!
//! Both modalities become sequences of width-W tokens built from four
//! equal-width views: spatial embedding, hour-of-day embedding, day-of-week
//! embedding, and (flow only) an affine map of the window's raw values.
//! Trajectory tokens zero-pad the value view so both modalities share one
//! latent width.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::domain::{FlowField, GridSpec, RegionId, TimeStep, Trajectory};
use crate::linalg::affine;

#[derive(Debug, Clone, PartialEq)]
pub enum TokenError {
    /// (T - token_len) is not a multiple of the stride.
    NonIntegralCount { series_len: usize, token_len: usize, stride: usize },
    /// Gap in the resampled trajectory (window starts before the first visit).
    MissingStep { user: u64, step: TimeStep },
    RegionOutOfRange { region: RegionId, regions: usize },
    BadConfig(String),
}

impl core::fmt::Display for TokenError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TokenError::NonIntegralCount { series_len, token_len, stride } => write!(
                f,
                "window count ({series_len} - {token_len}) / {stride} is not an integer"
            ),
            TokenError::MissingStep { user, step } => {
                write!(f, "user {user}: no visit on or before step {step}")
            }
            TokenError::RegionOutOfRange { region, regions } => {
                write!(f, "region {region} outside [0, {regions})")
            }
            TokenError::BadConfig(msg) => write!(f, "bad tokenizer config: {msg}"),
        }
    }
}

impl core::error::Error for TokenError {}

/// Number of concatenated views per token.
pub const N_VIEWS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TokenizerConfig {
    /// Steps per trajectory token. Trajectories are event sequences, so one
    /// visit per token is the default.
    pub token_len_traj: usize,
    /// Steps per flow token (dense series are chunked).
    pub token_len_flow: usize,
    /// Horizontal sliding stride Q for windowing.
    pub stride: usize,
    /// Shared token width W; each view gets W/4.
    pub embed_width: usize,
    /// History steps p.
    pub history_len: usize,
    /// Horizon steps k.
    pub horizon: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            token_len_traj: 1,
            token_len_flow: 12,
            stride: 12,
            embed_width: 64,
            history_len: 24,
            horizon: 12,
        }
    }
}

impl TokenizerConfig {
    /// Width of each concatenated view.
    pub fn view_width(&self) -> usize {
        self.embed_width / N_VIEWS
    }

    pub fn validate(&self) -> Result<(), TokenError> {
        if self.embed_width == 0 || self.embed_width % N_VIEWS != 0 {
            return Err(TokenError::BadConfig(alloc::format!(
                "embed_width {} must be a positive multiple of {N_VIEWS}",
                self.embed_width
            )));
        }
        if self.stride == 0 || self.stride > self.token_len_flow {
            return Err(TokenError::BadConfig(
                "stride must satisfy 1 <= Q <= token_len".into(),
            ));
        }
        if self.token_len_traj == 0 || self.token_len_flow == 0 {
            return Err(TokenError::BadConfig("token lengths must be positive".into()));
        }
        if self.history_len == 0 || self.horizon == 0 {
            return Err(TokenError::BadConfig("history and horizon must be positive".into()));
        }
        if self.history_len % self.token_len_flow != 0 || self.horizon % self.token_len_flow != 0 {
            return Err(TokenError::BadConfig(
                "history_len and horizon must be multiples of the flow token length".into(),
            ));
        }
        Ok(())
    }
}

/// Per-channel z-score statistics, computed on the training split only.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlowNormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FlowNormStats {
    pub fn identity(n_channels: usize) -> Self {
        FlowNormStats { mean: vec![0.0; n_channels], std: vec![1.0; n_channels] }
    }

    pub fn fit(flow: &FlowField, t0: TimeStep, t1: TimeStep) -> Self {
        let mut mean = Vec::with_capacity(flow.n_channels);
        let mut std = Vec::with_capacity(flow.n_channels);
        for c in 0..flow.n_channels {
            let (m, s) = flow.channel_stats(c, t0, t1);
            mean.push(m);
            std.push(if s > 1e-9 { s } else { 1.0 });
        }
        FlowNormStats { mean, std }
    }

    #[inline]
    pub fn normalize(&self, channel: usize, value: f64) -> f64 {
        (value - self.mean[channel]) / self.std[channel]
    }

    #[inline]
    pub fn denormalize(&self, channel: usize, value: f64) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }
}

/// Read-only view of one modality's embedding tables inside the flat
/// parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct TableView<'a> {
    /// (n_regions, view_width)
    pub spatial: &'a [f64],
    /// (steps_per_day, view_width)
    pub hour: &'a [f64],
    /// (7, view_width)
    pub day: &'a [f64],
    /// Flow only: value map weight (view_width, token_len_flow * n_channels).
    pub value_w: Option<&'a [f64]>,
    /// Flow only: value map bias (view_width).
    pub value_b: Option<&'a [f64]>,
    pub n_regions: usize,
    pub steps_per_day: usize,
    pub view_width: usize,
}

impl<'a> TableView<'a> {
    pub fn spatial_row(&self, region: RegionId) -> &'a [f64] {
        &self.spatial[region * self.view_width..(region + 1) * self.view_width]
    }
    pub fn hour_row(&self, hour: usize) -> &'a [f64] {
        &self.hour[hour * self.view_width..(hour + 1) * self.view_width]
    }
    pub fn day_row(&self, day: usize) -> &'a [f64] {
        &self.day[day * self.view_width..(day + 1) * self.view_width]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TokenModality {
    Trajectory,
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Role {
    History,
    Future,
}

/// One encoded token sequence (a batch is a collection of these).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub width: usize,
    pub modality: TokenModality,
    /// Steps covered by each token (1 for trajectories).
    pub token_span: usize,
    pub tokens: Vec<Vec<f64>>,
    pub region_ids: Vec<RegionId>,
    /// (hour-of-day, day-of-week) per token.
    pub times: Vec<(usize, usize)>,
    /// Absolute start step per token.
    pub steps: Vec<TimeStep>,
    pub roles: Vec<Role>,
}

impl TokenBatch {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_future(&self) -> usize {
        self.roles.iter().filter(|r| **r == Role::Future).count()
    }

    /// Index of the token covering absolute step `t`, if any.
    pub fn token_covering(&self, t: TimeStep) -> Option<usize> {
        self.steps
            .iter()
            .position(|&s| t >= s && t < s + self.token_span)
    }
}

/// Window starts per the token-count rule C = (T - token_len) / Q.
///
/// Note the rule leaves the final `token_len` steps of the series uncovered;
/// [`tokenize_windows_lossy`] additionally reports how many trailing steps
/// were dropped when the count is non-integral.
pub fn tokenize_windows(
    series_len: usize,
    cfg: &TokenizerConfig,
) -> Result<Vec<(usize, usize)>, TokenError> {
    let p = cfg.token_len_flow;
    let q = cfg.stride;
    if series_len <= p {
        return Err(TokenError::BadConfig(alloc::format!(
            "series length {series_len} must exceed token length {p}"
        )));
    }
    if (series_len - p) % q != 0 {
        return Err(TokenError::NonIntegralCount {
            series_len,
            token_len: p,
            stride: q,
        });
    }
    let count = (series_len - p) / q;
    Ok((0..count).map(|i| (i * q, i * q + p)).collect())
}

/// Truncating variant: drops trailing remainder steps instead of failing.
/// Returns the windows plus the number of steps dropped.
pub fn tokenize_windows_lossy(
    series_len: usize,
    cfg: &TokenizerConfig,
) -> Result<(Vec<(usize, usize)>, usize), TokenError> {
    let p = cfg.token_len_flow;
    let q = cfg.stride;
    if series_len <= p {
        return Err(TokenError::BadConfig(alloc::format!(
            "series length {series_len} must exceed token length {p}"
        )));
    }
    let rem = (series_len - p) % q;
    let windows = tokenize_windows(series_len - rem, cfg)?;
    Ok((windows, rem))
}

/// Exact non-overlapping tiling of `[start, end)` into token-length chunks.
/// This is the model pipeline's window rule; the span must divide evenly.
pub fn tile_span(
    start: TimeStep,
    end: TimeStep,
    token_len: usize,
) -> Result<Vec<(TimeStep, TimeStep)>, TokenError> {
    let span = end - start;
    if token_len == 0 || span % token_len != 0 {
        return Err(TokenError::NonIntegralCount {
            series_len: span,
            token_len,
            stride: token_len,
        });
    }
    Ok((0..span / token_len)
        .map(|i| (start + i * token_len, start + (i + 1) * token_len))
        .collect())
}

/// Encode a trajectory over `[start, end)` into per-step tokens.
///
/// The trajectory is forward-filled onto the step grid (stay-at-location
/// semantics); steps at or after `anchor` are marked as future.
pub fn encode_trajectory(
    traj: &Trajectory,
    start: TimeStep,
    end: TimeStep,
    anchor: TimeStep,
    grid: &GridSpec,
    tables: &TableView,
    cfg: &TokenizerConfig,
) -> Result<TokenBatch, TokenError> {
    let locs = traj
        .resample(start, end)
        .ok_or(TokenError::MissingStep { user: traj.user_id, step: start })?;
    let w = cfg.embed_width;
    let ws = cfg.view_width();
    let mut batch = TokenBatch {
        width: w,
        modality: TokenModality::Trajectory,
        token_span: 1,
        tokens: Vec::with_capacity(end - start),
        region_ids: Vec::with_capacity(end - start),
        times: Vec::with_capacity(end - start),
        steps: Vec::with_capacity(end - start),
        roles: Vec::with_capacity(end - start),
    };
    for (i, &loc) in locs.iter().enumerate() {
        let t = start + i;
        if loc >= tables.n_regions {
            return Err(TokenError::RegionOutOfRange { region: loc, regions: tables.n_regions });
        }
        let hour = grid.hour_of(t);
        let day = grid.day_of(t);
        let mut token = vec![0.0; w];
        token[..ws].copy_from_slice(tables.spatial_row(loc));
        token[ws..2 * ws].copy_from_slice(tables.hour_row(hour));
        token[2 * ws..3 * ws].copy_from_slice(tables.day_row(day));
        // value view stays zero for trajectories
        batch.tokens.push(token);
        batch.region_ids.push(loc);
        batch.times.push((hour, day));
        batch.steps.push(t);
        batch
            .roles
            .push(if t < anchor { Role::History } else { Role::Future });
    }
    Ok(batch)
}

/// Encode one region's flow series over `[start, end)` into window tokens.
///
/// Values are z-scored per channel before the affine value map; the window's
/// hour/day embeddings are taken at its start step.
pub fn encode_flow(
    flow: &FlowField,
    region: RegionId,
    start: TimeStep,
    end: TimeStep,
    anchor: TimeStep,
    grid: &GridSpec,
    tables: &TableView,
    cfg: &TokenizerConfig,
    norm: &FlowNormStats,
) -> Result<TokenBatch, TokenError> {
    if region >= tables.n_regions || region >= flow.n_regions {
        return Err(TokenError::RegionOutOfRange { region, regions: tables.n_regions });
    }
    let w = cfg.embed_width;
    let ws = cfg.view_width();
    let p = cfg.token_len_flow;
    let windows = tile_span(start, end, p)?;
    let value_w = tables
        .value_w
        .ok_or_else(|| TokenError::BadConfig("flow tables lack a value map".into()))?;
    let value_b = tables
        .value_b
        .ok_or_else(|| TokenError::BadConfig("flow tables lack a value bias".into()))?;
    let mut batch = TokenBatch {
        width: w,
        modality: TokenModality::Flow,
        token_span: p,
        tokens: Vec::with_capacity(windows.len()),
        region_ids: Vec::with_capacity(windows.len()),
        times: Vec::with_capacity(windows.len()),
        steps: Vec::with_capacity(windows.len()),
        roles: Vec::with_capacity(windows.len()),
    };
    let mut z = vec![0.0; flow.n_channels * p];
    let mut value = vec![0.0; ws];
    for (a, b) in windows {
        for c in 0..flow.n_channels {
            for (j, t) in (a..b).enumerate() {
                z[c * p + j] = norm.normalize(c, flow.get(c, t, region));
            }
        }
        affine(value_w, value_b, &z, &mut value);
        let hour = grid.hour_of(a);
        let day = grid.day_of(a);
        let mut token = vec![0.0; w];
        token[..ws].copy_from_slice(tables.spatial_row(region));
        token[ws..2 * ws].copy_from_slice(tables.hour_row(hour));
        token[2 * ws..3 * ws].copy_from_slice(tables.day_row(day));
        token[3 * ws..].copy_from_slice(&value);
        batch.tokens.push(token);
        batch.region_ids.push(region);
        batch.times.push((hour, day));
        batch.steps.push(a);
        batch
            .roles
            .push(if a < anchor { Role::History } else { Role::Future });
    }
    Ok(batch)
}

/// Flattened normalized window values for one region, in the same layout the
/// value view consumes — also the regression target of the flow decoder.
pub fn flow_window_targets(
    flow: &FlowField,
    region: RegionId,
    start: TimeStep,
    end: TimeStep,
    norm: &FlowNormStats,
) -> Vec<f64> {
    let p = end - start;
    let mut z = vec![0.0; flow.n_channels * p];
    for c in 0..flow.n_channels {
        for (j, t) in (start..end).enumerate() {
            z[c * p + j] = norm.normalize(c, flow.get(c, t, region));
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Visit;
    use crate::rng::{fill_normal, stream, StreamId};
    use approx::assert_relative_eq;

    fn grid() -> GridSpec {
        GridSpec::new(4, 4, 100.0, (0.0, 0.0), 3600).unwrap()
    }

    struct OwnedTables {
        spatial: Vec<f64>,
        hour: Vec<f64>,
        day: Vec<f64>,
        value_w: Vec<f64>,
        value_b: Vec<f64>,
        n_regions: usize,
        steps_per_day: usize,
        view_width: usize,
    }

    impl OwnedTables {
        fn zeroed(grid: &GridSpec, cfg: &TokenizerConfig, n_channels: usize) -> Self {
            let ws = cfg.view_width();
            OwnedTables {
                spatial: vec![0.0; grid.n_regions() * ws],
                hour: vec![0.0; grid.steps_per_day * ws],
                day: vec![0.0; 7 * ws],
                value_w: vec![0.0; ws * cfg.token_len_flow * n_channels],
                value_b: vec![0.0; ws],
                n_regions: grid.n_regions(),
                steps_per_day: grid.steps_per_day,
                view_width: ws,
            }
        }

        fn randomized(grid: &GridSpec, cfg: &TokenizerConfig, n_channels: usize, seed: u64) -> Self {
            let mut t = Self::zeroed(grid, cfg, n_channels);
            let mut rng = stream(seed, StreamId::Init);
            for buf in [&mut t.spatial, &mut t.hour, &mut t.day, &mut t.value_w, &mut t.value_b] {
                fill_normal(&mut rng, buf);
            }
            t
        }

        fn view(&self) -> TableView<'_> {
            TableView {
                spatial: &self.spatial,
                hour: &self.hour,
                day: &self.day,
                value_w: Some(&self.value_w),
                value_b: Some(&self.value_b),
                n_regions: self.n_regions,
                steps_per_day: self.steps_per_day,
                view_width: self.view_width,
            }
        }
    }

    fn small_cfg() -> TokenizerConfig {
        TokenizerConfig {
            token_len_traj: 1,
            token_len_flow: 4,
            stride: 4,
            embed_width: 16,
            history_len: 4,
            horizon: 4,
        }
    }

    #[test]
    fn window_rule_matches_spec_examples() {
        let mut cfg = TokenizerConfig::default();
        cfg.token_len_flow = 12;
        cfg.stride = 12;
        assert_eq!(
            tokenize_windows(48, &cfg).unwrap(),
            vec![(0, 12), (12, 24), (24, 36)]
        );
        cfg.token_len_flow = 4;
        cfg.stride = 4;
        assert_eq!(tokenize_windows(20, &cfg).unwrap().len(), 4);
    }

    #[test]
    fn overlapping_windows_match_loop_oracle() {
        let mut cfg = TokenizerConfig::default();
        cfg.token_len_flow = 4;
        cfg.stride = 2;
        let got = tokenize_windows(20, &cfg).unwrap();
        // loop oracle
        let mut expect = Vec::new();
        let mut s = 0;
        while expect.len() < (20 - 4) / 2 {
            expect.push((s, s + 4));
            s += 2;
        }
        assert_eq!(got, expect);
        assert_eq!(got.len(), 8);
        for w in got.windows(2) {
            assert_eq!(w[1].0 - w[0].0, 2);
        }
    }

    #[test]
    fn non_integral_count_is_an_error_and_lossy_truncates() {
        let mut cfg = TokenizerConfig::default();
        cfg.token_len_flow = 4;
        cfg.stride = 3;
        assert!(matches!(
            tokenize_windows(21, &cfg),
            Err(TokenError::NonIntegralCount { .. })
        ));
        let (windows, dropped) = tokenize_windows_lossy(21, &cfg).unwrap();
        assert_eq!(dropped, 2);
        assert_eq!(windows.len(), (19 - 4) / 3);
    }

    #[test]
    fn window_union_covers_expected_span() {
        let mut cfg = TokenizerConfig::default();
        cfg.token_len_flow = 4;
        cfg.stride = 4;
        let ws = tokenize_windows(20, &cfg).unwrap();
        let c = ws.len();
        let covered: alloc::collections::BTreeSet<usize> =
            ws.iter().flat_map(|&(a, b)| a..b).collect();
        let expect: alloc::collections::BTreeSet<usize> = (0..(c - 1) * 4 + 4).collect();
        assert_eq!(covered, expect);
    }

    #[test]
    fn zero_tables_give_zero_trajectory_token() {
        let grid = grid();
        let cfg = small_cfg();
        let tables = OwnedTables::zeroed(&grid, &cfg, 2);
        let traj = Trajectory::new(1, vec![Visit { location: 0, time: 0 }]);
        let batch =
            encode_trajectory(&traj, 0, 1, 1, &grid, &tables.view(), &cfg).unwrap();
        assert_eq!(batch.tokens.len(), 1);
        assert!(batch.tokens[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn same_region_consecutive_hours_differ_only_in_hour_view() {
        let grid = grid();
        let cfg = small_cfg();
        let tables = OwnedTables::randomized(&grid, &cfg, 2, 5);
        let traj = Trajectory::new(
            1,
            vec![Visit { location: 3, time: 0 }, Visit { location: 3, time: 1 }],
        );
        let batch =
            encode_trajectory(&traj, 0, 2, 2, &grid, &tables.view(), &cfg).unwrap();
        let ws = cfg.view_width();
        let (a, b) = (&batch.tokens[0], &batch.tokens[1]);
        assert_eq!(a[..ws], b[..ws], "spatial view must match");
        assert_ne!(a[ws..2 * ws], b[ws..2 * ws], "hour view must differ");
        assert_eq!(a[2 * ws..], b[2 * ws..], "day and pad views must match");
    }

    #[test]
    fn trajectory_tokens_match_lookup_oracle() {
        let grid = grid();
        let cfg = small_cfg();
        let tables = OwnedTables::randomized(&grid, &cfg, 2, 6);
        let mut rng = stream(7, StreamId::Data);
        use rand::Rng;
        let visits: Vec<Visit> = (0..6)
            .map(|t| Visit { location: rng.gen_range(0..16), time: t })
            .collect();
        let traj = Trajectory::new(2, visits.clone());
        let batch =
            encode_trajectory(&traj, 0, 6, 4, &grid, &tables.view(), &cfg).unwrap();
        let ws = cfg.view_width();
        for (i, v) in visits.iter().enumerate() {
            let tok = &batch.tokens[i];
            // oracle: direct table indexing
            for j in 0..ws {
                assert_eq!(tok[j], tables.spatial[v.location * ws + j]);
                assert_eq!(tok[ws + j], tables.hour[grid.hour_of(v.time) * ws + j]);
                assert_eq!(tok[2 * ws + j], tables.day[grid.day_of(v.time) * ws + j]);
                assert_eq!(tok[3 * ws + j], 0.0);
            }
            assert_eq!(batch.roles[i], if v.time < 4 { Role::History } else { Role::Future });
        }
    }

    #[test]
    fn zero_flow_window_emits_bias_in_value_view() {
        let grid = grid();
        let cfg = small_cfg();
        let mut tables = OwnedTables::zeroed(&grid, &cfg, 2);
        for (i, b) in tables.value_b.iter_mut().enumerate() {
            *b = i as f64 + 1.0;
        }
        let flow = FlowField::zeros(2, 8, 16);
        let norm = FlowNormStats::identity(2);
        let batch = encode_flow(
            &flow, 5, 0, 4, 4, &grid, &tables.view(), &cfg, &norm,
        )
        .unwrap();
        let ws = cfg.view_width();
        assert_eq!(batch.tokens.len(), 1);
        assert_eq!(&batch.tokens[0][3 * ws..], &tables.value_b[..]);
    }

    #[test]
    fn identical_windows_different_regions_differ_only_in_spatial_view() {
        let grid = grid();
        let cfg = small_cfg();
        let tables = OwnedTables::randomized(&grid, &cfg, 2, 9);
        let mut flow = FlowField::zeros(2, 8, 16);
        for t in 0..8 {
            for c in 0..2 {
                *flow.get_mut(c, t, 1) = (t + c) as f64;
                *flow.get_mut(c, t, 2) = (t + c) as f64;
            }
        }
        let norm = FlowNormStats::identity(2);
        let a = encode_flow(&flow, 1, 0, 4, 4, &grid, &tables.view(), &cfg, &norm).unwrap();
        let b = encode_flow(&flow, 2, 0, 4, 4, &grid, &tables.view(), &cfg, &norm).unwrap();
        let ws = cfg.view_width();
        assert_ne!(a.tokens[0][..ws], b.tokens[0][..ws]);
        assert_eq!(a.tokens[0][ws..], b.tokens[0][ws..]);
    }

    #[test]
    fn flow_value_view_matches_scalar_affine_oracle() {
        let grid = grid();
        let cfg = small_cfg();
        let tables = OwnedTables::randomized(&grid, &cfg, 2, 10);
        let mut flow = FlowField::zeros(2, 8, 16);
        let mut rng = stream(11, StreamId::Data);
        use rand::Rng;
        for v in flow.values.iter_mut() {
            *v = rng.gen_range(0.0..30.0);
        }
        let norm = FlowNormStats { mean: vec![10.0, 12.0], std: vec![3.0, 5.0] };
        let region = 7;
        let batch =
            encode_flow(&flow, region, 4, 8, 8, &grid, &tables.view(), &cfg, &norm).unwrap();
        let ws = cfg.view_width();
        let p = cfg.token_len_flow;
        // scalar oracle: v_j = b_j + sum_i w[j][i] * z_i
        for j in 0..ws {
            let mut want = tables.value_b[j];
            for c in 0..2 {
                for (idx, t) in (4..8).enumerate() {
                    let z = (flow.get(c, t, region) - norm.mean[c]) / norm.std[c];
                    want += tables.value_w[j * (2 * p) + c * p + idx] * z;
                }
            }
            assert_relative_eq!(batch.tokens[0][3 * ws + j], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn both_modalities_share_token_width() {
        let grid = grid();
        let cfg = small_cfg();
        let tables = OwnedTables::randomized(&grid, &cfg, 2, 12);
        let flow = FlowField::zeros(2, 8, 16);
        let norm = FlowNormStats::identity(2);
        let traj = Trajectory::new(1, vec![Visit { location: 0, time: 0 }]);
        let tb = encode_trajectory(&traj, 0, 4, 4, &grid, &tables.view(), &cfg).unwrap();
        let fb = encode_flow(&flow, 0, 0, 4, 4, &grid, &tables.view(), &cfg, &norm).unwrap();
        assert_eq!(tb.width, fb.width);
        assert!(tb.tokens.iter().all(|t| t.len() == tb.width));
        assert!(fb.tokens.iter().all(|t| t.len() == fb.width));
    }

    #[test]
    fn missing_step_is_reported() {
        let grid = grid();
        let cfg = small_cfg();
        let tables = OwnedTables::zeroed(&grid, &cfg, 2);
        let traj = Trajectory::new(3, vec![Visit { location: 0, time: 5 }]);
        assert!(matches!(
            encode_trajectory(&traj, 0, 6, 6, &grid, &tables.view(), &cfg),
            Err(TokenError::MissingStep { .. })
        ));
    }

    #[test]
    fn out_of_range_region_is_reported() {
        let grid = grid();
        let cfg = small_cfg();
        let tables = OwnedTables::zeroed(&grid, &cfg, 2);
        let flow = FlowField::zeros(2, 8, 16);
        let norm = FlowNormStats::identity(2);
        assert!(matches!(
            encode_flow(&flow, 99, 0, 4, 4, &grid, &tables.view(), &cfg, &norm),
            Err(TokenError::RegionOutOfRange { .. })
        ));
    }
}
