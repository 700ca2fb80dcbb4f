//! Decoding denoised embeddings back to data space, and end-to-end
//! prediction: encode histories, run ancestral sampling, decode futures.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffusion::{sample, SampleMode};
use crate::domain::{FlowField, RegionId, TimeStep, Trajectory};
use crate::linalg::{affine, cholesky_in_place, cholesky_solve, softmax_in_place};
use crate::model::Model;
use crate::tokenizer::{encode_flow, encode_trajectory, FlowNormStats};
use crate::train::VariantConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum PredictError {
    /// E^T E (or E E^T) is numerically singular.
    RankDeficient,
    MissingNormStats,
    MissingFlowHead,
    ModeUnavailable(String),
    HistoryTooShort { user: u64, needed: TimeStep },
    BadInput(String),
}

impl core::fmt::Display for PredictError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PredictError::RankDeficient => write!(f, "embedding matrix is rank deficient"),
            PredictError::MissingNormStats => write!(f, "flow normalization stats not fitted"),
            PredictError::MissingFlowHead => write!(f, "flow head not fitted"),
            PredictError::ModeUnavailable(msg) => write!(f, "mode unavailable: {msg}"),
            PredictError::HistoryTooShort { user, needed } => {
                write!(f, "user {user}: history does not cover step {needed}")
            }
            PredictError::BadInput(msg) => write!(f, "bad input: {msg}"),
        }
    }
}

impl core::error::Error for PredictError {}

/// Which pseudo-inverse branch the decoder took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum PinvBranch {
    /// (E^T E)^-1 E^T, the tall case (more locations than dimensions).
    Normal,
    /// E^T (E E^T)^-1, the wide fallback.
    Transpose,
}

/// Linear read-out from a denoised spatial slice to location scores.
///
/// `pinv` holds P(E) with shape (width, n_locations); scores are
/// `r0_spatial * P(E)` followed by a softmax for ranking.
#[derive(Debug, Clone)]
pub struct LocationDecoder {
    pub n_locations: usize,
    pub width: usize,
    pub branch: PinvBranch,
    pinv: Vec<f64>,
}

impl LocationDecoder {
    /// Build from the embedded matrix `e` (n_locations rows, width columns).
    ///
    /// Rank tolerance: a Cholesky pivot below `1e-10 * ||gram||_F` counts as
    /// singular.
    pub fn from_embedding(e: &[f64], n_locations: usize, width: usize) -> Result<Self, PredictError> {
        assert_eq!(e.len(), n_locations * width);
        if n_locations == 0 || width == 0 {
            return Err(PredictError::BadInput("empty embedding matrix".into()));
        }
        if width <= n_locations {
            // gram = E^T E (width x width)
            let mut gram = vec![0.0; width * width];
            crate::linalg::gemm_tn_acc(&mut gram, e, e, width, n_locations, width);
            let frob = gram.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !cholesky_in_place(&mut gram, width, 1e-10 * frob) {
                return Err(PredictError::RankDeficient);
            }
            // P = (E^T E)^-1 E^T: solve per location column
            let mut pinv = vec![0.0; width * n_locations];
            let mut col = vec![0.0; width];
            for l in 0..n_locations {
                col.copy_from_slice(&e[l * width..(l + 1) * width]);
                cholesky_solve(&gram, width, &mut col);
                for w in 0..width {
                    pinv[w * n_locations + l] = col[w];
                }
            }
            Ok(LocationDecoder { n_locations, width, branch: PinvBranch::Normal, pinv })
        } else {
            // wide fallback: P = E^T (E E^T)^-1
            let n = n_locations;
            let mut gram = vec![0.0; n * n];
            crate::linalg::gemm_nt_acc(&mut gram, e, e, n, width, n);
            let frob = gram.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !cholesky_in_place(&mut gram, n, 1e-10 * frob) {
                return Err(PredictError::RankDeficient);
            }
            // columns of (E E^T)^-1 via solves against unit vectors
            let mut minv = vec![0.0; n * n];
            let mut col = vec![0.0; n];
            for j in 0..n {
                col.fill(0.0);
                col[j] = 1.0;
                cholesky_solve(&gram, n, &mut col);
                for i in 0..n {
                    minv[i * n + j] = col[i];
                }
            }
            // P[w][l] = sum_j E[j][w] * Minv[j][l]
            let mut pinv = vec![0.0; width * n];
            for w in 0..width {
                for l in 0..n {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += e[j * width + w] * minv[j * n + l];
                    }
                    pinv[w * n + l] = s;
                }
            }
            Ok(LocationDecoder { n_locations, width, branch: PinvBranch::Transpose, pinv })
        }
    }

    /// Raw scores `r0_spatial * P(E)`; `token` may be a full token, only the
    /// leading spatial slice is read.
    pub fn scores(&self, token: &[f64]) -> Vec<f64> {
        let r = &token[..self.width];
        let mut s = vec![0.0; self.n_locations];
        for (w, &rw) in r.iter().enumerate() {
            if rw == 0.0 {
                continue;
            }
            let row = &self.pinv[w * self.n_locations..(w + 1) * self.n_locations];
            for (sl, pv) in s.iter_mut().zip(row) {
                *sl += rw * pv;
            }
        }
        s
    }

    /// Softmax distribution over locations plus the argmax id (ties to the
    /// smallest id).
    pub fn decode(&self, token: &[f64]) -> (Vec<f64>, RegionId) {
        let mut d = self.scores(token);
        softmax_in_place(&mut d);
        (d.clone(), argmax_first(&d))
    }
}

pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in xs.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Affine regression head from a denoised flow token to that token's window
/// values, in normalized space.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlowHead {
    /// (n_channels * steps_per_token, token_width), row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub n_channels: usize,
    pub steps_per_token: usize,
}

impl FlowHead {
    pub fn out_dim(&self) -> usize {
        self.n_channels * self.steps_per_token
    }
}

/// Decode one denoised flow token to values, channel-major `(N, steps)`,
/// de-normalized and clamped at zero (flows are counts).
pub fn decode_flow(f0_token: &[f64], head: &FlowHead, norm: &FlowNormStats) -> Result<Vec<f64>, PredictError> {
    if norm.mean.len() != head.n_channels {
        return Err(PredictError::MissingNormStats);
    }
    let mut raw = vec![0.0; head.out_dim()];
    affine(&head.weight, &head.bias, f0_token, &mut raw);
    let p = head.steps_per_token;
    let mut out = vec![0.0; head.out_dim()];
    for c in 0..head.n_channels {
        for j in 0..p {
            let v = norm.denormalize(c, raw[c * p + j]);
            out[c * p + j] = v.max(0.0);
        }
    }
    Ok(out)
}

/// Decode a denoised trajectory token against the model's spatial table.
pub fn decode_trajectory(
    r0_token: &[f64],
    dec: &LocationDecoder,
) -> (Vec<f64>, RegionId) {
    dec.decode(r0_token)
}

/// Flow history handed to [`predict`]: one region's values over the history
/// window.
#[derive(Debug, Clone)]
pub struct FlowHistory<'a> {
    pub flow: &'a FlowField,
    pub region: RegionId,
}

#[derive(Debug, Clone)]
pub struct TrajForecast {
    /// Predicted location per future step.
    pub locations: Vec<RegionId>,
    /// Full distribution per future step.
    pub distributions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FlowForecast {
    /// Channel-major (n_channels, horizon).
    pub values: Vec<f64>,
    pub n_channels: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone)]
pub struct PredictOutput {
    pub traj: Option<TrajForecast>,
    pub flow: Option<FlowForecast>,
}

/// End-to-end prediction at `anchor`: histories cover `[anchor - p, anchor)`
/// and the forecast covers `[anchor, anchor + k)`.
///
/// The variant decides the sampling mode: joint inference conditions on both
/// histories and denoises both futures together; otherwise the missing
/// modality is held at max-timestep noise. Deterministic given `seed`.
pub fn predict(
    model: &Model,
    traj_history: Option<&Trajectory>,
    flow_history: Option<&FlowHistory>,
    anchor: TimeStep,
    variant: &VariantConfig,
    seed: u64,
) -> Result<PredictOutput, PredictError> {
    let cfg = &model.cfg;
    let p = cfg.tokenizer.history_len;
    let k = cfg.tokenizer.horizon;
    if anchor < p {
        return Err(PredictError::BadInput(alloc::format!(
            "anchor {anchor} leaves no room for {p} history steps"
        )));
    }
    let start = anchor - p;
    let end = anchor + k;

    let want_traj = traj_history.is_some() && cfg.use_traj;
    let want_flow = flow_history.is_some() && cfg.use_flow;
    if !want_traj && !want_flow {
        return Err(PredictError::ModeUnavailable(
            "no usable history for this model's modalities".into(),
        ));
    }
    let mode = if variant.joint_inference {
        if !(want_traj && want_flow) {
            return Err(PredictError::ModeUnavailable(
                "joint inference needs both modality histories".into(),
            ));
        }
        SampleMode::Joint
    } else if want_traj && !want_flow {
        SampleMode::MarginalTraj
    } else if want_flow && !want_traj {
        SampleMode::MarginalFlow
    } else {
        // both present, marginal-inference variant: predict each modality
        // from its own history only; run both marginal paths below
        SampleMode::Joint
    };

    // encode histories (+ future placeholders, whose clean values the
    // sampler never reads)
    let traj_batch = match traj_history {
        Some(traj) if cfg.use_traj => {
            let mut padded = traj.clone();
            // extend the visit list so the resampled window reaches `end`
            if let Some(last) = padded.visits.last().copied() {
                if last.time < end - 1 {
                    padded.visits.push(crate::domain::Visit {
                        location: last.location,
                        time: end - 1,
                    });
                }
            }
            let batch = encode_trajectory(
                &padded,
                start,
                end,
                anchor,
                &model.grid,
                &model.traj_view(),
                &cfg.tokenizer,
            )
            .map_err(|e| match e {
                crate::tokenizer::TokenError::MissingStep { user, step } => {
                    PredictError::HistoryTooShort { user, needed: step }
                }
                other => PredictError::BadInput(alloc::format!("{other}")),
            })?;
            Some(batch)
        }
        _ => None,
    };
    let flow_batch = match flow_history {
        Some(fh) if cfg.use_flow => {
            if fh.flow.n_steps < anchor {
                return Err(PredictError::BadInput(alloc::format!(
                    "flow history covers {} steps, anchor is {anchor}",
                    fh.flow.n_steps
                )));
            }
            // pad future steps with zeros; future token content is unused
            let mut padded = FlowField::zeros(fh.flow.n_channels, end, fh.flow.n_regions);
            let copy_end = fh.flow.n_steps.min(end);
            for c in 0..fh.flow.n_channels {
                for t in 0..copy_end {
                    for l in 0..fh.flow.n_regions {
                        *padded.get_mut(c, t, l) = fh.flow.get(c, t, l);
                    }
                }
            }
            let batch = encode_flow(
                &padded,
                fh.region,
                start,
                end,
                anchor,
                &model.grid,
                &model.flow_view(),
                &cfg.tokenizer,
                &model.norm,
            )
            .map_err(|e| PredictError::BadInput(alloc::format!("{e}")))?;
            Some(batch)
        }
        _ => None,
    };

    let run = |m: SampleMode, s: u64| {
        sample(
            &model.den,
            &model.params,
            &model.sched,
            traj_batch.as_ref(),
            flow_batch.as_ref(),
            m,
            s,
        )
        .map_err(|e| PredictError::ModeUnavailable(alloc::format!("{e}")))
    };

    // marginal-inference variants with both histories run each side alone
    let (traj_future, flow_future) = if !variant.joint_inference && want_traj && want_flow {
        let t = run(SampleMode::MarginalTraj, seed)?;
        let f = run(SampleMode::MarginalFlow, seed.wrapping_add(1))?;
        (t.traj_future, f.flow_future)
    } else {
        let out = run(mode, seed)?;
        (out.traj_future, out.flow_future)
    };

    let traj = if !traj_future.is_empty() {
        let dec = LocationDecoder::from_embedding(
            model.traj_spatial_table(),
            model.grid.n_regions(),
            cfg.tokenizer.view_width(),
        )?;
        let mut locations = Vec::with_capacity(traj_future.len());
        let mut distributions = Vec::with_capacity(traj_future.len());
        for tok in &traj_future {
            let (d, i) = dec.decode(tok);
            locations.push(i);
            distributions.push(d);
        }
        Some(TrajForecast { locations, distributions })
    } else {
        None
    };

    let flow = if !flow_future.is_empty() {
        let head = model.flow_head.as_ref().ok_or(PredictError::MissingFlowHead)?;
        let ptok = cfg.tokenizer.token_len_flow;
        let mut values = vec![0.0; cfg.n_channels * k];
        for (w, tok) in flow_future.iter().enumerate() {
            let decoded = decode_flow(tok, head, &model.norm)?;
            for c in 0..cfg.n_channels {
                for j in 0..ptok {
                    values[c * k + w * ptok + j] = decoded[c * ptok + j];
                }
            }
        }
        Some(FlowForecast { values, n_channels: cfg.n_channels, horizon: k })
    } else {
        None
    };

    Ok(PredictOutput { traj, flow })
}
