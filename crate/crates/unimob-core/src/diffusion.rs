//! DDPM machinery: noise schedule, forward noising, reverse denoising, and
//! ancestral sampling over paired modality token sequences.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::denoiser::{DenoiserError, JointDenoiser, SeqToken};
use crate::rng::{next_normal, stream, StreamId};
use crate::tokenizer::{Role, TokenBatch, TokenModality};

#[derive(Debug, Clone, PartialEq)]
pub enum DiffusionError {
    InvalidRange { beta_start: f64, beta_end: f64, steps: usize },
    ShapeMismatch,
    TimestepOutOfRange { t: usize, max: usize },
    /// Joint mode needs both modality histories.
    ModeUnavailable(&'static str),
}

impl core::fmt::Display for DiffusionError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DiffusionError::InvalidRange { beta_start, beta_end, steps } => write!(
                f,
                "invalid schedule: beta in [{beta_start}, {beta_end}], {steps} steps"
            ),
            DiffusionError::ShapeMismatch => write!(f, "tensor shapes disagree"),
            DiffusionError::TimestepOutOfRange { t, max } => {
                write!(f, "timestep {t} outside [1, {max}]")
            }
            DiffusionError::ModeUnavailable(what) => write!(f, "mode unavailable: {what}"),
        }
    }
}

impl core::error::Error for DiffusionError {}

/// Linear-beta noise schedule with cumulative products and posterior
/// variances precomputed.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiffusionSchedule {
    pub n_steps: usize,
    /// beta_t for t in 1..=n_steps; index 0 unused (kept at 0).
    betas: Vec<f64>,
    /// alpha_bar_t for t in 0..=n_steps; alpha_bar_0 = 1 by convention.
    alpha_bar: Vec<f64>,
    /// posterior variance for t in 1..=n_steps; index 0 unused.
    posterior_var: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear interpolation of beta over `n_steps` diffusion steps.
    pub fn make(n_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if n_steps < 2
            || !(beta_start > 0.0)
            || !(beta_end < 1.0)
            || !(beta_start <= beta_end)
        {
            return Err(DiffusionError::InvalidRange { beta_start, beta_end, steps: n_steps });
        }
        let mut betas = vec![0.0; n_steps + 1];
        let mut alpha_bar = vec![1.0; n_steps + 1];
        let mut posterior_var = vec![0.0; n_steps + 1];
        for t in 1..=n_steps {
            let frac = (t - 1) as f64 / (n_steps - 1) as f64;
            betas[t] = beta_start + (beta_end - beta_start) * frac;
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - betas[t]);
        }
        posterior_var[1] = betas[1];
        for t in 2..=n_steps {
            posterior_var[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * betas[t];
        }
        Ok(DiffusionSchedule { n_steps, betas, alpha_bar, posterior_var })
    }

    /// Defaults: 200 steps, beta from 1e-4 to 0.02.
    pub fn default_schedule() -> Self {
        Self::make(200, 1e-4, 0.02).expect("default schedule is valid")
    }

    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// alpha_bar_t, defined for t in 0..=n_steps with alpha_bar_0 = 1.
    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    #[inline]
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t]
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.n_steps {
            return Err(DiffusionError::TimestepOutOfRange { t, max: self.n_steps });
        }
        Ok(())
    }
}

/// Closed-form forward noising: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
/// `t = 0` returns `x0` unchanged.
pub fn forward_noise(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    sched: &DiffusionSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    if x0.len() != eps.len() {
        return Err(DiffusionError::ShapeMismatch);
    }
    if t > sched.n_steps {
        return Err(DiffusionError::TimestepOutOfRange { t, max: sched.n_steps });
    }
    let ab = sched.alpha_bar(t);
    let cs = ab.sqrt();
    let cn = (1.0 - ab).sqrt();
    Ok(x0.iter().zip(eps).map(|(x, e)| cs * x + cn * e).collect())
}

/// One ancestral reverse step from `x_t` to `x_{t-1}`.
///
/// `noise` must be supplied for `t > 1` and omitted at `t = 1`, where the
/// step is deterministic.
pub fn reverse_step(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &DiffusionSchedule,
    noise: Option<&[f64]>,
) -> Result<Vec<f64>, DiffusionError> {
    sched.check_t(t)?;
    if x_t.len() != eps_hat.len() {
        return Err(DiffusionError::ShapeMismatch);
    }
    if let Some(n) = noise {
        if n.len() != x_t.len() {
            return Err(DiffusionError::ShapeMismatch);
        }
    }
    let beta = sched.beta(t);
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let eps_coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = sched.posterior_var(t).sqrt();
    let mut out: Vec<f64> = x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| inv_sqrt_alpha * (x - eps_coef * e))
        .collect();
    if t > 1 {
        if let Some(z) = noise {
            for (o, n) in out.iter_mut().zip(z) {
                *o += sigma * n;
            }
        }
    }
    Ok(out)
}

/// Inference mode for [`sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SampleMode {
    /// Both histories condition the run; both futures denoise with a shared
    /// timestep.
    Joint,
    /// Trajectory history only; the whole flow side is held at max-timestep
    /// noise, which marginalizes it out.
    MarginalTraj,
    /// Flow history only; the trajectory side is marginalized.
    MarginalFlow,
}

/// Denoised future tokens for whichever sides were sampled.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// One vector per trajectory future token.
    pub traj_future: Vec<Vec<f64>>,
    /// One vector per flow future token.
    pub flow_future: Vec<Vec<f64>>,
}

/// Ancestral sampling from t = n_steps down to 1 over future tokens.
///
/// History tokens stay clean throughout. In the marginal modes the missing
/// modality's tokens are standard-normal draws pinned at the maximum
/// timestep for the entire run; their clean values are never observed.
/// Deterministic given `seed`.
pub fn sample(
    den: &JointDenoiser,
    params: &[f64],
    sched: &DiffusionSchedule,
    traj: Option<&TokenBatch>,
    flow: Option<&TokenBatch>,
    mode: SampleMode,
    seed: u64,
) -> Result<SampleOutput, DiffusionError> {
    let width = den.cfg.token_width;
    match mode {
        SampleMode::Joint => {
            if traj.is_none() || flow.is_none() {
                return Err(DiffusionError::ModeUnavailable(
                    "joint sampling needs both modality histories",
                ));
            }
        }
        SampleMode::MarginalTraj => {
            if traj.is_none() {
                return Err(DiffusionError::ModeUnavailable(
                    "trajectory history required",
                ));
            }
        }
        SampleMode::MarginalFlow => {
            if flow.is_none() {
                return Err(DiffusionError::ModeUnavailable("flow history required"));
            }
        }
    }

    let mut rng_traj = stream(seed, StreamId::SampleTraj);
    let mut rng_flow = stream(seed, StreamId::SampleFlow);
    let t_max = sched.n_steps;

    // Marginalized sides become pure-noise token stubs at t = n_steps.
    let make_noise_side = |rng: &mut rand_chacha::ChaCha8Rng, batch: Option<&TokenBatch>,
                           modality: TokenModality, n_default: usize| {
        let n = batch.map(|b| b.n_tokens()).unwrap_or(n_default);
        let mut tokens = Vec::with_capacity(n);
        for pos in 0..n {
            let mut x = vec![0.0; width];
            for v in x.iter_mut() {
                *v = next_normal(rng);
            }
            tokens.push(SeqToken { x, modality, role: Role::Future, pos, diff_t: t_max });
        }
        tokens
    };

    // Active sides: clean history plus noise-initialized future.
    let init_active = |rng: &mut rand_chacha::ChaCha8Rng, batch: &TokenBatch| {
        let mut hist = Vec::new();
        let mut fut = Vec::new();
        for (pos, tok) in batch.tokens.iter().enumerate() {
            match batch.roles[pos] {
                Role::History => hist.push(SeqToken {
                    x: tok.clone(),
                    modality: batch.modality,
                    role: Role::History,
                    pos,
                    diff_t: 0,
                }),
                Role::Future => {
                    let mut x = vec![0.0; width];
                    for v in x.iter_mut() {
                        *v = next_normal(rng);
                    }
                    fut.push(SeqToken {
                        x,
                        modality: batch.modality,
                        role: Role::Future,
                        pos,
                        diff_t: t_max,
                    });
                }
            }
        }
        (hist, fut)
    };

    let (traj_hist, mut traj_fut, traj_active) = match (mode, traj) {
        (SampleMode::MarginalFlow, _) => {
            (Vec::new(), make_noise_side(&mut rng_traj, traj, TokenModality::Trajectory, 0), false)
        }
        (_, Some(batch)) => {
            let (h, f) = init_active(&mut rng_traj, batch);
            (h, f, true)
        }
        (_, None) => (Vec::new(), Vec::new(), false),
    };
    let (flow_hist, mut flow_fut, flow_active) = match (mode, flow) {
        (SampleMode::MarginalTraj, _) => {
            (Vec::new(), make_noise_side(&mut rng_flow, flow, TokenModality::Flow, 0), false)
        }
        (_, Some(batch)) => {
            let (h, f) = init_active(&mut rng_flow, batch);
            (h, f, true)
        }
        (_, None) => (Vec::new(), Vec::new(), false),
    };

    for t in (1..=t_max).rev() {
        if traj_active {
            for tok in traj_fut.iter_mut() {
                tok.diff_t = t;
            }
        }
        if flow_active {
            for tok in flow_fut.iter_mut() {
                tok.diff_t = t;
            }
        }
        let mut seq: Vec<&SeqToken> = Vec::new();
        seq.extend(traj_hist.iter());
        seq.extend(traj_fut.iter());
        seq.extend(flow_hist.iter());
        seq.extend(flow_fut.iter());
        let eps_hat = den
            .predict_noise_refs(params, &seq)
            .map_err(denoiser_to_diffusion)?;

        let n_traj = traj_hist.len() + traj_fut.len();
        if traj_active {
            for (i, tok) in traj_fut.iter_mut().enumerate() {
                let idx = traj_hist.len() + i;
                let noise = if t > 1 {
                    Some(crate::rng::normal_vec(&mut rng_traj, width))
                } else {
                    None
                };
                tok.x = reverse_step(&tok.x, t, &eps_hat[idx], sched, noise.as_deref())?;
            }
        }
        if flow_active {
            for (i, tok) in flow_fut.iter_mut().enumerate() {
                let idx = n_traj + flow_hist.len() + i;
                let noise = if t > 1 {
                    Some(crate::rng::normal_vec(&mut rng_flow, width))
                } else {
                    None
                };
                tok.x = reverse_step(&tok.x, t, &eps_hat[idx], sched, noise.as_deref())?;
            }
        }
    }

    Ok(SampleOutput {
        traj_future: if traj_active {
            traj_fut.into_iter().map(|t| t.x).collect()
        } else {
            Vec::new()
        },
        flow_future: if flow_active {
            flow_fut.into_iter().map(|t| t.x).collect()
        } else {
            Vec::new()
        },
    })
}

fn denoiser_to_diffusion(e: DenoiserError) -> DiffusionError {
    match e {
        DenoiserError::WidthMismatch { .. } => DiffusionError::ShapeMismatch,
        DenoiserError::EmptyFuture => DiffusionError::ModeUnavailable("no future tokens"),
    }
}

/// Sample independent standard-normal noise shaped like the future tokens of
/// a batch, plus per-batch uniform timesteps. Shared by training and tests.
pub fn draw_timestep<R: Rng + ?Sized>(rng: &mut R, sched: &DiffusionSchedule) -> usize {
    rng.gen_range(1..=sched.n_steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_step_schedule_has_exact_products() {
        let s = DiffusionSchedule::make(2, 0.1, 0.2).unwrap();
        assert_relative_eq!(s.alpha_bar(1), 0.9, epsilon = 1e-15);
        assert_relative_eq!(s.alpha_bar(2), 0.72, epsilon = 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_relative_eq!(s.posterior_var(1), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing() {
        let s = DiffusionSchedule::make(50, 1e-4, 0.25).unwrap();
        for t in 1..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            assert!(s.posterior_var(t) <= s.beta(t) + 1e-15);
        }
    }

    #[test]
    fn alpha_bar_matches_cumulative_product_oracle() {
        let s = DiffusionSchedule::make(200, 1e-4, 0.02).unwrap();
        for t in 1..=200usize {
            // oracle: recompute the product from scratch
            let mut prod = 1.0;
            for i in 1..=t {
                let beta = 1e-4 + (0.02 - 1e-4) * (i - 1) as f64 / 199.0;
                prod *= 1.0 - beta;
            }
            assert_relative_eq!(s.alpha_bar(t), prod, epsilon = 1e-12);
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(DiffusionSchedule::make(1, 0.1, 0.2).is_err());
        assert!(DiffusionSchedule::make(10, 0.0, 0.2).is_err());
        assert!(DiffusionSchedule::make(10, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::make(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_noise_at_t_zero_is_identity() {
        let s = DiffusionSchedule::make(10, 1e-4, 0.02).unwrap();
        let x0 = [1.0, -2.0, 3.0];
        let eps = [0.5, 0.5, 0.5];
        assert_eq!(forward_noise(&x0, 0, &eps, &s).unwrap(), x0.to_vec());
    }

    #[test]
    fn forward_noise_of_zero_signal_is_scaled_noise() {
        let s = DiffusionSchedule::make(10, 1e-4, 0.02).unwrap();
        let x0 = [0.0; 4];
        let eps = [1.0, -1.0, 2.0, 0.5];
        let t = 7;
        let got = forward_noise(&x0, t, &eps, &s).unwrap();
        let c = (1.0 - s.alpha_bar(t)).sqrt();
        for (g, e) in got.iter().zip(&eps) {
            assert_relative_eq!(*g, c * e, epsilon = 1e-15);
        }
    }

    #[test]
    fn forward_noise_variance_is_unit_at_max_t() {
        // with unit-variance signal, Var(x_t) = abar + (1 - abar) = 1
        let s = DiffusionSchedule::make(50, 1e-4, 0.25).unwrap();
        let mut rng = stream(5, StreamId::TrainNoise);
        let n = 10_000;
        let mut sq = 0.0;
        let mut sum = 0.0;
        for _ in 0..n {
            let x0 = [next_normal(&mut rng)];
            let eps = [next_normal(&mut rng)];
            let xt = forward_noise(&x0, 50, &eps, &s).unwrap()[0];
            sum += xt;
            sq += xt * xt;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn forward_noise_shape_mismatch_is_rejected() {
        let s = DiffusionSchedule::make(10, 1e-4, 0.02).unwrap();
        assert!(matches!(
            forward_noise(&[0.0; 3], 1, &[0.0; 4], &s),
            Err(DiffusionError::ShapeMismatch)
        ));
    }

    #[test]
    fn reverse_step_approaches_identity_for_small_beta() {
        let s = DiffusionSchedule::make(10, 1e-6, 1e-5).unwrap();
        let x = [1.0, -0.5];
        let out = reverse_step(&x, 1, &[0.0, 0.0], &s, None).unwrap();
        for (o, xi) in out.iter().zip(&x) {
            assert_relative_eq!(*o, *xi, epsilon = 1e-4);
        }
    }

    #[test]
    fn reverse_step_at_t1_is_deterministic() {
        let s = DiffusionSchedule::make(10, 1e-4, 0.02).unwrap();
        let x = [0.3, 0.7];
        let e = [0.1, -0.1];
        let a = reverse_step(&x, 1, &e, &s, None).unwrap();
        let b = reverse_step(&x, 1, &e, &s, None).unwrap();
        assert_eq!(a, b);
        // supplying noise at t = 1 must not change the output
        let c = reverse_step(&x, 1, &e, &s, Some(&[5.0, 5.0])).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn reverse_step_with_true_noise_recovers_signal_as_beta_shrinks() {
        // One forward step then a reverse step with the exact injected noise
        // and no fresh noise. At t = 1, abar_1 = 1 - beta_1, and the update
        // algebra gives exactly x0 back:
        //   (sqrt(1-b) x0 + sqrt(b) e - b/sqrt(b) e) / sqrt(1-b) = x0.
        // A two-step schedule exercises the general t > 1 coefficients,
        // where the residual shrinks with beta.
        let x0 = [0.8, -1.2, 0.4];
        let eps = [0.9, -0.3, 0.2];
        for beta in [0.05, 0.005, 0.0005] {
            let s = DiffusionSchedule::make(2, beta, beta).unwrap();
            let x1 = forward_noise(&x0, 1, &eps, &s).unwrap();
            let back = reverse_step(&x1, 1, &eps, &s, None).unwrap();
            for (b, x) in back.iter().zip(&x0) {
                assert_relative_eq!(*b, *x, epsilon = 1e-12);
            }
        }
        // general step t = 2 with the true eps: independent algebra oracle.
        // The residual noise term scales as sqrt(beta), so the tolerance
        // shrinks with the schedule.
        for beta in [0.05, 0.005, 0.0005] {
            let s = DiffusionSchedule::make(2, beta, beta).unwrap();
            let eps2 = [0.4, 0.1, -0.7];
            let x2 = forward_noise(&x0, 2, &eps2, &s).unwrap();
            let back = reverse_step(&x2, 2, &eps2, &s, None).unwrap();
            let tol = 0.75 * beta.sqrt() + beta;
            for i in 0..3 {
                let want = (x2[i] - s.beta(2) / (1.0 - s.alpha_bar(2)).sqrt() * eps2[i])
                    / (1.0 - s.beta(2)).sqrt();
                assert_relative_eq!(back[i], want, epsilon = 1e-14);
                assert!((back[i] - x0[i]).abs() < tol, "beta {beta}");
            }
        }
    }

    #[test]
    fn timestep_bounds_are_enforced() {
        let s = DiffusionSchedule::make(10, 1e-4, 0.02).unwrap();
        assert!(matches!(
            reverse_step(&[0.0], 0, &[0.0], &s, None),
            Err(DiffusionError::TimestepOutOfRange { .. })
        ));
        assert!(matches!(
            reverse_step(&[0.0], 11, &[0.0], &s, Some(&[0.0])),
            Err(DiffusionError::TimestepOutOfRange { .. })
        ));
    }

    use crate::rng::{next_normal, stream, StreamId};
}
