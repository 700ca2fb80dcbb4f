//! Joint noise-prediction network.
//!
//! One pre-norm transformer consumes the concatenated trajectory and flow
//! token sequences. Each token enters as its (possibly noised) embedding plus
//! a learned modality embedding, a sinusoidal diffusion-timestep embedding
//! for that token's modality, and a sinusoidal position embedding. Outputs
//! are read through per-modality projections at future-token positions.
//!
//! Parameters live in one flat `&[f64]` owned by the caller; this module
//! only records where each tensor sits. Backpropagation is written by hand
//! and checked against finite differences in the tests.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::linalg::{affine, dot, gemm_nn_acc, gemm_tn_acc, softmax_in_place};
use crate::tokenizer::{Role, TokenModality};

#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserError {
    WidthMismatch { got: usize, want: usize },
    EmptyFuture,
}

impl core::fmt::Display for DenoiserError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DenoiserError::WidthMismatch { got, want } => {
                write!(f, "token width {got} does not match model width {want}")
            }
            DenoiserError::EmptyFuture => write!(f, "sequence has no future tokens"),
        }
    }
}

impl core::error::Error for DenoiserError {}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DenoiserConfig {
    /// Token width W shared by both modalities.
    pub token_width: usize,
    /// Transformer hidden width.
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { token_width: 64, d_model: 128, n_layers: 4, n_heads: 4, mlp_ratio: 4 }
    }
}

/// One token as the denoiser sees it.
#[derive(Debug, Clone)]
pub struct SeqToken {
    pub x: Vec<f64>,
    pub modality: TokenModality,
    pub role: Role,
    /// Position within its modality's sequence.
    pub pos: usize,
    /// Diffusion timestep; 0 for clean history tokens.
    pub diff_t: usize,
}

const LN_EPS: f64 = 1e-5;

// Diffusion timesteps are scaled by pi before the sinusoid so integer
// timesteps never land on the same phase as integer sequence positions.
const TIME_ARG_SCALE: f64 = core::f64::consts::PI;

fn modality_index(m: TokenModality) -> usize {
    match m {
        TokenModality::Trajectory => 0,
        TokenModality::Flow => 1,
    }
}

/// Sinusoidal embedding with sin/cos pairs at geometric frequencies.
fn sinusoid(value: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out[2 * i] = (value * freq).sin();
        out[2 * i + 1] = (value * freq).cos();
    }
    if out.len() % 2 == 1 {
        out[out.len() - 1] = 0.0;
    }
}

#[derive(Debug, Clone)]
struct LayerRanges {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    qkv_w: Range<usize>,
    qkv_b: Range<usize>,
    att_w: Range<usize>,
    att_b: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    mlp1_w: Range<usize>,
    mlp1_b: Range<usize>,
    mlp2_w: Range<usize>,
    mlp2_b: Range<usize>,
}

#[derive(Debug, Clone)]
struct BackboneRanges {
    in_w: [Range<usize>; 2],
    in_b: [Range<usize>; 2],
    mode_emb: Range<usize>,
    layers: Vec<LayerRanges>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
    out_w: [Range<usize>; 2],
    out_b: [Range<usize>; 2],
}

pub(crate) struct Cursor(pub usize);

impl Cursor {
    pub fn take(&mut self, n: usize) -> Range<usize> {
        let r = self.0..self.0 + n;
        self.0 += n;
        r
    }
}

fn build_backbone(cfg: &DenoiserConfig, cur: &mut Cursor) -> BackboneRanges {
    let w = cfg.token_width;
    let d = cfg.d_model;
    let mh = cfg.mlp_ratio * d;
    let in_w = [cur.take(d * w), cur.take(d * w)];
    let in_b = [cur.take(d), cur.take(d)];
    let mode_emb = cur.take(2 * d);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerRanges {
            ln1_g: cur.take(d),
            ln1_b: cur.take(d),
            qkv_w: cur.take(3 * d * d),
            qkv_b: cur.take(3 * d),
            att_w: cur.take(d * d),
            att_b: cur.take(d),
            ln2_g: cur.take(d),
            ln2_b: cur.take(d),
            mlp1_w: cur.take(mh * d),
            mlp1_b: cur.take(mh),
            mlp2_w: cur.take(d * mh),
            mlp2_b: cur.take(d),
        })
        .collect();
    let lnf_g = cur.take(d);
    let lnf_b = cur.take(d);
    let out_w = [cur.take(w * d), cur.take(w * d)];
    let out_b = [cur.take(w), cur.take(w)];
    BackboneRanges { in_w, in_b, mode_emb, layers, lnf_g, lnf_b, out_w, out_b }
}

fn add_into(grads: &mut [f64], range: Range<usize>, buf: &[f64]) {
    for (g, b) in grads[range].iter_mut().zip(buf) {
        *g += b;
    }
}

fn col_sums_acc(acc: &mut [f64], x: &[f64], rows: usize, cols: usize) {
    for r in 0..rows {
        for (a, v) in acc.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *a += v;
        }
    }
}

/// Transformer backbone(s) addressed inside a flat parameter vector.
///
/// `shared = true` uses one backbone for both modalities; otherwise each
/// modality owns a full backbone that still attends over the joint sequence
/// but whose outputs are read only for its own tokens.
#[derive(Debug, Clone)]
pub struct JointDenoiser {
    pub cfg: DenoiserConfig,
    pub shared: bool,
    base: usize,
    end: usize,
    backbones: Vec<BackboneRanges>,
}

impl JointDenoiser {
    /// Lay out backbone parameters starting at `base` in the flat vector.
    pub fn new(cfg: DenoiserConfig, shared: bool, base: usize) -> Self {
        assert!(cfg.d_model % cfg.n_heads == 0, "d_model must divide into heads");
        assert!(cfg.d_model >= 2 && cfg.token_width >= 1);
        let mut cur = Cursor(base);
        let n_backbones = if shared { 1 } else { 2 };
        let backbones = (0..n_backbones).map(|_| build_backbone(&cfg, &mut cur)).collect();
        JointDenoiser { cfg, shared, base, end: cur.0, backbones }
    }

    pub fn param_range(&self) -> Range<usize> {
        self.base..self.end
    }

    pub fn n_params(&self) -> usize {
        self.end - self.base
    }

    /// Backbone whose output projection serves tokens of `m`.
    fn owner(&self, m: TokenModality) -> usize {
        if self.shared {
            0
        } else {
            modality_index(m)
        }
    }

    /// Scaled-normal projection weights, unit layer-norm gains, zeroed
    /// output heads (predictions start at zero).
    pub fn init_params<R: rand::Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        let w = self.cfg.token_width;
        let d = self.cfg.d_model;
        let mh = self.cfg.mlp_ratio * d;
        fn fill<R: rand::Rng + ?Sized>(params: &mut [f64], range: Range<usize>, std: f64, rng: &mut R) {
            for v in params[range].iter_mut() {
                *v = crate::rng::next_normal(rng) * std;
            }
        }
        for bb in &self.backbones {
            for m in 0..2 {
                fill(params, bb.in_w[m].clone(), 1.0 / (w as f64).sqrt(), rng);
                params[bb.in_b[m].clone()].fill(0.0);
                params[bb.out_w[m].clone()].fill(0.0);
                params[bb.out_b[m].clone()].fill(0.0);
            }
            fill(params, bb.mode_emb.clone(), 0.02, rng);
            for layer in &bb.layers {
                params[layer.ln1_g.clone()].fill(1.0);
                params[layer.ln1_b.clone()].fill(0.0);
                fill(params, layer.qkv_w.clone(), 1.0 / (d as f64).sqrt(), rng);
                params[layer.qkv_b.clone()].fill(0.0);
                fill(params, layer.att_w.clone(), 1.0 / (d as f64).sqrt(), rng);
                params[layer.att_b.clone()].fill(0.0);
                params[layer.ln2_g.clone()].fill(1.0);
                params[layer.ln2_b.clone()].fill(0.0);
                fill(params, layer.mlp1_w.clone(), 1.0 / (d as f64).sqrt(), rng);
                params[layer.mlp1_b.clone()].fill(0.0);
                fill(params, layer.mlp2_w.clone(), 1.0 / (mh as f64).sqrt(), rng);
                params[layer.mlp2_b.clone()].fill(0.0);
            }
            params[bb.lnf_g.clone()].fill(1.0);
            params[bb.lnf_b.clone()].fill(0.0);
        }
    }

    fn check_seq(&self, seq: &[&SeqToken]) -> Result<(), DenoiserError> {
        for tok in seq {
            if tok.x.len() != self.cfg.token_width {
                return Err(DenoiserError::WidthMismatch {
                    got: tok.x.len(),
                    want: self.cfg.token_width,
                });
            }
        }
        if !seq.iter().any(|t| t.role == Role::Future) {
            return Err(DenoiserError::EmptyFuture);
        }
        Ok(())
    }

    /// Predicted noise per token. Borrow-friendly variant used by the sampler.
    pub fn predict_noise_refs(
        &self,
        params: &[f64],
        seq: &[&SeqToken],
    ) -> Result<Vec<Vec<f64>>, DenoiserError> {
        Ok(self.forward(params, seq)?.outputs)
    }

    /// Convenience wrapper over owned token slices.
    pub fn predict_noise(
        &self,
        params: &[f64],
        seq: &[SeqToken],
    ) -> Result<Vec<Vec<f64>>, DenoiserError> {
        let refs: Vec<&SeqToken> = seq.iter().collect();
        self.predict_noise_refs(params, &refs)
    }

    /// Forward pass keeping every intermediate needed by [`Self::backward`].
    pub fn forward(&self, params: &[f64], seq: &[&SeqToken]) -> Result<ForwardPass, DenoiserError> {
        self.check_seq(seq)?;
        let n = seq.len();
        let d = self.cfg.d_model;
        let w = self.cfg.token_width;
        let mut caches = Vec::with_capacity(self.backbones.len());
        for bb in &self.backbones {
            caches.push(self.run_backbone(params, bb, seq));
        }
        let mut outputs = Vec::with_capacity(n);
        for (i, tok) in seq.iter().enumerate() {
            let m = modality_index(tok.modality);
            let bb = &self.backbones[self.owner(tok.modality)];
            let hf = &caches[self.owner(tok.modality)].hf[i * d..(i + 1) * d];
            let mut out = vec![0.0; w];
            affine(&params[bb.out_w[m].clone()], &params[bb.out_b[m].clone()], hf, &mut out);
            outputs.push(out);
        }
        let meta = seq
            .iter()
            .map(|t| TokenMeta { modality: t.modality, x: t.x.clone() })
            .collect();
        Ok(ForwardPass { outputs, caches, meta })
    }

    fn run_backbone(&self, params: &[f64], bb: &BackboneRanges, seq: &[&SeqToken]) -> BackboneCache {
        let n = seq.len();
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let mh = self.cfg.mlp_ratio * d;
        let scale = 1.0 / (dh as f64).sqrt();

        // token embedding
        let mut h = vec![0.0; n * d];
        let mut sin_buf = vec![0.0; d];
        for (i, tok) in seq.iter().enumerate() {
            let m = modality_index(tok.modality);
            let row = &mut h[i * d..(i + 1) * d];
            affine(&params[bb.in_w[m].clone()], &params[bb.in_b[m].clone()], &tok.x, row);
            let mode = &params[bb.mode_emb.clone()][m * d..(m + 1) * d];
            for (r, e) in row.iter_mut().zip(mode) {
                *r += e;
            }
            sinusoid(tok.diff_t as f64 * TIME_ARG_SCALE, &mut sin_buf);
            for (r, s) in row.iter_mut().zip(&sin_buf) {
                *r += s;
            }
            sinusoid(tok.pos as f64, &mut sin_buf);
            for (r, s) in row.iter_mut().zip(&sin_buf) {
                *r += s;
            }
        }

        let mut layers = Vec::with_capacity(bb.layers.len());
        for lr in &bb.layers {
            let h_in = h;
            let (a, ln1_xhat, ln1_inv) =
                layer_norm(&h_in, n, d, &params[lr.ln1_g.clone()], &params[lr.ln1_b.clone()]);
            let mut qkv = vec![0.0; n * 3 * d];
            for i in 0..n {
                affine(
                    &params[lr.qkv_w.clone()],
                    &params[lr.qkv_b.clone()],
                    &a[i * d..(i + 1) * d],
                    &mut qkv[i * 3 * d..(i + 1) * 3 * d],
                );
            }
            let mut probs = vec![0.0; heads * n * n];
            let mut ctx = vec![0.0; n * d];
            for head in 0..heads {
                let qo = head * dh;
                let ko = d + head * dh;
                let vo = 2 * d + head * dh;
                for i in 0..n {
                    let q = &qkv[i * 3 * d + qo..i * 3 * d + qo + dh];
                    let row_off = (head * n + i) * n;
                    for j in 0..n {
                        let k = &qkv[j * 3 * d + ko..j * 3 * d + ko + dh];
                        probs[row_off + j] = dot(q, k) * scale;
                    }
                    softmax_in_place(&mut probs[row_off..row_off + n]);
                    for j in 0..n {
                        let p = probs[row_off + j];
                        if p == 0.0 {
                            continue;
                        }
                        let v = &qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                        let out = &mut ctx[i * d + head * dh..i * d + head * dh + dh];
                        for (o, vv) in out.iter_mut().zip(v) {
                            *o += p * vv;
                        }
                    }
                }
            }
            let mut h_mid = h_in.clone();
            let mut att_out = vec![0.0; d];
            for i in 0..n {
                affine(
                    &params[lr.att_w.clone()],
                    &params[lr.att_b.clone()],
                    &ctx[i * d..(i + 1) * d],
                    &mut att_out,
                );
                for (hm, o) in h_mid[i * d..(i + 1) * d].iter_mut().zip(&att_out) {
                    *hm += o;
                }
            }
            let (m_in, ln2_xhat, ln2_inv) =
                layer_norm(&h_mid, n, d, &params[lr.ln2_g.clone()], &params[lr.ln2_b.clone()]);
            let mut mlp_u = vec![0.0; n * mh];
            for i in 0..n {
                affine(
                    &params[lr.mlp1_w.clone()],
                    &params[lr.mlp1_b.clone()],
                    &m_in[i * d..(i + 1) * d],
                    &mut mlp_u[i * mh..(i + 1) * mh],
                );
            }
            let mlp_g: Vec<f64> = mlp_u.iter().map(|&u| gelu(u)).collect();
            let mut h_next = h_mid.clone();
            let mut mlp_out = vec![0.0; d];
            for i in 0..n {
                affine(
                    &params[lr.mlp2_w.clone()],
                    &params[lr.mlp2_b.clone()],
                    &mlp_g[i * mh..(i + 1) * mh],
                    &mut mlp_out,
                );
                for (hn, o) in h_next[i * d..(i + 1) * d].iter_mut().zip(&mlp_out) {
                    *hn += o;
                }
            }
            layers.push(LayerCache {
                ln1_xhat,
                ln1_inv,
                a,
                qkv,
                probs,
                ctx,
                ln2_xhat,
                ln2_inv,
                m_in,
                mlp_u,
                mlp_g,
            });
            h = h_next;
        }

        let (hf, lnf_xhat, lnf_inv) =
            layer_norm(&h, n, d, &params[bb.lnf_g.clone()], &params[bb.lnf_b.clone()]);
        BackboneCache { lnf_xhat, lnf_inv, hf, layers }
    }

    /// Backpropagate `d_outputs` (one cotangent per token, zeros where the
    /// loss ignores a position). Parameter gradients accumulate into `grads`
    /// (same length as the full parameter vector); returns the gradient with
    /// respect to each input token embedding.
    pub fn backward(
        &self,
        params: &[f64],
        pass: &ForwardPass,
        d_outputs: &[Vec<f64>],
        grads: &mut [f64],
    ) -> Vec<Vec<f64>> {
        let n = pass.meta.len();
        assert_eq!(d_outputs.len(), n);
        let d = self.cfg.d_model;
        let w = self.cfg.token_width;
        let mut d_x = vec![vec![0.0; w]; n];

        for (owner, bb) in self.backbones.iter().enumerate() {
            let cache = &pass.caches[owner];
            // output projection backward for the tokens this backbone serves
            let mut d_hf = vec![0.0; n * d];
            let mut any = false;
            for i in 0..n {
                let tok = &pass.meta[i];
                if self.owner(tok.modality) != owner {
                    continue;
                }
                let dout = &d_outputs[i];
                if dout.iter().all(|&v| v == 0.0) {
                    continue;
                }
                any = true;
                let m = modality_index(tok.modality);
                let hf = &cache.hf[i * d..(i + 1) * d];
                let mut gw = vec![0.0; w * d];
                for r in 0..w {
                    let dr = dout[r];
                    if dr == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        gw[r * d + c] = dr * hf[c];
                    }
                }
                add_into(grads, bb.out_w[m].clone(), &gw);
                add_into(grads, bb.out_b[m].clone(), dout);
                let wout = &params[bb.out_w[m].clone()];
                let drow = &mut d_hf[i * d..(i + 1) * d];
                for r in 0..w {
                    let dr = dout[r];
                    if dr == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        drow[c] += dr * wout[r * d + c];
                    }
                }
            }
            if !any {
                continue;
            }
            let d_h0 = self.backward_backbone(params, bb, cache, &d_hf, n, grads);
            // input embedding backward
            for i in 0..n {
                let tok = &pass.meta[i];
                let m = modality_index(tok.modality);
                let drow = &d_h0[i * d..(i + 1) * d];
                let mut gw = vec![0.0; d * w];
                for r in 0..d {
                    let dr = drow[r];
                    if dr == 0.0 {
                        continue;
                    }
                    for c in 0..w {
                        gw[r * w + c] = dr * tok.x[c];
                    }
                }
                add_into(grads, bb.in_w[m].clone(), &gw);
                add_into(grads, bb.in_b[m].clone(), drow);
                let mode_range = bb.mode_emb.clone();
                add_into(
                    grads,
                    mode_range.start + m * d..mode_range.start + (m + 1) * d,
                    drow,
                );
                let win = &params[bb.in_w[m].clone()];
                let dx = &mut d_x[i];
                for r in 0..d {
                    let dr = drow[r];
                    if dr == 0.0 {
                        continue;
                    }
                    for c in 0..w {
                        dx[c] += dr * win[r * w + c];
                    }
                }
            }
        }
        d_x
    }

    fn backward_backbone(
        &self,
        params: &[f64],
        bb: &BackboneRanges,
        cache: &BackboneCache,
        d_hf: &[f64],
        n: usize,
        grads: &mut [f64],
    ) -> Vec<f64> {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let mh = self.cfg.mlp_ratio * d;
        let scale = 1.0 / (dh as f64).sqrt();

        // final layer norm
        let mut d_h = vec![0.0; n * d];
        {
            let mut dg = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            layer_norm_backward(
                d_hf,
                &cache.lnf_xhat,
                &cache.lnf_inv,
                &params[bb.lnf_g.clone()],
                n,
                d,
                &mut d_h,
                &mut dg,
                &mut dbeta,
            );
            add_into(grads, bb.lnf_g.clone(), &dg);
            add_into(grads, bb.lnf_b.clone(), &dbeta);
        }

        for (li, lr) in bb.layers.iter().enumerate().rev() {
            let lc = &cache.layers[li];

            // h_next = h_mid + mlp2(gelu(mlp1(LN2(h_mid))))
            let d_mlp_out = &d_h; // (n, d)
            let mut d_g = vec![0.0; n * mh];
            gemm_nn_acc(&mut d_g, d_mlp_out, &params[lr.mlp2_w.clone()], n, d, mh);
            {
                let mut gw2 = vec![0.0; d * mh];
                gemm_tn_acc(&mut gw2, d_mlp_out, &lc.mlp_g, d, n, mh);
                add_into(grads, lr.mlp2_w.clone(), &gw2);
                let mut gb2 = vec![0.0; d];
                col_sums_acc(&mut gb2, d_mlp_out, n, d);
                add_into(grads, lr.mlp2_b.clone(), &gb2);
            }
            let mut d_u = d_g;
            for (du, u) in d_u.iter_mut().zip(&lc.mlp_u) {
                *du *= gelu_grad(*u);
            }
            {
                let mut gw1 = vec![0.0; mh * d];
                gemm_tn_acc(&mut gw1, &d_u, &lc.m_in, mh, n, d);
                add_into(grads, lr.mlp1_w.clone(), &gw1);
                let mut gb1 = vec![0.0; mh];
                col_sums_acc(&mut gb1, &d_u, n, mh);
                add_into(grads, lr.mlp1_b.clone(), &gb1);
            }
            let mut d_m_in = vec![0.0; n * d];
            gemm_nn_acc(&mut d_m_in, &d_u, &params[lr.mlp1_w.clone()], n, mh, d);

            // residual: d_h_mid starts as d_h_next and gains the LN2 path
            let mut d_h_mid = d_h.clone();
            {
                let mut dg = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                layer_norm_backward(
                    &d_m_in,
                    &lc.ln2_xhat,
                    &lc.ln2_inv,
                    &params[lr.ln2_g.clone()],
                    n,
                    d,
                    &mut d_h_mid,
                    &mut dg,
                    &mut dbeta,
                );
                add_into(grads, lr.ln2_g.clone(), &dg);
                add_into(grads, lr.ln2_b.clone(), &dbeta);
            }

            // h_mid = h_in + att_w(ctx)
            let d_att_out = &d_h_mid;
            {
                let mut gwa = vec![0.0; d * d];
                gemm_tn_acc(&mut gwa, d_att_out, &lc.ctx, d, n, d);
                add_into(grads, lr.att_w.clone(), &gwa);
                let mut gba = vec![0.0; d];
                col_sums_acc(&mut gba, d_att_out, n, d);
                add_into(grads, lr.att_b.clone(), &gba);
            }
            let mut d_ctx = vec![0.0; n * d];
            gemm_nn_acc(&mut d_ctx, d_att_out, &params[lr.att_w.clone()], n, d, d);

            // attention backward per head
            let mut d_qkv = vec![0.0; n * 3 * d];
            let mut d_p = vec![0.0; n];
            let mut d_s = vec![0.0; n];
            for head in 0..heads {
                let qo = head * dh;
                let ko = d + head * dh;
                let vo = 2 * d + head * dh;
                for i in 0..n {
                    let d_ctx_h = &d_ctx[i * d + head * dh..i * d + head * dh + dh];
                    if d_ctx_h.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let prow = &lc.probs[(head * n + i) * n..(head * n + i + 1) * n];
                    // d_probs and d_v
                    for j in 0..n {
                        let v = &lc.qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                        d_p[j] = dot(d_ctx_h, v);
                        let p = prow[j];
                        if p != 0.0 {
                            let dv = &mut d_qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                            for (dvv, dc) in dv.iter_mut().zip(d_ctx_h) {
                                *dvv += p * dc;
                            }
                        }
                    }
                    // softmax backward
                    let dot_pp: f64 = (0..n).map(|j| d_p[j] * prow[j]).sum();
                    for j in 0..n {
                        d_s[j] = prow[j] * (d_p[j] - dot_pp);
                    }
                    // d_q_i and d_k_j
                    let q_i: Vec<f64> = lc.qkv[i * 3 * d + qo..i * 3 * d + qo + dh].to_vec();
                    for j in 0..n {
                        let dsj = d_s[j] * scale;
                        if dsj == 0.0 {
                            continue;
                        }
                        let k_j = &lc.qkv[j * 3 * d + ko..j * 3 * d + ko + dh];
                        {
                            let dq = &mut d_qkv[i * 3 * d + qo..i * 3 * d + qo + dh];
                            for (dqv, kv) in dq.iter_mut().zip(k_j) {
                                *dqv += dsj * kv;
                            }
                        }
                        {
                            let dk = &mut d_qkv[j * 3 * d + ko..j * 3 * d + ko + dh];
                            for (dkv, qv) in dk.iter_mut().zip(&q_i) {
                                *dkv += dsj * qv;
                            }
                        }
                    }
                }
            }
            {
                let mut gq = vec![0.0; 3 * d * d];
                gemm_tn_acc(&mut gq, &d_qkv, &lc.a, 3 * d, n, d);
                add_into(grads, lr.qkv_w.clone(), &gq);
                let mut gqb = vec![0.0; 3 * d];
                col_sums_acc(&mut gqb, &d_qkv, n, 3 * d);
                add_into(grads, lr.qkv_b.clone(), &gqb);
            }
            let mut d_a = vec![0.0; n * d];
            gemm_nn_acc(&mut d_a, &d_qkv, &params[lr.qkv_w.clone()], n, 3 * d, d);

            // residual: d_h_in = d_h_mid + LN1 path
            let mut d_h_in = d_h_mid.clone();
            {
                let mut dg = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                layer_norm_backward(
                    &d_a,
                    &lc.ln1_xhat,
                    &lc.ln1_inv,
                    &params[lr.ln1_g.clone()],
                    n,
                    d,
                    &mut d_h_in,
                    &mut dg,
                    &mut dbeta,
                );
                add_into(grads, lr.ln1_g.clone(), &dg);
                add_into(grads, lr.ln1_b.clone(), &dbeta);
            }
            d_h = d_h_in;
        }
        d_h
    }
}

/// Cached activations of one forward pass.
pub struct ForwardPass {
    pub outputs: Vec<Vec<f64>>,
    caches: Vec<BackboneCache>,
    meta: Vec<TokenMeta>,
}

struct TokenMeta {
    modality: TokenModality,
    x: Vec<f64>,
}

struct BackboneCache {
    lnf_xhat: Vec<f64>,
    lnf_inv: Vec<f64>,
    hf: Vec<f64>,
    layers: Vec<LayerCache>,
}

struct LayerCache {
    ln1_xhat: Vec<f64>,
    ln1_inv: Vec<f64>,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_inv: Vec<f64>,
    m_in: Vec<f64>,
    mlp_u: Vec<f64>,
    mlp_g: Vec<f64>,
}

/// y = gain * (x - mean)/sqrt(var + eps) + bias, rowwise over (n, d).
/// Returns (y, xhat, inv_std).
fn layer_norm(
    x: &[f64],
    n: usize,
    d: usize,
    gain: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        inv[i] = inv_std;
        for j in 0..d {
            let xh = (row[j] - mean) * inv_std;
            xhat[i * d + j] = xh;
            y[i * d + j] = gain[j] * xh + bias[j];
        }
    }
    (y, xhat, inv)
}

/// Rowwise layer-norm backward; accumulates into d_x, d_gain, d_bias.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    d_y: &[f64],
    xhat: &[f64],
    inv: &[f64],
    gain: &[f64],
    n: usize,
    d: usize,
    d_x: &mut [f64],
    d_gain: &mut [f64],
    d_bias: &mut [f64],
) {
    let dn = d as f64;
    for i in 0..n {
        let dy = &d_y[i * d..(i + 1) * d];
        let xh = &xhat[i * d..(i + 1) * d];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            d_gain[j] += dy[j] * xh[j];
            d_bias[j] += dy[j];
            let dxh = dy[j] * gain[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[j];
        }
        let m1 = sum_dxhat / dn;
        let m2 = sum_dxhat_xhat / dn;
        for j in 0..d {
            let dxh = dy[j] * gain[j];
            d_x[i * d + j] += inv[i] * (dxh - m1 - xh[j] * m2);
        }
    }
}

/// Tanh-approximated GELU.
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}
