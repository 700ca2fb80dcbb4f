//! Full model assembly: embedding tables for both modalities plus the
//! denoiser backbone(s), all addressed inside one flat parameter vector so
//! optimization, checkpointing, and finite-difference checks stay trivial.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::denoiser::{Cursor, DenoiserConfig, JointDenoiser};
use crate::diffusion::DiffusionSchedule;
use crate::domain::{GridSpec, RegionId};
use crate::graph::{build_graph, spatial_embedding_init, GraphError, Neighborhood};
use crate::predict::FlowHead;
use crate::rng::{next_normal, stream, StreamId};
use crate::tokenizer::{FlowNormStats, TableView, TokenizerConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    BadConfig(String),
    Graph(GraphError),
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::BadConfig(msg) => write!(f, "bad model config: {msg}"),
            ModelError::Graph(e) => write!(f, "spatial graph: {e}"),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<GraphError> for ModelError {
    fn from(e: GraphError) -> Self {
        ModelError::Graph(e)
    }
}

/// Everything that determines the trainable model's shape.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub denoiser: DenoiserConfig,
    /// One transformer for both modalities (true) or one per modality.
    pub shared_backbone: bool,
    pub use_traj: bool,
    pub use_flow: bool,
    pub n_channels: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tokenizer: TokenizerConfig::default(),
            denoiser: DenoiserConfig::default(),
            shared_backbone: true,
            use_traj: true,
            use_flow: true,
            n_channels: 2,
            diffusion_steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.tokenizer
            .validate()
            .map_err(|e| ModelError::BadConfig(alloc::format!("{e}")))?;
        if self.denoiser.token_width != self.tokenizer.embed_width {
            return Err(ModelError::BadConfig(
                "denoiser token width must equal tokenizer embed width".into(),
            ));
        }
        if !self.use_traj && !self.use_flow {
            return Err(ModelError::BadConfig("at least one modality must be enabled".into()));
        }
        if self.n_channels == 0 {
            return Err(ModelError::BadConfig("n_channels must be positive".into()));
        }
        Ok(())
    }

    /// A single-modality model never needs two backbones.
    pub fn effective_shared(&self) -> bool {
        self.shared_backbone || !(self.use_traj && self.use_flow)
    }
}

/// Standard deviation of the random component mixed into the spatial table
/// at init (the eigenmap part carries geography, the random part carries row
/// identity for the linear decoder).
pub const SPATIAL_INIT_JITTER: f64 = 0.6;

/// Where one modality's embedding tables live in the flat vector.
#[derive(Debug, Clone)]
pub struct TableLayout {
    pub spatial: Range<usize>,
    pub hour: Range<usize>,
    pub day: Range<usize>,
    pub value_w: Option<Range<usize>>,
    pub value_b: Option<Range<usize>>,
}

/// The trainable model plus its fitted decode-side state.
#[derive(Debug, Clone)]
pub struct Model {
    pub grid: GridSpec,
    pub cfg: ModelConfig,
    pub sched: DiffusionSchedule,
    pub traj_tables: TableLayout,
    pub flow_tables: TableLayout,
    pub den: JointDenoiser,
    pub params: Vec<f64>,
    /// Per-channel z-score statistics fitted on the training split.
    pub norm: FlowNormStats,
    /// Flow regression head, fitted after diffusion training.
    pub flow_head: Option<FlowHead>,
    pub init_seed: u64,
}

fn layout_tables(
    grid: &GridSpec,
    cfg: &ModelConfig,
    with_value_map: bool,
    cur: &mut Cursor,
) -> TableLayout {
    let ws = cfg.tokenizer.view_width();
    let spatial = cur.take(grid.n_regions() * ws);
    let hour = cur.take(grid.steps_per_day * ws);
    let day = cur.take(grid.days_per_week * ws);
    let (value_w, value_b) = if with_value_map {
        (
            Some(cur.take(ws * cfg.tokenizer.token_len_flow * cfg.n_channels)),
            Some(cur.take(ws)),
        )
    } else {
        (None, None)
    };
    TableLayout { spatial, hour, day, value_w, value_b }
}

impl Model {
    /// Deterministic initialization from (grid, config, seed).
    ///
    /// Spatial tables start from Laplacian eigenmaps over the full-grid
    /// king-move graph (scaled to roughly unit variance so token views share
    /// a scale); temporal tables and the flow value map start from seeded
    /// normals; backbone projections are scaled normals with zeroed output
    /// heads.
    pub fn init(grid: GridSpec, cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut cur = Cursor(0);
        let traj_tables = layout_tables(&grid, &cfg, false, &mut cur);
        let flow_tables = layout_tables(&grid, &cfg, true, &mut cur);
        let den = JointDenoiser::new(cfg.denoiser, cfg.effective_shared(), cur.0);
        let mut params = vec![0.0; den.param_range().end];

        let ws = cfg.tokenizer.view_width();
        let l = grid.n_regions();
        let graph = build_graph(&grid, Neighborhood::Eight)?;
        let emb = spatial_embedding_init(&graph, ws, grid.cell_size)?;
        // unit-norm eigenvectors have entries O(1/sqrt(L)); rescale so table
        // entries sit at O(1) like the other views. The eigenmap component
        // alone makes neighboring rows nearly collinear, which the linear
        // location decoder cannot tell apart, so a random component is mixed
        // in for row separability.
        let scale = (l as f64).sqrt();
        let mut rng = stream(seed, StreamId::Init);
        for tables in [&traj_tables, &flow_tables] {
            {
                let dst = &mut params[tables.spatial.clone()];
                for (d, s) in dst.iter_mut().zip(&emb.values) {
                    *d = s * scale + SPATIAL_INIT_JITTER * next_normal(&mut rng);
                }
            }
            for v in params[tables.hour.clone()].iter_mut() {
                *v = next_normal(&mut rng);
            }
            for v in params[tables.day.clone()].iter_mut() {
                *v = next_normal(&mut rng);
            }
            if let Some(r) = &tables.value_w {
                let in_dim = cfg.tokenizer.token_len_flow * cfg.n_channels;
                let std = 1.0 / (in_dim as f64).sqrt();
                for v in params[r.clone()].iter_mut() {
                    *v = next_normal(&mut rng) * std;
                }
            }
            if let Some(r) = &tables.value_b {
                params[r.clone()].fill(0.0);
            }
        }
        den.init_params(&mut params, &mut rng);

        let sched = DiffusionSchedule::make(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
            .map_err(|e| ModelError::BadConfig(alloc::format!("{e}")))?;
        let n_channels = cfg.n_channels;
        Ok(Model {
            grid,
            cfg,
            sched,
            traj_tables,
            flow_tables,
            den,
            params,
            norm: FlowNormStats::identity(n_channels),
            flow_head: None,
            init_seed: seed,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn view_of<'a>(&self, tables: &TableLayout, params: &'a [f64]) -> TableView<'a> {
        TableView {
            spatial: &params[tables.spatial.clone()],
            hour: &params[tables.hour.clone()],
            day: &params[tables.day.clone()],
            value_w: tables.value_w.clone().map(|r| &params[r]),
            value_b: tables.value_b.clone().map(|r| &params[r]),
            n_regions: self.grid.n_regions(),
            steps_per_day: self.grid.steps_per_day,
            view_width: self.cfg.tokenizer.view_width(),
        }
    }

    /// Trajectory tables over an arbitrary parameter buffer (used by
    /// finite-difference checks); `params` must share this model's layout.
    pub fn traj_view_in<'a>(&self, params: &'a [f64]) -> TableView<'a> {
        self.view_of(&self.traj_tables, params)
    }

    pub fn flow_view_in<'a>(&self, params: &'a [f64]) -> TableView<'a> {
        self.view_of(&self.flow_tables, params)
    }

    pub fn traj_view(&self) -> TableView<'_> {
        self.traj_view_in(&self.params)
    }

    pub fn flow_view(&self) -> TableView<'_> {
        self.flow_view_in(&self.params)
    }

    /// The spatial slice of the trajectory table, used as the location
    /// decoder's embedded matrix.
    pub fn traj_spatial_table(&self) -> &[f64] {
        &self.params[self.traj_tables.spatial.clone()]
    }

    /// Scatter a trajectory-token gradient into the flat gradient vector.
    pub fn scatter_traj_token_grad(
        &self,
        grads: &mut [f64],
        region: RegionId,
        hour: usize,
        day: usize,
        g: &[f64],
    ) {
        let ws = self.cfg.tokenizer.view_width();
        let t = &self.traj_tables;
        add_at(grads, t.spatial.start + region * ws, &g[..ws]);
        add_at(grads, t.hour.start + hour * ws, &g[ws..2 * ws]);
        add_at(grads, t.day.start + day * ws, &g[2 * ws..3 * ws]);
    }

    /// Scatter a flow-token gradient; `z` is the normalized window values
    /// that fed the value map.
    pub fn scatter_flow_token_grad(
        &self,
        grads: &mut [f64],
        region: RegionId,
        hour: usize,
        day: usize,
        z: &[f64],
        g: &[f64],
    ) {
        let ws = self.cfg.tokenizer.view_width();
        let t = &self.flow_tables;
        add_at(grads, t.spatial.start + region * ws, &g[..ws]);
        add_at(grads, t.hour.start + hour * ws, &g[ws..2 * ws]);
        add_at(grads, t.day.start + day * ws, &g[2 * ws..3 * ws]);
        let gv = &g[3 * ws..4 * ws];
        if let (Some(wr), Some(br)) = (&t.value_w, &t.value_b) {
            let in_dim = z.len();
            let base = wr.start;
            for (j, &gj) in gv.iter().enumerate() {
                if gj == 0.0 {
                    continue;
                }
                for (i, &zi) in z.iter().enumerate() {
                    grads[base + j * in_dim + i] += gj * zi;
                }
            }
            add_at(grads, br.start, gv);
        }
    }

    /// Root-mean-square of a token set; training logs this to watch for
    /// embedding-scale drift.
    pub fn token_rms(&self, tokens: &[Vec<f64>]) -> f64 {
        let mut sq = 0.0;
        let mut n = 0usize;
        for t in tokens {
            for v in t {
                sq += v * v;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            (sq / n as f64).sqrt()
        }
    }
}

fn add_at(grads: &mut [f64], start: usize, g: &[f64]) {
    for (dst, s) in grads[start..start + g.len()].iter_mut().zip(g) {
        *dst += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            tokenizer: TokenizerConfig {
                token_len_traj: 1,
                token_len_flow: 4,
                stride: 4,
                embed_width: 16,
                history_len: 8,
                horizon: 4,
            },
            denoiser: DenoiserConfig {
                token_width: 16,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                mlp_ratio: 2,
            },
            shared_backbone: true,
            use_traj: true,
            use_flow: true,
            n_channels: 2,
            diffusion_steps: 10,
            beta_start: 1e-4,
            beta_end: 0.05,
        }
    }

    fn grid() -> GridSpec {
        GridSpec::new(3, 3, 100.0, (0.0, 0.0), 3600).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(grid(), small_cfg(), 11).unwrap();
        let b = Model::init(grid(), small_cfg(), 11).unwrap();
        assert_eq!(a.params, b.params);
        let c = Model::init(grid(), small_cfg(), 12).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn layouts_do_not_overlap() {
        let m = Model::init(grid(), small_cfg(), 1).unwrap();
        let mut spans: Vec<(usize, usize)> = Vec::new();
        for t in [&m.traj_tables, &m.flow_tables] {
            spans.push((t.spatial.start, t.spatial.end));
            spans.push((t.hour.start, t.hour.end));
            spans.push((t.day.start, t.day.end));
            if let Some(r) = &t.value_w {
                spans.push((r.start, r.end));
            }
            if let Some(r) = &t.value_b {
                spans.push((r.start, r.end));
            }
        }
        spans.push((m.den.param_range().start, m.den.param_range().end));
        spans.sort();
        for w in spans.windows(2) {
            assert!(w[0].1 <= w[1].0, "overlapping layout {w:?}");
        }
        assert_eq!(spans.last().unwrap().1, m.params.len());
    }

    #[test]
    fn separate_backbones_grow_the_parameter_count() {
        let shared = Model::init(grid(), small_cfg(), 1).unwrap();
        let mut cfg = small_cfg();
        cfg.shared_backbone = false;
        let sep = Model::init(grid(), cfg, 1).unwrap();
        assert!(sep.n_params() > shared.n_params());
    }

    #[test]
    fn single_modality_forces_one_backbone() {
        let mut cfg = small_cfg();
        cfg.shared_backbone = false;
        cfg.use_flow = false;
        assert!(cfg.effective_shared());
        let m = Model::init(grid(), cfg, 1).unwrap();
        let shared = Model::init(grid(), small_cfg(), 1).unwrap();
        assert_eq!(m.n_params(), shared.n_params());
    }

    #[test]
    fn spatial_tables_share_the_eigenmap_component() {
        let m = Model::init(grid(), small_cfg(), 3).unwrap();
        let a = &m.params[m.traj_tables.spatial.clone()];
        let b = &m.params[m.flow_tables.spatial.clone()];
        // the deterministic eigenmap part is common; the jitter is not, and
        // stays bounded around it
        assert_ne!(a, b);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 8.0 * SPATIAL_INIT_JITTER);
        }
        // temporal tables are independent draws
        assert_ne!(
            m.params[m.traj_tables.hour.clone()],
            m.params[m.flow_tables.hour.clone()]
        );
    }
}
