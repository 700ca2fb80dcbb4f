//! Robustness sweeps: corrupt the dataset at a grid of levels, retrain and
//! re-evaluate every model at each level, and plot metric-vs-level curves.
//!
//! Noise sweeps perturb the whole dataset (models train and fit on the
//! corrupted data; metrics compare against the clean truth). Few-shot sweeps
//! shrink the training data: flow sweeps mask regions, trajectory sweeps
//! subsample users.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use unimob_core::domain::Modality;
use unimob_core::eval::{
    eval_ha_flow, eval_markov_trajectory, eval_unimob_flow, eval_unimob_trajectory, eval_var_flow,
    ChronoSplit,
};
use unimob_core::rng::combine_seed;
use unimob_core::synth::{make_fewshot_split, perturb_flow, perturb_trajectory, Corpus, CorruptionSpec};
use unimob_core::train::configure_variant;

use crate::bench::{BenchRow, ModelKind};
use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::svg::{line_chart, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Noise,
    Fewshot,
}

impl SweepKind {
    pub fn parse(s: &str) -> Result<SweepKind> {
        match s {
            "noise" => Ok(SweepKind::Noise),
            "fewshot" => Ok(SweepKind::Fewshot),
            other => Err(AppError::config(format!("unknown sweep kind `{other}`"))),
        }
    }

    pub fn levels(&self) -> &'static [f64] {
        match self {
            SweepKind::Noise => &[0.0, 0.1, 0.2, 0.3],
            SweepKind::Fewshot => &[0.25, 0.5, 0.75, 1.0],
        }
    }
}

pub fn parse_modality(s: &str) -> Result<Modality> {
    match s {
        "flow" => Ok(Modality::Flow),
        "trajectory" => Ok(Modality::Trajectory),
        other => Err(AppError::config(format!(
            "unknown modality `{other}` (expected flow or trajectory)"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub level: f64,
    pub inner: BenchRow,
}

/// The corrupted dataset for one sweep level.
pub fn corrupt_at_level(
    corpus: &Corpus,
    kind: SweepKind,
    modality: Modality,
    level: f64,
    seed: u64,
) -> Corpus {
    match (kind, modality) {
        (SweepKind::Noise, Modality::Flow) => {
            let mut out = corpus.clone();
            out.flow = perturb_flow(&corpus.flow, level, combine_seed(seed, &[1]));
            out
        }
        (SweepKind::Noise, _) => {
            let mut out = corpus.clone();
            out.trajectories =
                perturb_trajectory(&corpus.trajectories, level, &corpus.grid, combine_seed(seed, &[2]));
            out.flow = unimob_core::synth::derive_flows(&out.trajectories, &out.grid, out.n_steps);
            out
        }
        (SweepKind::Fewshot, Modality::Flow) => make_fewshot_split(
            corpus,
            &CorruptionSpec { region_missing_ratio: 1.0 - level, ..Default::default() },
            combine_seed(seed, &[3]),
        ),
        (SweepKind::Fewshot, _) => make_fewshot_split(
            corpus,
            &CorruptionSpec { traj_subsample_ratio: level, ..Default::default() },
            combine_seed(seed, &[4]),
        ),
    }
}

/// Run the sweep grid. Each (level, seed) cell gets its own corrupted
/// dataset; UniMob variants retrain per cell.
pub fn run_sweep(
    corpus: &Corpus,
    cfg: &RunConfig,
    kind: SweepKind,
    modality: Modality,
    models: &[ModelKind],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let split = ChronoSplit::standard(corpus.n_steps);
    let switches = cfg.switches()?;
    let horizon = cfg.tokenizer()?.horizon;
    let history = cfg.tokenizer()?.history_len;
    let levels = kind.levels();

    // corrupted corpora per (level, seed); clean truth for metrics
    struct Cell {
        level: f64,
        seed: u64,
        data: Corpus,
    }
    let cells: Vec<Cell> = levels
        .iter()
        .flat_map(|&level| {
            seeds.iter().map(move |&seed| (level, seed))
        })
        .map(|(level, seed)| Cell {
            level,
            seed,
            data: corrupt_at_level(corpus, kind, modality, level, combine_seed(seed, &[kind as u64])),
        })
        .collect();

    // train what's needed per cell, in parallel across cells
    let unimob_shared_flags: Vec<bool> = models
        .iter()
        .filter_map(|m| match m {
            ModelKind::UniMob(v) => {
                Some(configure_variant(*v).shared_backbone && switches.shared_transformer)
            }
            _ => None,
        })
        .collect();
    let mut flags: Vec<bool> = unimob_shared_flags;
    flags.sort_unstable();
    flags.dedup();

    let trained: Vec<std::collections::BTreeMap<bool, unimob_core::model::Model>> = cells
        .par_iter()
        .map(|cell| {
            let mut map = std::collections::BTreeMap::new();
            for &shared in &flags {
                let (model, _) =
                    crate::bench::train_model(&cell.data, &split, cfg, shared, &switches, cell.seed)?;
                map.insert(shared, model);
            }
            Ok(map)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (cell, models_map) in cells.iter().zip(&trained) {
        let mut ecfg = cfg.eval()?;
        ecfg.seed = combine_seed(ecfg.seed, &[cell.seed]);
        for m in models {
            let report = match m {
                ModelKind::UniMob(v) => {
                    let vc = configure_variant(*v);
                    let shared = vc.shared_backbone && switches.shared_transformer;
                    let model = &models_map[&shared];
                    match modality {
                        Modality::Flow => {
                            eval_unimob_flow(model, &cell.data, corpus, &split, &vc, &ecfg)
                                .map_err(|e| AppError::numeric(format!("{e}")))?
                                .report
                        }
                        _ => {
                            eval_unimob_trajectory(model, &cell.data, corpus, &split, &vc, &ecfg)
                                .map_err(|e| AppError::numeric(format!("{e}")))?
                                .report
                        }
                    }
                }
                ModelKind::Markov => {
                    eval_markov_trajectory(&cell.data, corpus, &split, horizon, history, &ecfg)
                        .map_err(|e| AppError::numeric(format!("{e}")))?
                        .report
                }
                ModelKind::Ha => eval_ha_flow(
                    &cell.data,
                    corpus,
                    &split,
                    horizon,
                    history,
                    cfg.ha_season()?,
                    &ecfg,
                )
                .map_err(|e| AppError::numeric(format!("{e}")))?
                .report,
                ModelKind::Var => eval_var_flow(
                    &cell.data,
                    corpus,
                    &split,
                    horizon,
                    history,
                    cfg.var_lag()?,
                    &ecfg,
                )
                .map_err(|e| AppError::numeric(format!("{e}")))?
                .report,
            };
            rows.push(SweepRow {
                level: cell.level,
                inner: BenchRow { model: m.name(), task: task_name(modality).into(), seed: cell.seed, report },
            });
        }
    }
    Ok(rows)
}

fn task_name(modality: Modality) -> &'static str {
    match modality {
        Modality::Flow => "flow",
        _ => "trajectory",
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("level,model,task,seed,mae,mape,rmse,acc1,acc3,acc5,n_samples\n");
    for r in rows {
        let acc = |k: usize| r.inner.report.acc_at_k.get(&k).copied().unwrap_or(f64::NAN);
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.level,
            r.inner.model,
            r.inner.task,
            r.inner.seed,
            r.inner.report.mae,
            r.inner.report.mape,
            r.inner.report.rmse,
            acc(1),
            acc(3),
            acc(5),
            r.inner.report.n_samples
        )
        .expect("string write");
    }
    out
}

/// Plot the primary metric (flow: MAE, trajectory: Acc@1) per model,
/// averaged over seeds.
pub fn sweep_plot(path: &Path, rows: &[SweepRow], modality: Modality, title: &str) -> Result<()> {
    let mut by_model: std::collections::BTreeMap<String, std::collections::BTreeMap<u64, (f64, usize)>> =
        Default::default();
    for r in rows {
        let v = match modality {
            Modality::Flow => r.inner.report.mae,
            _ => r.inner.report.acc_at_k.get(&1).copied().unwrap_or(f64::NAN),
        };
        let e = by_model
            .entry(r.inner.model.clone())
            .or_default()
            .entry((r.level * 1000.0) as u64)
            .or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let series: Vec<Series> = by_model
        .into_iter()
        .map(|(name, pts)| Series {
            name,
            points: pts
                .into_iter()
                .map(|(lvl, (sum, n))| (lvl as f64 / 1000.0, sum / n as f64))
                .collect(),
        })
        .collect();
    let y_label = match modality {
        Modality::Flow => "mae",
        _ => "acc@1",
    };
    line_chart(path, title, "level", y_label, &series)
}

pub fn write_sweep(
    out_dir: &Path,
    rows: &[SweepRow],
    modality: Modality,
    kind: SweepKind,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let csv = out_dir.join("sweep.csv");
    crate::manifest::write_atomic(&csv, sweep_csv(rows).as_bytes())?;
    let plot = out_dir.join("sweep.svg");
    let title = format!(
        "{} sweep, {} task",
        match kind {
            SweepKind::Noise => "noise",
            SweepKind::Fewshot => "few-shot",
        },
        task_name(modality)
    );
    sweep_plot(&plot, rows, modality, &title)?;
    Ok(vec![csv, plot])
}
