//! Benchmark harness: trains and evaluates each requested model on one
//! chronological split and emits a results table plus a text summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use unimob_core::eval::{
    eval_ha_flow, eval_markov_trajectory, eval_unimob_flow, eval_unimob_trajectory, eval_var_flow,
    ChronoSplit, EvalConfig,
};
use unimob_core::metrics::MetricReport;
use unimob_core::model::Model;
use unimob_core::rng::combine_seed;
use unimob_core::synth::Corpus;
use unimob_core::train::{
    configure_variant, train, AblationSwitches, TrainReport, Variant, VariantConfig,
};

use crate::config::RunConfig;
use crate::error::{AppError, Result};

/// One entrant of the benchmark table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    UniMob(Variant),
    Ha,
    Var,
    Markov,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "unimob-v1" => Ok(ModelKind::UniMob(Variant::V1)),
            "unimob-v2" => Ok(ModelKind::UniMob(Variant::V2)),
            "unimob-v3" => Ok(ModelKind::UniMob(Variant::V3)),
            "unimob-v4" => Ok(ModelKind::UniMob(Variant::V4)),
            "ha" => Ok(ModelKind::Ha),
            "var" => Ok(ModelKind::Var),
            "markov" => Ok(ModelKind::Markov),
            other => Err(AppError::config(format!(
                "unknown model `{other}` (expected unimob-v1..v4, ha, var, markov)"
            ))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ModelKind::UniMob(v) => format!("unimob-{}", v.name()),
            ModelKind::Ha => "ha".into(),
            ModelKind::Var => "var".into(),
            ModelKind::Markov => "markov".into(),
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<ModelKind>> {
        s.split(',').map(|m| ModelKind::parse(m.trim())).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub model: String,
    pub task: String,
    pub seed: u64,
    pub report: MetricReport,
}

/// Train one model configuration on the corpus (the reusable work unit for
/// benchmarks, sweeps, and the acceptance experiments).
pub fn train_model(
    corpus: &Corpus,
    split: &ChronoSplit,
    cfg: &RunConfig,
    shared_backbone: bool,
    switches: &AblationSwitches,
    seed: u64,
) -> Result<(Model, TrainReport)> {
    let model_cfg = cfg.model()?;
    let mut tcfg = cfg.train()?;
    tcfg.seed = seed;
    let variant = VariantConfig { shared_backbone, joint_inference: true };
    train(
        corpus,
        split,
        model_cfg,
        &variant,
        switches,
        &cfg.weights()?,
        &tcfg,
        &cfg.mining()?,
    )
    .map_err(|e| AppError::numeric(format!("training failed: {e}")))
}

fn eval_config_for_seed(cfg: &RunConfig, seed: u64) -> Result<EvalConfig> {
    let mut ecfg = cfg.eval()?;
    ecfg.seed = combine_seed(ecfg.seed, &[seed]);
    Ok(ecfg)
}

/// Train + evaluate the requested models over the seeds.
///
/// UniMob variants sharing a backbone configuration reuse one training run
/// per seed; distinct training runs fan out across worker threads with
/// seed-keyed deterministic collection.
pub fn run_benchmark(
    corpus: &Corpus,
    cfg: &RunConfig,
    models: &[ModelKind],
    seeds: &[u64],
) -> Result<Vec<BenchRow>> {
    let split = ChronoSplit::standard(corpus.n_steps);
    let switches = cfg.switches()?;

    // distinct backbone configurations needed
    let mut train_specs: Vec<(u64, bool)> = Vec::new();
    for &seed in seeds {
        for m in models {
            if let ModelKind::UniMob(v) = m {
                let shared = configure_variant(*v).shared_backbone && switches.shared_transformer;
                if !train_specs.contains(&(seed, shared)) {
                    train_specs.push((seed, shared));
                }
            }
        }
    }
    let trained: BTreeMap<(u64, bool), Model> = train_specs
        .par_iter()
        .map(|&(seed, shared)| {
            train_model(corpus, &split, cfg, shared, &switches, seed)
                .map(|(model, _)| ((seed, shared), model))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();

    let horizon = cfg.tokenizer()?.horizon;
    let history = cfg.tokenizer()?.history_len;
    let mut rows = Vec::new();
    for &seed in seeds {
        let ecfg = eval_config_for_seed(cfg, seed)?;
        for m in models {
            match m {
                ModelKind::UniMob(v) => {
                    let vc = configure_variant(*v);
                    let shared = vc.shared_backbone && switches.shared_transformer;
                    let model = &trained[&(seed, shared)];
                    if model.cfg.use_traj {
                        let out =
                            eval_unimob_trajectory(model, corpus, corpus, &split, &vc, &ecfg)
                                .map_err(|e| AppError::numeric(format!("{e}")))?;
                        rows.push(BenchRow {
                            model: m.name(),
                            task: "trajectory".into(),
                            seed,
                            report: out.report,
                        });
                    }
                    if model.cfg.use_flow {
                        let out = eval_unimob_flow(model, corpus, corpus, &split, &vc, &ecfg)
                            .map_err(|e| AppError::numeric(format!("{e}")))?;
                        rows.push(BenchRow {
                            model: m.name(),
                            task: "flow".into(),
                            seed,
                            report: out.report,
                        });
                    }
                }
                ModelKind::Markov => {
                    let out = eval_markov_trajectory(corpus, corpus, &split, horizon, history, &ecfg)
                        .map_err(|e| AppError::numeric(format!("{e}")))?;
                    rows.push(BenchRow {
                        model: m.name(),
                        task: "trajectory".into(),
                        seed,
                        report: out.report,
                    });
                }
                ModelKind::Ha => {
                    let out = eval_ha_flow(
                        corpus,
                        corpus,
                        &split,
                        horizon,
                        history,
                        cfg.ha_season()?,
                        &ecfg,
                    )
                    .map_err(|e| AppError::numeric(format!("{e}")))?;
                    rows.push(BenchRow { model: m.name(), task: "flow".into(), seed, report: out.report });
                }
                ModelKind::Var => {
                    let out = eval_var_flow(
                        corpus,
                        corpus,
                        &split,
                        horizon,
                        history,
                        cfg.var_lag()?,
                        &ecfg,
                    )
                    .map_err(|e| AppError::numeric(format!("{e}")))?;
                    rows.push(BenchRow { model: m.name(), task: "flow".into(), seed, report: out.report });
                }
            }
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("model,task,seed,mae,mape,rmse,acc1,acc3,acc5,n_samples\n");
    for r in rows {
        let acc = |k: usize| r.report.acc_at_k.get(&k).copied().unwrap_or(f64::NAN);
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.task,
            r.seed,
            r.report.mae,
            r.report.mape,
            r.report.rmse,
            acc(1),
            acc(3),
            acc(5),
            r.report.n_samples
        )
        .expect("string write");
    }
    out
}

/// Aggregate rows as mean and standard deviation over seeds.
pub fn summarize(rows: &[BenchRow]) -> String {
    let mut groups: BTreeMap<(String, String), Vec<&BenchRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.model.clone(), r.task.clone())).or_default().push(r);
    }
    let mut out = String::new();
    writeln!(
        out,
        "{:<12} {:<11} {:>18} {:>18} {:>18} {:>14} {:>14} {:>14}",
        "model", "task", "mae", "mape%", "rmse", "acc@1", "acc@3", "acc@5"
    )
    .unwrap();
    let stat = |vals: &[f64]| -> String {
        if vals.iter().any(|v| v.is_nan()) || vals.is_empty() {
            return "-".into();
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        format!("{:.4}±{:.4}", mean, var.sqrt())
    };
    for ((model, task), rs) in groups {
        let col = |f: &dyn Fn(&BenchRow) -> f64| -> Vec<f64> { rs.iter().map(|r| f(r)).collect() };
        let acc = |k: usize| {
            let vals: Vec<f64> = rs
                .iter()
                .map(|r| r.report.acc_at_k.get(&k).copied().unwrap_or(f64::NAN))
                .collect();
            stat(&vals)
        };
        let is_flow = task == "flow";
        writeln!(
            out,
            "{:<12} {:<11} {:>18} {:>18} {:>18} {:>14} {:>14} {:>14}",
            model,
            task,
            if is_flow { stat(&col(&|r| r.report.mae)) } else { "-".into() },
            if is_flow { stat(&col(&|r| r.report.mape)) } else { "-".into() },
            if is_flow { stat(&col(&|r| r.report.rmse)) } else { "-".into() },
            if is_flow { "-".into() } else { acc(1) },
            if is_flow { "-".into() } else { acc(3) },
            if is_flow { "-".into() } else { acc(5) },
        )
        .unwrap();
    }
    out
}

pub fn write_results(out_dir: &Path, rows: &[BenchRow]) -> Result<(Vec<std::path::PathBuf>, ())> {
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("results.csv");
    crate::manifest::write_atomic(&csv_path, rows_to_csv(rows).as_bytes())?;
    let summary_path = out_dir.join("summary.txt");
    crate::manifest::write_atomic(&summary_path, summarize(rows).as_bytes())?;
    Ok((vec![csv_path, summary_path], ()))
}
