//! Command-line entry point: data generation, training, prediction,
//! evaluation, and robustness sweeps over one config/manifest discipline.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use unimob_core::domain::Modality;
use unimob_core::eval::ChronoSplit;
use unimob_core::synth::Corpus;
use unimob_core::train::configure_variant;

use unimob::bench::{self, ModelKind};
use unimob::checkpoint::Checkpoint;
use unimob::config::RunConfig;
use unimob::csvio;
use unimob::error::{AppError, Result};
use unimob::manifest::ManifestBuilder;
use unimob::sweep::{self, SweepKind};

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  usage error (unknown command or bad flags)
  3  ConfigError (bad or inconsistent configuration, missing modality)
  4  DataError (malformed or missing data files)
  5  IoError
  6  NumericError (training or evaluation failed numerically)

Environment:
  UNIMOB_DATA_DIR  default data directory when --data/--out are omitted";

#[derive(Parser)]
#[command(name = "unimob", version, about = "Joint trajectory and crowd-flow prediction workbench", after_long_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a coupled synthetic corpus (trajectory + flow CSVs).
    Generate {
        /// key=value config file; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Shorthand for --set data.seed=N.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config overrides, e.g. --set loss.alpha=0.7 (last write wins).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Train a model on a generated corpus and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory with trajectories.csv / flow.csv.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Predict future steps with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Prediction anchor step; defaults to every test anchor.
        #[arg(long)]
        anchor: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Train/evaluate models on identical chronological splits.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluate this checkpoint instead of retraining UniMob entries.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma list of unimob-v1..v4, ha, var, markov.
        #[arg(long, default_value = "unimob-v4,markov,ha")]
        models: String,
        /// Comma list of training seeds.
        #[arg(long, default_value = "1")]
        seeds: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Noise / few-shot robustness grids with plots.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// noise (levels 0,0.1,0.2,0.3) or fewshot (fractions 0.25..1.0).
        #[arg(long)]
        kind: String,
        /// flow or trajectory.
        #[arg(long)]
        modality: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "unimob-v2,ha")]
        models: String,
        #[arg(long, default_value = "1")]
        seeds: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            std::process::exit(e.exit_code());
        }
    }
}

fn data_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("UNIMOB_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn load_config(path: &Option<PathBuf>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(sets)?;
    Ok(cfg)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|_| AppError::config(format!("bad seed list `{s}`")))
        })
        .collect()
}

/// Load a corpus from `dir`, honoring the modalities the config enables.
fn load_corpus(dir: &Path, cfg: &RunConfig) -> Result<Corpus> {
    let grid = cfg.grid()?;
    let n_steps = cfg.n_steps()?;
    let switches = cfg.switches()?;
    let traj_path = dir.join("trajectories.csv");
    let flow_path = dir.join("flow.csv");
    let trajectories = if traj_path.exists() {
        csvio::read_trajectories(&traj_path, &grid)?
    } else if switches.use_traj_data {
        return Err(AppError::config(format!(
            "config enables trajectory data but {} does not exist",
            traj_path.display()
        )));
    } else {
        Vec::new()
    };
    let (flow, missing_regions) = if flow_path.exists() {
        csvio::read_flow(&flow_path, &grid, n_steps)?
    } else if switches.use_flow_data {
        return Err(AppError::config(format!(
            "config enables flow data but {} does not exist",
            flow_path.display()
        )));
    } else {
        (
            unimob_core::domain::FlowField::zeros(2, n_steps, grid.n_regions()),
            Default::default(),
        )
    };
    Ok(Corpus {
        grid,
        trajectories,
        flow,
        missing_regions,
        n_steps,
        homes: Vec::new(),
        works: Vec::new(),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate { config, seed, out, sets } => {
            let mut cfg = load_config(&config, &sets)?;
            if let Some(s) = seed {
                cfg.set("data.seed", &s.to_string())?;
            }
            let out = out.unwrap_or_else(|| data_root(None));
            cmd_generate(&cfg, &out)
        }
        Cmd::Train { config, data, out, sets } => {
            let cfg = load_config(&config, &sets)?;
            let data = data_root(data);
            let out = out.unwrap_or_else(|| PathBuf::from("out"));
            cmd_train(&cfg, &data, &out)
        }
        Cmd::Predict { checkpoint, data, out, anchor, sets } => {
            let data = data_root(data);
            let out = out.unwrap_or_else(|| PathBuf::from("out"));
            cmd_predict(&checkpoint, &data, &out, anchor, &sets)
        }
        Cmd::Evaluate { config, checkpoint, data, out, models, seeds, sets } => {
            let cfg = load_config(&config, &sets)?;
            let data = data_root(data);
            let out = out.unwrap_or_else(|| PathBuf::from("out"));
            let models = ModelKind::parse_list(&models)?;
            let seeds = parse_seeds(&seeds)?;
            cmd_evaluate(&cfg, checkpoint.as_deref(), &data, &out, &models, &seeds)
        }
        Cmd::Sweep { config, kind, modality, data, out, models, seeds, sets } => {
            let cfg = load_config(&config, &sets)?;
            let data = data_root(data);
            let out = out.unwrap_or_else(|| PathBuf::from("out"));
            let kind = SweepKind::parse(&kind)?;
            let modality = sweep::parse_modality(&modality)?;
            let models = ModelKind::parse_list(&models)?;
            let seeds = parse_seeds(&seeds)?;
            cmd_sweep(&cfg, &data, &out, kind, modality, &models, &seeds)
        }
    }
}

fn argv() -> Vec<String> {
    std::env::args().collect()
}

fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let seed = cfg.data_seed()?;
    let mut manifest = ManifestBuilder::new("generate", argv(), cfg.to_lines(), seed);
    let grid = cfg.grid()?;
    let n_steps = cfg.n_steps()?;
    let params = cfg.agent_params()?;
    let mut corpus = Corpus::generate(grid, &params, n_steps, seed);

    // optional corruption of the emitted corpus
    let corrupt = cfg.corruption()?;
    if corrupt.traj_noise_ratio > 0.0 {
        corpus.trajectories = unimob_core::synth::perturb_trajectory(
            &corpus.trajectories,
            corrupt.traj_noise_ratio,
            &corpus.grid,
            seed,
        );
    }
    if corrupt.flow_noise_level > 0.0 {
        corpus.flow = unimob_core::synth::perturb_flow(&corpus.flow, corrupt.flow_noise_level, seed);
    }
    if corrupt.region_missing_ratio > 0.0 || corrupt.traj_subsample_ratio < 1.0 {
        corpus = unimob_core::synth::make_fewshot_split(&corpus, &corrupt, seed);
    }

    let traj_path = out.join("trajectories.csv");
    csvio::write_trajectories(&traj_path, &corpus.trajectories)?;
    manifest.record_output(&traj_path);
    let flow_path = out.join("flow.csv");
    csvio::write_flow(&flow_path, &corpus.flow, &corpus.missing_regions)?;
    manifest.record_output(&flow_path);
    let mpath = manifest.finish(out)?;
    println!(
        "generated {} users / {} steps -> {}, {} (manifest {})",
        corpus.trajectories.len(),
        corpus.n_steps,
        traj_path.display(),
        flow_path.display(),
        mpath.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let tcfg = cfg.train()?;
    let mut manifest = ManifestBuilder::new("train", argv(), cfg.to_lines(), tcfg.seed);
    for f in ["trajectories.csv", "flow.csv"] {
        let p = data.join(f);
        if p.exists() {
            manifest.record_input(&p)?;
        }
    }
    let corpus = load_corpus(data, cfg)?;
    let split = ChronoSplit::standard(corpus.n_steps);
    let switches = cfg.switches()?;
    let variant = cfg.variant_config()?;
    let (model, report) = unimob_core::train::train(
        &corpus,
        &split,
        cfg.model()?,
        &variant,
        &switches,
        &cfg.weights()?,
        &tcfg,
        &cfg.mining()?,
    )
    .map_err(|e| match e {
        unimob_core::train::TrainError::DataModalityMissing(_)
        | unimob_core::train::TrainError::BadConfig(_)
        | unimob_core::train::TrainError::UnknownVariant(_) => {
            AppError::config(format!("{e}"))
        }
        other => AppError::numeric(format!("{other}")),
    })?;

    let ck_path = out.join("checkpoint.json");
    Checkpoint::from_model(&model, cfg.to_lines()).save(&ck_path)?;
    manifest.record_output(&ck_path);

    let losses_path = out.join("losses.csv");
    let mut losses = String::from("step,pred,i2c,c2i,total\n");
    for i in 0..report.total_losses.len() {
        use std::fmt::Write as _;
        writeln!(
            losses,
            "{},{},{},{},{}",
            i, report.pred_losses[i], report.i2c_losses[i], report.c2i_losses[i], report.total_losses[i]
        )
        .expect("string write");
    }
    unimob::manifest::write_atomic(&losses_path, losses.as_bytes())?;
    manifest.record_output(&losses_path);
    let mpath = manifest.finish(out)?;
    println!(
        "trained {} steps ({} params) -> {} (manifest {})",
        report.total_losses.len(),
        model.n_params(),
        ck_path.display(),
        mpath.display()
    );
    Ok(())
}

fn cmd_predict(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    anchor: Option<usize>,
    sets: &[String],
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let ck = Checkpoint::load(checkpoint)?;
    // checkpoint carries the producing run's config; overrides still apply
    let mut cfg = RunConfig::default();
    for line in &ck.resolved_config {
        if let Some((k, v)) = line.split_once('=') {
            cfg.set(k, v)?;
        }
    }
    cfg.apply_overrides(sets)?;
    let model = ck.into_model()?;
    let ecfg = cfg.eval()?;
    let mut manifest = ManifestBuilder::new("predict", argv(), cfg.to_lines(), ecfg.seed);
    manifest.record_input(checkpoint)?;
    for f in ["trajectories.csv", "flow.csv"] {
        let p = data.join(f);
        if p.exists() {
            manifest.record_input(&p)?;
        }
    }
    let corpus = load_corpus(data, &cfg)?;
    let split = ChronoSplit::standard(corpus.n_steps);
    let variant = cfg.variant_config()?;
    let mut ecfg = ecfg;
    if let Some(a) = anchor {
        // a single anchor: narrow the test span to it
        let p = model.cfg.tokenizer.history_len;
        let k = model.cfg.tokenizer.horizon;
        if a < p || a + k > corpus.n_steps {
            return Err(AppError::config(format!(
                "anchor {a} incompatible with history {p} / horizon {k} / {} steps",
                corpus.n_steps
            )));
        }
        ecfg.anchor_stride = corpus.n_steps; // one anchor
    }
    let split_for_anchor = match anchor {
        Some(a) => ChronoSplit { train_end: split.train_end, val_end: a, n_steps: corpus.n_steps },
        None => split,
    };

    let mut outputs = Vec::new();
    if model.cfg.use_traj && !corpus.trajectories.is_empty() {
        let rows = unimob_core::eval::eval_unimob_trajectory(
            &model,
            &corpus,
            &corpus,
            &split_for_anchor,
            &variant,
            &ecfg,
        )
        .map_err(|e| AppError::numeric(format!("{e}")))?
        .rows;
        let mut text = String::from("user_id,step,location_id,prob_top1\n");
        for r in rows {
            use std::fmt::Write as _;
            writeln!(text, "{},{},{},{}", r.user_id, r.step, r.location, r.prob_top1)
                .expect("string write");
        }
        let p = out.join("predictions_trajectory.csv");
        unimob::manifest::write_atomic(&p, text.as_bytes())?;
        outputs.push(p);
    }
    if model.cfg.use_flow {
        let rows = unimob_core::eval::eval_unimob_flow(
            &model,
            &corpus,
            &corpus,
            &split_for_anchor,
            &variant,
            &ecfg,
        )
        .map_err(|e| AppError::numeric(format!("{e}")))?
        .rows;
        let mut text = String::from("region_id,step,channel,value\n");
        for r in rows {
            use std::fmt::Write as _;
            writeln!(text, "{},{},{},{}", r.region, r.step, r.channel, r.value).expect("string write");
        }
        let p = out.join("predictions_flow.csv");
        unimob::manifest::write_atomic(&p, text.as_bytes())?;
        outputs.push(p);
    }
    for p in &outputs {
        manifest.record_output(p);
    }
    let mpath = manifest.finish(out)?;
    println!("predictions written to {} (manifest {})", out.display(), mpath.display());
    Ok(())
}

fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    data: &Path,
    out: &Path,
    models: &[ModelKind],
    seeds: &[u64],
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest =
        ManifestBuilder::new("evaluate", argv(), cfg.to_lines(), seeds.first().copied().unwrap_or(0));
    for f in ["trajectories.csv", "flow.csv"] {
        let p = data.join(f);
        if p.exists() {
            manifest.record_input(&p)?;
        }
    }
    let corpus = load_corpus(data, cfg)?;
    let rows = match checkpoint {
        None => bench::run_benchmark(&corpus, cfg, models, seeds)?,
        Some(ck_path) => {
            manifest.record_input(ck_path)?;
            let model = Checkpoint::load(ck_path)?.into_model()?;
            let split = ChronoSplit::standard(corpus.n_steps);
            let mut rows = Vec::new();
            for m in models {
                let seed = seeds.first().copied().unwrap_or(1);
                let mut ecfg = cfg.eval()?;
                ecfg.seed = unimob_core::rng::combine_seed(ecfg.seed, &[seed]);
                match m {
                    ModelKind::UniMob(v) => {
                        let vc = configure_variant(*v);
                        if model.cfg.use_traj {
                            let r = unimob_core::eval::eval_unimob_trajectory(
                                &model, &corpus, &corpus, &split, &vc, &ecfg,
                            )
                            .map_err(|e| AppError::numeric(format!("{e}")))?;
                            rows.push(bench::BenchRow {
                                model: m.name(),
                                task: "trajectory".into(),
                                seed,
                                report: r.report,
                            });
                        }
                        if model.cfg.use_flow {
                            let r = unimob_core::eval::eval_unimob_flow(
                                &model, &corpus, &corpus, &split, &vc, &ecfg,
                            )
                            .map_err(|e| AppError::numeric(format!("{e}")))?;
                            rows.push(bench::BenchRow {
                                model: m.name(),
                                task: "flow".into(),
                                seed,
                                report: r.report,
                            });
                        }
                    }
                    other => {
                        let sub = bench::run_benchmark(&corpus, cfg, &[*other], &[seed])?;
                        rows.extend(sub);
                    }
                }
            }
            rows
        }
    };
    let (outputs, ()) = bench::write_results(out, &rows)?;
    for p in &outputs {
        manifest.record_output(p);
    }
    let mpath = manifest.finish(out)?;
    println!("{}", bench::summarize(&rows));
    println!("results in {} (manifest {})", out.display(), mpath.display());
    Ok(())
}

fn cmd_sweep(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    kind: SweepKind,
    modality: Modality,
    models: &[ModelKind],
    seeds: &[u64],
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest =
        ManifestBuilder::new("sweep", argv(), cfg.to_lines(), seeds.first().copied().unwrap_or(0));
    for f in ["trajectories.csv", "flow.csv"] {
        let p = data.join(f);
        if p.exists() {
            manifest.record_input(&p)?;
        }
    }
    let corpus = load_corpus(data, cfg)?;
    let rows = sweep::run_sweep(&corpus, cfg, kind, modality, models, seeds)?;
    let outputs = sweep::write_sweep(out, &rows, modality, kind)?;
    for p in &outputs {
        manifest.record_output(p);
    }
    let mpath = manifest.finish(out)?;
    println!(
        "sweep over {:?} levels done; results in {} (manifest {})",
        kind.levels(),
        out.display(),
        mpath.display()
    );
    Ok(())
}
