//! Desk-scale pilot: times training/evaluation on the standard corpus and
//! prints directional comparisons. Development tool, not part of the suite.

use std::time::Instant;

use unimob::bench::train_model;
use unimob::config::RunConfig;
use unimob_core::eval::*;
use unimob_core::synth::Corpus;
use unimob_core::train::{configure_variant, AblationSwitches, Variant};

fn main() {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("task.history", "12"),
        ("task.horizon", "6"),
        ("token.flow_len", "6"),
        ("token.stride", "6"),
        ("token.width", "64"),
        ("model.d_model", "64"),
        ("model.layers", "2"),
        ("model.heads", "4"),
        ("diffusion.t_steps", "50"),
        ("diffusion.beta_end", "0.25"),
        ("train.steps", "500"),
        ("train.batch", "32"),
        ("eval.users", "60"),
        ("eval.anchor_stride", "12"),
        ("eval.draws", "1"),
        ("baseline.ha_season", "24"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let args: Vec<String> = std::env::args().skip(1).collect();
    for s in &args {
        let (k, v) = s.split_once('=').expect("k=v");
        cfg.set(k, v).unwrap();
    }

    let t = Instant::now();
    let corpus = Corpus::generate(
        cfg.grid().unwrap(),
        &cfg.agent_params().unwrap(),
        cfg.n_steps().unwrap(),
        cfg.data_seed().unwrap(),
    );
    println!("corpus: {:.1}s, {} moves", t.elapsed().as_secs_f64(), corpus.flow.values.iter().sum::<f64>());
    let split = ChronoSplit::standard(corpus.n_steps);
    let switches = AblationSwitches::default();

    let t = Instant::now();
    let (model, report) = train_model(&corpus, &split, &cfg, true, &switches, 1).unwrap();
    let train_time = t.elapsed().as_secs_f64();
    let n = report.pred_losses.len();
    let first10: f64 = report.pred_losses[..10].iter().sum::<f64>() / 10.0;
    let at200: f64 = if n >= 200 {
        report.pred_losses[190..200].iter().sum::<f64>() / 10.0
    } else {
        f64::NAN
    };
    let last10: f64 = report.pred_losses[n - 10..].iter().sum::<f64>() / 10.0;
    println!(
        "train(shared): {train_time:.1}s for {n} steps, pred loss {first10:.4} -> {at200:.4} (step200) -> {last10:.4}",
    );
    println!("  i2c last {:.4}, c2i last {:.4}", report.i2c_losses[n-1], report.c2i_losses[n-1]);
    println!("  token rms trace: {:?}", report.token_rms_trace);
    println!("  i2c cells {}, c2i batches {}", report.i2c_cells_read, report.c2i_batches_read);

    let ecfg = EvalConfig { n_users: 60, anchor_stride: 12, n_draws: 1, seed: 1 };

    let t = Instant::now();
    let v1 = configure_variant(Variant::V1);
    let tr1 = eval_unimob_trajectory(&model, &corpus, &corpus, &split, &v1, &ecfg).unwrap();
    println!(
        "eval v1 traj: {:.1}s acc@1 {:.4} acc@3 {:.4} acc@5 {:.4} ({} pts)",
        t.elapsed().as_secs_f64(),
        tr1.report.acc_at_k[&1],
        tr1.report.acc_at_k[&3],
        tr1.report.acc_at_k[&5],
        tr1.report.n_samples
    );
    let t = Instant::now();
    let fl1 = eval_unimob_flow(&model, &corpus, &corpus, &split, &v1, &ecfg).unwrap();
    println!(
        "eval v1 flow: {:.1}s mae {:.4} mape {:.2} rmse {:.4}",
        t.elapsed().as_secs_f64(),
        fl1.report.mae,
        fl1.report.mape,
        fl1.report.rmse
    );
    let v2 = configure_variant(Variant::V2);
    let t = Instant::now();
    let tr2 = eval_unimob_trajectory(&model, &corpus, &corpus, &split, &v2, &ecfg).unwrap();
    println!(
        "eval v2 traj: {:.1}s acc@1 {:.4} acc@5 {:.4}",
        t.elapsed().as_secs_f64(),
        tr2.report.acc_at_k[&1],
        tr2.report.acc_at_k[&5]
    );
    let t = Instant::now();
    let fl2 = eval_unimob_flow(&model, &corpus, &corpus, &split, &v2, &ecfg).unwrap();
    println!(
        "eval v2 flow: {:.1}s mae {:.4} mape {:.2}",
        t.elapsed().as_secs_f64(),
        fl2.report.mae,
        fl2.report.mape
    );

    let tok = cfg.tokenizer().unwrap();
    let mk = eval_markov_trajectory(&corpus, &corpus, &split, tok.horizon, tok.history_len, &ecfg).unwrap();
    println!(
        "markov: acc@1 {:.4} acc@3 {:.4} acc@5 {:.4}",
        mk.report.acc_at_k[&1], mk.report.acc_at_k[&3], mk.report.acc_at_k[&5]
    );
    for season in [24usize, 168] {
        let ha = eval_ha_flow(&corpus, &corpus, &split, tok.horizon, tok.history_len, season, &ecfg).unwrap();
        println!("ha(season {season}): mae {:.4} mape {:.2} rmse {:.4}", ha.report.mae, ha.report.mape, ha.report.rmse);
    }
    let var = eval_var_flow(&corpus, &corpus, &split, tok.horizon, tok.history_len, 24, &ecfg).unwrap();
    println!("var(lag 24): mae {:.4} mape {:.2} rmse {:.4}", var.report.mae, var.report.mape, var.report.rmse);
}
