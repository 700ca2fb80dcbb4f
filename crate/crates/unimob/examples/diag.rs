//! Diagnostics: separates decode-path health from denoiser health.

use unimob::bench::train_model;
use unimob::config::RunConfig;
use unimob_core::diffusion::forward_noise;
use unimob_core::eval::*;
use unimob_core::predict::{decode_flow, LocationDecoder};
use unimob_core::rng::{normal_vec, stream, StreamId};
use unimob_core::synth::Corpus;
use unimob_core::tokenizer::{encode_flow, encode_trajectory, flow_window_targets, Role};
use unimob_core::train::AblationSwitches;

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
    ] {
        cfg.set(k, v).unwrap();
    }
    for s in std::env::args().skip(1) {
        let (k, v) = s.split_once('=').expect("k=v");
        cfg.set(k, v).unwrap();
    }
    let corpus = Corpus::generate(
        cfg.grid().unwrap(),
        &cfg.agent_params().unwrap(),
        cfg.n_steps().unwrap(),
        cfg.data_seed().unwrap(),
    );
    let split = ChronoSplit::standard(corpus.n_steps);
    let t0 = std::time::Instant::now();
    let (model, _) = train_model(&corpus, &split, &cfg, true, &AblationSwitches::default(), 1).unwrap();
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());

    let tok = &model.cfg.tokenizer;
    let (p, k) = (tok.history_len, tok.horizon);
    let ws = tok.view_width();

    // 1) decode CLEAN trajectory future tokens: accuracy of the decoder path
    let dec = LocationDecoder::from_embedding(
        model.traj_spatial_table(),
        corpus.grid.n_regions(),
        ws,
    )
    .unwrap();
    let anchors = test_anchors(&split, p, k, 6);
    let mut hit = 0;
    let mut n = 0;
    for u in (0..corpus.trajectories.len()).step_by(7) {
        let traj = &corpus.trajectories[u];
        for &a in &anchors {
            let tb = encode_trajectory(traj, a - p, a + k, a, &corpus.grid, &model.traj_view(), tok).unwrap();
            for i in 0..tb.n_tokens() {
                if tb.roles[i] != Role::Future {
                    continue;
                }
                let (_, id) = dec.decode(&tb.tokens[i]);
                if id == tb.region_ids[i] {
                    hit += 1;
                }
                n += 1;
            }
        }
    }
    println!("clean-token trajectory decode acc: {:.4} ({n} tokens)", hit as f64 / n as f64);

    // 2) decode CLEAN flow future tokens: head fit quality in real units
    let head = model.flow_head.as_ref().unwrap();
    let mut err = 0.0;
    let mut nf = 0;
    for r in 0..corpus.grid.n_regions() {
        for &a in &anchors {
            let fb = encode_flow(&corpus.flow, r, a - p, a + k, a, &corpus.grid, &model.flow_view(), tok, &model.norm).unwrap();
            for i in 0..fb.n_tokens() {
                if fb.roles[i] != Role::Future {
                    continue;
                }
                let vals = decode_flow(&fb.tokens[i], head, &model.norm).unwrap();
                let start = fb.steps[i];
                for c in 0..2 {
                    for j in 0..tok.token_len_flow {
                        err += (vals[c * tok.token_len_flow + j] - corpus.flow.get(c, start + j, r)).abs();
                        nf += 1;
                    }
                }
            }
        }
    }
    println!("clean-token flow decode mae: {:.4} ({nf} cells)", err / nf as f64);
    let wmax = head.weight.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    println!("flow head max |w|: {wmax:.3}");

    // 3) per-slice noise-prediction error at several timesteps on test pairs
    let mut rng = stream(99, StreamId::Eval);
    for t in [3usize, 10, 25, 45] {
        let mut slice_err = [0.0f64; 4];
        let mut cnt = 0.0;
        for u in (0..corpus.trajectories.len()).step_by(23) {
            let traj = &corpus.trajectories[u];
            let a = anchors[0];
            let tb = encode_trajectory(traj, a - p, a + k, a, &corpus.grid, &model.traj_view(), tok).unwrap();
            let r = traj.location_at(a - 1).unwrap();
            let fb = encode_flow(&corpus.flow, r, a - p, a + k, a, &corpus.grid, &model.flow_view(), tok, &model.norm).unwrap();
            // noise futures at t, keep histories clean
            use unimob_core::denoiser::SeqToken;
            let mut seq = Vec::new();
            let mut eps_store = Vec::new();
            for (b, modal) in [(&tb, unimob_core::tokenizer::TokenModality::Trajectory), (&fb, unimob_core::tokenizer::TokenModality::Flow)] {
                for i in 0..b.n_tokens() {
                    let is_fut = b.roles[i] == Role::Future;
                    let (x, dt) = if is_fut {
                        let eps = normal_vec(&mut rng, tok.embed_width);
                        let x = forward_noise(&b.tokens[i], t, &eps, &model.sched).unwrap();
                        eps_store.push(Some(eps));
                        (x, t)
                    } else {
                        eps_store.push(None);
                        (b.tokens[i].clone(), 0)
                    };
                    seq.push(SeqToken { x, modality: modal, role: b.roles[i], pos: i, diff_t: dt });
                }
            }
            let outs = model.den.predict_noise(&model.params, &seq).unwrap();
            for (i, eps) in eps_store.iter().enumerate() {
                let Some(eps) = eps else { continue };
                if seq[i].modality != unimob_core::tokenizer::TokenModality::Trajectory {
                    continue;
                }
                for s in 0..4 {
                    for d in 0..ws.min(outs[i].len() / 4) {
                        let diff = outs[i][s * ws + d] - eps[s * ws + d];
                        slice_err[s] += diff * diff;
                    }
                }
                cnt += ws as f64;
            }
        }
        println!(
            "traj eps mse at t={t}: S {:.3} H {:.3} D {:.3} pad {:.3}",
            slice_err[0] / cnt,
            slice_err[1] / cnt,
            slice_err[2] / cnt,
            slice_err[3] / cnt
        );
    }
}
