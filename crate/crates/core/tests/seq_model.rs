mod common;

use common::{random_batch, tiny_config, tiny_model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uwdt_core::dataset::Batch;
use uwdt_core::nn::{weighted_nll, Mode, SeqInput, SeqModel};
use uwdt_core::Error;

fn param<'a>(m: &'a SeqModel<f64>, name: &str) -> &'a [f64] {
    let s = m.arch.params.find(name).unwrap_or_else(|| panic!("missing {name}"));
    &m.params[s.offset..s.offset + s.len()]
}

fn matvec(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    (0..b.len())
        .map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
        .collect()
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(v, g)| v * r * g).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Token-by-token decoder written directly from the architecture description.
fn reference_logits(m: &SeqModel<f64>, emb: &[f64], seq: &SeqInput) -> Vec<Vec<f64>> {
    let cfg = m.cfg();
    let d = cfg.d_model;
    let e = cfg.encoder.embed;
    let mut tokens: Vec<Vec<f64>> = vec![];
    for t in 0..seq.prev_actions.len() {
        let ts = seq.timesteps[t] as usize;
        let time = &param(m, "emb.timestep")[ts * d..(ts + 1) * d];
        let add = |v: Vec<f64>| v.iter().zip(time).map(|(a, b)| a + b).collect::<Vec<f64>>();
        if cfg.mode == Mode::ReturnConditioned {
            let r = seq.returns[t] as f64 / cfg.return_scale;
            tokens.push(add(matvec(param(m, "emb.return.weight"), param(m, "emb.return.bias"), &[r])));
        }
        tokens.push(add(matvec(
            param(m, "emb.state.weight"),
            param(m, "emb.state.bias"),
            &emb[t * e..(t + 1) * e],
        )));
        let a = seq.prev_actions[t] as usize;
        tokens.push(add(param(m, "emb.action")[a * d..(a + 1) * d].to_vec()));
    }
    let mut h: Vec<Vec<f64>> = tokens.iter().map(|x| rms(x, param(m, "emb.norm"))).collect();
    for l in 0..cfg.layers {
        let p = |s: &str| param(m, &format!("blocks.{l}.{s}"));
        let u: Vec<Vec<f64>> = h.iter().map(|x| rms(x, p("norm1"))).collect();
        let q: Vec<Vec<f64>> = u.iter().map(|x| matvec(p("attn.q.weight"), p("attn.q.bias"), x)).collect();
        let k: Vec<Vec<f64>> = u.iter().map(|x| matvec(p("attn.k.weight"), p("attn.k.bias"), x)).collect();
        let v: Vec<Vec<f64>> = u.iter().map(|x| matvec(p("attn.v.weight"), p("attn.v.bias"), x)).collect();
        let dh = d / cfg.heads;
        let mut next = vec![];
        for i in 0..h.len() {
            let mut ctx = vec![0.0; d];
            for hd in 0..cfg.heads {
                let r = hd * dh..(hd + 1) * dh;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..=i {
                    let w = (scores[j] - mx).exp() / z;
                    for c in r.clone() {
                        ctx[c] += w * v[j][c];
                    }
                }
            }
            let attn = matvec(p("attn.o.weight"), p("attn.o.bias"), &ctx);
            let h1: Vec<f64> = h[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let w = rms(&h1, p("norm2"));
            let f: Vec<f64> = matvec(p("mlp.fc1.weight"), p("mlp.fc1.bias"), &w).into_iter().map(gelu).collect();
            let f2 = matvec(p("mlp.fc2.weight"), p("mlp.fc2.bias"), &f);
            next.push(h1.iter().zip(&f2).map(|(a, b)| a + b).collect());
        }
        h = next;
    }
    let tpt = cfg.tokens_per_step();
    (0..seq.prev_actions.len())
        .map(|t| {
            let x = rms(&h[t * tpt + tpt - 1], param(m, "final_norm"));
            matvec(param(m, "head.weight"), param(m, "head.bias"), &x)
        })
        .collect()
}

fn eval_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

#[test]
fn matches_reference_decoder() {
    for (mode, seed) in [(Mode::ReturnConditioned, 1), (Mode::Bc, 2), (Mode::ReturnConditioned, 3)] {
        let m = tiny_model(mode, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let emb: Vec<f64> = (0..3 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        for n in 1..=3 {
            let seq = SeqInput {
                returns: &[10.5, 9.0, 8.2][..n],
                prev_actions: &[5, 3, 0][..n],
                timesteps: &[4, 5, 6][..n],
            };
            let got = m.sequence_logits(&emb[..n * 6], &seq).unwrap();
            let want = reference_logits(&m, &emb[..n * 6], &seq);
            for t in 0..n {
                for a in 0..5 {
                    assert!((got[t * 5 + a] - want[t][a]).abs() < 1e-12, "{mode:?} n={n} t={t}");
                }
            }
        }
    }
}

#[test]
fn single_token_window_matches_reference() {
    let m = tiny_model(Mode::ReturnConditioned, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cfg = m.cfg().clone();
    cfg.context = 1;
    let b = random_batch(&cfg, 4, &mut rng);
    let fwd = m.forward(&b, false, &mut eval_rng()).unwrap();
    let input = cfg.encoder.input_len();
    for w in 0..4 {
        let g: Vec<f64> = b.grids[w * input..(w + 1) * input].iter().map(|&v| v as f64).collect();
        let emb = m.encode(&g, 1, false, &mut eval_rng()).unwrap();
        let seq = SeqInput {
            returns: &b.returns[w..w + 1],
            prev_actions: &b.prev_actions[w..w + 1],
            timesteps: &b.timesteps[w..w + 1],
        };
        let want = reference_logits(&m, &emb, &seq);
        for a in 0..5 {
            assert!((fwd.logits[w * 5 + a] - want[0][a]).abs() < 1e-12);
        }
    }
}

/// Changes every token belonging to a timestep strictly after slot `t`.
fn perturb_future<R: Rng>(b: &mut Batch, w: usize, t: usize, input: usize, rng: &mut R) {
    let k = b.context;
    for s in t + 1..k {
        let i = w * k + s;
        b.returns[i] = rng.random_range(0.0..22.0);
        b.prev_actions[i] = rng.random_range(0..6);
        for v in &mut b.grids[i * input..(i + 1) * input] {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

#[test]
fn outputs_are_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for mode in [Mode::ReturnConditioned, Mode::Bc] {
        let mut cfg = tiny_config(mode);
        cfg.context = 8;
        cfg.layers = 2;
        cfg.heads = 2;
        let m = SeqModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let input = cfg.encoder.input_len();
        for _ in 0..50 {
            let mut b = random_batch(&cfg, 1, &mut rng);
            let start = b.mask.iter().position(|&v| v).unwrap();
            let before = m.forward(&b, false, &mut eval_rng()).unwrap().logits;
            let t = rng.random_range(start..cfg.context);
            perturb_future(&mut b, 0, t, input, &mut rng);
            let after = m.forward(&b, false, &mut eval_rng()).unwrap().logits;
            let n_past = (t - start + 1) * 5;
            assert_eq!(before[..n_past], after[..n_past]);
        }
    }
}

#[test]
fn identical_windows_give_identical_rows() {
    let m = tiny_model(Mode::ReturnConditioned, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let one = random_batch(m.cfg(), 1, &mut rng);
    let mut b = one.clone();
    for _ in 0..3 {
        b.size += 1;
        b.returns.extend(&one.returns);
        b.grids.extend(&one.grids);
        b.prev_actions.extend(&one.prev_actions);
        b.targets.extend(&one.targets);
        b.timesteps.extend(&one.timesteps);
        b.mask.extend(&one.mask);
        b.window_ids.push(0);
    }
    let l = m.forward(&b, false, &mut eval_rng()).unwrap().logits;
    let n = one.n_valid() * 5;
    for r in 1..4 {
        assert_eq!(l[..n], l[r * n..(r + 1) * n]);
    }
}

#[test]
fn mask_with_holes_is_rejected() {
    let m = tiny_model(Mode::ReturnConditioned, 4);
    let mut b = random_batch(m.cfg(), 2, &mut ChaCha8Rng::seed_from_u64(3));
    b.mask[..3].copy_from_slice(&[true, false, true]);
    assert!(matches!(m.forward(&b, false, &mut eval_rng()), Err(Error::InvalidArgument(_))));
    let mut b = random_batch(m.cfg(), 2, &mut ChaCha8Rng::seed_from_u64(3));
    b.mask.pop();
    assert!(m.forward(&b, false, &mut eval_rng()).is_err());
}

#[test]
fn bc_ignores_returns() {
    let m = tiny_model(Mode::Bc, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut b = random_batch(m.cfg(), 4, &mut rng);
    let l1 = m.forward(&b, false, &mut eval_rng()).unwrap();
    b.returns.iter_mut().for_each(|r| *r = rng.random_range(0.0..22.0));
    let l2 = m.forward(&b, false, &mut eval_rng()).unwrap();
    assert_eq!(l1.logits, l2.logits);
    assert_eq!(
        weighted_nll(&l1.logits, &l1.targets, None).unwrap().0,
        weighted_nll(&l2.logits, &l2.targets, None).unwrap().0
    );
}

/// Relative error per parameter tensor between the analytic gradient and
/// central differences of `loss`.
fn grad_check(m: &SeqModel<f64>, b: &Batch, weights: Option<&[f64]>) -> Vec<(String, f64)> {
    let loss = |p: &[f64]| {
        let mut mm = m.clone();
        mm.params.copy_from_slice(p);
        let f = mm.forward(b, true, &mut eval_rng()).unwrap();
        weighted_nll(&f.logits, &f.targets, weights).unwrap().0
    };
    let f = m.forward(b, true, &mut eval_rng()).unwrap();
    let (_, dl) = weighted_nll(&f.logits, &f.targets, weights).unwrap();
    let g = m.backward(&f, &dl);
    let h = 1e-5;
    let mut out = vec![];
    for spec in &m.arch.params.specs {
        let mut worst: f64 = 0.0;
        for i in spec.offset..spec.offset + spec.len() {
            let mut p = m.params.clone();
            p[i] += h;
            let up = loss(&p);
            p[i] -= 2.0 * h;
            let down = loss(&p);
            let num = (up - down) / (2.0 * h);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        out.push((spec.name.clone(), worst));
    }
    out
}

#[test]
fn gradients_match_finite_differences() {
    for draw in 0..5u64 {
        let mode = if draw % 2 == 0 { Mode::ReturnConditioned } else { Mode::Bc };
        let m = tiny_model(mode, 40 + draw);
        let b = random_batch(m.cfg(), 3, &mut ChaCha8Rng::seed_from_u64(draw));
        let mut rng = ChaCha8Rng::seed_from_u64(draw + 7);
        let w: Vec<f64> = (0..b.n_valid()).map(|_| rng.random_range(0.3..1.5)).collect();
        for weights in [None, Some(&w[..])] {
            for (name, err) in grad_check(&m, &b, weights) {
                assert!(err < 1e-3, "draw {draw} {name}: {err}");
            }
        }
    }
}
