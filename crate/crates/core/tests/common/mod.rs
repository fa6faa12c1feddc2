#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uwdt_core::dataset::{Batch, Episode, TerminalCause, PAD_ACTION};
use uwdt_core::nn::{EncoderConfig, ModelConfig, Mode, SeqModel};
use uwdt_core::obs::OccupancyGrid;

/// d = 8, one block, K = 3, 4×7×8 grids.
pub fn tiny_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            in_channels: 4,
            rows: 7,
            cols: 8,
            channels: vec![3, 4, 5],
            embed: 6,
            dropout: 0.0,
        },
        context: 3,
        d_model: 8,
        layers: 1,
        heads: 1,
        mlp_ratio: 4,
        max_timestep: 22,
        return_scale: 22.0,
        mode,
    }
}

/// Left-padded random windows with random valid-suffix lengths.
pub fn random_batch<R: Rng>(cfg: &ModelConfig, size: usize, rng: &mut R) -> Batch {
    let k = cfg.context;
    let n = size * k;
    let input = cfg.encoder.input_len();
    let mut b = Batch {
        size,
        context: k,
        returns: vec![0.0; n],
        grids: vec![0.0; n * input],
        prev_actions: vec![PAD_ACTION; n],
        targets: vec![0; n],
        timesteps: vec![0; n],
        mask: vec![false; n],
        window_ids: (0..size).collect(),
    };
    for w in 0..size {
        let valid = rng.random_range(1..=k);
        let t0 = rng.random_range(0..=(cfg.max_timestep - valid));
        for j in 0..valid {
            let i = w * k + (k - valid) + j;
            b.mask[i] = true;
            b.timesteps[i] = (t0 + j) as u8;
            b.returns[i] = rng.random_range(0.0..22.0);
            b.prev_actions[i] = if t0 + j == 0 { PAD_ACTION } else { rng.random_range(0..5) };
            b.targets[i] = rng.random_range(0..5);
            for v in &mut b.grids[i * input..(i + 1) * input] {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }
    b
}

pub fn tiny_model(mode: Mode, seed: u64) -> SeqModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = SeqModel::new(tiny_config(mode), &mut rng).unwrap();
    // give the normalization gains and BN affine some spread
    for spec in m.arch.params.specs.clone() {
        if spec.name.contains("norm") || spec.name.contains("gamma") || spec.name.contains("beta") {
            for v in &mut m.params[spec.offset..spec.offset + spec.len()] {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    for v in m.buffers.iter_mut() {
        *v += rng.random_range(0.0..0.5);
    }
    m
}

/// Random episode with real-sized grids.
pub fn synthetic_episode(t: usize, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ep = Episode::new(TerminalCause::Horizon);
    for _ in 0..t {
        let mut g = OccupancyGrid::default();
        for v in g.data.iter_mut() {
            *v = if rng.random_bool(0.1) { rng.random_range(-1.0..1.0) } else { 0.0 };
        }
        ep.push(&g, rng.random_range(0..5), rng.random_range(0.0..1.0));
    }
    ep
}
