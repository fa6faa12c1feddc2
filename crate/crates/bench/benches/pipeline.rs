use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uwdt_core::dataset::{Dataset, Episode, TerminalCause};
use uwdt_core::mcts::{plan, SearchConfig};
use uwdt_core::nn::loss::weighted_nll;
use uwdt_core::nn::{ModelConfig, SeqModel};
use uwdt_core::obs::render_grid;
use uwdt_core::sim::{build_scenario, Action, InteractCount};

fn simulator(c: &mut Criterion) {
    let world = build_scenario(3, InteractCount::Fixed(4)).unwrap();
    c.bench_function("step_decision", |b| {
        b.iter(|| {
            let mut w = world.clone();
            black_box(w.step_decision(Action::Cruise).unwrap());
        })
    });
    c.bench_function("render_grid", |b| b.iter(|| black_box(render_grid(&world))));
    let cfg = SearchConfig::default();
    c.bench_function("mcts_plan_100", |b| b.iter(|| black_box(plan(&world, &cfg, 7).unwrap())));
}

fn dataset() -> Dataset {
    let mut world = build_scenario(5, InteractCount::SAMPLE).unwrap();
    let mut ep = Episode::new(TerminalCause::Horizon);
    while !world.is_terminal() {
        let g = render_grid(&world);
        let out = world.step_decision(Action::Cruise).unwrap();
        ep.push(&g, Action::Cruise.index() as u8, out.reward as f32);
    }
    Dataset::new(vec![ep], 20).unwrap()
}

fn model(c: &mut Criterion) {
    let ds = dataset();
    let batch = ds.batch(&(0..16).map(|i| i % ds.n_windows()).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = SeqModel::<f32>::new(ModelConfig::default(), &mut rng).unwrap();
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("forward_eval_b16", |b| {
        b.iter(|| black_box(m.forward(&batch, false, &mut rng).unwrap().logits))
    });
    group.bench_function("forward_backward_b16", |b| {
        b.iter(|| {
            let f = m.forward(&batch, true, &mut rng).unwrap();
            let (_, dl) = weighted_nll(&f.logits, &f.targets, None).unwrap();
            black_box(m.backward(&f, &dl))
        })
    });
    group.finish();
}

criterion_group!(benches, simulator, model);
criterion_main!(benches);
