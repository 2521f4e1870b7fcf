use criterion::{black_box, criterion_group, criterion_main, Criterion};

use wdda::alignment::{train_source, AlignmentConfig};
use wdda::critic::{build_global_critic, critic_loss, global_critic_forward};
use wdda::data::{gen_shapes_dataset, DomainParams};
use wdda::detector::{build_backbone, detect, DetectorHead};
use wdda::nn::{build_network, power_iteration, LayerSpec, WeightMatrix};
use wdda::{CriticVariant, DetectorConfig, Tape};
use wdda_bench::random_tensor;

fn conv(c: &mut Criterion) {
    let net = build_network("conv", &[LayerSpec::conv(64, 64, 3, 1, 1)], 0).unwrap();
    let x = random_tensor(&[4, 64, 8, 8], 1);
    c.bench_function("conv3x3_64ch_8x8_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let bound = net.bind(&mut tape, true).unwrap();
            let v = tape.constant(x.clone()).unwrap();
            let y = net.forward(&mut tape, &bound, v).unwrap();
            let s = tape.sum_all(y).unwrap();
            tape.backward(s).unwrap();
            black_box(tape.grad(bound.tracked_leaves()[0]).map(|g| g[0]));
        })
    });
}

fn spectral(c: &mut Criterion) {
    let w = WeightMatrix::from_weight(&random_tensor(&[128, 512], 2), false);
    let u0: Vec<f64> = random_tensor(&[128], 3).to_f64_vec();
    c.bench_function("power_iteration_128x512_x20", |b| {
        b.iter(|| {
            let mut u = u0.clone();
            black_box(power_iteration(&w, &mut u, 20))
        })
    });
}

fn critic_step(c: &mut Criterion) {
    let mut critic = build_global_critic(CriticVariant::Desk, 64, 4).unwrap();
    let fs = random_tensor(&[4, 64, 8, 8], 5);
    let ft = random_tensor(&[4, 64, 8, 8], 6);
    c.bench_function("desk_global_critic_step", |b| {
        b.iter(|| {
            critic.refresh_spectral_norm();
            let mut tape = Tape::<f32>::new();
            let cb = critic.bind(&mut tape, true).unwrap();
            let vs = tape.constant(fs.clone()).unwrap();
            let vt = tape.constant(ft.clone()).unwrap();
            let ds = global_critic_forward(&mut tape, &critic, &cb, vs).unwrap();
            let dt = global_critic_forward(&mut tape, &critic, &cb, vt).unwrap();
            let l = critic_loss(&mut tape, ds, dt).unwrap();
            tape.backward(l).unwrap();
            black_box(tape.value(l).item().unwrap());
        })
    });
}

fn detection(c: &mut Criterion) {
    let data = gen_shapes_dataset(8, 7, &DomainParams::clear()).unwrap();
    let cfg = AlignmentConfig {
        source_steps: 1,
        ..Default::default()
    };
    c.bench_function("source_training_step_batch4", |b| {
        b.iter(|| black_box(train_source(&data, &cfg).unwrap().metrics.len()))
    });
    let det = DetectorConfig::default();
    let bb = build_backbone(&det, "bb", 8).unwrap();
    let head = DetectorHead::build(&det, 9).unwrap();
    let images = data.batch(&[0, 1, 2, 3]).unwrap();
    c.bench_function("detect_batch4", |b| {
        b.iter(|| black_box(detect(&det, &bb, &head, &images).unwrap().len()))
    });
    c.bench_function("render_10_images", |b| {
        b.iter(|| black_box(gen_shapes_dataset(10, 1, &DomainParams::clear()).unwrap().len()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, spectral, critic_step, detection
}
criterion_main!(benches);
