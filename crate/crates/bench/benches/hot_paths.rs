use criterion::{criterion_group, criterion_main, Criterion};
use lipsync_core::autograd::Tape;
use lipsync_core::config::ModelConfig;
use lipsync_core::data::{compute_mel, preset_speakers, synthesize_clip, SAMPLE_RATE};
use lipsync_core::generator::modulated_conv;
use lipsync_core::nn::SAME3;
use lipsync_core::pipeline::self_driven;
use lipsync_core::syncnet::{train_syncnet, SyncTrainConfig};
use lipsync_core::training::{init_model, train_generalized, NoopObserver, TrainConfig};
use lipsync_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn modulated(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn(&[4, 32, 32, 32], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(&[32, 32, 3, 3], 0.1, &mut rng);
    let s = Tensor::<f32>::randn(&[4, 32], 1.0, &mut rng);
    c.bench_function("modulated_conv fwd+bwd 4x32x32x32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let (xv, wv, sv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(s.clone()));
            let y = modulated_conv(xv, wv, sv, true, SAME3).unwrap().square().sum();
            let g = tape.grad(y, &[xv, wv, sv], false);
            g.iter().map(|v| v.unwrap().value().data()[0]).sum::<f32>()
        })
    });
}

fn audio(c: &mut Criterion) {
    let clip = synthesize_clip(&preset_speakers()[0], 2.0, 1, 16).unwrap();
    c.bench_function("mel 2 s", |b| b.iter(|| compute_mel(&clip.waveform, SAMPLE_RATE).unwrap()));
}

fn steps(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let clips: Vec<_> = (0..4).map(|i| synthesize_clip(&preset_speakers()[i % 2], 1.0, i as u64, 64).unwrap()).collect();
    let mut g = c.benchmark_group("S=64");
    g.sample_size(10);
    g.bench_function("syncnet 5 steps", |b| {
        let tc = SyncTrainConfig { steps: 5, ..Default::default() };
        b.iter(|| train_syncnet(&cfg, &clips, &tc).unwrap())
    });
    g.bench_function("generator 2 steps (no sync)", |b| {
        let tc = TrainConfig { steps: 2, lambda_sync: 0.0, ..Default::default() };
        b.iter(|| train_generalized(&cfg, &clips, None, &tc, &mut NoopObserver).unwrap())
    });
    let params = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
    g.bench_function("inference 25 frames", |b| b.iter(|| self_driven(&cfg, &params, None, &clips[0], 0, true).unwrap()));
    g.finish();
}

criterion_group!(benches, modulated, audio, steps);
criterion_main!(benches);
