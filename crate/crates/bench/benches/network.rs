use criterion::{criterion_group, criterion_main, Criterion};
use earloc_core::data::{generate, SceneSpec};
use earloc_core::net::{images_to_tensor, Model, NetConfig};
use earloc_core::train::{loss_and_grads, prepare, RunConfig};
use earloc_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[1, 32, 40, 40]);
    let w = random(&mut rng, &[32, 32, 3, 3]);
    let bias = random(&mut rng, &[32]);
    c.bench_function("conv3x3_32ch_40px_fwd_bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let wi = g.param(w.clone());
            let bi = g.param(bias.clone());
            let y = g.conv2d(xi, wi, bi, 1, 1).unwrap();
            let seed = vec![1.0f32; g.value(y).len()];
            g.backward(&[(y, &seed)]).unwrap();
        })
    });
}

fn bench_forward(c: &mut Criterion) {
    let cfg = NetConfig::uesegnet1_default();
    let model = Model::<f32>::new(cfg.clone(), 1).unwrap();
    let img = generate(&SceneSpec::default(), 0).unwrap();
    let sample = prepare(&[img], cfg.input_size).unwrap();
    let x = images_to_tensor::<f32>(&[&sample[0].image]).unwrap();
    c.bench_function("uesegnet1_infer", |b| b.iter(|| model.infer(&x, 0.5, 0.7).unwrap()));
    let run = RunConfig::for_kind(cfg.kind);
    c.bench_function("uesegnet1_train_step", |b| b.iter(|| loss_and_grads(&model, &sample, &run.loss).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_conv, bench_forward
}
criterion_main!(benches);
