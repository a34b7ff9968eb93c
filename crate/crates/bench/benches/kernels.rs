use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpgan::autograd::Graph;
use mpgan::metrics::ssim;
use mpgan::phantom::generate_dataset;
use mpgan::tensor::{ConvGeom, Tensor};
use mpgan::train::{train_step, Dataset, Model, TrainConfig};
use mpgan::{ClassLabel, Grid3, PhantomSpec};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[2, 8, 24, 24, 24], &mut rng);
    let w = random(&[8, 8, 3, 3, 3], &mut rng);
    c.bench_function("conv3d 8->8 k3 24^3 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let y = g.conv3d(xv, wv, None, ConvGeom::new(3, 1, 1));
            let loss = g.mean(y);
            g.backward(loss)
        })
    });
}

fn ssim_24(c: &mut Criterion) {
    let a = Grid3::from_fn([24, 24, 24], |d, h, w| ((d * 7 + h * 3 + w) % 11) as f64 / 11.0);
    let b = Grid3::from_fn([24, 24, 24], |d, h, w| ((d * 5 + h * 2 + w) % 13) as f64 / 13.0);
    c.bench_function("ssim 24^3", |bch| bch.iter(|| ssim(&a, &b).unwrap()));
}

fn networks(c: &mut Criterion) {
    let spec = PhantomSpec {
        subject_count: 4,
        ..PhantomSpec::desk_default()
    };
    let samples = generate_dataset(&spec).unwrap();
    let idx: Vec<usize> = (0..samples.len()).collect();
    let data = Dataset::from_samples(&samples, &idx).unwrap();
    let model = Model::new(TrainConfig::desk(spec.k)).unwrap();
    let mut state = model.init_state();
    let target = ClassLabel::new(1, spec.k).unwrap();

    c.bench_function("generator synthesize 24^3", |b| {
        b.iter(|| model.generator.synthesize(&state.g, &samples[0].volume, target).unwrap())
    });
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("train step 24^3", |b| b.iter(|| train_step(&model, &mut state, &data).unwrap()));
    group.finish();
}

criterion_group!(benches, conv, ssim_24, networks);
criterion_main!(benches);
