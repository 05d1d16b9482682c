use candle_core::{DType, Device, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dia_bench::{rng, scored_labels, tensor, uniform};
use dia_core::contrastive::{fine_ntxent_loss, MatrixDesign, PairLabelMatrix};
use dia_core::diffusion::{dissolve_with, ScheduleSpec};
use dia_core::nn::{Conv2d, ParamStore};
use dia_core::scoring::auroc;
use dia_core::{ImageBatch, ValueRange};

fn contrastive(c: &mut Criterion) {
    let mut group = c.benchmark_group("fine_ntxent");
    for b in [8, 32] {
        let labels = PairLabelMatrix::new(b, 4, MatrixDesign::A, true).unwrap();
        let z = tensor(&mut rng(0), &[labels.size(), 128]);
        group.bench_with_input(BenchmarkId::new("forward_backward", b), &z, |bench, z| {
            let var = candle_core::Var::from_tensor(z).unwrap();
            bench.iter(|| {
                fine_ntxent_loss(var.as_tensor(), &labels, 0.5)
                    .unwrap()
                    .backward()
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn ranking(c: &mut Criterion) {
    let mut group = c.benchmark_group("auroc");
    for n in [1_000, 100_000] {
        let (scores, labels) = scored_labels(&mut rng(1), n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| auroc(&scores, &labels).unwrap())
        });
    }
    group.finish();
}

fn dissolving(c: &mut Criterion) {
    let schedule = ScheduleSpec::default().build().unwrap();
    let shape = (32, 3, 32, 32);
    let data = uniform(&mut rng(2), 32 * 3 * 32 * 32, 0.0, 1.0);
    let batch = ImageBatch::new(shape, data, ValueRange::Unit).unwrap();
    let zero = |x: &Tensor, _: &[usize]| -> dia_core::Result<Tensor> { Ok(x.zeros_like()?) };
    c.bench_function("dissolve/zero_predictor_32x3x32x32", |bench| {
        bench.iter(|| dissolve_with(&zero, &schedule, &batch, &[400]).unwrap())
    });
}

fn convolution(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for (n, ch) in [(64, 8), (16, 32)] {
        let params = ParamStore::new(0, DType::F32, &Device::Cpu);
        let conv = Conv2d::same(&params, ch, ch, 3).unwrap();
        let x = candle_core::Var::from_tensor(&tensor(&mut rng(3), &[n, ch, 32, 32])).unwrap();
        let id = format!("{n}x{ch}x32x32");
        group.bench_function(BenchmarkId::new("forward", &id), |bench| {
            bench.iter(|| conv.forward(x.as_tensor()).unwrap())
        });
        group.bench_function(BenchmarkId::new("forward_backward", &id), |bench| {
            bench.iter(|| {
                conv.forward(x.as_tensor())
                    .unwrap()
                    .sum_all()
                    .unwrap()
                    .backward()
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = contrastive, ranking, dissolving, convolution
}
criterion_main!(benches);
