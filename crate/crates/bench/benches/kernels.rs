use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use foliage::foliation::{initial_model, FoliationConfig, FoliationProblem};
use foliage::linalg::random_normal;
use foliage::riemopt::BlockProblem;
use foliage::{synth, HtTensor, PolyMap};

fn ht(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = HtTensor::random(&mut rng, 5, 10, 2, 4);
    let x = random_normal(&mut rng, 10, 2000);
    let g = random_normal(&mut rng, 2, 2000);
    c.bench_function("ht eval order 5, n 10, 2000 points", |b| b.iter(|| t.eval_batch(&x)));
    c.bench_function("ht node gradients order 5, n 10, 2000 points", |b| b.iter(|| t.grad_nodes(&x, &g)));
}

fn poly(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = PolyMap::zeros(10, 2, 1, 7);
    p.coeffs = random_normal(&mut rng, p.coeffs.nrows(), p.coeffs.ncols());
    let z = random_normal(&mut rng, 2, 2000) * 0.3;
    c.bench_function("polynomial eval degree 7, 2 variables, 2000 points", |b| b.iter(|| p.eval_batch(&z)));
}

fn foliation(c: &mut Criterion) {
    let ds = synth::caricature_dataset(200, 30, 1).unwrap();
    let cfg = FoliationConfig { encoder_order: 5, map_order: 5, rank: 4, ..Default::default() };
    let model = initial_model(&ds, &cfg).unwrap();
    c.bench_function("foliation residual, 6000 pairs", |b| b.iter(|| model.residual(&ds)));
    let prob = FoliationProblem::new(model.clone(), &ds);
    let all: Vec<usize> = (0..prob.num_blocks()).collect();
    c.bench_function("foliation block gradients, 6000 pairs", |b| b.iter(|| prob.block_gradients(&all)));
}

criterion_group!(kernels, ht, poly, foliation);
criterion_main!(kernels);
