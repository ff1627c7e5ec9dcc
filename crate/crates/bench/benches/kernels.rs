use std::hint::black_box;

use agf_core::engine::{self, EngineConfig};
use agf_core::models::attn::AttnProblem;
use agf_core::models::dln::{agf_dln_sequence, DlnProblem};
use agf_core::models::fcln::FclnProblem;
use agf_core::models::modadd::ModAddProblem;
use agf_core::numerics::dft;
use agf_core::{gf_train, GfConfig, ModelContract};
use criterion::{criterion_group, criterion_main, Criterion};

fn bench_dft(c: &mut Criterion) {
    for p in [20usize, 97] {
        let v: Vec<f64> = (0..p).map(|i| (i as f64 * 0.37).sin()).collect();
        c.bench_function(&format!("dft/p={p}"), |b| b.iter(|| dft(black_box(&v))));
    }
}

fn bench_modadd_grad(c: &mut Criterion) {
    let prob = ModAddProblem::three_cosine(18, 1e-3);
    let params: Vec<f64> = prob.init_params(1e-1, 0).concat();
    let mut grad = vec![0.0; params.len()];
    c.bench_function("modadd/loss_grad", |b| b.iter(|| prob.loss_grad(black_box(&params), &mut grad)));
    c.bench_function("modadd/grad_direct", |b| b.iter(|| prob.grad_direct(black_box(&params), &mut grad)));
}

fn bench_engine(c: &mut Criterion) {
    let dln = DlnProblem::two_coordinate(1e-8);
    c.bench_function("engine/dln_closed_form", |b| b.iter(|| agf_dln_sequence(black_box(&dln)).unwrap()));
    let fcln = FclnProblem::diagonal(&[3.0, 2.0, 1.0], 3, 1e-8).unwrap();
    let basis = fcln.basis();
    let cfg = EngineConfig::new(1e-8, 0);
    let mut g = c.benchmark_group("engine");
    g.sample_size(10);
    g.bench_function("fcln_basis", |b| b.iter(|| engine::run(black_box(&basis), &cfg).unwrap()));
    g.finish();
}

fn bench_gf(c: &mut Criterion) {
    let prob = AttnProblem::diagonal(&[2.0, 1.0], 8, 4, 1e-3).unwrap();
    let mut cfg = GfConfig::new(1e-3, 0, 0.4);
    cfg.samples = 200;
    let mut g = c.benchmark_group("gf");
    g.sample_size(10);
    g.bench_function("attn", |b| b.iter(|| gf_train(black_box(&prob), &cfg).unwrap()));
    g.finish();
}

criterion_group!(benches, bench_dft, bench_modadd_grad, bench_engine, bench_gf);
criterion_main!(benches);
