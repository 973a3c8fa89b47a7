use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use marcus_core::characteristics::InitialGrid;
use marcus_core::presets::Preset;
use marcus_core::studies::sinh_field;
use marcus_core::{exp_map, integrate_path, solve};

fn bench_exp_map(c: &mut Criterion) {
    let field = sinh_field();
    c.bench_function("exp_map/sinh/64", |b| {
        b.iter(|| exp_map(&field, black_box(&[0.7]), black_box(&[0.4]), 64).unwrap())
    });
}

fn bench_integrate(c: &mut Criterion) {
    let p = Preset::SinhExample.problem();
    let drv = p.driver_config().generate(p.default_seed, 0).unwrap();
    let grid = InitialGrid::uniform(-3.0, 3.0, 201);
    c.bench_function("integrate_path/sinh/201", |b| {
        b.iter(|| integrate_path(&p.coeffs, &drv, &grid, &p.times, &p.params.integration).unwrap())
    });

    let p = Preset::JumpTransport.problem();
    let drv = p.driver_config().generate(p.default_seed, 0).unwrap();
    let grid = InitialGrid::uniform(-2.0, 2.0, 41);
    c.bench_function("integrate_path/jump-transport/41", |b| {
        b.iter(|| integrate_path(&p.coeffs, &drv, &grid, &p.times, &p.params.integration).unwrap())
    });
}

fn bench_solve(c: &mut Criterion) {
    let p = Preset::SinhExample.problem();
    let drv = p.driver_config().generate(p.default_seed, 0).unwrap();
    let pts = p.grid_points();
    let mut group = c.benchmark_group("solve");
    group.sample_size(10);
    group.bench_function("sinh/201x5", |b| {
        b.iter(|| solve(&p.coeffs, &drv, &p.u0, &p.times, &pts, &p.params).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_exp_map, bench_integrate, bench_solve);
criterion_main!(benches);
