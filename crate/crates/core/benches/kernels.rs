//! Hot kernels under the current build mode. Run once with default features and
//! once with `--no-default-features`; bench ids carry the mode so criterion
//! reports the two side by side.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use forge_core::diffcalc::kernels::matmul;
use forge_core::diffcalc::{Graph, Tensor};
use forge_core::pifield::{extract_point_cloud, lattice, FieldEvaluator, FieldParams, OccupancyField};
use forge_core::pointrender::{render, render_var, DiffCloud, SplatConfig};
use forge_core::scenegeom::{Camera, DEFAULT_ORTHO_SCALE};
use forge_core::surfaceext::{marching_cubes, ScalarGrid};
use forge_core::synthgen::{catalog_shape, input_camera, render_shape, surface_density};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODE: &str = if cfg!(feature = "parallel") { "parallel" } else { "sequential" };

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (m, k, n) = (4096, 33, 64);
    let a: Vec<f64> = (0..m * k).map(|_| rng.gen()).collect();
    let b: Vec<f64> = (0..k * n).map(|_| rng.gen()).collect();
    c.bench_function(&format!("matmul_4096x33x64/{MODE}"), |bench| {
        bench.iter(|| matmul(black_box(&a), black_box(&b), m, k, n))
    });
}

fn bench_render(c: &mut Criterion) {
    let shape = catalog_shape(0);
    let cfg = SplatConfig::default();
    let mut group = c.benchmark_group("render");
    for size in [64, 128] {
        let cloud = shape.surface_cloud(surface_density(size, size), 1).unwrap();
        let cam = Camera::for_azimuth(0.4, size, size, DEFAULT_ORTHO_SCALE).unwrap();
        group.bench_with_input(BenchmarkId::new(format!("forward/{MODE}"), size), &size, |bench, _| {
            bench.iter(|| render(black_box(&cloud), &cam, &cfg).unwrap())
        });
        let flat = |v: &[[f64; 3]]| Tensor::new(vec![v.len(), 3], v.iter().flatten().copied().collect()).unwrap();
        let (pos, col, opa) = (flat(&cloud.positions), flat(&cloud.colors), Tensor::vector(cloud.opacity.clone()));
        group.bench_with_input(BenchmarkId::new(format!("forward_backward/{MODE}"), size), &size, |bench, _| {
            bench.iter(|| {
                let g = Graph::new();
                let cloud = DiffCloud {
                    positions: g.param(pos.clone()),
                    colors: g.param(col.clone()),
                    opacity: g.param(opa.clone()),
                };
                let loss = render_var(&g, Some(cloud), &cam, &cfg).unwrap().square().mean().unwrap();
                g.backward(loss).unwrap();
            })
        });
    }
    group.finish();
}

fn bench_field(c: &mut Criterion) {
    let params = FieldParams::init(0);
    let cam = input_camera(64).unwrap();
    let image = render_shape(&catalog_shape(1), &cam, &SplatConfig::default(), 0).unwrap();
    let field = FieldEvaluator::new(&params, &image, &cam).unwrap();
    let points = lattice(32);
    let mut group = c.benchmark_group("field");
    group.sample_size(20);
    group.bench_function(format!("encode_64/{MODE}"), |bench| {
        bench.iter(|| FieldEvaluator::new(&params, black_box(&image), &cam).unwrap())
    });
    group.bench_function(format!("occupancy_lattice_32/{MODE}"), |bench| {
        bench.iter(|| field.occupancy(black_box(&points)))
    });
    group.bench_function(format!("extract_cloud_32/{MODE}"), |bench| {
        bench.iter(|| extract_point_cloud(&field, 32, 0.5).unwrap())
    });
    group.finish();
}

fn bench_marching_cubes(c: &mut Criterion) {
    let res = 64;
    let values: Vec<f64> = lattice(res)
        .iter()
        .map(|p| {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            1.0 / (1.0 + (12.0 * (r - 0.6)).exp())
        })
        .collect();
    let grid = ScalarGrid::new([res; 3], values, 0.5).unwrap();
    c.bench_function(&format!("marching_cubes_64/{MODE}"), |bench| bench.iter(|| marching_cubes(black_box(&grid))));
}

criterion_group!(benches, bench_matmul, bench_render, bench_field, bench_marching_cubes);
criterion_main!(benches);
