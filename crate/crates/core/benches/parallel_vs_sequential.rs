//! Data-parallel kernels on a one-thread pool against the default pool.
//!
//! Built without the `parallel` feature only the sequential variants run.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use num_complex::Complex64;
use scarlab::analysis::{pinning_curve, score_states, theta_grid};
use scarlab::classical::{resonance_field, ClassicalState, ClassicalSystem, Integrator, Resonance};
use scarlab::eigensolver::{itp_sweep, solve_eigenstates, SolverConfig};
use scarlab::grid::{make_grid, WaveField};
use scarlab::potential::{bump_field, fwhm_to_sigma, sample_bumps, ConfinementParams};

struct Pool(#[cfg(feature = "parallel")] rayon::ThreadPool);

impl Pool {
    fn new(threads: Option<usize>) -> Self {
        #[cfg(feature = "parallel")]
        {
            let mut b = rayon::ThreadPoolBuilder::new();
            if let Some(n) = threads {
                b = b.num_threads(n);
            }
            Pool(b.build().expect("thread pool"))
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            Pool()
        }
    }

    fn run<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        #[cfg(feature = "parallel")]
        return self.0.install(f);
        #[cfg(not(feature = "parallel"))]
        return f();
    }
}

fn variants() -> Vec<(&'static str, Option<usize>)> {
    if cfg!(feature = "parallel") {
        vec![("sequential", Some(1)), ("parallel", None)]
    } else {
        vec![("sequential", None)]
    }
}

fn packets(grid: scarlab::grid::Grid2D, count: usize) -> Vec<WaveField> {
    (0..count)
        .map(|k| {
            let c = k as f64 * 0.3 - 1.0;
            WaveField::from_fn(grid, |x, y| {
                Complex64::new((-(x - c).powi(2) - (y + 0.5 * c).powi(2)).exp(), 0.1 * x * y)
            })
            .normalized()
            .expect("nonzero packet")
        })
        .collect()
}

fn bench_itp(c: &mut Criterion) {
    let res = Resonance::new(1, 3).unwrap();
    let params = ConfinementParams::new(1.0, resonance_field(&res, 1.0)).unwrap();
    let grid = make_grid(128, 128, 7.0).unwrap();
    let bumps = sample_bumps(7, 2.0, 6.0, 4.0, fwhm_to_sigma(0.235).unwrap()).unwrap();
    let v = bump_field(&grid, &bumps);
    let states = packets(grid, 16);
    let mut g = c.benchmark_group("itp_sweep_16x128");
    g.sample_size(10);
    for (name, threads) in variants() {
        g.bench_function(name, |b| {
            let pool = Pool::new(threads);
            b.iter(|| pool.run(|| itp_sweep(black_box(&states), 0.05, &params, &v).unwrap()))
        });
    }
    g.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let res = Resonance::new(1, 3).unwrap();
    let params = ConfinementParams::new(1.0, resonance_field(&res, 1.0)).unwrap();
    let mut cfg = SolverConfig::new(12, make_grid(96, 96, 6.0).unwrap(), params, 3);
    cfg.bumps = sample_bumps(3, 1.0, 4.5, 4.0, fwhm_to_sigma(0.235).unwrap()).unwrap();
    let spectrum = solve_eigenstates(&cfg).unwrap();
    let theta = theta_grid(360);
    let mut g = c.benchmark_group("analysis_12_states");
    g.sample_size(10);
    for (name, threads) in variants() {
        let pool = Pool::new(threads);
        g.bench_function(format!("scores/{name}"), |b| {
            b.iter(|| pool.run(|| score_states(&spectrum, &res, 0.235, 0..spectrum.len()).unwrap()))
        });
        g.bench_function(format!("pinning/{name}"), |b| {
            b.iter(|| pool.run(|| pinning_curve(&spectrum.states[11], &cfg.bumps, black_box(&theta))))
        });
    }
    g.finish();
}

fn bench_trajectories(c: &mut Criterion) {
    let bumps = sample_bumps(5, 2.0, 5.0, 4.0, fwhm_to_sigma(0.235).unwrap()).unwrap();
    let system = ClassicalSystem::new(1.0, 0.7, &bumps);
    let integ = Integrator::new(system.clone(), system.suggested_step(10.0)).unwrap();
    let starts: Vec<ClassicalState> = (0..16)
        .map(|k| {
            let a = k as f64 * 0.4;
            ClassicalState {
                x: a.cos(),
                y: a.sin(),
                vx: 4.0 * (1.3 * a).cos(),
                vy: 4.0 * (1.3 * a).sin(),
            }
        })
        .collect();
    let mut g = c.benchmark_group("ensemble_16_trajectories");
    g.sample_size(10);
    for (name, threads) in variants() {
        g.bench_function(name, |b| {
            let pool = Pool::new(threads);
            b.iter(|| pool.run(|| integ.run_ensemble(black_box(&starts), 20.0, 100, 1e-6)))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_itp, bench_scoring, bench_trajectories);
criterion_main!(benches);
