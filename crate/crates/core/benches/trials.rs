use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vamp_pcd::diagnostics::run_trials;
use vamp_pcd::pcd::PcdConfig;
use vamp_pcd::signal::{make_partial_fourier, SceneParams, SnrUnit};
use vamp_pcd::unfold::{train_layerwise, TrainConfig, TrainedParams};
use vamp_pcd::{Exec, VampConfig, VampLayerParams};

fn scene(rho: f64, snr: f64) -> SceneParams {
    SceneParams {
        a_min: 1.0,
        a_max: 1.0,
        rho_min: rho,
        rho_max: rho,
        snr_min: snr,
        snr_max: snr,
        n: 256,
        snr_unit: SnrUnit::Db,
    }
}

fn trials(c: &mut Criterion) {
    let model = make_partial_fourier(200, 256, 1).unwrap();
    model.lmmse_factor().unwrap();
    let params = TrainedParams::untrained(vec![VampLayerParams::new(0.16, 1.5).unwrap(); 7]);
    let pcd = PcdConfig::new(1e-3, 1e-2);
    let vamp = VampConfig::new(7);
    let sc = scene(0.02, 13.0);

    let mut group = c.benchmark_group("roc_trials");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), 64), &exec, |b, &exec| {
            b.iter(|| black_box(run_trials(&model, &params, &sc, &pcd, &vamp, 64, 7, exec).unwrap()))
        });
    }
    group.finish();
}

fn layer_search(c: &mut Criterion) {
    let model = make_partial_fourier(200, 256, 1).unwrap();
    model.lmmse_factor().unwrap();
    let sc = scene(0.02, 13.0);

    let mut group = c.benchmark_group("train_one_layer");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let mut cfg = TrainConfig::new(1, &sc, 3).unwrap();
        cfg.k_epoch = 2;
        cfg.batch_size = 16;
        cfg.exec = exec;
        group.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| black_box(train_layerwise(&model, &sc, &cfg).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, trials, layer_search);
criterion_main!(benches);
