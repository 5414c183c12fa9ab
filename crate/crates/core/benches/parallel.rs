//! Parallel vs sequential throughput on the crate's data-parallel inner
//! loops: episode simulation, per-user meta-gradients and evaluation draws.
//! The parallel arms exist only with the `parallel` feature (the default);
//! build with `--no-default-features` to measure the pure sequential crate.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uamp_core::data::{sample_support_query, MetaDataset, SupportQueryBatch, UserDataset};
use uamp_core::exec;
use uamp_core::meta::proposed::{meta_gradient, MetaVariant};
use uamp_core::meta::{adapt_and_evaluate, train, HyperParams, LearnerKind};
use uamp_core::sim::{gen_raw_users, simulate_episode, EnvConfig, NormalizationStats, UserProfile};

fn bench_profile() -> UserProfile {
    UserProfile {
        compliance: 0.7,
        lateral_bias: [0.05, -0.02],
        motor_noise: 0.01,
        reaction_lag: 1,
        skill: 3.0,
    }
}

fn make_dataset(n_users: usize) -> MetaDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let profiles: Vec<UserProfile> = (0..n_users).map(|_| UserProfile::sample(&mut rng)).collect();
    let env = EnvConfig { episode_len: 100, ..EnvConfig::default() };
    let raw = gen_raw_users(&profiles, &env, 3, 4).unwrap();
    let stats = NormalizationStats::compute(&raw, raw[0].dims).unwrap();
    let users: Vec<UserDataset> = raw
        .into_iter()
        .map(|u| UserDataset {
            user_id: u.user_id,
            dims: u.dims,
            samples: u.samples.iter().map(|s| stats.normalize_sample(s)).collect(),
        })
        .collect();
    MetaDataset { users }
}

fn bench_episode_generation(c: &mut Criterion) {
    let env = EnvConfig { episode_len: 200, ..EnvConfig::default() };
    let profile = bench_profile();
    let n = 32usize;
    let mut g = c.benchmark_group("episode_generation");
    g.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
        b.iter(|| {
            exec::map_sequential(n, |i| {
                simulate_episode(&profile, &env, 7, i as u32).unwrap().len()
            })
        })
    });
    #[cfg(feature = "parallel")]
    g.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| {
        b.iter(|| {
            exec::map_parallel(n, |i| {
                simulate_episode(&profile, &env, 7, i as u32).unwrap().len()
            })
        })
    });
    g.finish();
}

fn bench_meta_gradient(c: &mut Criterion) {
    let data = make_dataset(5);
    let hyper = HyperParams {
        batch_size: 32,
        hidden: 16,
        embed: 8,
        adapt_steps: 5,
        ..HyperParams::default()
    };
    let cfg = uamp_core::model::ModelConfig::new(data.users[0].dims, 16, 8, true, true);
    let params = uamp_core::model::SharedParams::init(cfg, 3).unwrap();
    let variant = MetaVariant { use_init_net: true, lambda1: 1.0, lambda2: 0.1 };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batches: Vec<SupportQueryBatch> = data
        .users
        .iter()
        .map(|u| sample_support_query(u, hyper.batch_size, &mut rng).unwrap())
        .collect();

    // runs on rayon when the parallel feature (default) is active
    c.bench_function("meta_gradient/5users_as_compiled", |b| {
        b.iter(|| meta_gradient(&params, &batches, variant, &hyper).unwrap())
    });
}

fn bench_evaluation_draws(c: &mut Criterion) {
    let data = make_dataset(6);
    let hyper = HyperParams {
        iterations: 5,
        batch_size: 16,
        users_per_update: 3,
        hidden: 16,
        embed: 8,
        adapt_steps: 5,
        ..HyperParams::default()
    };
    let model = train(LearnerKind::Cavia, &data, &hyper).unwrap().model;
    let n = data.n_users();
    let mut g = c.benchmark_group("evaluation_users");
    g.bench_function("sequential", |b| {
        b.iter(|| {
            exec::map_sequential(n, |u| {
                adapt_and_evaluate(&model, &data.users[u], 16, 4, true, 5).unwrap().mse
            })
        })
    });
    #[cfg(feature = "parallel")]
    g.bench_function("parallel", |b| {
        b.iter(|| {
            exec::map_parallel(n, |u| {
                adapt_and_evaluate(&model, &data.users[u], 16, 4, true, 5).unwrap().mse
            })
        })
    });
    g.finish();
}

criterion_group!(
    name = benches;
    config = Criterion::default()
        .warm_up_time(Duration::from_millis(500))
        .measurement_time(Duration::from_secs(3))
        .sample_size(10);
    targets = bench_episode_generation, bench_meta_gradient, bench_evaluation_draws
);
criterion_main!(benches);
