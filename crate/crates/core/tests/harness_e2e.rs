//! End-to-end harness runs at smoke scale: dataset generation, a small
//! method roster, determinism of the emitted CSV and the no-training path.

use uamp_core::harness::{run_experiment, ExperimentConfig};
use uamp_core::sim::{gen_meta_dataset, EnvConfig, GenConfig};

fn gen_data(dir: &std::path::Path, seed: u64) {
    let cfg = GenConfig {
        n_users: 4,
        episodes_per_user: 4,
        env: EnvConfig { episode_len: 60, ..EnvConfig::default() },
        seed,
        train_users: None,
        csv_export: false,
    };
    gen_meta_dataset(&cfg, dir).unwrap();
}

fn smoke_config(data_dir: &std::path::Path, out_dir: &std::path::Path, methods: &str) -> ExperimentConfig {
    let text = format!(
        r#"
dataset_dir = "{}"
output_dir = "{}"
methods = [{}]
folds = 2
eval_batch_size = 16
eval_draws = 3
seeds = [5]

[hyper]
iterations = 4
batch_size = 8
users_per_update = 2
hidden = 8
embed = 4
adapt_steps = 2
log_every = 2
"#,
        data_dir.display(),
        out_dir.display(),
        methods
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

#[test]
fn zero_velocity_only_run_completes_without_training() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    gen_data(&data_dir, 31);
    let out_dir = tmp.path().join("out");
    let cfg = smoke_config(&data_dir, &out_dir, r#""zero-velocity""#);
    let results = run_experiment(&cfg).unwrap();
    assert_eq!(results.cells.len(), 2); // 2 folds x 1 seed x 1 method
    for cell in &results.cells {
        assert!(cell.error.is_none());
        assert!(cell.mean_mse.is_finite());
        assert!(cell.mean_mse > 0.0);
    }
    assert!(out_dir.join("results.csv").exists());
    assert!(out_dir.join("results.txt").exists());
}

#[test]
fn identical_config_and_seed_give_identical_csv_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    gen_data(&data_dir, 32);

    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    let cfg_a = smoke_config(&data_dir, &out_a, r#""zero-velocity", "cavia""#);
    let cfg_b = smoke_config(&data_dir, &out_b, r#""zero-velocity", "cavia""#);
    run_experiment(&cfg_a).unwrap();
    run_experiment(&cfg_b).unwrap();
    let a = std::fs::read(out_a.join("results.csv")).unwrap();
    let b = std::fs::read(out_b.join("results.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn duplicate_method_entries_produce_the_same_table() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    gen_data(&data_dir, 33);

    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    let cfg_a = smoke_config(&data_dir, &out_a, r#""zero-velocity""#);
    let cfg_b = smoke_config(&data_dir, &out_b, r#""zero-velocity", "zero-velocity""#);
    run_experiment(&cfg_a).unwrap();
    run_experiment(&cfg_b).unwrap();
    let a = std::fs::read(out_a.join("results.csv")).unwrap();
    let b = std::fs::read(out_b.join("results.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn proposed_cell_trains_and_saves_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    gen_data(&data_dir, 34);
    let out_dir = tmp.path().join("out");
    let cfg = smoke_config(&data_dir, &out_dir, r#""proposed""#);
    let results = run_experiment(&cfg).unwrap();
    for cell in &results.cells {
        assert!(cell.error.is_none(), "{:?}", cell.error);
    }
    let cell_dir = out_dir.join("cells").join("proposed_fold0_seed5");
    assert!(cell_dir.join("model.ckpt").exists());
    let log = std::fs::read_to_string(cell_dir.join("train.log")).unwrap();
    assert!(log.lines().count() >= 2);
    assert!(log.lines().all(|l| l.starts_with("iter=")));

    // the saved model loads and carries the embedding machinery
    let model = uamp_core::meta::TrainedModel::load(&cell_dir.join("model.ckpt")).unwrap();
    assert_eq!(model.kind, uamp_core::meta::LearnerKind::Proposed);
    assert!(model.params.unwrap().ue_encoder.is_some());
}
