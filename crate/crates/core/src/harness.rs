//! Experiment harness: k-fold cross-validation over users, episode-split
//! evaluation and a per-method results table, driven by one TOML config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::data::load_meta_dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::meta::{adapt_and_evaluate, train_logged, HyperParams, LearnerKind};
use crate::seeds;

const CELL_STREAM: u64 = 0x6365_6c6c;

/// Optional per-field overrides applied on top of a kind's defaults.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HyperOverrides {
    pub alpha: Option<f64>,
    pub alpha_eval: Option<f64>,
    pub beta: Option<f64>,
    pub decay: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub users_per_update: Option<usize>,
    pub batch_size: Option<usize>,
    pub embed: Option<usize>,
    pub adapt_steps: Option<usize>,
    pub iterations: Option<usize>,
    pub first_order: Option<bool>,
    pub hidden: Option<usize>,
    pub log_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

impl HyperOverrides {
    pub fn apply(&self, h: &mut HyperParams) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { h.$field = v; })*
            };
        }
        set!(
            alpha, alpha_eval, beta, decay, lambda1, lambda2, users_per_update, batch_size,
            embed, adapt_steps, iterations, first_order, hidden, log_every, checkpoint_every
        );
    }
}

/// The experiment definition, normally parsed from a TOML file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub methods: Vec<LearnerKind>,
    pub folds: usize,
    pub eval_batch_size: usize,
    #[serde(default = "default_eval_draws")]
    pub eval_draws: usize,
    pub seeds: Vec<u64>,
    /// Warn when a single cell exceeds this wall-clock budget.
    #[serde(default)]
    pub cell_time_limit_secs: Option<u64>,
    /// Overrides applied to every method.
    #[serde(default)]
    pub hyper: HyperOverrides,
    /// Per-method overrides (keyed by kind name), applied after `hyper`.
    #[serde(default)]
    pub method_hyper: BTreeMap<String, HyperOverrides>,
    /// Save trained models under `output_dir/cells`.
    #[serde(default = "default_true")]
    pub save_checkpoints: bool,
}

fn default_eval_draws() -> usize {
    10
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("folds must be >= 2".to_string()));
        }
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("need at least one method and one seed".to_string()));
        }
        for key in self.method_hyper.keys() {
            LearnerKind::parse(key)?;
        }
        Ok(())
    }

    /// Methods with duplicates removed, first occurrence order kept.
    pub fn unique_methods(&self) -> Vec<LearnerKind> {
        let mut seen = Vec::new();
        for &m in &self.methods {
            if !seen.contains(&m) {
                seen.push(m);
            }
        }
        seen
    }

    pub fn hyper_for(&self, kind: LearnerKind) -> HyperParams {
        let mut h = HyperParams::defaults_for(kind);
        self.hyper.apply(&mut h);
        if let Some(o) = self.method_hyper.get(kind.name()) {
            o.apply(&mut h);
        }
        h
    }
}

/// Shuffle user ids by seed and partition them into `k` disjoint folds whose
/// sizes differ by at most one. Returns `(train, test)` per fold.
pub fn kfold_split(user_ids: &[usize], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k > user_ids.len() {
        return Err(Error::Config(format!("{} folds but only {} users", k, user_ids.len())));
    }
    if k < 2 {
        return Err(Error::Config("folds must be >= 2".to_string()));
    }
    let mut order = user_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(&[seed, 0x666f_6c64]));
    order.shuffle(&mut rng);

    let base = order.len() / k;
    let extra = order.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let test: Vec<usize> = order[start..start + size].to_vec();
        let train: Vec<usize> =
            order.iter().copied().filter(|u| !test.contains(u)).collect();
        assert!(
            test.iter().all(|u| !train.contains(u)),
            "train/test user overlap in fold {}",
            fold
        );
        folds.push((train, test));
        start += size;
    }
    Ok(folds)
}

/// One (method, fold, seed) training + evaluation cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub method: LearnerKind,
    pub fold: usize,
    pub seed: u64,
    /// Query MSE per evaluation draw, pooled over the fold's test users.
    pub draw_mses: Vec<f64>,
    pub mean_mse: f64,
    pub runtime_secs: f64,
    /// Training failure recorded instead of aborting the run.
    pub error: Option<String>,
}

/// One row of the results table: a (method, fold) pair aggregated over seeds.
#[derive(Debug, Clone)]
pub struct ResultsRow {
    pub method: LearnerKind,
    pub fold: usize,
    pub mean_mse: f64,
    pub std_over_draws: f64,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ResultsTable {
    pub rows: Vec<ResultsRow>,
    /// Per-method mean over folds.
    pub aggregates: Vec<(LearnerKind, f64)>,
}

impl ResultsTable {
    fn from_cells(methods: &[LearnerKind], folds: usize, cells: &[CellResult]) -> ResultsTable {
        let mut rows = Vec::new();
        for &method in methods {
            for fold in 0..folds {
                let group: Vec<&CellResult> = cells
                    .iter()
                    .filter(|c| c.method == method && c.fold == fold && c.error.is_none())
                    .collect();
                if group.is_empty() {
                    rows.push(ResultsRow {
                        method,
                        fold,
                        mean_mse: f64::NAN,
                        std_over_draws: f64::NAN,
                        runtime_secs: cells
                            .iter()
                            .filter(|c| c.method == method && c.fold == fold)
                            .map(|c| c.runtime_secs)
                            .sum(),
                    });
                    continue;
                }
                let mean_mse =
                    group.iter().map(|c| c.mean_mse).sum::<f64>() / group.len() as f64;
                let draws: Vec<f64> =
                    group.iter().flat_map(|c| c.draw_mses.iter().copied()).collect();
                let dmean = draws.iter().sum::<f64>() / draws.len() as f64;
                let std = (draws.iter().map(|d| (d - dmean) * (d - dmean)).sum::<f64>()
                    / draws.len() as f64)
                    .sqrt();
                rows.push(ResultsRow {
                    method,
                    fold,
                    mean_mse,
                    std_over_draws: std,
                    runtime_secs: group.iter().map(|c| c.runtime_secs).sum(),
                });
            }
        }
        let aggregates = methods
            .iter()
            .map(|&m| {
                let fold_means: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.method == m && r.mean_mse.is_finite())
                    .map(|r| r.mean_mse)
                    .collect();
                let mean = if fold_means.is_empty() {
                    f64::NAN
                } else {
                    fold_means.iter().sum::<f64>() / fold_means.len() as f64
                };
                (m, mean)
            })
            .collect();
        ResultsTable { rows, aggregates }
    }

    pub fn mean_for(&self, method: LearnerKind) -> Option<f64> {
        self.aggregates.iter().find(|(m, _)| *m == method).map(|(_, v)| *v)
    }

    /// Deterministic CSV: identical config + seed gives identical bytes, so
    /// wall-clock runtime lives only in the human-readable text table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,fold,mean_mse,std_over_draws\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.9e},{:.9e}\n",
                r.method, r.fold, r.mean_mse, r.std_over_draws
            ));
        }
        for (m, v) in &self.aggregates {
            out.push_str(&format!("{},all,{:.9e},\n", m, v));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<28} {:>6} {:>14} {:>14} {:>10}\n", "method", "fold", "mean MSE", "std(draws)", "runtime"));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<28} {:>6} {:>14.6e} {:>14.6e} {:>9.1}s\n",
                r.method.name(),
                r.fold,
                r.mean_mse,
                r.std_over_draws,
                r.runtime_secs
            ));
        }
        out.push('\n');
        for (m, v) in &self.aggregates {
            out.push_str(&format!("{:<28} {:>6} {:>14.6e}\n", m.name(), "all", v));
        }
        out
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct ExperimentResults {
    pub cells: Vec<CellResult>,
    pub table: ResultsTable,
}

/// Train and evaluate every (method, fold, seed) cell, write `results.csv`,
/// `results.txt` and per-cell logs/checkpoints under the output directory.
/// Cells run in parallel; training failures are recorded per cell and the
/// run continues.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResults> {
    config.validate()?;
    let data = load_meta_dataset(&config.dataset_dir)?;
    let user_ids: Vec<usize> = data.users.iter().map(|u| u.user_id).collect();
    if config.folds > user_ids.len() {
        return Err(Error::Config(format!(
            "{} folds but only {} users",
            config.folds,
            user_ids.len()
        )));
    }
    std::fs::create_dir_all(&config.output_dir)?;
    let cells_dir = config.output_dir.join("cells");
    std::fs::create_dir_all(&cells_dir)?;

    let methods = config.unique_methods();
    // cell grid in deterministic order: seed-major, then fold, then method
    let mut grid = Vec::new();
    for &seed in &config.seeds {
        for fold in 0..config.folds {
            for &method in &methods {
                grid.push((seed, fold, method));
            }
        }
    }

    let cells: Vec<CellResult> = exec::map_indexed(grid.len(), |gi| {
        let (seed, fold, method) = grid[gi];
        run_cell(config, &data, &user_ids, seed, fold, method, &cells_dir)
    });

    let table = ResultsTable::from_cells(&methods, config.folds, &cells);
    std::fs::write(config.output_dir.join("results.csv"), table.to_csv())?;
    std::fs::write(config.output_dir.join("results.txt"), table.to_text())?;
    Ok(ExperimentResults { cells, table })
}

fn run_cell(
    config: &ExperimentConfig,
    data: &crate::data::MetaDataset,
    user_ids: &[usize],
    seed: u64,
    fold: usize,
    method: LearnerKind,
    cells_dir: &Path,
) -> CellResult {
    let start = Instant::now();
    let mut cell = CellResult {
        method,
        fold,
        seed,
        draw_mses: Vec::new(),
        mean_mse: f64::NAN,
        runtime_secs: 0.0,
        error: None,
    };

    let outcome = (|| -> Result<Vec<f64>> {
        let folds = kfold_split(user_ids, config.folds, seed)?;
        let (train_ids, test_ids) = &folds[fold];
        // no test leakage, asserted at runtime
        assert!(
            train_ids.iter().all(|u| !test_ids.contains(u)),
            "train/test overlap in fold {}",
            fold
        );
        let train_data = data.by_ids(train_ids);

        let mut hyper = config.hyper_for(method);
        let method_index =
            LearnerKind::ALL.iter().position(|k| *k == method).expect("known kind") as u64;
        hyper.seed = seeds::mix(&[seed, CELL_STREAM, fold as u64, method_index]);

        let cell_dir = cells_dir.join(format!("{}_fold{}_seed{}", method.name(), fold, seed));
        std::fs::create_dir_all(&cell_dir)?;
        let log_path = cell_dir.join("train.log");
        let outcome =
            train_logged(method, &train_data, &hyper, Some(&log_path), Some(&cell_dir))?;
        if config.save_checkpoints {
            outcome.model.save(&cell_dir.join("model.ckpt"))?;
        }

        let mut draw_mses = Vec::new();
        for &uid in test_ids {
            let user = data.users.iter().find(|u| u.user_id == uid).expect("test user present");
            let eval = adapt_and_evaluate(
                &outcome.model,
                user,
                config.eval_batch_size,
                config.eval_draws,
                true,
                hyper.seed,
            )?;
            draw_mses.extend(eval.per_draw);
        }
        Ok(draw_mses)
    })();

    match outcome {
        Ok(draws) => {
            cell.mean_mse = draws.iter().sum::<f64>() / draws.len() as f64;
            cell.draw_mses = draws;
        }
        Err(e) => cell.error = Some(e.to_string()),
    }
    cell.runtime_secs = start.elapsed().as_secs_f64();
    if let Some(limit) = config.cell_time_limit_secs {
        if cell.runtime_secs > limit as f64 {
            eprintln!(
                "warning: cell {} fold {} seed {} took {:.0}s (limit {}s)",
                method, fold, seed, cell.runtime_secs, limit
            );
        }
    }
    cell
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn kfold_partitions_users() {
        let ids: Vec<usize> = (0..20).collect();
        let folds = kfold_split(&ids, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = BTreeSet::new();
        for (train, test) in &folds {
            assert_eq!(test.len(), 4);
            assert_eq!(train.len(), 16);
            for u in test {
                assert!(!train.contains(u));
                assert!(seen.insert(*u), "user {} in two test folds", u);
            }
        }
        assert_eq!(seen.len(), 20);
    }

    #[test]
    fn kfold_leave_one_out() {
        let ids: Vec<usize> = (0..5).collect();
        let folds = kfold_split(&ids, 5, 1).unwrap();
        for (train, test) in &folds {
            assert_eq!(test.len(), 1);
            assert_eq!(train.len(), 4);
        }
    }

    #[test]
    fn kfold_spreads_remainder() {
        let ids: Vec<usize> = (0..11).collect();
        let folds = kfold_split(&ids, 3, 9).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|(_, t)| t.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 11);
        assert!(sizes.iter().all(|&s| s == 3 || s == 4));
    }

    #[test]
    fn kfold_rejects_more_folds_than_users() {
        let ids: Vec<usize> = (0..3).collect();
        assert!(kfold_split(&ids, 4, 0).is_err());
    }

    #[test]
    fn config_parses_with_overrides() {
        let text = r#"
dataset_dir = "/tmp/data"
output_dir = "/tmp/out"
methods = ["zero-velocity", "proposed", "cavia"]
folds = 3
eval_batch_size = 32
seeds = [0, 1]

[hyper]
iterations = 100
hidden = 16

[method_hyper.reptile]
beta = 1.0
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.methods.len(), 3);
        assert_eq!(cfg.eval_draws, 10);
        let h = cfg.hyper_for(LearnerKind::Proposed);
        assert_eq!(h.iterations, 100);
        assert_eq!(h.hidden, 16);
        assert_eq!(h.alpha, 0.05);
        let h = cfg.hyper_for(LearnerKind::Maml);
        assert_eq!(h.alpha, 0.003);
        assert_eq!(h.alpha_eval, 0.01);
        let h = cfg.hyper_for(LearnerKind::Reptile);
        assert_eq!(h.beta, 1.0);
    }

    #[test]
    fn config_rejects_unknown_method_keys() {
        let text = r#"
dataset_dir = "/tmp/data"
output_dir = "/tmp/out"
methods = ["proposed"]
folds = 2
eval_batch_size = 8
seeds = [0]

[method_hyper.not-a-method]
alpha = 0.1
"#;
        assert!(ExperimentConfig::from_toml(text).is_err());
    }

    #[test]
    fn duplicate_methods_collapse_to_one_row_set() {
        let text = r#"
dataset_dir = "/tmp/data"
output_dir = "/tmp/out"
methods = ["zero-velocity", "zero-velocity"]
folds = 2
eval_batch_size = 8
seeds = [0]
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.unique_methods(), vec![LearnerKind::ZeroVelocity]);
    }
}
