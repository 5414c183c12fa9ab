//! Training entry point for every learner kind.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::{load_checkpoint, save_checkpoint};
use crate::autodiff::Optimizer;
use crate::data::{sample_support_query, Batch, InteractionSample, MetaDataset, SupportQueryBatch};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SharedParams};
use crate::seeds;

use super::baselines::{self, AdaptScope};
use super::proposed::{self, MetaVariant};
use super::{HyperParams, LearnerKind};

const TRAIN_STREAM: u64 = 0x7472_6169;

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub meta_loss: f64,
    pub query_term: f64,
    pub init_term: f64,
    pub bias_term: f64,
}

impl LogRecord {
    pub fn to_line(self) -> String {
        format!(
            "iter={} meta_loss={:.9e} query={:.9e} l1={:.9e} l2={:.9e}",
            self.iteration, self.meta_loss, self.query_term, self.init_term, self.bias_term
        )
    }
}

/// A trained model: the learner kind, its settings and (for every kind but
/// zero-velocity) the shared parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub kind: LearnerKind,
    pub hyper: HyperParams,
    pub params: Option<SharedParams>,
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = format!("kind = {}\n", self.kind.name());
        meta.push_str(&self.hyper.to_meta());
        match &self.params {
            Some(p) => {
                meta.push_str(&p.config.to_meta());
                let named = p.named_tensors();
                save_checkpoint(path, &named, &meta)
            }
            None => save_checkpoint(path, &[], &meta),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = load_checkpoint(path)?;
        let kind_name = meta
            .lines()
            .find_map(|l| {
                let (k, v) = l.split_once('=')?;
                (k.trim() == "kind").then(|| v.trim().to_string())
            })
            .ok_or_else(|| Error::Config("checkpoint metadata missing 'kind'".to_string()))?;
        let kind = LearnerKind::parse(&kind_name)?;
        let hyper = HyperParams::from_meta(&meta)?;
        let params = if tensors.is_empty() {
            None
        } else {
            Some(SharedParams::from_named(tensors, ModelConfig::from_meta(&meta)?, path)?)
        };
        Ok(TrainedModel { kind, hyper, params })
    }
}

/// Trained model plus its training log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: Vec<LogRecord>,
}

/// Train `kind` on the meta-train pool.
pub fn train(kind: LearnerKind, data: &MetaDataset, hyper: &HyperParams) -> Result<TrainOutcome> {
    train_logged(kind, data, hyper, None, None)
}

/// Train with an optional line-oriented log file and periodic checkpoints
/// (`hyper.checkpoint_every` iterations, into `ckpt_dir`).
pub fn train_logged(
    kind: LearnerKind,
    data: &MetaDataset,
    hyper: &HyperParams,
    log_file: Option<&Path>,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    let mut log_writer = match log_file {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };

    if kind == LearnerKind::ZeroVelocity {
        let model = TrainedModel { kind, hyper: hyper.clone(), params: None };
        return Ok(TrainOutcome { model, log: Vec::new() });
    }

    if data.n_users() == 0 {
        return Err(Error::InsufficientUsers { needed: 1, got: 0 });
    }
    let dims = data.users[0].dims;
    let config = ModelConfig::new(dims, hyper.hidden, hyper.embed, kind.uses_embedding(), kind.uses_init_net());
    let mut params = SharedParams::init(config, hyper.seed)?;

    // the bias-reduction ablation trains each meta-update on a single user
    let users_per_update = if kind == LearnerKind::ProposedNoBiasReduction {
        1
    } else {
        hyper.users_per_update
    };
    if kind.is_meta() && data.n_users() < users_per_update {
        return Err(Error::InsufficientUsers { needed: users_per_update, got: data.n_users() });
    }

    let variant = match kind {
        LearnerKind::Proposed => {
            Some(MetaVariant { use_init_net: true, lambda1: hyper.lambda1, lambda2: hyper.lambda2 })
        }
        LearnerKind::ProposedNoUeInit => {
            Some(MetaVariant { use_init_net: false, lambda1: 0.0, lambda2: hyper.lambda2 })
        }
        LearnerKind::ProposedNoBiasReduction => {
            Some(MetaVariant { use_init_net: true, lambda1: hyper.lambda1, lambda2: 0.0 })
        }
        LearnerKind::Cavia => Some(MetaVariant { use_init_net: false, lambda1: 0.0, lambda2: 0.0 }),
        _ => None,
    };

    let mut optimizer = Optimizer::adam(hyper.beta);
    let mut log = Vec::new();

    for iter in 0..hyper.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(&[hyper.seed, TRAIN_STREAM, iter as u64]));
        let record = match kind {
            LearnerKind::Proposed
            | LearnerKind::ProposedNoUeInit
            | LearnerKind::ProposedNoBiasReduction
            | LearnerKind::Cavia => {
                let batches = draw_user_batches(data, users_per_update, hyper.batch_size, &mut rng)?;
                let terms =
                    proposed::meta_update(&mut params, &mut optimizer, &batches, variant.unwrap(), hyper)
                        .map_err(|e| at_iter(e, iter))?;
                LogRecord {
                    iteration: iter,
                    meta_loss: terms.total,
                    query_term: terms.query,
                    init_term: terms.init_penalty,
                    bias_term: terms.bias_penalty,
                }
            }
            LearnerKind::Maml | LearnerKind::Anil => {
                let scope =
                    if kind == LearnerKind::Maml { AdaptScope::All } else { AdaptScope::LastLayer };
                let batches = draw_user_batches(data, users_per_update, hyper.batch_size, &mut rng)?;
                let (outer_loss, grads) =
                    baselines::maml_family_gradient(&params, &batches, scope, hyper)
                        .map_err(|e| at_iter(e, iter))?;
                if !outer_loss.is_finite() {
                    return Err(Error::Divergence {
                        iter,
                        detail: "non-finite outer loss".to_string(),
                    });
                }
                let mut slots = params.tensors_mut();
                optimizer.step(&mut slots, &grads).map_err(|e| at_iter(e, iter))?;
                LogRecord {
                    iteration: iter,
                    meta_loss: outer_loss,
                    query_term: outer_loss,
                    init_term: 0.0,
                    bias_term: 0.0,
                }
            }
            LearnerKind::Reptile => {
                let batches = draw_user_batches(data, users_per_update, hyper.batch_size, &mut rng)?;
                let supports: Vec<Batch> = batches.into_iter().map(|b| b.support).collect();
                let (loss, mean_delta) = baselines::reptile_mean_delta(&params, &supports, hyper)
                    .map_err(|e| at_iter(e, iter))?;
                baselines::reptile_apply(&mut params, &mean_delta, hyper.beta)
                    .map_err(|e| at_iter(e, iter))?;
                LogRecord {
                    iteration: iter,
                    meta_loss: loss,
                    query_term: loss,
                    init_term: 0.0,
                    bias_term: 0.0,
                }
            }
            LearnerKind::SupervisedFixed | LearnerKind::SupervisedFinetuned => {
                let batch = draw_pooled_batch(
                    data,
                    hyper.users_per_update * hyper.batch_size,
                    &mut rng,
                )?;
                let loss = baselines::supervised_step(&mut params, &mut optimizer, &batch)
                    .map_err(|e| at_iter(e, iter))?;
                LogRecord {
                    iteration: iter,
                    meta_loss: loss,
                    query_term: loss,
                    init_term: 0.0,
                    bias_term: 0.0,
                }
            }
            LearnerKind::ZeroVelocity => unreachable!("handled above"),
        };

        if !record.meta_loss.is_finite() {
            return Err(Error::Divergence { iter, detail: "non-finite loss".to_string() });
        }
        if hyper.log_every > 0 && (iter % hyper.log_every == 0 || iter + 1 == hyper.iterations) {
            if let Some(w) = &mut log_writer {
                writeln!(w, "{}", record.to_line())?;
            }
            log.push(record);
        }
        if hyper.checkpoint_every > 0 && (iter + 1) % hyper.checkpoint_every == 0 {
            if let Some(dir) = ckpt_dir {
                std::fs::create_dir_all(dir)?;
                let model =
                    TrainedModel { kind, hyper: hyper.clone(), params: Some(params.clone()) };
                model.save(&dir.join(format!("ckpt_{:07}.ckpt", iter + 1)))?;
            }
        }
    }
    if let Some(w) = &mut log_writer {
        w.flush()?;
    }

    let model = TrainedModel { kind, hyper: hyper.clone(), params: Some(params) };
    Ok(TrainOutcome { model, log })
}

fn at_iter(e: Error, iter: usize) -> Error {
    match e {
        Error::NonFinite { context } => {
            Error::Divergence { iter, detail: format!("non-finite value in {}", context) }
        }
        other => other,
    }
}

/// Sample K distinct users, then disjoint support/query batches per user.
fn draw_user_batches(
    data: &MetaDataset,
    k: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SupportQueryBatch>> {
    let mut order: Vec<usize> = (0..data.n_users()).collect();
    order.shuffle(rng);
    order.truncate(k);
    order
        .into_iter()
        .map(|u| sample_support_query(&data.users[u], batch_size, rng))
        .collect()
}

/// Uniform draw over the pooled samples of every train user.
fn draw_pooled_batch(data: &MetaDataset, n: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let totals: Vec<usize> = data.users.iter().map(|u| u.len()).collect();
    let total: usize = totals.iter().sum();
    if total == 0 {
        return Err(Error::EmptyBatch("draw_pooled_batch"));
    }
    let dims = data.users[0].dims;
    let samples: Vec<&InteractionSample> = (0..n)
        .map(|_| {
            let mut idx = rng.gen_range(0..total);
            for (u, &len) in totals.iter().enumerate() {
                if idx < len {
                    return &data.users[u].samples[idx];
                }
                idx -= len;
            }
            unreachable!("index within total")
        })
        .collect();
    Batch::from_samples(&samples, dims)
}
