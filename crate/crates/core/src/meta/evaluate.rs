//! Adaptation + evaluation of a trained model on a held-out user. The
//! shared parameters are never mutated here: adaptation happens on graph
//! nodes or embedding buffers owned by the draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::data::{
    sample_episode_split, sample_support_query, InteractionSample, SupportQueryBatch, UserDataset,
};
use crate::error::{Error, Result};
use crate::model::net::{self, BatchNodes};
use crate::seeds;

use super::baselines::{adapt_shared, AdaptScope};
use super::proposed::adapt_ue;
use super::{LearnerKind, TrainedModel};

const EVAL_STREAM: u64 = 0x6576_616c;

/// Per-draw query errors of one user evaluation.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// Mean over draws.
    pub mse: f64,
    pub per_draw: Vec<f64>,
}

/// MSE of predicting that the user maintains the previous action
/// (`y_hat = x_h`).
pub fn zero_velocity_mse(samples: &[&InteractionSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch("zero_velocity_mse"));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for s in samples {
        for (h, y) in s.x_h.iter().zip(&s.y) {
            let d = h - y;
            acc += d * d;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Run the model's adaptation on a support batch and score the query batch.
/// With `episode_split` the support and query come from disjoint episode-id
/// sets (asserted); otherwise they are disjoint index draws. Each of the
/// `draws` evaluations is independent and the returned MSE is their mean.
pub fn adapt_and_evaluate(
    model: &TrainedModel,
    user: &UserDataset,
    batch_size: usize,
    draws: usize,
    episode_split: bool,
    seed: u64,
) -> Result<EvalOutcome> {
    if draws == 0 {
        return Err(Error::Config("need at least one evaluation draw".to_string()));
    }
    let mut per_draw = Vec::with_capacity(draws);
    for draw in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(&[
            seed,
            EVAL_STREAM,
            user.user_id as u64,
            draw as u64,
        ]));
        let batch = if episode_split {
            let (batch, spt_eps, qry_eps) = sample_episode_split(user, batch_size, &mut rng)?;
            assert!(
                spt_eps.is_disjoint(&qry_eps),
                "support and query episodes overlap at evaluation"
            );
            batch
        } else {
            sample_support_query(user, batch_size, &mut rng)?
        };
        per_draw.push(evaluate_one(model, &batch)?);
    }
    let mse = per_draw.iter().sum::<f64>() / draws as f64;
    Ok(EvalOutcome { mse, per_draw })
}

fn evaluate_one(model: &TrainedModel, batch: &SupportQueryBatch) -> Result<f64> {
    let hyper = &model.hyper;
    match model.kind {
        LearnerKind::ZeroVelocity => {
            let q = &batch.query;
            let mut acc = 0.0;
            let mut count = 0;
            for i in 0..q.len() {
                for j in 0..q.y.cols() {
                    let d = q.x_h.get(i, j) - q.y.get(i, j);
                    acc += d * d;
                    count += 1;
                }
            }
            Ok(acc / count as f64)
        }
        LearnerKind::SupervisedFixed => {
            let params = model.params.as_ref().ok_or_else(|| missing_params(model.kind))?;
            net::regression_loss_value(params, None, &batch.query)
        }
        LearnerKind::Proposed
        | LearnerKind::ProposedNoUeInit
        | LearnerKind::ProposedNoBiasReduction
        | LearnerKind::Cavia => {
            let params = model.params.as_ref().ok_or_else(|| missing_params(model.kind))?;
            let mut g = Graph::new();
            let theta = params.insert(&mut g);
            let spt = BatchNodes::insert(&mut g, &batch.support);
            let qry = BatchNodes::insert(&mut g, &batch.query);
            let phi0 = if model.kind.uses_init_net() {
                net::init_embedding(&mut g, &theta, &spt)?
            } else {
                g.leaf(Tensor::zeros(&[1, params.config.embed]))
            };
            let (phi, _) = adapt_ue(
                &mut g,
                &theta,
                phi0,
                &spt,
                hyper.alpha_eval,
                hyper.decay,
                hyper.adapt_steps,
                false,
            )?;
            let loss = net::regression_loss(&mut g, &theta, Some(phi), &qry)?;
            Ok(g.value(loss).item())
        }
        LearnerKind::Maml | LearnerKind::Reptile | LearnerKind::SupervisedFinetuned | LearnerKind::Anil => {
            let params = model.params.as_ref().ok_or_else(|| missing_params(model.kind))?;
            let scope =
                if model.kind == LearnerKind::Anil { AdaptScope::LastLayer } else { AdaptScope::All };
            let mut g = Graph::new();
            let theta = params.insert(&mut g);
            let spt = BatchNodes::insert(&mut g, &batch.support);
            let qry = BatchNodes::insert(&mut g, &batch.query);
            let adapted = adapt_shared(
                &mut g,
                &theta,
                scope,
                &spt,
                hyper.alpha_eval,
                hyper.decay,
                hyper.adapt_steps,
                false,
            )?;
            let loss = net::regression_loss(&mut g, &adapted, None, &qry)?;
            Ok(g.value(loss).item())
        }
    }
}

fn missing_params(kind: LearnerKind) -> Error {
    Error::Config(format!("{} model has no parameters", kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dims, MetaDataset};
    use crate::meta::{train, HyperParams};
    use crate::sim::{gen_raw_users, EnvConfig, NormalizationStats, UserProfile};
    use rand::SeedableRng;

    fn tiny_meta_dataset(n_users: usize, episodes: usize) -> MetaDataset {
        let profiles: Vec<UserProfile> = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..n_users).map(|_| UserProfile::sample(&mut rng)).collect()
        };
        let env = EnvConfig { episode_len: 50, ..EnvConfig::default() };
        let raw = gen_raw_users(&profiles, &env, 19, episodes).unwrap();
        let stats = NormalizationStats::compute(&raw, raw[0].dims).unwrap();
        let users = raw
            .into_iter()
            .map(|u| crate::data::UserDataset {
                user_id: u.user_id,
                dims: u.dims,
                samples: u.samples.iter().map(|s| stats.normalize_sample(s)).collect(),
            })
            .collect();
        MetaDataset { users }
    }

    fn smoke_hyper() -> HyperParams {
        HyperParams {
            iterations: 2,
            batch_size: 8,
            users_per_update: 2,
            hidden: 8,
            embed: 4,
            adapt_steps: 2,
            ..HyperParams::default()
        }
    }

    #[test]
    fn theta_is_bit_identical_across_evaluation() {
        let data = tiny_meta_dataset(3, 3);
        for kind in [
            LearnerKind::Proposed,
            LearnerKind::Cavia,
            LearnerKind::Maml,
            LearnerKind::Anil,
            LearnerKind::Reptile,
            LearnerKind::SupervisedFinetuned,
        ] {
            let mut hyper = HyperParams::defaults_for(kind);
            let smoke = smoke_hyper();
            hyper.iterations = smoke.iterations;
            hyper.batch_size = smoke.batch_size;
            hyper.users_per_update = smoke.users_per_update;
            hyper.hidden = smoke.hidden;
            hyper.embed = smoke.embed;
            hyper.adapt_steps = smoke.adapt_steps;
            let out = train(kind, &data, &hyper).unwrap();
            let before = out.model.params.clone();
            adapt_and_evaluate(&out.model, &data.users[2], 8, 3, true, 7).unwrap();
            assert_eq!(out.model.params, before, "{} mutated theta at evaluation", kind);
        }
    }

    #[test]
    fn zero_velocity_is_exact_on_constant_action_user() {
        let dims = Dims { state: 3, robot: 2, action: 2 };
        let samples: Vec<InteractionSample> = (0..40)
            .map(|i| InteractionSample {
                x_s: vec![0.0, 0.0, 0.0],
                x_r: vec![0.0, 0.0],
                x_h: vec![0.25, -0.5],
                y: vec![0.25, -0.5],
                episode_id: i / 20,
                timestep: i % 20,
            })
            .collect();
        let user = UserDataset { user_id: 0, dims, samples };
        let model = TrainedModel {
            kind: LearnerKind::ZeroVelocity,
            hyper: HyperParams::defaults_for(LearnerKind::ZeroVelocity),
            params: None,
        };
        let out = adapt_and_evaluate(&model, &user, 8, 2, true, 3).unwrap();
        assert_eq!(out.mse, 0.0);
    }

    #[test]
    fn zero_velocity_mse_matches_definition() {
        let s = InteractionSample {
            x_s: vec![0.0],
            x_r: vec![0.0, 0.0],
            x_h: vec![0.0, 0.0],
            y: vec![0.1, -0.1],
            episode_id: 0,
            timestep: 0,
        };
        let mse = zero_velocity_mse(&[&s]).unwrap();
        assert!((mse - 0.01).abs() < 1e-15);
        assert!(zero_velocity_mse(&[]).is_err());
    }

    #[test]
    fn fixed_supervised_ignores_the_support_batch() {
        let data = tiny_meta_dataset(3, 3);
        let hyper = smoke_hyper();
        let out = train(LearnerKind::SupervisedFixed, &data, &hyper).unwrap();
        // same query draws, different adaptation seeds: identical MSE
        let a = adapt_and_evaluate(&out.model, &data.users[2], 8, 3, true, 11).unwrap();
        let b = adapt_and_evaluate(&out.model, &data.users[2], 8, 3, true, 11).unwrap();
        assert_eq!(a.per_draw, b.per_draw);
    }

    #[test]
    fn episode_split_requires_two_episodes() {
        let data = tiny_meta_dataset(2, 1);
        let model = TrainedModel {
            kind: LearnerKind::ZeroVelocity,
            hyper: HyperParams::defaults_for(LearnerKind::ZeroVelocity),
            params: None,
        };
        assert!(matches!(
            adapt_and_evaluate(&model, &data.users[0], 8, 1, true, 0),
            Err(Error::InsufficientEpisodes { .. })
        ));
    }

    #[test]
    fn evaluation_is_seed_deterministic() {
        let data = tiny_meta_dataset(3, 3);
        let hyper = smoke_hyper();
        let out = train(LearnerKind::Proposed, &data, &hyper).unwrap();
        let a = adapt_and_evaluate(&out.model, &data.users[1], 8, 4, true, 21).unwrap();
        let b = adapt_and_evaluate(&out.model, &data.users[1], 8, 4, true, 21).unwrap();
        assert_eq!(a.per_draw, b.per_draw);
        let c = adapt_and_evaluate(&out.model, &data.users[1], 8, 4, true, 22).unwrap();
        assert_ne!(a.per_draw, c.per_draw);
    }
}
