//! Baseline learners: MAML and ANIL (gradient steps on network parameters,
//! differentiated through at training time), Reptile's parameter
//! interpolation, and plain supervised training.

use crate::autodiff::{Graph, Optimizer, Tensor};
use crate::data::{Batch, SupportQueryBatch};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::net::{self, BatchNodes};
use crate::model::{SharedNodes, SharedParams};

use super::HyperParams;

/// Which parameters the inner loop updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptScope {
    /// Every shared parameter (MAML, and fine-tuning at evaluation).
    All,
    /// Only the final prediction layer (ANIL).
    LastLayer,
}

/// Run `steps` gradient-descent updates of the scoped parameters against the
/// support loss, inside the given graph. With `track` the produced parameter
/// nodes stay differentiable w.r.t. the originals.
pub fn adapt_shared(
    g: &mut Graph,
    base: &SharedNodes,
    scope: AdaptScope,
    support: &BatchNodes,
    alpha: f64,
    decay: f64,
    steps: usize,
    track: bool,
) -> Result<SharedNodes> {
    let mut current = base.clone();
    let mut rate = alpha;
    for _ in 0..steps {
        let loss = net::regression_loss(g, &current, None, support)?;
        let ids = match scope {
            AdaptScope::All => current.flat(),
            AdaptScope::LastLayer => current.last_layer(),
        };
        let grads = g.backward(loss, &ids, track)?;
        let mut updated = Vec::with_capacity(ids.len());
        for (p, gr) in ids.iter().zip(&grads) {
            let step = g.scale(*gr, rate);
            updated.push(g.sub(*p, step)?);
        }
        current = match scope {
            AdaptScope::All => current.with_flat(&updated),
            AdaptScope::LastLayer => current.with_last_layer(&updated),
        };
        rate *= decay;
    }
    Ok(current)
}

/// Outer gradient of the MAML/ANIL objective
/// `(1/K) sum_i L(theta'_i; qry_i)` w.r.t. the base parameters,
/// differentiating through the inner steps unless `hyper.first_order`.
pub fn maml_family_gradient(
    params: &SharedParams,
    batches: &[SupportQueryBatch],
    scope: AdaptScope,
    hyper: &HyperParams,
) -> Result<(f64, Vec<Tensor>)> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch("maml_family_gradient"));
    }
    let k = batches.len() as f64;
    let shares = exec::map_indexed(batches.len(), |i| -> Result<(f64, Vec<Tensor>)> {
        let batch = &batches[i];
        let mut g = Graph::new();
        let theta = params.insert(&mut g);
        let spt = BatchNodes::insert(&mut g, &batch.support);
        let qry = BatchNodes::insert(&mut g, &batch.query);
        let adapted = adapt_shared(
            &mut g,
            &theta,
            scope,
            &spt,
            hyper.alpha,
            hyper.decay,
            hyper.adapt_steps,
            !hyper.first_order,
        )?;
        let query_loss = net::regression_loss(&mut g, &adapted, None, &qry)?;
        let value = g.value(query_loss).item();
        let share = g.scale(query_loss, 1.0 / k);
        let grads = g.grad_values(share, &theta.flat())?;
        Ok((value, grads))
    });

    let mut outer_loss = 0.0;
    let mut total: Option<Vec<Tensor>> = None;
    for share in shares {
        let (value, grads) = share?;
        outer_loss += value / k;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, gr) in acc.iter_mut().zip(&grads) {
                    for (av, gv) in a.data_mut().iter_mut().zip(gr.data()) {
                        *av += gv;
                    }
                }
            }
        }
    }
    Ok((outer_loss, total.expect("at least one user")))
}

/// Per-user inner trajectories for Reptile: `steps` plain SGD updates of a
/// parameter copy on the user batch. Returns the mean parameter displacement
/// `mean_i(theta'_i - theta)` and the mean final support loss.
pub fn reptile_mean_delta(
    params: &SharedParams,
    user_batches: &[Batch],
    hyper: &HyperParams,
) -> Result<(f64, Vec<Tensor>)> {
    if user_batches.is_empty() {
        return Err(Error::EmptyBatch("reptile_mean_delta"));
    }
    let k = user_batches.len() as f64;
    let runs = exec::map_indexed(user_batches.len(), |i| -> Result<(f64, Vec<Tensor>)> {
        let mut working = params.clone();
        let mut opt = Optimizer::sgd(hyper.alpha);
        let mut last_loss = 0.0;
        for _ in 0..hyper.adapt_steps {
            let mut g = Graph::new();
            let theta = working.insert(&mut g);
            let nodes = BatchNodes::insert(&mut g, &user_batches[i]);
            let loss = net::regression_loss(&mut g, &theta, None, &nodes)?;
            last_loss = g.value(loss).item();
            let grads = g.grad_values(loss, &theta.flat())?;
            let mut slots = working.tensors_mut();
            opt.step(&mut slots, &grads)?;
        }
        let deltas: Vec<Tensor> = working
            .named_tensors()
            .iter()
            .zip(params.named_tensors())
            .map(|((_, after), (_, before))| {
                let data: Vec<f64> =
                    after.data().iter().zip(before.data()).map(|(a, b)| a - b).collect();
                Tensor::new(after.shape().to_vec(), data).expect("same shape")
            })
            .collect();
        Ok((last_loss, deltas))
    });

    let mut mean_loss = 0.0;
    let mut mean: Option<Vec<Tensor>> = None;
    for run in runs {
        let (loss, deltas) = run?;
        mean_loss += loss / k;
        match &mut mean {
            None => {
                let mut scaled = deltas;
                for t in scaled.iter_mut() {
                    for v in t.data_mut() {
                        *v /= k;
                    }
                }
                mean = Some(scaled);
            }
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(&deltas) {
                    for (av, dv) in a.data_mut().iter_mut().zip(d.data()) {
                        *av += dv / k;
                    }
                }
            }
        }
    }
    Ok((mean_loss, mean.expect("at least one user")))
}

/// Apply the Reptile interpolation `theta <- theta + beta * mean_delta`.
pub fn reptile_apply(params: &mut SharedParams, mean_delta: &[Tensor], beta: f64) -> Result<()> {
    let mut slots = params.tensors_mut();
    if slots.len() != mean_delta.len() {
        return Err(Error::ShapeMismatch {
            op: "reptile_apply",
            detail: format!("{} params vs {} deltas", slots.len(), mean_delta.len()),
        });
    }
    for (p, d) in slots.iter_mut().zip(mean_delta) {
        d.ensure_finite("reptile delta")?;
        for (pv, dv) in p.data_mut().iter_mut().zip(d.data()) {
            *pv += beta * dv;
        }
    }
    Ok(())
}

/// One supervised mini-batch Adam step; returns the batch loss.
pub fn supervised_step(
    params: &mut SharedParams,
    optimizer: &mut Optimizer,
    batch: &Batch,
) -> Result<f64> {
    let mut g = Graph::new();
    let theta = params.insert(&mut g);
    let nodes = BatchNodes::insert(&mut g, batch);
    let loss = net::regression_loss(&mut g, &theta, None, &nodes)?;
    let value = g.value(loss).item();
    let grads = g.grad_values(loss, &theta.flat())?;
    let mut slots = params.tensors_mut();
    optimizer.step(&mut slots, &grads)?;
    Ok(value)
}
