//! UE initialization, UE adaptation and the three-term meta-loss, plus the
//! meta-update that differentiates through the adaptation steps.

use crate::autodiff::{Graph, NodeId, Optimizer, Tensor};
use crate::data::SupportQueryBatch;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::net::{self, BatchNodes};
use crate::model::{SharedNodes, SharedParams};

use super::HyperParams;

/// Gradient-descend a vector parameter on an arbitrary scalar loss with a
/// decaying rate. With `track` the updates stay differentiable w.r.t. the
/// starting point and everything the loss depends on; without it the inner
/// gradients are recorded as constants (first-order semantics; the values
/// are identical either way). Returns the adapted node and the loss before
/// each step.
pub fn adapt_with_loss<F>(
    g: &mut Graph,
    start: NodeId,
    alpha: f64,
    decay: f64,
    steps: usize,
    track: bool,
    mut loss_fn: F,
) -> Result<(NodeId, Vec<f64>)>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    if steps == 0 {
        return Err(Error::Config("adaptation needs at least one step".to_string()));
    }
    let mut current = start;
    let mut rate = alpha;
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let loss = loss_fn(g, current)?;
        losses.push(g.value(loss).item());
        let grad = g.backward(loss, &[current], track)?[0];
        g.value(grad).ensure_finite("adaptation gradient")?;
        let step = g.scale(grad, rate);
        current = g.sub(current, step)?;
        rate *= decay;
    }
    Ok((current, losses))
}

/// UE adaptation: gradient steps on the user embedding against the support
/// regression loss, inner rate decaying by `decay` after every step.
pub fn adapt_ue(
    g: &mut Graph,
    theta: &SharedNodes,
    phi0: NodeId,
    support: &BatchNodes,
    alpha: f64,
    decay: f64,
    steps: usize,
    track: bool,
) -> Result<(NodeId, Vec<f64>)> {
    adapt_with_loss(g, phi0, alpha, decay, steps, track, |g, phi| {
        net::regression_loss(g, theta, Some(phi), support)
    })
}

/// One user's contribution to the meta-loss, as graph handles.
#[derive(Debug, Clone, Copy)]
pub struct MetaRecord {
    pub phi0: NodeId,
    pub phi_adapted: NodeId,
    /// Scalar query regression loss.
    pub query_loss: NodeId,
}

/// The three-term meta-loss over per-user records:
/// `(1/K) sum_i [L_qry_i + lambda1 ||stopgrad(phi'_i) - phi_i||^2]
///  + lambda2 ||mean_i phi'_i||^2`.
///
/// Gradients flow through the query losses, through `phi_i` in the second
/// term (the adapted embedding is a constant there) and through `phi'_i` in
/// the third term.
pub fn meta_loss(
    g: &mut Graph,
    records: &[MetaRecord],
    lambda1: f64,
    lambda2: f64,
) -> Result<NodeId> {
    if records.is_empty() {
        return Err(Error::EmptyBatch("meta_loss"));
    }
    let k = records.len() as f64;
    let embed_shape = g.value(records[0].phi0).shape().to_vec();
    for r in records {
        if g.value(r.phi0).shape() != embed_shape || g.value(r.phi_adapted).shape() != embed_shape {
            return Err(Error::ShapeMismatch {
                op: "meta_loss",
                detail: "embedding lengths differ across records".to_string(),
            });
        }
    }

    let mut per_user_sum: Option<NodeId> = None;
    let mut phi_sum: Option<NodeId> = None;
    for r in records {
        let mut term = r.query_loss;
        if lambda1 != 0.0 {
            let frozen = g.detach(r.phi_adapted);
            let diff = g.sub(frozen, r.phi0)?;
            let penalty = g.norm_sq(diff);
            let weighted = g.scale(penalty, lambda1);
            term = g.add(term, weighted)?;
        }
        per_user_sum = Some(match per_user_sum {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
        phi_sum = Some(match phi_sum {
            None => r.phi_adapted,
            Some(acc) => g.add(acc, r.phi_adapted)?,
        });
    }
    let mut total = g.scale(per_user_sum.expect("records non-empty"), 1.0 / k);
    if lambda2 != 0.0 {
        let mean_phi = g.scale(phi_sum.expect("records non-empty"), 1.0 / k);
        let bias = g.norm_sq(mean_phi);
        let weighted = g.scale(bias, lambda2);
        total = g.add(total, weighted)?;
    }
    Ok(total)
}

/// Which embedding-based variant is being trained.
#[derive(Debug, Clone, Copy)]
pub struct MetaVariant {
    /// Initialize the embedding with the initialization network (otherwise
    /// a zero vector).
    pub use_init_net: bool,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Per-term values of one meta-update, for logging.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetaTerms {
    pub total: f64,
    pub query: f64,
    pub init_penalty: f64,
    pub bias_penalty: f64,
}

struct UserPass {
    graph: Graph,
    theta: SharedNodes,
    phi0: NodeId,
    phi_adapted: NodeId,
    query_loss: NodeId,
}

fn user_pass(
    params: &SharedParams,
    batch: &SupportQueryBatch,
    variant: MetaVariant,
    hyper: &HyperParams,
) -> Result<UserPass> {
    let mut g = Graph::new();
    let theta = params.insert(&mut g);
    let spt = BatchNodes::insert(&mut g, &batch.support);
    let qry = BatchNodes::insert(&mut g, &batch.query);
    // the zero-initialized embedding is still the adaptive parameter, so it
    // enters as a trainable leaf
    let phi0 = if variant.use_init_net {
        net::init_embedding(&mut g, &theta, &spt)?
    } else {
        g.leaf(Tensor::zeros(&[1, params.config.embed]))
    };
    let (phi_adapted, _) = adapt_ue(
        &mut g,
        &theta,
        phi0,
        &spt,
        hyper.alpha,
        hyper.decay,
        hyper.adapt_steps,
        !hyper.first_order,
    )?;
    let query_loss = net::regression_loss(&mut g, &theta, Some(phi_adapted), &qry)?;
    Ok(UserPass { graph: g, theta, phi0, phi_adapted, query_loss })
}

fn build_records(
    g: &mut Graph,
    theta: &SharedNodes,
    embed: usize,
    batches: &[SupportQueryBatch],
    variant: MetaVariant,
    hyper: &HyperParams,
) -> Result<Vec<MetaRecord>> {
    let mut records = Vec::with_capacity(batches.len());
    for batch in batches {
        let spt = BatchNodes::insert(g, &batch.support);
        let qry = BatchNodes::insert(g, &batch.query);
        let phi0 = if variant.use_init_net {
            net::init_embedding(g, theta, &spt)?
        } else {
            g.leaf(Tensor::zeros(&[1, embed]))
        };
        let (phi_adapted, _) = adapt_ue(
            g,
            theta,
            phi0,
            &spt,
            hyper.alpha,
            hyper.decay,
            hyper.adapt_steps,
            !hyper.first_order,
        )?;
        let query_loss = net::regression_loss(g, theta, Some(phi_adapted), &qry)?;
        records.push(MetaRecord { phi0, phi_adapted, query_loss });
    }
    Ok(records)
}

/// Meta-loss value for the given parameter values, rebuilding the whole
/// pipeline (UE init, adaptation, Eq.-2 terms) in a fresh graph.
pub fn meta_loss_value(
    params: &SharedParams,
    batches: &[SupportQueryBatch],
    variant: MetaVariant,
    hyper: &HyperParams,
) -> Result<f64> {
    let mut g = Graph::new();
    let theta = params.insert(&mut g);
    let records = build_records(&mut g, &theta, params.config.embed, batches, variant, hyper)?;
    let loss = meta_loss(&mut g, &records, variant.lambda1, variant.lambda2)?;
    Ok(g.value(loss).item())
}

/// Adapted embeddings per user batch, as plain values.
pub fn adapted_embeddings(
    params: &SharedParams,
    batches: &[SupportQueryBatch],
    variant: MetaVariant,
    hyper: &HyperParams,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let theta = params.insert(&mut g);
    let records = build_records(&mut g, &theta, params.config.embed, batches, variant, hyper)?;
    Ok(records.iter().map(|r| g.value(r.phi_adapted).clone()).collect())
}

/// The scalar whose exact gradient is the training meta-gradient: identical
/// to [`meta_loss_value`] except that the stop-gradient slot holds the
/// `anchors` (the adapted embeddings of the UNPERTURBED parameters) instead
/// of re-adapting. Central differences of the plain value function would
/// disagree with the training gradient on the second term precisely because
/// that term's adapted embedding is a constant by definition; freezing it at
/// the base value turns the stop-gradient semantics into an ordinary
/// function of the parameters, which a finite-difference oracle can probe.
pub fn meta_loss_value_with_stopgrad_anchors(
    params: &SharedParams,
    batches: &[SupportQueryBatch],
    variant: MetaVariant,
    hyper: &HyperParams,
    anchors: &[Tensor],
) -> Result<f64> {
    if anchors.len() != batches.len() {
        return Err(Error::ShapeMismatch {
            op: "meta_loss_value_with_stopgrad_anchors",
            detail: format!("{} anchors vs {} batches", anchors.len(), batches.len()),
        });
    }
    let mut g = Graph::new();
    let theta = params.insert(&mut g);
    let records = build_records(&mut g, &theta, params.config.embed, batches, variant, hyper)?;
    let k = records.len() as f64;

    let mut acc = 0.0;
    for (r, anchor) in records.iter().zip(anchors) {
        acc += g.value(r.query_loss).item();
        if variant.lambda1 != 0.0 {
            let pen: f64 = anchor
                .data()
                .iter()
                .zip(g.value(r.phi0).data())
                .map(|(a, p)| (a - p) * (a - p))
                .sum();
            acc += variant.lambda1 * pen;
        }
    }
    acc /= k;
    if variant.lambda2 != 0.0 {
        let embed = params.config.embed;
        let mut mean = vec![0.0; embed];
        for r in &records {
            for (m, v) in mean.iter_mut().zip(g.value(r.phi_adapted).data()) {
                *m += v / k;
            }
        }
        acc += variant.lambda2 * mean.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(acc)
}

/// Meta-gradient of the three-term loss w.r.t. the shared parameters.
///
/// Per-user passes run independently (and in parallel): the bias-reduction
/// term couples users only through the mean adapted embedding, so each
/// user's share is `(1/K) (L_qry + lambda1 ||stopgrad(phi') - phi0||^2)
/// + (2 lambda2 / K) <mean_phi, phi'>` with the mean entering as a constant.
/// Summing those per-user gradients in user order reproduces the exact
/// gradient of [`meta_loss`].
pub fn meta_gradient(
    params: &SharedParams,
    batches: &[SupportQueryBatch],
    variant: MetaVariant,
    hyper: &HyperParams,
) -> Result<(MetaTerms, Vec<Tensor>)> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch("meta_gradient"));
    }
    let k = batches.len() as f64;

    // phase A: per-user forward + tracked adaptation + query loss
    let passes = exec::map_indexed(batches.len(), |i| user_pass(params, &batches[i], variant, hyper));
    let passes = passes.into_iter().collect::<Result<Vec<_>>>()?;

    // mean adapted embedding across users, entering phase B as a constant
    let embed = params.config.embed;
    let mut mean_phi = vec![0.0; embed];
    for p in &passes {
        for (m, v) in mean_phi.iter_mut().zip(p.graph.value(p.phi_adapted).data()) {
            *m += v / k;
        }
    }
    let mean_phi = Tensor::new(vec![1, embed], mean_phi)?;

    // phase B: per-user scalar share and backward over the shared leaves
    let lambda1 = variant.lambda1;
    let lambda2 = variant.lambda2;
    let shares = exec::map_vec(passes, |mut p| -> Result<(f64, f64, Vec<Tensor>)> {
        let g = &mut p.graph;
        let query_value = g.value(p.query_loss).item();
        let mut share = g.scale(p.query_loss, 1.0 / k);
        let mut penalty_value = 0.0;
        if lambda1 != 0.0 {
            let frozen = g.detach(p.phi_adapted);
            let diff = g.sub(frozen, p.phi0)?;
            let penalty = g.norm_sq(diff);
            penalty_value = g.value(penalty).item();
            let weighted = g.scale(penalty, lambda1 / k);
            share = g.add(share, weighted)?;
        }
        if lambda2 != 0.0 {
            let pull = g.constant(mean_phi.clone());
            let scaled = g.scale(pull, 2.0 * lambda2 / k);
            let aux = g.dot(scaled, p.phi_adapted)?;
            share = g.add(share, aux)?;
        }
        let grads = g.grad_values(share, &p.theta.flat())?;
        Ok((query_value, penalty_value, grads))
    });

    // reduce in user order for determinism
    let mut terms = MetaTerms::default();
    let mut total_grads: Option<Vec<Tensor>> = None;
    for share in shares {
        let (query_value, penalty_value, grads) = share?;
        terms.query += query_value / k;
        terms.init_penalty += lambda1 * penalty_value / k;
        match &mut total_grads {
            None => total_grads = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                        *av += gv;
                    }
                }
            }
        }
    }
    terms.bias_penalty = lambda2 * mean_phi.data().iter().map(|v| v * v).sum::<f64>();
    terms.total = terms.query + terms.init_penalty + terms.bias_penalty;
    Ok((terms, total_grads.expect("at least one user")))
}

/// One optimizer step on the shared parameters against the meta-loss over
/// the sampled users' batches. Embedding buffers live only inside the
/// per-user graphs and are discarded with them.
pub fn meta_update(
    params: &mut SharedParams,
    optimizer: &mut Optimizer,
    batches: &[SupportQueryBatch],
    variant: MetaVariant,
    hyper: &HyperParams,
) -> Result<MetaTerms> {
    let (terms, grads) = meta_gradient(params, batches, variant, hyper)?;
    if !terms.total.is_finite() {
        return Err(Error::NonFinite { context: "meta_update loss".to_string() });
    }
    let mut slots = params.tensors_mut();
    optimizer.step(&mut slots, &grads)?;
    Ok(terms)
}
