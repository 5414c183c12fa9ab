//! Forward passes of the prediction and initialization networks, built as
//! graph ops so they stay differentiable end to end.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::data::Batch;
use crate::error::{Error, Result};

use super::{SharedNodes, SharedParams, UserEmbedding};

/// A batch inserted into a graph as constant leaves.
#[derive(Debug, Clone, Copy)]
pub struct BatchNodes {
    pub x_s: NodeId,
    pub x_r: NodeId,
    pub x_h: NodeId,
    pub y: NodeId,
    pub len: usize,
}

impl BatchNodes {
    pub fn insert(g: &mut Graph, batch: &Batch) -> Self {
        BatchNodes {
            x_s: g.constant(batch.x_s.clone()),
            x_r: g.constant(batch.x_r.clone()),
            x_h: g.constant(batch.x_h.clone()),
            y: g.constant(batch.y.clone()),
            len: batch.len(),
        }
    }
}

/// Prediction network: per-input feature extractors, then the integrating
/// stage with the user embedding concatenated before its second layer.
/// `phi` must be `[1, S]`; it is broadcast over the batch rows.
pub fn predict(
    g: &mut Graph,
    theta: &SharedNodes,
    phi: Option<NodeId>,
    batch: &BatchNodes,
) -> Result<NodeId> {
    let fs = theta.f_state.forward(g, batch.x_s)?;
    let fr = theta.f_robot.forward(g, batch.x_r)?;
    let fh = theta.f_human.forward(g, batch.x_h)?;
    let joined = g.concat_cols(&[fs, fr, fh])?;
    let h1 = theta.integ1.forward(g, joined)?;
    let h1 = match (theta.conditioned, phi) {
        (true, Some(phi)) => {
            if g.value(phi).shape() != [1, theta.embed] {
                return Err(Error::ShapeMismatch {
                    op: "predict",
                    detail: format!(
                        "embedding shape {:?}, expected [1, {}]",
                        g.value(phi).shape(),
                        theta.embed
                    ),
                });
            }
            let phi_rows = g.broadcast_rows(phi, batch.len)?;
            g.concat_cols(&[h1, phi_rows])?
        }
        (true, None) => {
            return Err(Error::Config("conditioned model requires an embedding".to_string()))
        }
        (false, _) => h1,
    };
    let h2 = theta.integ2.forward(g, h1)?;
    theta.integ3.forward(g, h2)
}

/// Softmax-weighted aggregation of per-pair embedding candidates:
/// `phi = softmax(logits) @ candidates`, with `logits` `[B,1]` and
/// `candidates` `[B,S]`.
pub fn aggregate_candidates(g: &mut Graph, logits: NodeId, candidates: NodeId) -> Result<NodeId> {
    let row = g.transpose(logits)?; // [1, B]
    let weights = g.softmax(row)?;
    g.matmul(weights, candidates)
}

/// Initialization network: shared feature extractors applied to the support
/// pairs (the human-action extractor is reused for both x_h and y), then the
/// UE and weight encoders over the concatenated features, then the softmax
/// aggregation.
pub fn init_embedding(g: &mut Graph, theta: &SharedNodes, support: &BatchNodes) -> Result<NodeId> {
    if support.len == 0 {
        return Err(Error::EmptyBatch("init_embedding"));
    }
    let (ue, wenc) = match (&theta.ue_encoder, &theta.weight_encoder) {
        (Some(ue), Some(wenc)) => (ue, wenc),
        _ => return Err(Error::Config("model has no initialization network".to_string())),
    };
    let fs = theta.f_state.forward(g, support.x_s)?;
    let fr = theta.f_robot.forward(g, support.x_r)?;
    let fh = theta.f_human.forward(g, support.x_h)?;
    let fy = theta.f_human.forward(g, support.y)?;
    let feats = g.concat_cols(&[fs, fr, fh, fy])?;
    let candidates = ue.forward(g, feats)?; // [B, S]
    let logits = wenc.forward(g, feats)?; // [B, 1]
    aggregate_candidates(g, logits, candidates)
}

/// Mean squared error over every output coordinate of the batch.
pub fn regression_loss(
    g: &mut Graph,
    theta: &SharedNodes,
    phi: Option<NodeId>,
    batch: &BatchNodes,
) -> Result<NodeId> {
    if batch.len == 0 {
        return Err(Error::EmptyBatch("regression_loss"));
    }
    let y_hat = predict(g, theta, phi, batch)?;
    let err = g.sub(y_hat, batch.y)?;
    let sq = g.square(err);
    Ok(g.mean(sq))
}

// ── value-level wrappers (fresh throwaway graph) ────────────────────

pub fn predict_values(
    params: &SharedParams,
    phi: Option<&UserEmbedding>,
    batch: &Batch,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let theta = params.insert(&mut g);
    let nodes = BatchNodes::insert(&mut g, batch);
    let phi = phi.map(|p| g.constant(p.0.clone()));
    let out = predict(&mut g, &theta, phi, &nodes)?;
    Ok(g.value(out).clone())
}

pub fn init_embedding_values(params: &SharedParams, support: &Batch) -> Result<UserEmbedding> {
    let mut g = Graph::new();
    let theta = params.insert(&mut g);
    let nodes = BatchNodes::insert(&mut g, support);
    let phi = init_embedding(&mut g, &theta, &nodes)?;
    Ok(UserEmbedding(g.value(phi).clone()))
}

pub fn regression_loss_value(
    params: &SharedParams,
    phi: Option<&UserEmbedding>,
    batch: &Batch,
) -> Result<f64> {
    let mut g = Graph::new();
    let theta = params.insert(&mut g);
    let nodes = BatchNodes::insert(&mut g, batch);
    let phi = phi.map(|p| g.constant(p.0.clone()));
    let loss = regression_loss(&mut g, &theta, phi, &nodes)?;
    Ok(g.value(loss).item())
}
