use crate::error::{Error, Result};

use super::tensor::Tensor;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// SGD or Adam state over a fixed-order parameter list.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        step: u64,
        first_moment: Vec<Tensor>,
        second_moment: Vec<Tensor>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    /// Adam with the usual (0.9, 0.999) moments and 1e-8 epsilon. Moment
    /// buffers are allocated lazily on the first step so the optimizer does
    /// not need the parameter shapes up front.
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam { lr, step: 0, first_moment: Vec::new(), second_moment: Vec::new() }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr,
        }
    }

    /// One update over parallel slices of parameters and gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                op: "opt_step",
                detail: format!("{} params vs {} grads", params.len(), grads.len()),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "opt_step",
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            g.ensure_finite("opt_step gradient")?;
        }

        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= *lr * gv;
                    }
                }
            }
            Optimizer::Adam { lr, step, first_moment, second_moment } => {
                if first_moment.is_empty() {
                    *first_moment = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                    *second_moment = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                }
                if first_moment.len() != params.len() {
                    return Err(Error::ShapeMismatch {
                        op: "opt_step",
                        detail: format!(
                            "adam state tracks {} tensors, got {}",
                            first_moment.len(),
                            params.len()
                        ),
                    });
                }
                *step += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*step as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(*step as i32);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(first_moment.iter_mut().zip(second_moment.iter_mut()))
                {
                    for ((pv, gv), (mv, vv)) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                    {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv -= *lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
