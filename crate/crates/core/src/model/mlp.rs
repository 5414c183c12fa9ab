use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Tanh,
    Identity,
}

/// Layer widths and activations of one MLP block.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// `widths[0]` is the input width; each later entry is a layer output.
    pub widths: Vec<usize>,
    /// One activation per layer, so `acts.len() == widths.len() - 1`.
    pub acts: Vec<Act>,
    /// The UE encoder deletes the bias of its last layer.
    pub final_bias: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, acts: Vec<Act>, final_bias: bool) -> Result<Self> {
        if widths.len() < 2 || acts.len() != widths.len() - 1 {
            return Err(Error::Config(format!(
                "MlpSpec needs at least one layer and one activation per layer, got widths {:?}, {} acts",
                widths,
                acts.len()
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("MlpSpec widths must be positive".to_string()));
        }
        Ok(MlpSpec { widths, acts, final_bias })
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

/// An MLP's parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Kaiming-uniform weights, zero biases.
    pub fn init(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(spec.n_layers());
        for i in 0..spec.n_layers() {
            let (fan_in, fan_out) = (spec.widths[i], spec.widths[i + 1]);
            let w = Tensor::kaiming_uniform(fan_in, fan_out, rng);
            let has_bias = spec.final_bias || i + 1 < spec.n_layers();
            let b = has_bias.then(|| Tensor::zeros(&[1, fan_out]));
            layers.push(Layer { w, b });
        }
        Mlp { spec, layers }
    }

    /// Insert this MLP's tensors as trainable leaves.
    pub fn insert(&self, g: &mut Graph) -> MlpNodes {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerNodes { w: g.leaf(l.w.clone()), b: l.b.as_ref().map(|b| g.leaf(b.clone())) })
            .collect();
        MlpNodes { layers, acts: self.spec.acts.clone() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub w: NodeId,
    pub b: Option<NodeId>,
}

/// Graph handles for one MLP's parameters.
#[derive(Debug, Clone)]
pub struct MlpNodes {
    pub layers: Vec<LayerNodes>,
    pub acts: Vec<Act>,
}

impl MlpNodes {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (layer, act) in self.layers.iter().zip(&self.acts) {
            h = g.matmul(h, layer.w)?;
            if let Some(b) = layer.b {
                h = g.add_bias(h, b)?;
            }
            h = match act {
                Act::Relu => g.relu(h),
                Act::Tanh => g.tanh(h),
                Act::Identity => h,
            };
        }
        Ok(h)
    }

    pub fn flat(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.w);
            if let Some(b) = l.b {
                out.push(b);
            }
        }
        out
    }

    /// Same topology with node ids consumed from `ids`.
    pub fn with_flat(&self, ids: &mut std::slice::Iter<'_, NodeId>) -> MlpNodes {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerNodes {
                w: *ids.next().expect("node id list too short"),
                b: l.b.map(|_| *ids.next().expect("node id list too short")),
            })
            .collect();
        MlpNodes { layers, acts: self.acts.clone() }
    }
}
