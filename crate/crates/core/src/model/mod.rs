//! The user prediction model: a prediction network conditioned by a user
//! embedding, and an initialization network producing the embedding's
//! user-specific starting point from a support batch.

pub mod mlp;
pub mod net;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::{load_checkpoint, save_checkpoint};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::data::Dims;
use crate::error::{Error, Result};

pub use mlp::{Act, Layer, LayerNodes, Mlp, MlpNodes, MlpSpec};

/// A user embedding: the adaptive parameter vector, shape `[1, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEmbedding(pub Tensor);

impl UserEmbedding {
    pub fn zeros(s: usize) -> Self {
        UserEmbedding(Tensor::zeros(&[1, s]))
    }

    pub fn len(&self) -> usize {
        self.0.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.0.numel() == 0
    }
}

/// Architecture description. The defaults mirror the reference setup:
/// 2-layer relu feature extractors, a 3-stage integrating head with the
/// embedding concatenated before the second stage, and 3-layer encoders in
/// the initialization network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub dims: Dims,
    pub hidden: usize,
    /// Embedding size S.
    pub embed: usize,
    /// Whether the prediction head is conditioned on the embedding.
    pub conditioned: bool,
    /// Whether the UE/weight encoders exist.
    pub init_net: bool,
}

impl ModelConfig {
    pub fn new(dims: Dims, hidden: usize, embed: usize, conditioned: bool, init_net: bool) -> Self {
        ModelConfig { dims, hidden, embed, conditioned, init_net }
    }

    pub fn default_with(conditioned: bool, init_net: bool) -> Self {
        ModelConfig::new(Dims::default_hockey(), 64, 32, conditioned, init_net)
    }

    pub(crate) fn to_meta(self) -> String {
        format!(
            "state_dim = {}\nrobot_dim = {}\naction_dim = {}\nhidden = {}\nembed = {}\nconditioned = {}\ninit_net = {}\n",
            self.dims.state, self.dims.robot, self.dims.action,
            self.hidden, self.embed, self.conditioned, self.init_net
        )
    }

    pub(crate) fn from_meta(meta: &str) -> Result<Self> {
        let get = |key: &str| -> Result<String> {
            meta.lines()
                .find_map(|l| {
                    let (k, v) = l.split_once('=')?;
                    (k.trim() == key).then(|| v.trim().to_string())
                })
                .ok_or_else(|| Error::Config(format!("checkpoint metadata missing '{}'", key)))
        };
        let parse_usize = |s: String| s.parse::<usize>().map_err(|e| Error::Config(e.to_string()));
        let parse_bool = |s: String| s.parse::<bool>().map_err(|e| Error::Config(e.to_string()));
        Ok(ModelConfig {
            dims: Dims {
                state: parse_usize(get("state_dim")?)?,
                robot: parse_usize(get("robot_dim")?)?,
                action: parse_usize(get("action_dim")?)?,
            },
            hidden: parse_usize(get("hidden")?)?,
            embed: parse_usize(get("embed")?)?,
            conditioned: parse_bool(get("conditioned")?)?,
            init_net: parse_bool(get("init_net")?)?,
        })
    }
}

/// All shared parameters: feature extractors, integrating layers and, when
/// present, the initialization network's encoders. The human-action
/// extractor is one storage used in three places (x_h features in the
/// prediction path, x_h and y features in the initialization path).
#[derive(Debug, Clone, PartialEq)]
pub struct SharedParams {
    pub config: ModelConfig,
    pub f_state: Mlp,
    pub f_robot: Mlp,
    pub f_human: Mlp,
    pub integ1: Mlp,
    pub integ2: Mlp,
    pub integ3: Mlp,
    pub ue_encoder: Option<Mlp>,
    pub weight_encoder: Option<Mlp>,
}

impl SharedParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let extractor = |input: usize, rng: &mut ChaCha8Rng| -> Result<Mlp> {
            let spec = MlpSpec::new(vec![input, h, h], vec![Act::Relu, Act::Relu], true)?;
            Ok(Mlp::init(spec, rng))
        };
        let f_state = extractor(config.dims.state, &mut rng)?;
        let f_robot = extractor(config.dims.robot, &mut rng)?;
        let f_human = extractor(config.dims.action, &mut rng)?;

        let integ2_in = if config.conditioned { h + config.embed } else { h };
        let integ1 = Mlp::init(MlpSpec::new(vec![3 * h, h], vec![Act::Relu], true)?, &mut rng);
        let integ2 = Mlp::init(MlpSpec::new(vec![integ2_in, h], vec![Act::Relu], true)?, &mut rng);
        let integ3 =
            Mlp::init(MlpSpec::new(vec![h, config.dims.action], vec![Act::Identity], true)?, &mut rng);

        let (ue_encoder, weight_encoder) = if config.init_net {
            let ue_spec = MlpSpec::new(
                vec![4 * h, h, h, config.embed],
                vec![Act::Relu, Act::Relu, Act::Identity],
                false, // bias-free last layer
            )?;
            let w_spec = MlpSpec::new(
                vec![4 * h, h, h, 1],
                vec![Act::Relu, Act::Relu, Act::Identity],
                true,
            )?;
            (Some(Mlp::init(ue_spec, &mut rng)), Some(Mlp::init(w_spec, &mut rng)))
        } else {
            (None, None)
        };

        Ok(SharedParams {
            config,
            f_state,
            f_robot,
            f_human,
            integ1,
            integ2,
            integ3,
            ue_encoder,
            weight_encoder,
        })
    }

    fn blocks(&self) -> Vec<(&'static str, &Mlp)> {
        let mut out = vec![
            ("fs", &self.f_state),
            ("fr", &self.f_robot),
            ("fh", &self.f_human),
            ("integ1", &self.integ1),
            ("integ2", &self.integ2),
            ("integ3", &self.integ3),
        ];
        if let Some(ue) = &self.ue_encoder {
            out.push(("ue", ue));
        }
        if let Some(we) = &self.weight_encoder {
            out.push(("wenc", we));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Mlp)> {
        let mut out = vec![
            ("fs", &mut self.f_state),
            ("fr", &mut self.f_robot),
            ("fh", &mut self.f_human),
            ("integ1", &mut self.integ1),
            ("integ2", &mut self.integ2),
            ("integ3", &mut self.integ3),
        ];
        if let Some(ue) = &mut self.ue_encoder {
            out.push(("ue", ue));
        }
        if let Some(we) = &mut self.weight_encoder {
            out.push(("wenc", we));
        }
        out
    }

    /// All tensors in a fixed, named order (the optimizer and checkpoint
    /// order).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, mlp) in self.blocks() {
            for (i, layer) in mlp.layers.iter().enumerate() {
                out.push((format!("{}.{}.w", name, i), &layer.w));
                if let Some(b) = &layer.b {
                    out.push((format!("{}.{}.b", name, i), b));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (_, mlp) in self.blocks_mut() {
            for layer in mlp.layers.iter_mut() {
                out.push(&mut layer.w);
                if let Some(b) = &mut layer.b {
                    out.push(b);
                }
            }
        }
        out
    }

    pub fn n_tensors(&self) -> usize {
        self.named_tensors().len()
    }

    pub fn n_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Insert every tensor as a trainable leaf of `g`.
    pub fn insert(&self, g: &mut Graph) -> SharedNodes {
        SharedNodes {
            f_state: self.f_state.insert(g),
            f_robot: self.f_robot.insert(g),
            f_human: self.f_human.insert(g),
            integ1: self.integ1.insert(g),
            integ2: self.integ2.insert(g),
            integ3: self.integ3.insert(g),
            ue_encoder: self.ue_encoder.as_ref().map(|m| m.insert(g)),
            weight_encoder: self.weight_encoder.as_ref().map(|m| m.insert(g)),
            conditioned: self.config.conditioned,
            embed: self.config.embed,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named_tensors();
        let refs: Vec<(String, &Tensor)> = named;
        save_checkpoint(path, &refs, &self.config.to_meta())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = load_checkpoint(path)?;
        let config = ModelConfig::from_meta(&meta)?;
        SharedParams::from_named(tensors, config, path)
    }

    /// Rebuild from checkpoint tensors, verifying names and shapes against
    /// the structure the config implies.
    pub(crate) fn from_named(
        tensors: Vec<(String, Tensor)>,
        config: ModelConfig,
        path: &Path,
    ) -> Result<Self> {
        let mut params = SharedParams::init(config, 0)?;
        let expected: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        if expected.len() != tensors.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("expected {} tensors, found {}", expected.len(), tensors.len()),
            });
        }
        for ((name, tensor), (expected_name, slot)) in
            tensors.into_iter().zip(expected.iter().zip(params.tensors_mut()))
        {
            if &name != expected_name || tensor.shape() != slot.shape() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    detail: format!("tensor '{}' does not match expected '{}'", name, expected_name),
                });
            }
            *slot = tensor;
        }
        Ok(params)
    }
}

/// Graph handles mirroring [`SharedParams`], possibly after adaptation
/// replaced some of them with derived nodes.
#[derive(Debug, Clone)]
pub struct SharedNodes {
    pub f_state: MlpNodes,
    pub f_robot: MlpNodes,
    pub f_human: MlpNodes,
    pub integ1: MlpNodes,
    pub integ2: MlpNodes,
    pub integ3: MlpNodes,
    pub ue_encoder: Option<MlpNodes>,
    pub weight_encoder: Option<MlpNodes>,
    pub conditioned: bool,
    pub embed: usize,
}

impl SharedNodes {
    /// Every node id in the fixed parameter order.
    pub fn flat(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for m in self.mlps() {
            out.extend(m.flat());
        }
        out
    }

    fn mlps(&self) -> Vec<&MlpNodes> {
        let mut v = vec![
            &self.f_state,
            &self.f_robot,
            &self.f_human,
            &self.integ1,
            &self.integ2,
            &self.integ3,
        ];
        if let Some(ue) = &self.ue_encoder {
            v.push(ue);
        }
        if let Some(we) = &self.weight_encoder {
            v.push(we);
        }
        v
    }

    /// Same structure with ids replaced in flat order (whole-network
    /// adaptation).
    pub fn with_flat(&self, ids: &[NodeId]) -> SharedNodes {
        let mut it = ids.iter();
        let out = SharedNodes {
            f_state: self.f_state.with_flat(&mut it),
            f_robot: self.f_robot.with_flat(&mut it),
            f_human: self.f_human.with_flat(&mut it),
            integ1: self.integ1.with_flat(&mut it),
            integ2: self.integ2.with_flat(&mut it),
            integ3: self.integ3.with_flat(&mut it),
            ue_encoder: self.ue_encoder.as_ref().map(|m| m.with_flat(&mut it)),
            weight_encoder: self.weight_encoder.as_ref().map(|m| m.with_flat(&mut it)),
            conditioned: self.conditioned,
            embed: self.embed,
        };
        assert!(it.next().is_none(), "node id list longer than parameter set");
        out
    }

    /// The final prediction layer's ids (the ANIL adaptation set).
    pub fn last_layer(&self) -> Vec<NodeId> {
        self.integ3.flat()
    }

    /// Same structure with only the final layer replaced.
    pub fn with_last_layer(&self, ids: &[NodeId]) -> SharedNodes {
        let mut out = self.clone();
        let mut it = ids.iter();
        out.integ3 = self.integ3.with_flat(&mut it);
        assert!(it.next().is_none());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::new(Dims { state: 4, robot: 2, action: 2 }, 8, 4, true, true);
        let a = SharedParams::init(cfg, 9).unwrap();
        let b = SharedParams::init(cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = SharedParams::init(cfg, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ue_encoder_last_layer_is_bias_free() {
        let cfg = ModelConfig::default_with(true, true);
        let params = SharedParams::init(cfg, 1).unwrap();
        let ue = params.ue_encoder.as_ref().unwrap();
        assert!(ue.layers.last().unwrap().b.is_none());
        // every other mlp's last layer keeps its bias
        assert!(params.weight_encoder.as_ref().unwrap().layers.last().unwrap().b.is_some());
        assert!(params.integ3.layers.last().unwrap().b.is_some());
    }

    #[test]
    fn checkpoint_round_trip_preserves_params_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::new(Dims { state: 6, robot: 2, action: 2 }, 16, 8, true, true);
        let params = SharedParams::init(cfg, 5).unwrap();
        let path = dir.path().join("m.ckpt");
        params.save(&path).unwrap();
        let loaded = SharedParams::load(&path).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn unconditioned_model_has_no_embedding_machinery() {
        let cfg = ModelConfig::default_with(false, false);
        let params = SharedParams::init(cfg, 2).unwrap();
        assert!(params.ue_encoder.is_none());
        assert!(params.weight_encoder.is_none());
        // integ2 input is not widened by the embedding
        assert_eq!(params.integ2.spec.widths[0], cfg.hidden);
    }

    #[test]
    fn flat_node_order_matches_named_tensor_order() {
        let cfg = ModelConfig::new(Dims { state: 3, robot: 2, action: 2 }, 4, 2, true, true);
        let params = SharedParams::init(cfg, 3).unwrap();
        let mut g = Graph::new();
        let nodes = params.insert(&mut g);
        let flat = nodes.flat();
        let named = params.named_tensors();
        assert_eq!(flat.len(), named.len());
        for (id, (_, tensor)) in flat.iter().zip(&named) {
            assert_eq!(g.value(*id), *tensor);
        }
    }
}
