//! Meta-learning procedures: the three-step UE-initialization /
//! UE-adaptation / meta-update method, plus MAML, Reptile, ANIL, CAVIA and
//! supervised baselines behind one learner interface.

pub mod baselines;
pub mod evaluate;
pub mod proposed;
pub mod train;

use std::fmt;

use crate::error::{Error, Result};

pub use evaluate::{adapt_and_evaluate, zero_velocity_mse, EvalOutcome};
pub use train::{train, train_logged, LogRecord, TrainOutcome, TrainedModel};

/// Which learner a run uses. Exactly one kind per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    Proposed,
    ProposedNoUeInit,
    ProposedNoBiasReduction,
    Maml,
    Reptile,
    Anil,
    Cavia,
    SupervisedFixed,
    SupervisedFinetuned,
    ZeroVelocity,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 10] = [
        LearnerKind::Proposed,
        LearnerKind::ProposedNoUeInit,
        LearnerKind::ProposedNoBiasReduction,
        LearnerKind::Maml,
        LearnerKind::Reptile,
        LearnerKind::Anil,
        LearnerKind::Cavia,
        LearnerKind::SupervisedFixed,
        LearnerKind::SupervisedFinetuned,
        LearnerKind::ZeroVelocity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LearnerKind::Proposed => "proposed",
            LearnerKind::ProposedNoUeInit => "proposed-no-ue-init",
            LearnerKind::ProposedNoBiasReduction => "proposed-no-bias-reduction",
            LearnerKind::Maml => "maml",
            LearnerKind::Reptile => "reptile",
            LearnerKind::Anil => "anil",
            LearnerKind::Cavia => "cavia",
            LearnerKind::SupervisedFixed => "supervised-fixed",
            LearnerKind::SupervisedFinetuned => "supervised-finetuned",
            LearnerKind::ZeroVelocity => "zero-velocity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown learner kind '{}'", s)))
    }

    /// Does the prediction head condition on a user embedding?
    pub fn uses_embedding(&self) -> bool {
        matches!(
            self,
            LearnerKind::Proposed
                | LearnerKind::ProposedNoUeInit
                | LearnerKind::ProposedNoBiasReduction
                | LearnerKind::Cavia
        )
    }

    /// Does the model carry the UE/weight encoders?
    pub fn uses_init_net(&self) -> bool {
        matches!(self, LearnerKind::Proposed | LearnerKind::ProposedNoBiasReduction)
    }

    pub fn is_meta(&self) -> bool {
        !matches!(
            self,
            LearnerKind::SupervisedFixed | LearnerKind::SupervisedFinetuned | LearnerKind::ZeroVelocity
        )
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Learning-rate, loss-weight and budget settings for one run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Inner learning rate during training.
    pub alpha: f64,
    /// Inner learning rate at evaluation (MAML/ANIL train with a smaller
    /// rate than they evaluate with).
    pub alpha_eval: f64,
    /// Outer learning rate (Adam for everything except Reptile, which uses
    /// it as the plain interpolation step).
    pub beta: f64,
    /// Inner-rate decay per adaptation step.
    pub decay: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Users sampled per meta-update (K).
    pub users_per_update: usize,
    /// Support/query batch size (B).
    pub batch_size: usize,
    /// User embedding size (S).
    pub embed: usize,
    /// Gradient steps in the adaptation loop.
    pub adapt_steps: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Treat inner gradients as constants (first-order variant).
    pub first_order: bool,
    /// Hidden width of every MLP block.
    pub hidden: usize,
    pub log_every: usize,
    /// Periodic checkpoint interval; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 0.05,
            alpha_eval: 0.05,
            beta: 0.001,
            decay: 0.8,
            lambda1: 1.0,
            lambda2: 0.1,
            users_per_update: 5,
            batch_size: 200,
            embed: 32,
            adapt_steps: 5,
            iterations: 20_000,
            seed: 0,
            first_order: false,
            hidden: 64,
            log_every: 500,
            checkpoint_every: 0,
        }
    }
}

impl HyperParams {
    /// Reference settings per learner: embedding methods adapt at 0.05,
    /// layer-updating methods at 0.01 (0.003 while training MAML/ANIL, which
    /// is more stable), Adam 0.001 outer everywhere except Reptile's
    /// interpolation step. Decay applies to the proposed family only.
    pub fn defaults_for(kind: LearnerKind) -> Self {
        let mut h = HyperParams::default();
        match kind {
            LearnerKind::Proposed | LearnerKind::ProposedNoUeInit | LearnerKind::ProposedNoBiasReduction => {}
            LearnerKind::Cavia => {
                h.decay = 1.0;
                h.lambda1 = 0.0;
                h.lambda2 = 0.0;
            }
            LearnerKind::Maml | LearnerKind::Anil => {
                h.alpha = 0.003;
                h.alpha_eval = 0.01;
                h.decay = 1.0;
                h.lambda1 = 0.0;
                h.lambda2 = 0.0;
            }
            LearnerKind::Reptile => {
                h.alpha = 0.01;
                h.alpha_eval = 0.01;
                h.beta = 1.0;
                h.decay = 1.0;
                h.lambda1 = 0.0;
                h.lambda2 = 0.0;
            }
            LearnerKind::SupervisedFixed | LearnerKind::SupervisedFinetuned => {
                h.alpha = 0.01;
                h.alpha_eval = 0.01;
                h.decay = 1.0;
                h.lambda1 = 0.0;
                h.lambda2 = 0.0;
            }
            LearnerKind::ZeroVelocity => {
                h.iterations = 0;
            }
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha must be > 0 and beta >= 0".to_string()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay {} outside (0, 1]", self.decay)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda weights must be >= 0".to_string()));
        }
        if self.users_per_update == 0
            || self.batch_size == 0
            || self.embed == 0
            || self.adapt_steps == 0
        {
            return Err(Error::Config("K, B, S and adaptation steps must be >= 1".to_string()));
        }
        Ok(())
    }

    pub(crate) fn to_meta(&self) -> String {
        format!(
            "alpha = {}\nalpha_eval = {}\nbeta = {}\ndecay = {}\nlambda1 = {}\nlambda2 = {}\nusers_per_update = {}\nbatch_size = {}\nembed_size = {}\nadapt_steps = {}\niterations = {}\nseed = {}\nfirst_order = {}\nhidden_size = {}\nlog_every = {}\ncheckpoint_every = {}\n",
            self.alpha, self.alpha_eval, self.beta, self.decay, self.lambda1, self.lambda2,
            self.users_per_update, self.batch_size, self.embed, self.adapt_steps,
            self.iterations, self.seed, self.first_order, self.hidden,
            self.log_every, self.checkpoint_every
        )
    }

    pub(crate) fn from_meta(meta: &str) -> Result<Self> {
        fn get<T: std::str::FromStr>(meta: &str, key: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            meta.lines()
                .find_map(|l| {
                    let (k, v) = l.split_once('=')?;
                    (k.trim() == key).then(|| v.trim().to_string())
                })
                .ok_or_else(|| Error::Config(format!("checkpoint metadata missing '{}'", key)))?
                .parse::<T>()
                .map_err(|e| Error::Config(format!("bad '{}': {}", key, e)))
        }
        Ok(HyperParams {
            alpha: get(meta, "alpha")?,
            alpha_eval: get(meta, "alpha_eval")?,
            beta: get(meta, "beta")?,
            decay: get(meta, "decay")?,
            lambda1: get(meta, "lambda1")?,
            lambda2: get(meta, "lambda2")?,
            users_per_update: get(meta, "users_per_update")?,
            batch_size: get(meta, "batch_size")?,
            embed: get(meta, "embed_size")?,
            adapt_steps: get(meta, "adapt_steps")?,
            iterations: get(meta, "iterations")?,
            seed: get(meta, "seed")?,
            first_order: get(meta, "first_order")?,
            hidden: get(meta, "hidden_size")?,
            log_every: get(meta, "log_every")?,
            checkpoint_every: get(meta, "checkpoint_every")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for kind in LearnerKind::ALL {
            assert_eq!(LearnerKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(LearnerKind::parse("nope").is_err());
    }

    #[test]
    fn invalid_hypers_are_rejected() {
        let mut h = HyperParams::default();
        h.decay = 0.0;
        assert!(h.validate().is_err());
        let mut h = HyperParams::default();
        h.adapt_steps = 0;
        assert!(h.validate().is_err());
        let mut h = HyperParams::default();
        h.lambda1 = -0.1;
        assert!(h.validate().is_err());
        assert!(HyperParams::default().validate().is_ok());
    }

    #[test]
    fn hyper_meta_round_trips() {
        let mut h = HyperParams::defaults_for(LearnerKind::Maml);
        h.seed = 99;
        h.iterations = 1234;
        let meta = h.to_meta();
        let parsed = HyperParams::from_meta(&meta).unwrap();
        assert_eq!(parsed.alpha, h.alpha);
        assert_eq!(parsed.alpha_eval, h.alpha_eval);
        assert_eq!(parsed.seed, 99);
        assert_eq!(parsed.iterations, 1234);
    }

    #[test]
    fn kind_capabilities_match_method_structure() {
        assert!(LearnerKind::Proposed.uses_embedding() && LearnerKind::Proposed.uses_init_net());
        assert!(LearnerKind::ProposedNoUeInit.uses_embedding());
        assert!(!LearnerKind::ProposedNoUeInit.uses_init_net());
        assert!(LearnerKind::Cavia.uses_embedding() && !LearnerKind::Cavia.uses_init_net());
        assert!(!LearnerKind::Maml.uses_embedding());
        assert!(!LearnerKind::SupervisedFixed.is_meta());
    }
}
