//! Losses, optimizer, schedules and the two-stage training protocol:
//! classifier and mapper pretraining, then mapper training against a frozen
//! classifier with the joint fidelity + mimic objective.

pub mod adam;
pub mod data;
mod runner;
pub mod schedule;

use std::collections::BTreeMap;

use crate::dsp::DspError;
use crate::io::IoError;
use crate::models::{Arch, ModelError, Role};
use crate::tensor::{Tape, TensorError, Var};

pub use adam::AdamState;
pub use data::{FeatureSet, FeatureUtterance};
pub use runner::{
    classify, cross_entropy, enhance, loss_magnitudes, pretrain_classifier, pretrain_mapper,
    read_trace, train_mimic, write_trace, Best, DevScores, Outcome, RunOptions, TraceRow,
    TrainState,
};
pub use schedule::{lr_schedule, LrMode, Plateau};

/// Losses above this (or non-finite) abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("no gradient for trainable parameter {0}")]
    MissingGrad(String),
    #[error("utterance {0}: clean and noisy frame counts differ")]
    NotParallel(String),
    #[error("labels: {0}")]
    Labels(String),
    #[error("expected a {expected} model, got a {got}")]
    Role { expected: Role, got: Role },
    #[error("config: {0}")]
    Config(String),
    #[error("resume: {0}")]
    Resume(String),
    #[error("the {0} set is empty")]
    Empty(&'static str),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Mimic weight in `fidelity + alpha * mimic`.
    pub alpha: f64,
    pub lr0: f64,
    pub decay: f64,
    pub decay_steps: u64,
    pub lr_drop_factor: f64,
    pub lr_mode: LrMode,
    /// Dev evaluations without relative improvement of `min_improvement`
    /// before the drop fires.
    pub patience: usize,
    pub min_improvement: f64,
    /// Frames per batch (classifier DNN), minimum frames per utterance group
    /// (mapper paths).
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lr0: 1e-3,
            decay: 0.95,
            decay_steps: 10_000,
            lr_drop_factor: 0.1,
            lr_mode: LrMode::Exp,
            patience: 3,
            min_improvement: 0.005,
            batch_size: 128,
            epochs: 5,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Full-scale learning rates: 1e-5 for the DNN classifier, 1e-4 otherwise.
    pub fn paper_lr(arch: &Arch) -> f64 {
        match arch {
            Arch::DnnClassifier(_) => 1e-5,
            _ => 1e-4,
        }
    }

    /// Desk-scale preset for training `arch`: ten times the full-scale
    /// learning rate, which keeps the models' relative rates while
    /// compensating for far fewer optimizer steps.
    pub fn desk(arch: &Arch) -> Self {
        Self {
            lr0: 10.0 * Self::paper_lr(arch),
            ..Self::default()
        }
    }

    /// Mimic weight for a given classifier: 0.1 for the DNN, 0.05 for the WRBN.
    pub fn default_alpha(classifier: &Arch) -> f64 {
        match classifier {
            Arch::Wrbn(_) => 0.05,
            _ => 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be >= 0");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be > 0");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must be in (0, 1]");
        }
        if self.decay_steps == 0 || self.batch_size == 0 || self.patience == 0 {
            return bad("decay_steps, batch_size and patience must be positive");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return bad("lr_drop_factor must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.min_improvement) {
            return bad("min_improvement must be in [0, 1)");
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("train.{k}"), v);
        };
        put("alpha", self.alpha.to_string());
        put("lr0", self.lr0.to_string());
        put("decay", self.decay.to_string());
        put("decay_steps", self.decay_steps.to_string());
        put("lr_drop_factor", self.lr_drop_factor.to_string());
        put("lr_mode", self.lr_mode.to_string());
        put("patience", self.patience.to_string());
        put("min_improvement", self.min_improvement.to_string());
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put("seed", self.seed.to_string());
        m
    }

    /// Reads the keys written by [`TrainConfig::to_map`]; missing keys keep defaults.
    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(
            m: &BTreeMap<String, String>,
            k: &str,
            slot: &mut T,
        ) -> Result<()> {
            if let Some(v) = m.get(&format!("train.{k}")) {
                *slot = v
                    .parse()
                    .map_err(|_| TrainError::Config(format!("bad value for {k}: {v:?}")))?;
            }
            Ok(())
        }
        let mut c = Self::default();
        get(m, "alpha", &mut c.alpha)?;
        get(m, "lr0", &mut c.lr0)?;
        get(m, "decay", &mut c.decay)?;
        get(m, "decay_steps", &mut c.decay_steps)?;
        get(m, "lr_drop_factor", &mut c.lr_drop_factor)?;
        get(m, "lr_mode", &mut c.lr_mode)?;
        get(m, "patience", &mut c.patience)?;
        get(m, "min_improvement", &mut c.min_improvement)?;
        get(m, "batch_size", &mut c.batch_size)?;
        get(m, "epochs", &mut c.epochs)?;
        get(m, "seed", &mut c.seed)?;
        c.validate()?;
        Ok(c)
    }
}

/// Mean over frames of the per-frame mean squared error against clean frames.
pub fn fidelity_loss(tape: &mut Tape, clean: Var, mapped: Var) -> Result<Var> {
    Ok(tape.mse(mapped, clean)?)
}

/// Mean squared distance between pre-softmax classifier outputs on clean
/// and on denoised features.
pub fn mimic_loss(tape: &mut Tape, clean_logits: Var, denoised_logits: Var) -> Result<Var> {
    Ok(tape.mse(denoised_logits, clean_logits)?)
}

/// `fidelity + alpha * mimic`.
pub fn joint_loss(tape: &mut Tape, fidelity: Var, mimic: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(TrainError::Config(format!(
            "alpha must be >= 0, got {alpha}"
        )));
    }
    let weighted = tape.scale(mimic, alpha)?;
    Ok(tape.add(fidelity, weighted)?)
}
