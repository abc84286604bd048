use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, ProjectionMode};
use crate::episodes::EpisodeSpec;
use crate::error::{Error, Result};
use crate::objectives::ObjectiveConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage1Optimizer {
    #[default]
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Optimizer {
    #[default]
    Adam,
}

/// Supervised whole-classifier pretraining on base classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub optimizer: Stage1Optimizer,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Zero skips the stage (stage-2-only, ProtoNet-style training).
    pub epochs: usize,
    pub batch_size: usize,
    /// Epoch indices (0-based) at which the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            optimizer: Stage1Optimizer::Sgd,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 100,
            batch_size: 64,
            decay_epochs: vec![60, 80],
            decay_factor: 0.1,
        }
    }
}

impl Stage1Config {
    /// Piecewise-constant schedule: `lr · factor^(#decay epochs <= epoch)`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.lr * self.decay_factor.powi(drops as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.batch_size == 0 {
            return Err(Error::InvalidConfig("stage1.batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(
                "stage1 needs lr > 0, momentum in [0, 1), weight_decay >= 0".into(),
            ));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "stage1.decay_epochs must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = self.decay_epochs.last() {
            if self.epochs > 0 && last >= self.epochs {
                return Err(Error::InvalidConfig(format!(
                    "stage1.decay_epochs entry {last} is not below epochs = {}",
                    self.epochs
                )));
            }
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::InvalidConfig("stage1.decay_factor must be positive".into()));
        }
        Ok(())
    }
}

/// Episodic meta-training with optional visual-semantic alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub optimizer: Stage2Optimizer,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub tasks_per_batch: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub use_vs_alignment: bool,
    pub objective: ObjectiveConfig,
    pub projection: ProjectionMode,
    /// Descriptions averaged into each semantic prototype, drawn afresh per
    /// episode; unset uses every description of the class.
    pub descriptions_per_prototype: Option<usize>,
    /// Keep the parameters with the best validation accuracy.
    pub select_on_val: bool,
    pub val_episodes: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            optimizer: Stage2Optimizer::Adam,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 600,
            steps_per_epoch: 200,
            tasks_per_batch: 4,
            n_way: 5,
            k_shot: 1,
            q_per_class: 15,
            use_vs_alignment: true,
            objective: ObjectiveConfig::default(),
            projection: ProjectionMode::Frozen,
            descriptions_per_prototype: None,
            select_on_val: false,
            val_episodes: 200,
        }
    }
}

impl Stage2Config {
    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec::new(self.n_way, self.k_shot, self.q_per_class)
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.episode_spec().validate()?;
        if self.steps_per_epoch == 0 || self.tasks_per_batch == 0 {
            return Err(Error::InvalidConfig(
                "stage2.steps_per_epoch and tasks_per_batch must be positive".into(),
            ));
        }
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(Error::InvalidConfig("stage2 Adam hyperparameters out of range".into()));
        }
        if self.use_vs_alignment && self.n_way < 2 {
            return Err(Error::InvalidConfig("alignment needs n_way >= 2".into()));
        }
        if self.descriptions_per_prototype == Some(0) {
            return Err(Error::InvalidConfig(
                "stage2.descriptions_per_prototype must be positive".into(),
            ));
        }
        if self.select_on_val && self.val_episodes == 0 {
            return Err(Error::InvalidConfig("stage2.val_episodes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-length schedule: 100 SGD epochs decayed at 60 and 80, then 600
    /// Adam epochs of 5-way 1-shot episodes with alignment weight 2.5.
    pub fn full() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            seed: 0,
        }
    }

    /// Same optimizers and ratios, shortened to run in seconds on one core.
    pub fn desk() -> Self {
        let full = Self::full();
        Self {
            stage1: Stage1Config {
                epochs: 10,
                decay_epochs: vec![6, 8],
                ..full.stage1
            },
            stage2: Stage2Config {
                epochs: 100,
                steps_per_epoch: 10,
                val_episodes: 50,
                ..full.stage2
            },
            ..full
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()
    }
}
