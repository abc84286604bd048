use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, SplitKind};
use crate::encoders::{init_visual_encoder, VisualEncoderParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{rng_for, Stream};
use crate::ClassId;

use super::config::TrainConfig;
use super::optim::OptimizerState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Classification,
    Meta,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Classification => "classification",
            Stage::Meta => "meta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Step,
    Epoch,
    Validation,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub kind: RecordKind,
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    /// Absent on validation records.
    pub class_loss: Option<f64>,
    pub vs_loss: Option<f64>,
    pub total: Option<f64>,
    pub accuracy: f64,
    pub lr: f64,
    pub tau_cls: f64,
}

pub trait MetricsSink {
    fn record(&mut self, record: &MetricRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricRecord> {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Appends records as JSON lines.
pub struct JsonlMetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlMetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }
}

impl MetricsSink for JsonlMetricsWriter {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Linear classifier over embeddings, used only during pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// `classes × embedding_dim`
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Parameters kept from the epoch with the best validation accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub accuracy: f64,
    pub encoder: VisualEncoderParams,
    pub log_tau_cls: f64,
    pub projection: Option<Matrix>,
}

/// Everything needed to continue training bit-for-bit.
///
/// There is no stored RNG: every random draw is derived from `seed` and the
/// stage/epoch/step counters, so those counters are the generator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub stage: Stage,
    /// Epochs completed in the current stage.
    pub epoch: usize,
    /// Optimizer steps completed in the current stage.
    pub step: usize,
    pub encoder: VisualEncoderParams,
    pub classifier: Option<LinearHead>,
    /// Base classes in classifier-row order.
    pub base_classes: Vec<ClassId>,
    /// Logarithm of the cosine-classifier temperature (kept positive by
    /// construction).
    pub log_tau_cls: f64,
    /// Present only when the semantic projection is trained.
    pub projection: Option<Matrix>,
    pub optimizer: OptimizerState,
    /// Epoch and validation records (step records go to the sink only).
    pub metrics: Vec<MetricRecord>,
    pub best: Option<BestSnapshot>,
}

impl TrainState {
    /// Fresh state at the start of pretraining, or directly at the start of
    /// meta-training when pretraining is disabled.
    pub fn init(config: &TrainConfig, dataset: &Dataset, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = init_visual_encoder(&config.encoder, dataset.shape(), seed)?;
        let base_classes: Vec<ClassId> = dataset.classes(SplitKind::Base).iter().copied().collect();
        if base_classes.is_empty() {
            return Err(Error::TooFewClasses { have: 0, need: 1 });
        }
        let log_tau_cls = config.stage2.objective.tau_cls_init.ln();
        let mut state = Self {
            seed,
            stage: Stage::Meta,
            epoch: 0,
            step: 0,
            encoder,
            classifier: None,
            base_classes,
            log_tau_cls,
            projection: None,
            optimizer: OptimizerState::None,
            metrics: Vec::new(),
            best: None,
        };
        if config.stage1.epochs > 0 {
            let d = state.encoder.output_dim;
            let c = state.base_classes.len();
            let mut rng = rng_for(seed, Stream::ClassifierInit, 0);
            let std = (1.0 / d as f64).sqrt();
            let weight = (0..c * d)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            state.classifier = Some(LinearHead {
                weight: Matrix::from_vec(c, d, weight),
                bias: Matrix::zeros(1, c),
            });
            state.stage = Stage::Classification;
        }
        Ok(state)
    }

    pub fn tau_cls(&self) -> f64 {
        self.log_tau_cls.exp()
    }

    /// Drops the classifier and resets counters for meta-training.
    pub(crate) fn enter_meta_stage(&mut self) {
        self.stage = Stage::Meta;
        self.classifier = None;
        self.epoch = 0;
        self.step = 0;
        self.optimizer = OptimizerState::None;
    }
}
