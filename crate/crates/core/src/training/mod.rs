//! Two-stage training: supervised pretraining of the encoder with a linear
//! head on base classes, then episodic meta-training of the encoder and the
//! classifier temperature, optionally with the alignment term.

mod checkpoint;
mod config;
mod optim;
mod state;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;

use crate::autograd::{Graph, Var};
use crate::datasets::{Dataset, SplitKind};
use crate::encoders::{ProjectionMode, SemanticBank};
use crate::episodes::{sample_episode, Episode};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_with;
use crate::matrix::Matrix;
use crate::objectives::{accuracy_of, episode_objective, EpisodeInputs, EpisodeTerms, LossBreakdown};
use crate::seed::{derive_seed, rng_for, Stream};
use crate::ClassId;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{Stage1Config, Stage1Optimizer, Stage2Config, Stage2Optimizer, TrainConfig};
pub use optim::{Adam, OptimizerState, Sgd};
pub use state::{
    BestSnapshot, JsonlMetricsWriter, LinearHead, MetricRecord, MetricsSink, RecordKind, Stage,
    TrainState,
};

/// Side channels for a training run.
#[derive(Default)]
pub struct RunOptions<'a> {
    pub sink: Option<&'a mut dyn MetricsSink>,
    /// Directory for periodic `<stage>-epochNNNN.ckpt` files.
    pub checkpoint_dir: Option<PathBuf>,
    /// Save every this many epochs; 0 saves nothing periodically.
    pub checkpoint_every: usize,
    /// Most recent checkpoint known to be good; reported on divergence.
    pub last_checkpoint: Option<PathBuf>,
}

impl RunOptions<'_> {
    fn emit(&mut self, record: &MetricRecord) -> Result<()> {
        match self.sink.as_deref_mut() {
            Some(sink) => sink.record(record),
            None => Ok(()),
        }
    }

    fn maybe_checkpoint(&mut self, state: &TrainState) -> Result<()> {
        let Some(dir) = &self.checkpoint_dir else {
            return Ok(());
        };
        if self.checkpoint_every == 0 || !state.epoch.is_multiple_of(self.checkpoint_every) {
            return Ok(());
        }
        let path = dir.join(format!("{}-epoch{:04}.ckpt", state.stage.as_str(), state.epoch));
        save_checkpoint(state, &path)?;
        self.last_checkpoint = Some(path);
        Ok(())
    }

    fn divergence(&self, state: &TrainState) -> Error {
        Error::Divergence {
            stage: state.stage.as_str().into(),
            epoch: state.epoch,
            step: state.step,
            last_good: self.last_checkpoint.clone(),
        }
    }
}

/// Maps forward-pass non-finite errors to a divergence report.
fn check_forward<T>(r: Result<T>, state: &TrainState, opts: &RunOptions<'_>) -> Result<T> {
    match r {
        Err(Error::NonFinite(_)) | Err(Error::DegenerateVector(_)) => Err(opts.divergence(state)),
        other => other,
    }
}

fn all_finite(ms: &[Matrix]) -> bool {
    ms.iter().all(Matrix::is_finite)
}

fn stage1_params(state: &TrainState) -> Vec<Matrix> {
    let mut p: Vec<Matrix> = state.encoder.tensors.iter().map(|t| t.value.clone()).collect();
    if let Some(head) = &state.classifier {
        p.push(head.weight.clone());
        p.push(head.bias.clone());
    }
    p
}

fn set_stage1_params(state: &mut TrainState, mut params: Vec<Matrix>) {
    if let Some(head) = state.classifier.as_mut() {
        head.bias = params.pop().expect("bias");
        head.weight = params.pop().expect("weight");
    }
    for (t, v) in state.encoder.tensors.iter_mut().zip(params) {
        t.value = v;
    }
}

fn meta_params(state: &TrainState) -> Vec<Matrix> {
    let mut p: Vec<Matrix> = state.encoder.tensors.iter().map(|t| t.value.clone()).collect();
    p.push(Matrix::scalar(state.log_tau_cls));
    if let Some(proj) = &state.projection {
        p.push(proj.clone());
    }
    p
}

fn set_meta_params(state: &mut TrainState, mut params: Vec<Matrix>) {
    if state.projection.is_some() {
        state.projection = params.pop();
    }
    state.log_tau_cls = params.pop().expect("log tau").item();
    for (t, v) in state.encoder.tensors.iter_mut().zip(params) {
        t.value = v;
    }
}

/// Creates a fresh state and runs pretraining to completion.
pub fn train_classification_stage(
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
    opts: &mut RunOptions<'_>,
) -> Result<TrainState> {
    let mut state = TrainState::init(config, dataset, seed)?;
    run_classification_stage(&mut state, dataset, config, opts)?;
    Ok(state)
}

/// Continues pretraining from `state.epoch` up to the configured epoch count,
/// then drops the linear head and moves the state to meta-training.
pub fn run_classification_stage(
    state: &mut TrainState,
    dataset: &Dataset,
    config: &TrainConfig,
    opts: &mut RunOptions<'_>,
) -> Result<()> {
    config.validate()?;
    if state.stage != Stage::Classification {
        return Ok(());
    }
    let cfg = &config.stage1;
    let labels: BTreeMap<ClassId, usize> = state
        .base_classes
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let pool: Vec<usize> = state
        .base_classes
        .iter()
        .flat_map(|&c| dataset.examples_of(c).iter().copied())
        .collect();
    if pool.is_empty() {
        return Err(Error::InsufficientExamples {
            class_id: state.base_classes[0],
            have: 0,
            need: 1,
            line: 0,
        });
    }
    let sgd = Sgd {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    if state.optimizer == OptimizerState::None {
        state.optimizer = Sgd::init(&stage1_params(state));
    }
    while state.epoch < cfg.epochs {
        let lr = cfg.lr_at_epoch(state.epoch);
        let mut order = pool.clone();
        order.shuffle(&mut rng_for(state.seed, Stream::Stage1Shuffle, state.epoch as u64));
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let targets: Vec<usize> = batch
                .iter()
                .map(|&i| labels[&dataset.examples()[i].class_id])
                .collect();
            let head = state.classifier.as_ref().expect("classifier present in pretraining");
            let mut g = Graph::new();
            let enc = state.encoder.register(&mut g, true);
            let w = g.param(head.weight.clone());
            let b = g.param(head.bias.clone());
            let x = g.constant(dataset.image_matrix(batch));
            let emb = check_forward(state.encoder.forward(&mut g, &enc, x), state, opts)?;
            let logits = g.matmul_bt(emb, w);
            let logits = g.add_row(logits, b);
            let accuracy = accuracy_of(g.value(logits), &targets);
            let loss = g.cross_entropy(logits, &targets)?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(opts.divergence(state));
            }
            let grads = g.backward(loss);
            let vars: Vec<_> = enc.into_iter().chain([w, b]).collect();
            let grads: Vec<Matrix> = vars.iter().map(|&v| grads.get_or_zeros(v, g.value(v))).collect();
            let mut params = stage1_params(state);
            sgd.step(&mut state.optimizer, &mut params, &grads, lr)?;
            if !all_finite(&params) {
                return Err(opts.divergence(state));
            }
            set_stage1_params(state, params);
            state.step += 1;
            let n = batch.len() as f64;
            loss_sum += loss_value * n;
            acc_sum += accuracy * n;
            opts.emit(&MetricRecord {
                kind: RecordKind::Step,
                stage: Stage::Classification,
                epoch: state.epoch,
                step: state.step,
                class_loss: Some(loss_value),
                vs_loss: None,
                total: Some(loss_value),
                accuracy,
                lr,
                tau_cls: state.tau_cls(),
            })?;
        }
        let n = pool.len() as f64;
        let record = MetricRecord {
            kind: RecordKind::Epoch,
            stage: Stage::Classification,
            epoch: state.epoch,
            step: state.step,
            class_loss: Some(loss_sum / n),
            vs_loss: None,
            total: Some(loss_sum / n),
            accuracy: acc_sum / n,
            lr,
            tau_cls: state.tau_cls(),
        };
        opts.emit(&record)?;
        state.metrics.push(record);
        state.epoch += 1;
        opts.maybe_checkpoint(state)?;
    }
    state.enter_meta_stage();
    Ok(())
}

/// Parameter leaves of one meta-training graph.
struct MetaGraph {
    g: Graph,
    enc: Vec<Var>,
    log_tau: Var,
    tau: Var,
    proj: Option<Var>,
}

impl MetaGraph {
    fn new(state: &TrainState, trainable: bool) -> Self {
        let mut g = Graph::new();
        let enc = state.encoder.register(&mut g, trainable);
        let leaf = |g: &mut Graph, m: Matrix| if trainable { g.param(m) } else { g.constant(m) };
        let log_tau = leaf(&mut g, Matrix::scalar(state.log_tau_cls));
        let tau = g.exp(log_tau);
        let proj = state.projection.as_ref().map(|p| leaf(&mut g, p.clone()));
        Self {
            g,
            enc,
            log_tau,
            tau,
            proj,
        }
    }
}

fn semantic_source<'a>(config: &Stage2Config, bank: Option<&'a SemanticBank>) -> Result<Option<&'a SemanticBank>> {
    match (config.use_vs_alignment, bank) {
        (false, _) => Ok(None),
        (true, None) => Err(Error::InvalidArgument(
            "alignment is enabled but no description bank was given".into(),
        )),
        (true, Some(b)) => Ok(Some(b)),
    }
}

/// Adds one episode's objective to `mg`. `index` is the episode's position in
/// the stage-2 stream and seeds description subsampling.
#[allow(clippy::too_many_arguments)]
fn add_episode(
    mg: &mut MetaGraph,
    state: &TrainState,
    dataset: &Dataset,
    bank: Option<&SemanticBank>,
    config: &Stage2Config,
    ep: &Episode,
    index: u64,
    opts: &RunOptions<'_>,
) -> Result<EpisodeTerms> {
    let g = &mut mg.g;
    let sx = g.constant(dataset.image_matrix(&ep.support_indices()));
    let support = check_forward(state.encoder.forward(g, &mg.enc, sx), state, opts)?;
    let qx = g.constant(dataset.image_matrix(&ep.query_indices()));
    let queries = check_forward(state.encoder.forward(g, &mg.enc, qx), state, opts)?;
    let semantic = match bank {
        None => None,
        Some(bank) => {
            // With a trained projection the bank supplies raw description
            // means and the projection is applied in the graph.
            let raw = mg.proj.is_some();
            let mut rng = rng_for(state.seed, Stream::Descriptions, index);
            let d_c = config.descriptions_per_prototype.unwrap_or(usize::MAX);
            let rows = ep
                .class_ids
                .iter()
                .map(|&c| bank.sample_prototype(c, d_c, raw, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let rows = g.constant(Matrix::from_rows(&rows));
            Some(match mg.proj {
                Some(p) => g.matmul_bt(rows, p),
                None => rows,
            })
        }
    };
    let inputs = EpisodeInputs {
        support,
        support_groups: ep.support_groups(),
        queries,
        query_labels: ep.query_labels(),
        tau_cls: mg.tau,
        semantic,
    };
    check_forward(episode_objective(g, inputs, &config.objective), state, opts)
}

fn breakdown(g: &Graph, terms: &EpisodeTerms) -> LossBreakdown {
    LossBreakdown {
        class_loss: g.value(terms.class_loss).item(),
        vs_loss: terms.vs_loss.map(|v| g.value(v).item()),
        total: g.value(terms.total).item(),
        accuracy: terms.accuracy,
    }
}

/// Loss terms of the current parameters on one episode, without updating
/// anything.
pub fn episode_loss(
    state: &TrainState,
    dataset: &Dataset,
    bank: Option<&SemanticBank>,
    config: &Stage2Config,
    episode: &Episode,
    index: u64,
) -> Result<LossBreakdown> {
    let bank = semantic_source(config, bank)?;
    let mut mg = MetaGraph::new(state, false);
    let opts = RunOptions::default();
    let terms = add_episode(&mut mg, state, dataset, bank, config, episode, index, &opts)?;
    Ok(breakdown(&mg.g, &terms))
}

/// The `j`-th episode of optimizer step `step`.
pub fn meta_episode(state: &TrainState, dataset: &Dataset, config: &Stage2Config, step: usize, j: usize) -> Result<(Episode, u64)> {
    let index = (step * config.tasks_per_batch + j) as u64;
    let mut rng = rng_for(state.seed, Stream::Stage2Episode, index);
    let ep = sample_episode(dataset.classes(SplitKind::Base), dataset, config.episode_spec(), &mut rng)?;
    Ok((ep, index))
}

/// One optimizer step over `tasks_per_batch` episodes from the base split.
/// Returns the task-averaged loss terms and query accuracy.
pub fn meta_step(
    state: &mut TrainState,
    dataset: &Dataset,
    bank: Option<&SemanticBank>,
    config: &Stage2Config,
) -> Result<LossBreakdown> {
    meta_step_inner(state, dataset, bank, config, &RunOptions::default())
}

fn meta_step_inner(
    state: &mut TrainState,
    dataset: &Dataset,
    bank: Option<&SemanticBank>,
    config: &Stage2Config,
    opts: &RunOptions<'_>,
) -> Result<LossBreakdown> {
    let bank = semantic_source(config, bank)?;
    let tasks = config.tasks_per_batch;
    let mut mg = MetaGraph::new(state, true);
    let mut totals = Vec::with_capacity(tasks);
    let (mut class_sum, mut vs_sum, mut acc_sum) = (0.0, 0.0, 0.0);
    for j in 0..tasks {
        let (ep, index) = meta_episode(state, dataset, config, state.step, j)?;
        let terms = add_episode(&mut mg, state, dataset, bank, config, &ep, index, opts)?;
        let b = breakdown(&mg.g, &terms);
        class_sum += b.class_loss;
        vs_sum += b.vs_loss.unwrap_or(0.0);
        acc_sum += b.accuracy;
        totals.push(terms.total);
    }
    let MetaGraph {
        mut g,
        enc,
        log_tau,
        proj,
        ..
    } = mg;
    let total = g.mean_scalars(&totals);
    let total_value = g.value(total).item();
    if !total_value.is_finite() {
        return Err(opts.divergence(state));
    }
    let grads = g.backward(total);
    let vars: Vec<Var> = enc.into_iter().chain([log_tau]).chain(proj).collect();
    let grads: Vec<Matrix> = vars.iter().map(|&v| grads.get_or_zeros(v, g.value(v))).collect();

    let adam = Adam {
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.adam_eps,
    };
    let mut params = meta_params(state);
    adam.step(&mut state.optimizer, &mut params, &grads, config.lr)?;
    if !all_finite(&params) {
        return Err(opts.divergence(state));
    }
    set_meta_params(state, params);
    state.step += 1;
    let t = tasks as f64;
    Ok(LossBreakdown {
        class_loss: class_sum / t,
        vs_loss: bank.is_some().then(|| vs_sum / t),
        total: total_value,
        accuracy: acc_sum / t,
    })
}

fn check_bank(state: &TrainState, dataset: &Dataset, bank: Option<&SemanticBank>, config: &Stage2Config) -> Result<()> {
    if !config.use_vs_alignment {
        return Ok(());
    }
    let bank = bank.ok_or_else(|| {
        Error::InvalidArgument("alignment is enabled but no description bank was given".into())
    })?;
    if bank.output_dim() != state.encoder.output_dim {
        return Err(Error::ShapeMismatch(format!(
            "semantic prototypes have width {}, visual embeddings {}",
            bank.output_dim(),
            state.encoder.output_dim
        )));
    }
    match dataset.classes(SplitKind::Base).iter().find(|&&c| !bank.contains(c)) {
        Some(&class_id) => Err(Error::MissingDescriptions { class_id }),
        None => Ok(()),
    }
}

/// Continues meta-training from `state.epoch` up to the configured epoch
/// count. Each epoch is `steps_per_epoch` Adam steps; episode `j` of step `s`
/// is drawn from the stream `(seed, s * tasks_per_batch + j)`.
pub fn train_meta_stage(
    state: &mut TrainState,
    dataset: &Dataset,
    bank: Option<&SemanticBank>,
    config: &TrainConfig,
    opts: &mut RunOptions<'_>,
) -> Result<()> {
    config.validate()?;
    if state.stage != Stage::Meta {
        return Err(Error::InvalidArgument(
            "meta-training needs a state whose pretraining has finished".into(),
        ));
    }
    let cfg = &config.stage2;
    check_bank(state, dataset, bank, cfg)?;
    let spec = cfg.episode_spec();
    let base = dataset.classes(SplitKind::Base);
    if base.len() < spec.n_way {
        return Err(Error::TooFewClasses {
            have: base.len(),
            need: spec.n_way,
        });
    }
    if cfg.select_on_val {
        let val = dataset.classes(SplitKind::Val).len();
        if val < spec.n_way {
            return Err(Error::TooFewClasses {
                have: val,
                need: spec.n_way,
            });
        }
    }
    if state.optimizer == OptimizerState::None {
        if state.step != 0 {
            return Err(Error::InvalidArgument("meta state has steps but no optimizer buffers".into()));
        }
        state.projection = match (cfg.use_vs_alignment, cfg.projection, bank) {
            (true, ProjectionMode::Trainable, Some(b)) => Some(b.projection().clone()),
            _ => None,
        };
        state.log_tau_cls = cfg.objective.tau_cls_init.ln();
        state.optimizer = Adam::init(&meta_params(state));
    }
    while state.epoch < cfg.epochs {
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..cfg.steps_per_epoch {
            let r = meta_step_inner(state, dataset, bank, cfg, opts)?;
            sums.0 += r.class_loss;
            sums.1 += r.vs_loss.unwrap_or(0.0);
            sums.2 += r.total;
            sums.3 += r.accuracy;
            opts.emit(&MetricRecord {
                kind: RecordKind::Step,
                stage: Stage::Meta,
                epoch: state.epoch,
                step: state.step,
                class_loss: Some(r.class_loss),
                vs_loss: r.vs_loss,
                total: Some(r.total),
                accuracy: r.accuracy,
                lr: cfg.lr,
                tau_cls: state.tau_cls(),
            })?;
        }
        let n = cfg.steps_per_epoch as f64;
        let record = MetricRecord {
            kind: RecordKind::Epoch,
            stage: Stage::Meta,
            epoch: state.epoch,
            step: state.step,
            class_loss: Some(sums.0 / n),
            vs_loss: cfg.use_vs_alignment.then(|| sums.1 / n),
            total: Some(sums.2 / n),
            accuracy: sums.3 / n,
            lr: cfg.lr,
            tau_cls: state.tau_cls(),
        };
        opts.emit(&record)?;
        state.metrics.push(record);
        if cfg.select_on_val {
            validate_and_track(state, dataset, config, opts)?;
        }
        state.epoch += 1;
        opts.maybe_checkpoint(state)?;
    }
    if let Some(best) = state.best.take() {
        state.encoder = best.encoder.clone();
        state.log_tau_cls = best.log_tau_cls;
        state.projection = best.projection.clone();
        state.best = Some(best);
    }
    Ok(())
}

/// Scores the current encoder on a fixed set of validation episodes and
/// keeps a snapshot if it beats the best so far.
fn validate_and_track(
    state: &mut TrainState,
    dataset: &Dataset,
    config: &TrainConfig,
    opts: &mut RunOptions<'_>,
) -> Result<()> {
    let cfg = &config.stage2;
    let report = evaluate_with(
        &state.encoder,
        dataset,
        SplitKind::Val,
        cfg.episode_spec(),
        cfg.val_episodes,
        derive_seed(state.seed, Stream::Validation, 0),
        cfg.objective.norm_eps,
    )?;
    let record = MetricRecord {
        kind: RecordKind::Validation,
        stage: Stage::Meta,
        epoch: state.epoch,
        step: state.step,
        class_loss: None,
        vs_loss: None,
        total: None,
        accuracy: report.mean_accuracy,
        lr: cfg.lr,
        tau_cls: state.tau_cls(),
    };
    opts.emit(&record)?;
    state.metrics.push(record);
    if state.best.as_ref().is_none_or(|b| report.mean_accuracy > b.accuracy) {
        state.best = Some(BestSnapshot {
            epoch: state.epoch,
            accuracy: report.mean_accuracy,
            encoder: state.encoder.clone(),
            log_tau_cls: state.log_tau_cls,
            projection: state.projection.clone(),
        });
    }
    Ok(())
}

/// Full pipeline: pretraining (if enabled) followed by meta-training.
pub fn train(
    dataset: &Dataset,
    bank: Option<&SemanticBank>,
    config: &TrainConfig,
    opts: &mut RunOptions<'_>,
) -> Result<TrainState> {
    let mut state = train_classification_stage(dataset, config, config.seed, opts)?;
    train_meta_stage(&mut state, dataset, bank, config, opts)?;
    Ok(state)
}
