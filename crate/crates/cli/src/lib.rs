//! Experiment configuration and the commands behind the `vsalign` binary.
//!
//! A run directory holds everything a command produced: the resolved config
//! per command, `metrics.jsonl`, checkpoints and reports. Later stages read
//! the earlier stages' checkpoints from the same directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vsalign::datasets::{
    load_descriptions, load_manifest, synth_generate, write_descriptions, write_manifest, Dataset,
    DescriptionCorpus, SplitKind, SynthConfig,
};
use vsalign::encoders::{SemanticBank, SemanticConfig, SemanticEncoder};
use vsalign::episodes::EpisodeSpec;
use vsalign::evaluation::{compare_conditions, evaluate, Condition, EvalPlan, EvalReport};
use vsalign::seed::{derive_seed, Stream};
use vsalign::training::{
    load_checkpoint, run_classification_stage, save_checkpoint, train_meta_stage, JsonlMetricsWriter,
    RunOptions, TrainConfig, TrainState,
};

pub const DESCRIPTIONS_FILE: &str = "descriptions.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const META_CHECKPOINT: &str = "meta.ckpt";
pub const EVAL_REPORT: &str = "eval.json";
pub const COMPARE_JSONL: &str = "compare.jsonl";
pub const COMPARE_TEXT: &str = "compare.txt";
const CHECKPOINT_DIR: &str = "checkpoints";

/// A failure with its exit code: 1 for runtime failures, 2 for usage and
/// missing-prerequisite errors.
#[derive(Debug)]
pub struct CliError {
    pub class: String,
    pub message: String,
    pub code: u8,
}

impl CliError {
    pub fn usage(class: &str, message: impl Into<String>) -> Self {
        Self {
            class: class.into(),
            message: message.into(),
            code: 2,
        }
    }
}

impl fmt::Display for CliError {
    /// Single line: `error[class]: message`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.class, self.message.replace('\n', " "))
    }
}

impl From<vsalign::Error> for CliError {
    fn from(e: vsalign::Error) -> Self {
        use vsalign::Error as E;
        let code = match e {
            E::InvalidConfig(_) | E::InvalidArgument(_) | E::UnknownArchitecture(_) | E::TooFewClasses { .. } => 2,
            _ => 1,
        };
        Self {
            class: e.class().into(),
            message: e.to_string(),
            code,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        class: "io".into(),
        message: format!("{}: {e}", path.display()),
        code: 1,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Manifest to load; when absent the synthetic generator is used.
    pub manifest: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptionsSection {
    /// Description file; synthetic data brings its own corpus.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: SplitKind,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub episodes: usize,
    /// Derived from the master seed when absent.
    pub seed: Option<u64>,
    /// Defaults to the run directory's meta-training checkpoint.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: SplitKind::Novel,
            n_way: 5,
            k_shot: 1,
            q_per_class: 15,
            episodes: 600,
            seed: None,
            checkpoint: None,
        }
    }
}

/// One arm of `compare`: dotted overrides applied on top of the `train`
/// section, e.g. `stage2.use_vs_alignment=false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub label: String,
    #[serde(default)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub conditions: Vec<ConditionSpec>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            conditions: vec![
                ConditionSpec {
                    label: "meta-baseline".into(),
                    overrides: vec!["stage2.use_vs_alignment=false".into()],
                },
                ConditionSpec {
                    label: "meta-baseline+vs".into(),
                    overrides: vec!["stage2.use_vs_alignment=true".into()],
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for data generation, training and evaluation.
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetSection,
    pub descriptions: DescriptionsSection,
    pub semantic: SemanticConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub compare: CompareSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("vsalign-run"),
            dataset: DatasetSection::default(),
            descriptions: DescriptionsSection::default(),
            semantic: SemanticConfig::default(),
            train: TrainConfig::desk(),
            eval: EvalSection::default(),
            compare: CompareSection::default(),
        }
    }
}

/// Flags shared by every command.
#[derive(Debug, Clone, Default)]
pub struct GlobalOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub force: bool,
    pub no_vs: bool,
    pub overrides: Vec<String>,
}

/// Parses `VALUE` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::usage("usage", format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage("usage", format!("bad override key `{key}`")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::usage("usage", format!("override `{key}`: `{part}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

fn config_error(e: impl fmt::Display) -> CliError {
    CliError::usage("invalid-config", e.to_string())
}

/// Loads the config file (if any), applies overrides and flags, and fills in
/// derived values so the result is self-contained.
pub fn resolve_config(opts: &GlobalOptions) -> CliResult<ExperimentConfig> {
    let mut table = match &opts.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError {
                code: 2,
                ..io_error(path, e)
            })?;
            text.parse::<toml::Table>().map_err(config_error)?
        }
        None => toml::Table::new(),
    };
    for o in &opts.overrides {
        apply_override(&mut table, o)?;
    }
    let mut config: ExperimentConfig = toml::Value::Table(table).try_into().map_err(config_error)?;
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    if let Some(out) = &opts.out {
        config.out = out.clone();
    }
    if opts.no_vs {
        config.train.stage2.use_vs_alignment = false;
    }
    // TOML integers are signed 64-bit.
    if config.seed > i64::MAX as u64 {
        return Err(CliError::usage("invalid-config", format!("seed {} exceeds {}", config.seed, i64::MAX)));
    }
    config.train.seed = config.seed;
    if config.eval.seed.is_none() {
        config.eval.seed = Some(derive_seed(config.seed, Stream::Evaluation, 0) >> 1);
    }
    config.train.validate()?;
    config.eval_spec().validate()?;
    Ok(config)
}

impl ExperimentConfig {
    pub fn eval_spec(&self) -> EpisodeSpec {
        EpisodeSpec::new(self.eval.n_way, self.eval.k_shot, self.eval.q_per_class)
    }

    pub fn eval_plan(&self) -> EvalPlan {
        EvalPlan {
            split: self.eval.split,
            spec: self.eval_spec(),
            n_episodes: self.eval.episodes,
            seed: self.eval.seed.unwrap_or(0),
        }
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError {
            class: "serde".into(),
            message: e.to_string(),
            code: 1,
        })
    }

    /// The `train` section with a condition's overrides applied.
    pub fn condition_config(&self, spec: &ConditionSpec, no_vs: bool) -> CliResult<TrainConfig> {
        let mut table = toml::Value::try_from(&self.train)
            .map_err(config_error)?
            .as_table()
            .cloned()
            .unwrap_or_default();
        for o in &spec.overrides {
            apply_override(&mut table, o)?;
        }
        let mut c: TrainConfig = toml::Value::Table(table).try_into().map_err(config_error)?;
        c.seed = self.seed;
        if no_vs {
            c.stage2.use_vs_alignment = false;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Data, descriptions and the frozen semantic side for a config.
pub struct Inputs {
    pub dataset: Dataset,
    pub corpus: Option<DescriptionCorpus>,
    pub bank: Option<SemanticBank>,
}

fn needed_examples(config: &ExperimentConfig) -> usize {
    let s2 = &config.train.stage2;
    (s2.k_shot + s2.q_per_class).max(config.eval.k_shot + config.eval.q_per_class)
}

pub fn load_inputs(config: &ExperimentConfig) -> CliResult<Inputs> {
    let (dataset, synth_corpus) = match &config.dataset.manifest {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::usage("missing-input", format!("manifest {} not found", path.display())));
            }
            (load_manifest(path, needed_examples(config))?, None)
        }
        None => {
            let data = synth_generate(&config.dataset.synth, config.seed)?;
            (data.dataset, Some(data.corpus))
        }
    };
    let corpus = match &config.descriptions.path {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::usage(
                    "missing-input",
                    format!("description file {} not found", path.display()),
                ));
            }
            Some(load_descriptions(path, &dataset)?)
        }
        None => synth_corpus,
    };
    let bank = match &corpus {
        Some(c) => {
            let enc = SemanticEncoder::for_corpus(c, config.train.encoder.output_dim, &config.semantic)?;
            Some(SemanticBank::build(&enc, c)?)
        }
        None => None,
    };
    Ok(Inputs {
        dataset,
        corpus,
        bank,
    })
}

/// Creates `dir`, refusing a non-empty one unless `force` is set.
fn prepare_fresh_dir(dir: &Path, force: bool) -> CliResult<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(CliError::usage(
                "output-exists",
                format!("{} exists and is not empty; pass --force to write into it", dir.display()),
            ));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn require_dir(dir: &Path) -> CliResult<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::usage(
            "missing-prerequisite",
            format!("run directory {} does not exist", dir.display()),
        ))
    }
}

fn require_checkpoint(path: &Path, produced_by: &str) -> CliResult<TrainState> {
    if !path.is_file() {
        return Err(CliError::usage(
            "missing-prerequisite",
            format!("checkpoint {} not found; run `{produced_by}` first", path.display()),
        ));
    }
    Ok(load_checkpoint(path)?)
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn write_resolved_config(config: &ExperimentConfig, command: &str) -> CliResult<()> {
    write_file(&config.out.join(format!("{command}.config.toml")), config.to_toml()?.as_bytes())
}

fn run_options<'a>(dir: &Path, sink: &'a mut JsonlMetricsWriter) -> CliResult<RunOptions<'a>> {
    let ckpt = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt).map_err(|e| io_error(&ckpt, e))?;
    Ok(RunOptions {
        sink: Some(sink),
        checkpoint_dir: Some(ckpt),
        checkpoint_every: 1,
        ..Default::default()
    })
}

/// Writes the dataset manifest and the description corpus.
pub fn cmd_synth_data(config: &ExperimentConfig, force: bool) -> CliResult<String> {
    prepare_fresh_dir(&config.out, force)?;
    let data = synth_generate(&config.dataset.synth, config.seed)?;
    let manifest = write_manifest(&data.dataset, &config.out)?;
    write_descriptions(&data.corpus, &config.out.join(DESCRIPTIONS_FILE))?;
    write_resolved_config(config, "synth-data")?;
    Ok(format!(
        "wrote {} examples in {} classes to {}",
        data.dataset.len(),
        config.dataset.synth.num_classes(),
        manifest.display()
    ))
}

/// Runs supervised pretraining and saves the stage's final state.
pub fn cmd_pretrain(config: &ExperimentConfig, force: bool) -> CliResult<String> {
    prepare_fresh_dir(&config.out, force)?;
    let inputs = load_inputs(config)?;
    let metrics = config.out.join(METRICS_FILE);
    if metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| io_error(&metrics, e))?;
    }
    write_resolved_config(config, "pretrain")?;
    let mut writer = JsonlMetricsWriter::append(&metrics)?;
    let mut opts = run_options(&config.out, &mut writer)?;
    let mut state = TrainState::init(&config.train, &inputs.dataset, config.seed)?;
    run_classification_stage(&mut state, &inputs.dataset, &config.train, &mut opts)?;
    save_checkpoint(&state, &config.out.join(PRETRAIN_CHECKPOINT))?;
    let acc = state.metrics.last().map_or(f64::NAN, |r| r.accuracy);
    Ok(format!(
        "pretrained {} epochs; final train accuracy {:.2}%",
        config.train.stage1.epochs,
        100.0 * acc
    ))
}

/// Meta-trains from the run directory's pretraining checkpoint.
pub fn cmd_meta_train(config: &ExperimentConfig, force: bool) -> CliResult<String> {
    require_dir(&config.out)?;
    let done = config.out.join(META_CHECKPOINT);
    if done.exists() && !force {
        return Err(CliError::usage(
            "output-exists",
            format!("{} already exists; pass --force to retrain", done.display()),
        ));
    }
    let mut state = require_checkpoint(&config.out.join(PRETRAIN_CHECKPOINT), "pretrain")?;
    if state.seed != config.seed {
        return Err(CliError::usage(
            "invalid-config",
            format!("checkpoint was trained with seed {}, config has {}", state.seed, config.seed),
        ));
    }
    let inputs = load_inputs(config)?;
    write_resolved_config(config, "meta-train")?;
    let mut writer = JsonlMetricsWriter::append(&config.out.join(METRICS_FILE))?;
    let mut opts = run_options(&config.out, &mut writer)?;
    opts.last_checkpoint = Some(config.out.join(PRETRAIN_CHECKPOINT));
    train_meta_stage(&mut state, &inputs.dataset, inputs.bank.as_ref(), &config.train, &mut opts)?;
    save_checkpoint(&state, &done)?;
    Ok(format!(
        "meta-trained {} epochs (alignment {}); classifier temperature {:.3}",
        config.train.stage2.epochs,
        if config.train.stage2.use_vs_alignment { "on" } else { "off" },
        state.tau_cls()
    ))
}

/// Evaluates a meta-trained checkpoint; returns the report.
pub fn cmd_eval(config: &ExperimentConfig) -> CliResult<EvalReport> {
    let path = config.eval.checkpoint.clone().unwrap_or_else(|| config.out.join(META_CHECKPOINT));
    let state = require_checkpoint(&path, "meta-train")?;
    require_dir(&config.out)?;
    let inputs = load_inputs(config)?;
    let plan = config.eval_plan();
    let report = evaluate(&state, &inputs.dataset, plan.split, plan.spec, plan.n_episodes, plan.seed)?;
    write_resolved_config(config, "eval")?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError {
        class: "serde".into(),
        message: e.to_string(),
        code: 1,
    })?;
    write_file(&config.out.join(EVAL_REPORT), format!("{json}\n").as_bytes())?;
    Ok(report)
}

pub fn format_report(r: &EvalReport) -> String {
    format!(
        "{}-way {}-shot on {} episodes of the {} split: {:.2}% ± {:.2}%",
        r.n_way,
        r.k_shot,
        r.n_episodes,
        r.split.as_str(),
        100.0 * r.mean_accuracy,
        100.0 * r.ci95_halfwidth
    )
}

/// Trains every configured condition and evaluates all on shared episodes.
pub fn cmd_compare(config: &ExperimentConfig, force: bool, no_vs: bool) -> CliResult<String> {
    prepare_fresh_dir(&config.out, force)?;
    if config.compare.conditions.is_empty() {
        return Err(CliError::usage("invalid-config", "compare.conditions is empty"));
    }
    let inputs = load_inputs(config)?;
    let conditions = config
        .compare
        .conditions
        .iter()
        .map(|spec| {
            Ok(Condition {
                label: spec.label.clone(),
                config: config.condition_config(spec, no_vs)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_resolved_config(config, "compare")?;
    let table = compare_conditions(&conditions, &inputs.dataset, inputs.bank.as_ref(), &config.eval_plan())?;
    let text = table.render_text();
    write_file(&config.out.join(COMPARE_JSONL), table.to_jsonl()?.as_bytes())?;
    write_file(&config.out.join(COMPARE_TEXT), text.as_bytes())?;
    Ok(text.trim_end().to_string())
}
