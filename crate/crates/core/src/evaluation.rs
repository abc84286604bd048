//! Episodic evaluation on held-out classes and paired condition comparisons.
//!
//! Evaluation episode `i` is always drawn from the stream `(seed, i)`, so two
//! models evaluated with the same seed see exactly the same episodes and their
//! per-episode accuracies can be differenced.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::datasets::{Dataset, SplitKind};
use crate::encoders::{Embedder, SemanticBank};
use crate::episodes::{sample_episode, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::objectives::accuracy_of;
use crate::seed::{rng_for, Stream};
use crate::training::{run_classification_stage, train_meta_stage, RunOptions, TrainConfig, TrainState};

pub const CI_METHOD: &str = "normal approximation: 1.96 * s / sqrt(n), s with n - 1 denominator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitKind,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub n_episodes: usize,
    pub seed: u64,
    pub mean_accuracy: f64,
    /// Half-width of the 95% confidence interval of the mean.
    pub ci95_halfwidth: f64,
    pub ci_method: String,
    /// SHA-256 over the sampled class and example indices.
    pub episodes_digest: String,
    pub per_episode_accuracy: Vec<f64>,
}

/// Sample mean and 95% half-width; the half-width is 0 for fewer than two
/// values.
pub fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let s = (ss / (n - 1) as f64).sqrt();
    (mean, 1.96 * s / (n as f64).sqrt())
}

/// The `n` episodes used for evaluation with `seed`.
pub fn evaluation_episodes(
    dataset: &Dataset,
    split: SplitKind,
    spec: EpisodeSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if n == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let classes = dataset.classes(split);
    (0..n)
        .map(|i| sample_episode(classes, dataset, spec, &mut rng_for(seed, Stream::Evaluation, i as u64)))
        .collect()
}

pub fn episodes_digest(episodes: &[Episode]) -> String {
    let mut h = Sha256::new();
    for ep in episodes {
        for c in &ep.class_ids {
            h.update(c.0.to_le_bytes());
        }
        for i in ep.support_indices().into_iter().chain(ep.query_indices()) {
            h.update((i as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Query accuracy of the nearest-prototype cosine classifier on one episode.
pub fn episode_accuracy(
    embedder: &dyn Embedder,
    dataset: &Dataset,
    episode: &Episode,
    norm_eps: Option<f64>,
) -> Result<f64> {
    let support = episode.support_indices();
    let mut all = support.clone();
    all.extend(episode.query_indices());
    let emb = embedder.embed(&dataset.image_matrix(&all))?;
    let s = support.len();
    let support_emb = emb.select_rows(&(0..s).collect::<Vec<_>>());
    let query_emb = emb.select_rows(&(s..all.len()).collect::<Vec<_>>());

    let mut g = Graph::new();
    let sv = g.constant(support_emb);
    let qv = g.constant(query_emb);
    let protos = g.group_mean(sv, episode.support_groups())?;
    let pn = g.normalize_rows(protos, norm_eps)?;
    let qn = g.normalize_rows(qv, norm_eps)?;
    let cos = g.matmul_bt(qn, pn);
    Ok(accuracy_of(g.value(cos), &episode.query_labels()))
}

pub fn evaluate_with(
    embedder: &dyn Embedder,
    dataset: &Dataset,
    split: SplitKind,
    spec: EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    norm_eps: Option<f64>,
) -> Result<EvalReport> {
    let episodes = evaluation_episodes(dataset, split, spec, n_episodes, seed)?;
    let per_episode_accuracy = episodes
        .iter()
        .map(|ep| episode_accuracy(embedder, dataset, ep, norm_eps))
        .collect::<Result<Vec<_>>>()?;
    let (mean_accuracy, ci95_halfwidth) = mean_and_ci95(&per_episode_accuracy);
    Ok(EvalReport {
        split,
        n_way: spec.n_way,
        k_shot: spec.k_shot,
        q_per_class: spec.q_per_class,
        n_episodes,
        seed,
        mean_accuracy,
        ci95_halfwidth,
        ci_method: CI_METHOD.into(),
        episodes_digest: episodes_digest(&episodes),
        per_episode_accuracy,
    })
}

/// Evaluates the encoder of a trained state.
pub fn evaluate(
    state: &TrainState,
    dataset: &Dataset,
    split: SplitKind,
    spec: EpisodeSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with(&state.encoder, dataset, split, spec, n_episodes, seed, None)
}

/// Mean of `other - baseline` over paired episodes and its standard error.
pub fn paired_delta(baseline: &[f64], other: &[f64]) -> Result<(f64, f64)> {
    if baseline.len() != other.len() || baseline.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "paired comparison needs equal non-empty samples, got {} and {}",
            baseline.len(),
            other.len()
        )));
    }
    let d: Vec<f64> = other.iter().zip(baseline).map(|(o, b)| o - b).collect();
    let (mean, ci) = mean_and_ci95(&d);
    Ok((mean, ci / 1.96))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub label: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub split: SplitKind,
    pub spec: EpisodeSpec,
    pub n_episodes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub label: String,
    pub encoder_checksum: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub baseline: String,
    pub other: String,
    pub n: usize,
    pub mean_delta: f64,
    pub paired_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub plan: EvalPlan,
    pub results: Vec<ConditionResult>,
    /// Every condition against the first one.
    pub deltas: Vec<PairedDelta>,
}

impl ComparisonTable {
    pub fn render_text(&self) -> String {
        let p = &self.plan;
        let mut out = format!(
            "{}-way {}-shot, {} queries/class, {} {} episodes, seed {}\n",
            p.spec.n_way,
            p.spec.k_shot,
            p.spec.q_per_class,
            p.n_episodes,
            p.split.as_str(),
            p.seed
        );
        let width = self.results.iter().map(|r| r.label.len()).max().unwrap_or(0).max(9);
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}", "condition", "accuracy", "ci95");
        for r in &self.results {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7.2}%  {:>7.2}%",
                r.label,
                100.0 * r.report.mean_accuracy,
                100.0 * r.report.ci95_halfwidth
            );
        }
        for d in &self.deltas {
            let _ = writeln!(
                out,
                "{} - {}: {:+.2}% (paired SE {:.2}%, n = {})",
                d.other,
                d.baseline,
                100.0 * d.mean_delta,
                100.0 * d.paired_se,
                d.n
            );
        }
        out
    }

    /// One JSON object per condition, then one per delta.
    pub fn to_jsonl(&self) -> Result<String> {
        fn line<T: Serialize>(out: &mut String, v: &T) -> Result<()> {
            out.push_str(&serde_json::to_string(v).map_err(|e| Error::Serde(e.to_string()))?);
            out.push('\n');
            Ok(())
        }
        let mut out = String::new();
        for r in &self.results {
            line(&mut out, r)?;
        }
        for d in &self.deltas {
            line(&mut out, d)?;
        }
        Ok(out)
    }
}

/// Trains each condition and evaluates all of them on the same episodes.
/// Conditions whose encoder, pretraining settings and seed coincide share a
/// single pretraining run.
pub fn compare_conditions(
    conditions: &[Condition],
    dataset: &Dataset,
    bank: Option<&SemanticBank>,
    plan: &EvalPlan,
) -> Result<ComparisonTable> {
    if conditions.is_empty() {
        return Err(Error::InvalidArgument("no conditions to compare".into()));
    }
    let mut pretrained: BTreeMap<String, TrainState> = BTreeMap::new();
    let mut results = Vec::with_capacity(conditions.len());
    for cond in conditions {
        let c = &cond.config;
        let key = serde_json::to_string(&(&c.encoder, &c.stage1, c.seed))
            .map_err(|e| Error::Serde(e.to_string()))?;
        let mut state = match pretrained.get(&key) {
            Some(s) => s.clone(),
            None => {
                let mut s = TrainState::init(c, dataset, c.seed)?;
                run_classification_stage(&mut s, dataset, c, &mut RunOptions::default())?;
                pretrained.insert(key, s.clone());
                s
            }
        };
        train_meta_stage(&mut state, dataset, bank, c, &mut RunOptions::default())?;
        let report = evaluate_with(
            &state.encoder,
            dataset,
            plan.split,
            plan.spec,
            plan.n_episodes,
            plan.seed,
            c.stage2.objective.norm_eps,
        )?;
        results.push(ConditionResult {
            label: cond.label.clone(),
            encoder_checksum: state.encoder.checksum(),
            report,
        });
    }
    let base = &results[0];
    let deltas = results[1..]
        .iter()
        .map(|r| {
            let (mean_delta, paired_se) =
                paired_delta(&base.report.per_episode_accuracy, &r.report.per_episode_accuracy)?;
            Ok(PairedDelta {
                baseline: base.label.clone(),
                other: r.label.clone(),
                n: plan.n_episodes,
                mean_delta,
                paired_se,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonTable {
        plan: *plan,
        results,
        deltas,
    })
}
