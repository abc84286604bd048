//! Prototype and loss math for episodic training.
//!
//! Two layers live here. The graph builders ([`cosine_logits`],
//! [`alignment_loss_graph`], [`episode_objective`]) are what training
//! differentiates through. The plain-value functions ([`vs_alignment_loss`],
//! [`query_class_probabilities`], ...) evaluate the same graph code on
//! constants, so tests against them exercise the training path.
//!
//! The alignment loss anchors on each visual prototype `v_i`:
//!
//! ```text
//! l_i = -log( e^{cos(v_i, s_i)/t} / ( sum_{k != i} e^{cos(v_i, v_k)/t} + sum_k e^{cos(v_i, s_k)/t} ) )
//! ```
//!
//! Note the semantic sum keeps `k = i`, so the positive pair appears in the
//! denominator. The reported loss is the mean of `l_i` over anchors.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Weight of the alignment term in the total loss.
    pub lambda_vs: f64,
    /// Initial value of the trainable classifier temperature.
    pub tau_cls_init: f64,
    /// Fixed temperature of the alignment loss.
    pub tau_vs: f64,
    /// Floor for vector norms before cosine similarity; `None` makes
    /// zero-norm prototypes an error.
    pub norm_eps: Option<f64>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_vs: 2.5,
            tau_cls_init: 10.0,
            tau_vs: 0.1,
            norm_eps: None,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_vs >= 0.0 && self.lambda_vs.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda_vs must be finite and >= 0, got {}",
                self.lambda_vs
            )));
        }
        if !(self.tau_cls_init > 0.0 && self.tau_cls_init.is_finite()) {
            return Err(Error::InvalidConfig("tau_cls_init must be positive".into()));
        }
        if !(self.tau_vs > 0.0 && self.tau_vs.is_finite()) {
            return Err(Error::InvalidConfig("tau_vs must be positive".into()));
        }
        if let Some(e) = self.norm_eps {
            if !(e > 0.0) {
                return Err(Error::InvalidConfig("norm_eps must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Visual and semantic prototypes in episode class order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    visual: Vec<Vec<f64>>,
    semantic: Vec<Vec<f64>>,
    dim: usize,
}

impl PrototypeSet {
    pub fn new(visual: Vec<Vec<f64>>, semantic: Vec<Vec<f64>>) -> Result<Self> {
        if visual.len() != semantic.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} visual vs {} semantic prototypes",
                visual.len(),
                semantic.len()
            )));
        }
        let dim = visual.first().map_or(0, Vec::len);
        for v in visual.iter().chain(&semantic) {
            if v.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "prototype of length {} in a set of dimension {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("prototype".into()));
            }
        }
        Ok(Self {
            visual,
            semantic,
            dim,
        })
    }

    pub fn visual(&self) -> &[Vec<f64>] {
        &self.visual
    }

    pub fn semantic(&self) -> &[Vec<f64>] {
        &self.semantic
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.visual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.is_empty()
    }
}

/// Loss components for one episode or an averaged batch of episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub class_loss: f64,
    /// `None` when alignment is disabled.
    pub vs_loss: Option<f64>,
    pub total: f64,
    pub accuracy: f64,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector("cosine similarity of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn mean_of<V: AsRef<[f64]>>(items: &[V], what: &str) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} of an empty list")));
    }
    let rows: Vec<&[f64]> = items.iter().map(AsRef::as_ref).collect();
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::ShapeMismatch(format!("{what} over ragged vectors")));
    }
    let mut g = Graph::new();
    let x = g.constant(Matrix::from_rows(&rows));
    let m = g.group_mean(x, vec![(0..rows.len()).collect()])?;
    Ok(g.value(m).row(0).to_vec())
}

/// Mean of a class's support embeddings.
pub fn visual_prototype<V: AsRef<[f64]>>(support_embeddings: &[V]) -> Result<Vec<f64>> {
    mean_of(support_embeddings, "visual prototype")
}

/// Mean of a class's `d_c` description embeddings. The result may be the
/// zero vector (e.g. `v` and `-v`); cosine consumers reject it.
pub fn semantic_prototype<V: AsRef<[f64]>>(description_embeddings: &[V], d_c: usize) -> Result<Vec<f64>> {
    if description_embeddings.len() != d_c {
        return Err(Error::InvalidArgument(format!(
            "d_c = {d_c} but {} description embeddings given",
            description_embeddings.len()
        )));
    }
    mean_of(description_embeddings, "semantic prototype")
}

/// `tau · cos(query_i, prototype_j)` as an `rows(queries) × rows(prototypes)` node.
pub fn cosine_logits(
    g: &mut Graph,
    queries: Var,
    prototypes: Var,
    tau: Var,
    eps: Option<f64>,
) -> Result<Var> {
    let qn = g.normalize_rows(queries, eps)?;
    let pn = g.normalize_rows(prototypes, eps)?;
    let cos = g.matmul_bt(qn, pn);
    Ok(g.mul_scalar(cos, tau))
}

/// Alignment loss on already-normalized prototype rows.
fn alignment_from_normalized(g: &mut Graph, visual: Var, semantic: Var, tau_vs: f64) -> Result<Var> {
    let n = g.value(visual).rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "alignment loss needs at least 2 classes, got {n}"
        )));
    }
    if g.value(semantic).shape() != g.value(visual).shape() {
        return Err(Error::ShapeMismatch(format!(
            "semantic prototypes {:?} vs visual {:?}",
            g.value(semantic).shape(),
            g.value(visual).shape()
        )));
    }
    let inv_tau = 1.0 / tau_vs;
    let vv = g.matmul_bt(visual, visual);
    let vv = g.scale(vv, inv_tau);
    let vv = g.mask_diagonal(vv);
    let vs = g.matmul_bt(visual, semantic);
    let vs = g.scale(vs, inv_tau);
    let logits = g.concat_cols(vv, vs);
    let targets: Vec<usize> = (0..n).map(|i| n + i).collect();
    g.cross_entropy(logits, &targets)
}

/// Mean visual-anchored alignment loss between `N × d` prototype nodes.
pub fn alignment_loss_graph(
    g: &mut Graph,
    visual: Var,
    semantic: Var,
    tau_vs: f64,
    eps: Option<f64>,
) -> Result<Var> {
    let vn = g.normalize_rows(visual, eps)?;
    let sn = g.normalize_rows(semantic, eps)?;
    alignment_from_normalized(g, vn, sn, tau_vs)
}

pub fn vs_alignment_loss(prototypes: &PrototypeSet, tau_vs: f64) -> Result<f64> {
    if !(tau_vs > 0.0) {
        return Err(Error::InvalidArgument("tau_vs must be positive".into()));
    }
    if prototypes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "alignment loss needs at least 2 classes, got {}",
            prototypes.len()
        )));
    }
    let mut g = Graph::new();
    let v = g.constant(Matrix::from_rows(prototypes.visual()));
    let s = g.constant(Matrix::from_rows(prototypes.semantic()));
    let l = alignment_loss_graph(&mut g, v, s, tau_vs, None)?;
    Ok(g.value(l).item())
}

/// Softmax over `tau · cos(query, prototype_k)`.
pub fn query_class_probabilities<V: AsRef<[f64]>>(
    query_embedding: &[f64],
    prototypes: &[V],
    tau_cls: f64,
) -> Result<Vec<f64>> {
    if !(tau_cls > 0.0) {
        return Err(Error::InvalidArgument("tau_cls must be positive".into()));
    }
    if prototypes.is_empty() {
        return Err(Error::InvalidArgument("no prototypes".into()));
    }
    let rows: Vec<&[f64]> = prototypes.iter().map(AsRef::as_ref).collect();
    if rows.iter().any(|r| r.len() != query_embedding.len()) {
        return Err(Error::ShapeMismatch("query and prototype lengths differ".into()));
    }
    let mut g = Graph::new();
    let q = g.constant(Matrix::from_rows(&[query_embedding]));
    let p = g.constant(Matrix::from_rows(&rows));
    let t = g.constant(Matrix::scalar(tau_cls));
    let z = cosine_logits(&mut g, q, p, t, None)?;
    Ok(softmax(g.value(z).row(0)))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(Matrix::from_rows(&[logits]));
    let l = g.cross_entropy(z, &[target])?;
    Ok(g.value(l).item())
}

/// `-log probs[target]` for an already-normalized distribution.
pub fn cross_entropy_from_probs(probs: &[f64], target: usize) -> Result<f64> {
    let p = *probs.get(target).ok_or_else(|| {
        Error::InvalidArgument(format!("target {target} out of range for {} classes", probs.len()))
    })?;
    Ok(-p.ln())
}

/// Mean cross-entropy over a batch of logit rows.
pub fn batch_cross_entropy<V: AsRef<[f64]>>(logits: &[V], targets: &[usize]) -> Result<f64> {
    let rows: Vec<&[f64]> = logits.iter().map(AsRef::as_ref).collect();
    let mut g = Graph::new();
    let z = g.constant(Matrix::from_rows(&rows));
    let l = g.cross_entropy(z, targets)?;
    Ok(g.value(l).item())
}

/// `class_loss + lambda_vs * vs_loss` with a single rounding.
pub fn combined_loss(class_loss: f64, vs_loss: f64, lambda_vs: f64) -> f64 {
    lambda_vs.mul_add(vs_loss, class_loss)
}

/// Graph nodes for one episode's objective.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeTerms {
    pub class_loss: Var,
    pub vs_loss: Option<Var>,
    pub total: Var,
    pub accuracy: f64,
}

/// Inputs for [`episode_objective`]. `semantic` holds one prototype row per
/// episode class when alignment is on.
pub struct EpisodeInputs {
    pub support: Var,
    pub support_groups: Vec<Vec<usize>>,
    pub queries: Var,
    pub query_labels: Vec<usize>,
    pub tau_cls: Var,
    pub semantic: Option<Var>,
}

/// Builds prototypes from the support rows, the query cross-entropy under the
/// cosine classifier and, when `semantic` is set, the weighted alignment term.
pub fn episode_objective(g: &mut Graph, inputs: EpisodeInputs, config: &ObjectiveConfig) -> Result<EpisodeTerms> {
    let protos = g.group_mean(inputs.support, inputs.support_groups)?;
    let pn = g.normalize_rows(protos, config.norm_eps)?;
    let qn = g.normalize_rows(inputs.queries, config.norm_eps)?;
    let cos = g.matmul_bt(qn, pn);
    let logits = g.mul_scalar(cos, inputs.tau_cls);
    let accuracy = accuracy_of(g.value(logits), &inputs.query_labels);
    let class_loss = g.cross_entropy(logits, &inputs.query_labels)?;
    match inputs.semantic {
        None => Ok(EpisodeTerms {
            class_loss,
            vs_loss: None,
            total: class_loss,
            accuracy,
        }),
        Some(sem) => {
            let sn = g.normalize_rows(sem, config.norm_eps)?;
            let vs = alignment_from_normalized(g, pn, sn, config.tau_vs)?;
            let total = g.weighted_sum(class_loss, vs, config.lambda_vs);
            Ok(EpisodeTerms {
                class_loss,
                vs_loss: Some(vs),
                total,
                accuracy,
            })
        }
    }
}

/// Fraction of rows whose argmax (first on ties) equals the label.
pub fn accuracy_of(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
