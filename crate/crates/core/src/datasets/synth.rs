//! Synthetic few-shot data with controllable description informativeness.
//!
//! Each class is a Gaussian cluster in a latent space. Images are the latent
//! codes pushed through a fixed random linear map and a sigmoid, optionally
//! disturbed by class-independent nuisance factors and pixel noise. Descriptions
//! carry the class's latent mean direction (seen through a second fixed
//! random map) scaled by `informativeness`, plus isotropic noise.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSplit, Description, DescriptionCorpus, ImageShape, LabeledExample};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm};
use crate::seed::{rng_for, Stream};
use crate::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptionFormat {
    /// Precomputed embedding vectors of length `semantic_dim`.
    Vector,
    /// Token strings for the toy text encoder.
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub base_classes: usize,
    pub val_classes: usize,
    pub novel_classes: usize,
    pub examples_per_class: usize,
    pub image_shape: ImageShape,
    pub latent_dim: usize,
    pub semantic_dim: usize,
    pub sigma_between: f64,
    pub sigma_within: f64,
    /// Fraction of class signal carried by descriptions, in `[0, 1]`.
    pub informativeness: f64,
    pub descriptions_per_class: usize,
    /// Norm of the additive description noise (vector format).
    pub description_noise: f64,
    pub description_format: DescriptionFormat,
    /// Tokens per description (text format).
    pub words_per_description: usize,
    /// Per-example nuisance factors rendered by their own random map; they
    /// carry no class information.
    pub nuisance_dim: usize,
    pub sigma_nuisance: f64,
    /// Std of independent per-pixel noise before the sigmoid.
    pub pixel_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            base_classes: 32,
            val_classes: 4,
            novel_classes: 20,
            examples_per_class: 20,
            image_shape: ImageShape::new(8, 8, 1),
            latent_dim: 32,
            semantic_dim: 32,
            sigma_between: 1.0,
            sigma_within: 0.25,
            informativeness: 0.9,
            descriptions_per_class: 5,
            description_noise: 0.5,
            description_format: DescriptionFormat::Vector,
            words_per_description: 8,
            nuisance_dim: 0,
            sigma_nuisance: 0.0,
            pixel_noise: 1.5,
        }
    }
}

impl SynthConfig {
    pub fn num_classes(&self) -> usize {
        self.base_classes + self.val_classes + self.novel_classes
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_classes", self.base_classes),
            ("examples_per_class", self.examples_per_class),
            ("image_shape.height", self.image_shape.height),
            ("image_shape.width", self.image_shape.width),
            ("image_shape.channels", self.image_shape.channels),
            ("latent_dim", self.latent_dim),
            ("semantic_dim", self.semantic_dim),
            ("descriptions_per_class", self.descriptions_per_class),
            ("words_per_description", self.words_per_description),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("synth.{name} must be positive")));
            }
        }
        if !(self.sigma_between > 0.0 && self.sigma_within >= 0.0) {
            return Err(Error::InvalidConfig(
                "synth.sigma_between must be positive and sigma_within non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.informativeness) {
            return Err(Error::InvalidConfig(format!(
                "synth.informativeness {} outside [0, 1]",
                self.informativeness
            )));
        }
        if !(self.sigma_nuisance >= 0.0 && self.pixel_noise >= 0.0) {
            return Err(Error::InvalidConfig(
                "synth.sigma_nuisance and pixel_noise must be >= 0".into(),
            ));
        }
        if !(self.description_noise >= 0.0) {
            return Err(Error::InvalidConfig("synth.description_noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generator output. `latents` and `class_means` are the ground truth behind
/// the rendered images; `semantic_directions` is each class mean seen through
/// the description map, before noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub dataset: Dataset,
    pub corpus: DescriptionCorpus,
    pub latents: Vec<Vec<f64>>,
    pub class_means: BTreeMap<ClassId, Vec<f64>>,
    pub semantic_directions: BTreeMap<ClassId, Vec<f64>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| gaussian_vec(rng, cols, 1.0)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Deterministic in `(config, seed)`: classes `0..base` are base, then val,
/// then novel.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SynthData> {
    config.validate()?;
    let n_classes = config.num_classes();
    let latent = config.latent_dim;
    let pixels = config.image_shape.len();

    let render = gaussian_rows(&mut rng_for(seed, Stream::Synth, 0), pixels, latent);
    let describe = gaussian_rows(
        &mut rng_for(seed, Stream::Synth, 1),
        config.semantic_dim,
        latent,
    );
    let render_scale = 1.0
        / ((config.sigma_between.powi(2) + config.sigma_within.powi(2)).sqrt()
            * (latent as f64).sqrt());

    let nuisance_render = gaussian_rows(
        &mut rng_for(seed, Stream::Synth, 5),
        pixels,
        config.nuisance_dim,
    );
    let nuisance_scale = 1.0 / (config.nuisance_dim.max(1) as f64).sqrt();
    let mut nuisance_rng = rng_for(seed, Stream::Synth, 6);
    let mut pixel_rng = rng_for(seed, Stream::Synth, 7);

    let mut mean_rng = rng_for(seed, Stream::Synth, 2);
    let mut example_rng = rng_for(seed, Stream::Synth, 3);
    let mut desc_rng = rng_for(seed, Stream::Synth, 4);

    let mut examples = Vec::with_capacity(n_classes * config.examples_per_class);
    let mut latents = Vec::with_capacity(examples.capacity());
    let mut class_means = BTreeMap::new();
    let mut semantic_directions = BTreeMap::new();
    let mut entries = BTreeMap::new();

    for c in 0..n_classes {
        let class_id = ClassId(c as u32);
        let mean = gaussian_vec(&mut mean_rng, latent, config.sigma_between);
        for _ in 0..config.examples_per_class {
            let noise = gaussian_vec(&mut example_rng, latent, config.sigma_within);
            let z: Vec<f64> = mean.iter().zip(&noise).map(|(m, e)| m + e).collect();
            let u = gaussian_vec(&mut nuisance_rng, config.nuisance_dim, config.sigma_nuisance);
            let image = render
                .iter()
                .zip(&nuisance_render)
                .map(|(row, nrow)| {
                    let mut a = dot(row, &z) * render_scale;
                    if config.nuisance_dim > 0 {
                        a += dot(nrow, &u) * nuisance_scale;
                    }
                    if config.pixel_noise > 0.0 {
                        a += config.pixel_noise * pixel_rng.sample::<f64, _>(StandardNormal);
                    }
                    sigmoid(a)
                })
                .collect();
            examples.push(LabeledExample { image, class_id });
            latents.push(z);
        }

        let direction: Vec<f64> = describe.iter().map(|row| dot(row, &mean)).collect();
        let descriptions = match config.description_format {
            DescriptionFormat::Vector => {
                let n = norm(&direction);
                let unit: Vec<f64> = direction.iter().map(|v| v / n).collect();
                let noise_scale = config.description_noise / (config.semantic_dim as f64).sqrt();
                (0..config.descriptions_per_class)
                    .map(|_| {
                        let e = gaussian_vec(&mut desc_rng, config.semantic_dim, noise_scale);
                        Description::Vector(
                            unit.iter()
                                .zip(&e)
                                .map(|(u, e)| config.informativeness * u + e)
                                .collect(),
                        )
                    })
                    .collect()
            }
            DescriptionFormat::Text => text_descriptions(config, &mean, &mut desc_rng),
        };
        entries.insert(class_id, descriptions);
        class_means.insert(class_id, mean);
        semantic_directions.insert(class_id, direction);
    }

    let ids = |range: std::ops::Range<usize>| range.map(|c| ClassId(c as u32));
    let b = config.base_classes;
    let v = b + config.val_classes;
    let split = DatasetSplit::new(ids(0..b), ids(b..v), ids(v..n_classes))?;
    let dataset = Dataset::new(config.image_shape, examples, split)?;
    let corpus = DescriptionCorpus::new(entries)?;
    Ok(SynthData {
        dataset,
        corpus,
        latents,
        class_means,
        semantic_directions,
    })
}

const FILLER_VOCAB: usize = 256;
const SIGNATURE_LEN: usize = 4;

/// Text descriptions: each token is, with probability `informativeness`, one
/// of the class's signature attributes (its largest latent coordinates with
/// sign), otherwise a filler word shared by all classes.
fn text_descriptions(config: &SynthConfig, mean: &[f64], rng: &mut ChaCha8Rng) -> Vec<Description> {
    let mut order: Vec<usize> = (0..mean.len()).collect();
    order.sort_by(|&a, &b| mean[b].abs().total_cmp(&mean[a].abs()).then(a.cmp(&b)));
    let signature: Vec<String> = order
        .iter()
        .take(SIGNATURE_LEN.min(mean.len()))
        .map(|&j| {
            let polarity = if mean[j] >= 0.0 { "high" } else { "low" };
            format!("trait{j}-{polarity}")
        })
        .collect();
    (0..config.descriptions_per_class)
        .map(|_| {
            let words: Vec<String> = (0..config.words_per_description)
                .map(|_| {
                    if rng.random::<f64>() < config.informativeness {
                        signature.choose(rng).expect("signature is nonempty").clone()
                    } else {
                        format!("filler{}", rng.random_range(0..FILLER_VOCAB))
                    }
                })
                .collect();
            Description::Text(words.join(" "))
        })
        .collect()
}
