use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{Description, DescriptionCorpus, DescriptionKind};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::objectives::semantic_prototype;
use crate::seed::{derive_seed, rng_for, Stream};
use crate::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SemanticMode {
    PrecomputedLookup,
    ToyText,
}

/// Whether the semantic-to-visual projection stays fixed during
/// meta-training. The semantic encoder itself is always frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    #[default]
    Frozen,
    Trainable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticConfig {
    /// Seed for the projection matrix and the toy token table.
    pub seed: u64,
    /// Token embedding width of the toy text encoder.
    pub token_dim: usize,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            token_dim: 64,
        }
    }
}

/// Frozen description encoder. Precomputed vectors pass through a fixed
/// projection (identity when widths already match); text goes through hashed
/// token embeddings, mean pooling and a fixed random projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEncoder {
    mode: SemanticMode,
    input_dim: usize,
    output_dim: usize,
    projection: Option<Matrix>,
    seed: u64,
}

fn random_projection(output_dim: usize, input_dim: usize, seed: u64) -> Matrix {
    let mut rng = rng_for(seed, Stream::Semantic, 0);
    let std = 1.0 / (input_dim as f64).sqrt();
    let data = (0..output_dim * input_dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(output_dim, input_dim, data)
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

impl SemanticEncoder {
    pub fn precomputed(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let projection = (input_dim != output_dim).then(|| random_projection(output_dim, input_dim, seed));
        Self {
            mode: SemanticMode::PrecomputedLookup,
            input_dim,
            output_dim,
            projection,
            seed,
        }
    }

    pub fn toy_text(token_dim: usize, output_dim: usize, seed: u64) -> Self {
        Self {
            mode: SemanticMode::ToyText,
            input_dim: token_dim,
            output_dim,
            projection: Some(random_projection(output_dim, token_dim, seed)),
            seed,
        }
    }

    /// Encoder matching the corpus kind, producing `output_dim`-wide vectors.
    pub fn for_corpus(corpus: &DescriptionCorpus, output_dim: usize, config: &SemanticConfig) -> Result<Self> {
        if output_dim == 0 {
            return Err(Error::InvalidConfig("semantic output_dim must be positive".into()));
        }
        match corpus.kind() {
            DescriptionKind::Vector => {
                let dim = corpus.dim().ok_or_else(|| {
                    Error::InvalidArgument("vector corpus without any descriptions".into())
                })?;
                Ok(Self::precomputed(dim, output_dim, config.seed))
            }
            DescriptionKind::Text => {
                if config.token_dim == 0 {
                    return Err(Error::InvalidConfig("semantic.token_dim must be positive".into()));
                }
                Ok(Self::toy_text(config.token_dim, output_dim, config.seed))
            }
        }
    }

    pub fn mode(&self) -> SemanticMode {
        self.mode
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Projection as an `output_dim × input_dim` matrix (identity if none).
    pub fn projection_matrix(&self) -> Matrix {
        self.projection
            .clone()
            .unwrap_or_else(|| Matrix::identity(self.input_dim))
    }

    /// Features before projection: the vector itself, or mean-pooled token
    /// embeddings for text.
    pub fn raw_features(&self, description: &Description) -> Result<Vec<f64>> {
        match (self.mode, description) {
            (SemanticMode::PrecomputedLookup, Description::Vector(v)) => {
                if v.len() != self.input_dim {
                    return Err(Error::ShapeMismatch(format!(
                        "description vector has {} values, encoder expects {}",
                        v.len(),
                        self.input_dim
                    )));
                }
                Ok(v.clone())
            }
            (SemanticMode::ToyText, Description::Text(t)) => {
                let tokens = tokenize(t);
                if tokens.is_empty() {
                    return Err(Error::DegenerateVector(format!("description `{t}` has no tokens")));
                }
                let mut pooled = vec![0.0; self.input_dim];
                for tok in &tokens {
                    for (p, v) in pooled.iter_mut().zip(self.token_vector(tok)) {
                        *p += v;
                    }
                }
                let n = tokens.len() as f64;
                Ok(pooled.into_iter().map(|v| v / n).collect())
            }
            (SemanticMode::PrecomputedLookup, Description::Text(_)) => Err(Error::InvalidArgument(
                "precomputed-lookup encoder needs vector descriptions".into(),
            )),
            (SemanticMode::ToyText, Description::Vector(_)) => Err(Error::InvalidArgument(
                "toy-text encoder needs text descriptions".into(),
            )),
        }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.seed,
            Stream::Semantic,
            fnv1a(token.as_bytes()),
        ));
        let std = 1.0 / (self.input_dim as f64).sqrt();
        (0..self.input_dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn project(&self, raw: &[f64]) -> Vec<f64> {
        match &self.projection {
            None => raw.to_vec(),
            Some(p) => (0..p.rows()).map(|i| dot(p.row(i), raw)).collect(),
        }
    }

    /// SHA-256 over mode, widths, seed and projection bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.mode).as_bytes());
        h.update((self.input_dim as u64).to_le_bytes());
        h.update((self.output_dim as u64).to_le_bytes());
        h.update(self.seed.to_le_bytes());
        if let Some(p) = &self.projection {
            for v in p.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Embeds one description into the shared embedding space.
pub fn semantic_encode(encoder: &SemanticEncoder, description: &Description) -> Result<Vec<f64>> {
    let raw = encoder.raw_features(description)?;
    Ok(encoder.project(&raw))
}

/// Per-class semantic prototypes, computed once since the encoder is frozen.
///
/// `prototypes` are means of projected description embeddings; `raw` are
/// means before projection, used when the projection is trained.
#[derive(Debug, Clone, PartialEq)]
struct DescriptionEmbeddings {
    projected: Vec<Vec<f64>>,
    raw: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticBank {
    prototypes: BTreeMap<ClassId, Vec<f64>>,
    raw: BTreeMap<ClassId, Vec<f64>>,
    /// Per-description embeddings for subsampling.
    items: BTreeMap<ClassId, DescriptionEmbeddings>,
    projection: Matrix,
    output_dim: usize,
    encoder_checksum: String,
}

impl SemanticBank {
    pub fn build(encoder: &SemanticEncoder, corpus: &DescriptionCorpus) -> Result<Self> {
        let mut prototypes = BTreeMap::new();
        let mut raw = BTreeMap::new();
        let mut items = BTreeMap::new();
        for (&class, descriptions) in corpus.entries() {
            if descriptions.is_empty() {
                continue;
            }
            let raws = descriptions
                .iter()
                .map(|d| encoder.raw_features(d))
                .collect::<Result<Vec<_>>>()?;
            let embedded: Vec<Vec<f64>> = raws.iter().map(|r| encoder.project(r)).collect();
            prototypes.insert(class, semantic_prototype(&embedded, descriptions.len())?);
            raw.insert(class, semantic_prototype(&raws, descriptions.len())?);
            items.insert(
                class,
                DescriptionEmbeddings {
                    projected: embedded,
                    raw: raws,
                },
            );
        }
        Ok(Self {
            prototypes,
            raw,
            items,
            projection: encoder.projection_matrix(),
            output_dim: encoder.output_dim(),
            encoder_checksum: encoder.checksum(),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn raw_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn prototype(&self, class: ClassId) -> Result<&[f64]> {
        self.prototypes
            .get(&class)
            .map(Vec::as_slice)
            .ok_or(Error::MissingDescriptions { class_id: class })
    }

    pub fn raw_prototype(&self, class: ClassId) -> Result<&[f64]> {
        self.raw
            .get(&class)
            .map(Vec::as_slice)
            .ok_or(Error::MissingDescriptions { class_id: class })
    }

    /// Mean of `d_c` descriptions drawn without replacement; the full mean
    /// when `d_c` is at least the number available. `raw` selects embeddings
    /// before projection.
    pub fn sample_prototype<R: Rng + ?Sized>(
        &self,
        class: ClassId,
        d_c: usize,
        raw: bool,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let item = self
            .items
            .get(&class)
            .ok_or(Error::MissingDescriptions { class_id: class })?;
        let pool = if raw { &item.raw } else { &item.projected };
        if d_c == 0 {
            return Err(Error::InvalidArgument("d_c must be positive".into()));
        }
        if d_c >= pool.len() {
            return Ok(if raw { &self.raw } else { &self.prototypes }[&class].clone());
        }
        let picked: Vec<&Vec<f64>> = rand::seq::index::sample(rng, pool.len(), d_c)
            .into_iter()
            .map(|i| &pool[i])
            .collect();
        semantic_prototype(&picked, d_c)
    }

    pub fn description_count(&self, class: ClassId) -> usize {
        self.items.get(&class).map_or(0, |e| e.projected.len())
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.prototypes.contains_key(&class)
    }

    /// Initial value for a trainable projection.
    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn encoder_checksum(&self) -> &str {
        &self.encoder_checksum
    }

    /// Checksum of the bank contents (prototypes and projection bits).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.encoder_checksum.as_bytes());
        for (c, p) in self.prototypes.iter().chain(&self.raw) {
            h.update(c.0.to_le_bytes());
            for v in p {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for v in self.projection.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
