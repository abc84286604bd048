//! Few-shot datasets: labeled images partitioned into disjoint base, val and
//! novel class sets, plus per-class description corpora.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ClassId;

mod descriptions;
mod manifest;
pub mod synth;

pub use descriptions::{load_descriptions, parse_descriptions, write_descriptions};
pub use manifest::{load_manifest, write_manifest, MANIFEST_FILE, SIDECAR_FILE};
pub use synth::{synth_generate, DescriptionFormat, SynthConfig, SynthData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// One image (flattened HWC, values in `[0, 1]`) and its global class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub image: Vec<f64>,
    pub class_id: ClassId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Base,
    Val,
    Novel,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Base, SplitKind::Val, SplitKind::Novel];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitKind::Base => "base",
            SplitKind::Val => "val",
            SplitKind::Novel => "novel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(SplitKind::Base),
            "val" => Some(SplitKind::Val),
            "novel" => Some(SplitKind::Novel),
            _ => None,
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pairwise-disjoint class sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    base: BTreeSet<ClassId>,
    val: BTreeSet<ClassId>,
    novel: BTreeSet<ClassId>,
}

impl DatasetSplit {
    pub fn new(
        base: impl IntoIterator<Item = ClassId>,
        val: impl IntoIterator<Item = ClassId>,
        novel: impl IntoIterator<Item = ClassId>,
    ) -> Result<Self> {
        let mut seen: BTreeMap<ClassId, SplitKind> = BTreeMap::new();
        let mut sets: [BTreeSet<ClassId>; 3] = Default::default();
        let lists: [Vec<ClassId>; 3] = [
            base.into_iter().collect(),
            val.into_iter().collect(),
            novel.into_iter().collect(),
        ];
        for (kind, list) in SplitKind::ALL.iter().zip(lists) {
            for c in list {
                if let Some(prev) = seen.insert(c, *kind) {
                    if prev != *kind {
                        return Err(Error::SplitOverlap {
                            path: Default::default(),
                            line: 0,
                            class_id: c,
                            first: prev.to_string(),
                            second: kind.to_string(),
                        });
                    }
                }
                sets[*kind as usize].insert(c);
            }
        }
        let [base, val, novel] = sets;
        Ok(Self { base, val, novel })
    }

    pub fn classes(&self, kind: SplitKind) -> &BTreeSet<ClassId> {
        match kind {
            SplitKind::Base => &self.base,
            SplitKind::Val => &self.val,
            SplitKind::Novel => &self.novel,
        }
    }

    pub fn kind_of(&self, class: ClassId) -> Option<SplitKind> {
        SplitKind::ALL
            .into_iter()
            .find(|k| self.classes(*k).contains(&class))
    }

    pub fn all_classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.base
            .iter()
            .chain(&self.val)
            .chain(&self.novel)
            .copied()
    }

    /// True when no class belongs to two splits.
    pub fn is_disjoint(&self) -> bool {
        self.base.is_disjoint(&self.val)
            && self.base.is_disjoint(&self.novel)
            && self.val.is_disjoint(&self.novel)
    }
}

/// Validated, immutable collection of labeled examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: ImageShape,
    examples: Vec<LabeledExample>,
    split: DatasetSplit,
    by_class: BTreeMap<ClassId, Vec<usize>>,
}

impl Dataset {
    pub fn new(shape: ImageShape, examples: Vec<LabeledExample>, split: DatasetSplit) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidArgument(format!("empty image shape {shape}")));
        }
        let mut by_class: BTreeMap<ClassId, Vec<usize>> =
            split.all_classes().map(|c| (c, Vec::new())).collect();
        for (i, ex) in examples.iter().enumerate() {
            if ex.image.len() != shape.len() {
                return Err(Error::ShapeMismatch(format!(
                    "example {i} has {} values, shape {shape} needs {}",
                    ex.image.len(),
                    shape.len()
                )));
            }
            if let Some(v) = ex.image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidArgument(format!(
                    "example {i} has pixel value {v} outside [0, 1]"
                )));
            }
            match by_class.get_mut(&ex.class_id) {
                Some(list) => list.push(i),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "example {i} has class {} which is in no split",
                        ex.class_id
                    )))
                }
            }
        }
        Ok(Self {
            shape,
            examples,
            split,
            by_class,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.split
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Example indices for `class`, in dataset order.
    pub fn examples_of(&self, class: ClassId) -> &[usize] {
        self.by_class.get(&class).map_or(&[], |v| v.as_slice())
    }

    pub fn classes(&self, kind: SplitKind) -> &BTreeSet<ClassId> {
        self.split.classes(kind)
    }

    /// Fails with the first class holding fewer than `need` examples.
    pub fn require_min_examples(&self, need: usize) -> Result<()> {
        for (&class_id, idx) in &self.by_class {
            if idx.len() < need {
                return Err(Error::InsufficientExamples {
                    class_id,
                    have: idx.len(),
                    need,
                    line: 0,
                });
            }
        }
        Ok(())
    }

    /// Images for the given example indices, one per row.
    pub fn image_matrix(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.shape.len());
        for &i in idx {
            data.extend_from_slice(&self.examples[i].image);
        }
        Matrix::from_vec(idx.len(), self.shape.len(), data)
    }
}

/// One categorical description: raw text for the toy encoder or a
/// precomputed embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Description {
    Text(String),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptionKind {
    Text,
    Vector,
}

/// Per-class ordered description lists, all of one kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionCorpus {
    kind: DescriptionKind,
    dim: Option<usize>,
    entries: BTreeMap<ClassId, Vec<Description>>,
}

impl DescriptionCorpus {
    pub fn new(entries: BTreeMap<ClassId, Vec<Description>>) -> Result<Self> {
        let mut kind = None;
        let mut dim = None;
        for (class, list) in &entries {
            for d in list {
                let k = match d {
                    Description::Text(_) => DescriptionKind::Text,
                    Description::Vector(v) => {
                        match dim {
                            None => dim = Some(v.len()),
                            Some(expected) if expected != v.len() => {
                                return Err(Error::MixedDimensions {
                                    expected,
                                    found: v.len(),
                                    line: 0,
                                })
                            }
                            _ => {}
                        }
                        if v.iter().any(|x| !x.is_finite()) {
                            return Err(Error::NonFinite(format!(
                                "description embedding for class {class}"
                            )));
                        }
                        DescriptionKind::Vector
                    }
                };
                match kind {
                    None => kind = Some(k),
                    Some(prev) if prev != k => {
                        return Err(Error::MixedDescriptionKinds(format!(
                            "class {class} mixes text and vector descriptions with other classes"
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self {
            kind: kind.unwrap_or(DescriptionKind::Vector),
            dim,
            entries,
        })
    }

    pub fn kind(&self) -> DescriptionKind {
        self.kind
    }

    /// Embedding dimension for vector corpora.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn descriptions(&self, class: ClassId) -> &[Description] {
        self.entries.get(&class).map_or(&[], |v| v.as_slice())
    }

    /// Number of descriptions for `class` (`d_c`).
    pub fn count(&self, class: ClassId) -> usize {
        self.descriptions(class).len()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.keys().copied()
    }

    pub fn entries(&self) -> &BTreeMap<ClassId, Vec<Description>> {
        &self.entries
    }

    /// Every class in `classes` must have at least one description.
    pub fn require_classes<'a>(&self, classes: impl IntoIterator<Item = &'a ClassId>) -> Result<()> {
        for &c in classes {
            if self.count(c) == 0 {
                return Err(Error::MissingDescriptions { class_id: c });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<ClassId> {
        v.iter().map(|&i| ClassId(i)).collect()
    }

    #[test]
    fn split_rejects_overlap() {
        let err = DatasetSplit::new(ids(&[0, 1, 3]), ids(&[2]), ids(&[3, 4])).unwrap_err();
        assert!(matches!(err, Error::SplitOverlap { class_id: ClassId(3), .. }));
        let ok = DatasetSplit::new(ids(&[0, 1]), ids(&[2]), ids(&[3])).unwrap();
        assert!(ok.is_disjoint());
        assert_eq!(ok.kind_of(ClassId(2)), Some(SplitKind::Val));
    }

    #[test]
    fn dataset_validates_examples() {
        let split = DatasetSplit::new(ids(&[0]), ids(&[]), ids(&[1])).unwrap();
        let shape = ImageShape::new(1, 2, 1);
        let good = vec![
            LabeledExample {
                image: vec![0.0, 1.0],
                class_id: ClassId(0),
            },
            LabeledExample {
                image: vec![0.5, 0.5],
                class_id: ClassId(1),
            },
        ];
        let ds = Dataset::new(shape, good.clone(), split.clone()).unwrap();
        assert_eq!(ds.examples_of(ClassId(1)), &[1]);
        assert!(matches!(
            ds.require_min_examples(2),
            Err(Error::InsufficientExamples { have: 1, need: 2, .. })
        ));

        let mut bad = good.clone();
        bad[0].image = vec![0.0];
        assert!(matches!(
            Dataset::new(shape, bad, split.clone()),
            Err(Error::ShapeMismatch(_))
        ));
        let mut bad = good;
        bad[1].image[0] = 1.5;
        assert!(Dataset::new(shape, bad, split).is_err());
    }

    #[test]
    fn corpus_rejects_ragged_and_mixed() {
        let mut e = BTreeMap::new();
        e.insert(ClassId(0), vec![Description::Vector(vec![1.0, 2.0])]);
        e.insert(ClassId(1), vec![Description::Vector(vec![1.0])]);
        assert!(matches!(
            DescriptionCorpus::new(e),
            Err(Error::MixedDimensions { expected: 2, found: 1, .. })
        ));
        let mut e = BTreeMap::new();
        e.insert(ClassId(0), vec![Description::Vector(vec![1.0])]);
        e.insert(ClassId(1), vec![Description::Text("a bird".into())]);
        assert!(matches!(
            DescriptionCorpus::new(e),
            Err(Error::MixedDescriptionKinds(_))
        ));
    }
}
