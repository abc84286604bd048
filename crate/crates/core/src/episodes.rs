//! N-way K-shot episode sampling.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::seed::{rng_for, Stream};
use crate::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, q_per_class: usize) -> Self {
        Self {
            n_way,
            k_shot,
            q_per_class,
        }
    }

    /// Examples drawn per sampled class.
    pub fn per_class(&self) -> usize {
        self.k_shot + self.q_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.q_per_class == 0 {
            return Err(Error::InvalidArgument(format!(
                "episode needs n_way, k_shot and q_per_class >= 1, got {}-way {}-shot {} queries",
                self.n_way, self.k_shot, self.q_per_class
            )));
        }
        Ok(())
    }
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self::new(5, 1, 15)
    }
}

/// One task. Local label `i` always refers to `class_ids[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub spec: EpisodeSpec,
    pub class_ids: Vec<ClassId>,
    /// `support[i]` holds the K dataset indices for local class `i`.
    pub support: Vec<Vec<usize>>,
    /// `(dataset index, local label)`, grouped by class.
    pub query: Vec<(usize, usize)>,
}

impl Episode {
    /// Support indices flattened class by class.
    pub fn support_indices(&self) -> Vec<usize> {
        self.support.iter().flatten().copied().collect()
    }

    /// Row groups of [`Episode::support_indices`] per local class.
    pub fn support_groups(&self) -> Vec<Vec<usize>> {
        let mut next = 0;
        self.support
            .iter()
            .map(|s| {
                let g = (next..next + s.len()).collect();
                next += s.len();
                g
            })
            .collect()
    }

    pub fn query_indices(&self) -> Vec<usize> {
        self.query.iter().map(|&(i, _)| i).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|&(_, l)| l).collect()
    }
}

/// Samples `n_way` distinct classes from `split_classes`, then `k_shot +
/// q_per_class` distinct examples per class; the first K go to support.
pub fn sample_episode<R: Rng + ?Sized>(
    split_classes: &BTreeSet<ClassId>,
    dataset: &Dataset,
    spec: EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    spec.validate()?;
    if split_classes.len() < spec.n_way {
        return Err(Error::TooFewClasses {
            have: split_classes.len(),
            need: spec.n_way,
        });
    }
    let mut pool: Vec<ClassId> = split_classes.iter().copied().collect();
    let (chosen, _) = pool.partial_shuffle(rng, spec.n_way);
    let class_ids = chosen.to_vec();

    let mut support = Vec::with_capacity(spec.n_way);
    let mut query = Vec::with_capacity(spec.n_way * spec.q_per_class);
    for (label, &class) in class_ids.iter().enumerate() {
        let mut members = dataset.examples_of(class).to_vec();
        if members.len() < spec.per_class() {
            return Err(Error::InsufficientExamples {
                class_id: class,
                have: members.len(),
                need: spec.per_class(),
                line: 0,
            });
        }
        let (picked, _) = members.partial_shuffle(rng, spec.per_class());
        support.push(picked[..spec.k_shot].to_vec());
        query.extend(picked[spec.k_shot..].iter().map(|&i| (i, label)));
    }
    Ok(Episode {
        spec,
        class_ids,
        support,
        query,
    })
}

/// Lazily yields `count` episodes; episode `i` is sampled from its own stream
/// derived from `(seed, i)` and can be regenerated with [`EpisodeStream::episode`].
#[derive(Debug, Clone)]
pub struct EpisodeStream<'a> {
    classes: &'a BTreeSet<ClassId>,
    dataset: &'a Dataset,
    spec: EpisodeSpec,
    seed: u64,
    stream: Stream,
    next: usize,
    count: usize,
}

impl<'a> EpisodeStream<'a> {
    /// Episode at `index`, independent of iteration state.
    pub fn episode(&self, index: usize) -> Result<Episode> {
        let mut rng = rng_for(self.seed, self.stream, index as u64);
        sample_episode(self.classes, self.dataset, self.spec, &mut rng)
    }

    /// Same stream under a different derivation tag.
    pub fn with_stream(mut self, stream: Stream) -> Self {
        self.stream = stream;
        self
    }
}

impl Iterator for EpisodeStream<'_> {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let ep = self.episode(self.next);
        self.next += 1;
        Some(ep)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.count - self.next;
        (left, Some(left))
    }
}

pub fn episode_stream<'a>(
    split_classes: &'a BTreeSet<ClassId>,
    dataset: &'a Dataset,
    spec: EpisodeSpec,
    count: usize,
    seed: u64,
) -> Result<EpisodeStream<'a>> {
    if count == 0 {
        return Err(Error::InvalidArgument("episode stream count must be >= 1".into()));
    }
    spec.validate()?;
    Ok(EpisodeStream {
        classes: split_classes,
        dataset,
        spec,
        seed,
        stream: Stream::Episode,
        next: 0,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{DatasetSplit, ImageShape, LabeledExample, SplitKind};

    fn dataset(classes: u32, per_class: usize) -> Dataset {
        let examples = (0..classes)
            .flat_map(|c| {
                (0..per_class).map(move |k| LabeledExample {
                    image: vec![k as f64 / per_class as f64],
                    class_id: ClassId(c),
                })
            })
            .collect();
        let split = DatasetSplit::new((0..classes).map(ClassId), [], []).unwrap();
        Dataset::new(ImageShape::new(1, 1, 1), examples, split).unwrap()
    }

    #[test]
    fn five_way_one_shot_sizes() {
        let ds = dataset(10, 20);
        let mut rng = rng_for(0, Stream::Episode, 0);
        let ep = sample_episode(
            ds.classes(SplitKind::Base),
            &ds,
            EpisodeSpec::new(5, 1, 15),
            &mut rng,
        )
        .unwrap();
        assert_eq!(ep.support_indices().len(), 5);
        assert_eq!(ep.query.len(), 75);
        let support: BTreeSet<_> = ep.support_indices().into_iter().collect();
        assert!(ep.query_indices().iter().all(|i| !support.contains(i)));
        for (i, &c) in ep.class_ids.iter().enumerate() {
            assert!(ep.support[i].iter().all(|&s| ds.examples()[s].class_id == c));
        }
        for &(idx, label) in &ep.query {
            assert_eq!(ds.examples()[idx].class_id, ep.class_ids[label]);
        }
    }

    #[test]
    fn exhausts_single_class() {
        let ds = dataset(1, 2);
        let mut rng = rng_for(1, Stream::Episode, 0);
        let ep = sample_episode(
            ds.classes(SplitKind::Base),
            &ds,
            EpisodeSpec::new(1, 1, 1),
            &mut rng,
        )
        .unwrap();
        let mut all = vec![ep.support[0][0], ep.query[0].0];
        all.sort();
        assert_eq!(all, vec![0, 1]);
    }

    #[test]
    fn errors() {
        let ds = dataset(3, 4);
        let mut rng = rng_for(0, Stream::Episode, 0);
        let classes = ds.classes(SplitKind::Base);
        assert!(matches!(
            sample_episode(classes, &ds, EpisodeSpec::new(4, 1, 1), &mut rng),
            Err(Error::TooFewClasses { have: 3, need: 4 })
        ));
        assert!(matches!(
            sample_episode(classes, &ds, EpisodeSpec::new(2, 2, 3), &mut rng),
            Err(Error::InsufficientExamples { have: 4, need: 5, .. })
        ));
        assert!(episode_stream(classes, &ds, EpisodeSpec::new(2, 1, 1), 0, 0).is_err());
    }

    #[test]
    fn stream_is_reproducible_and_indexable() {
        let ds = dataset(8, 10);
        let classes = ds.classes(SplitKind::Base);
        let spec = EpisodeSpec::new(3, 2, 2);
        let a: Vec<_> = episode_stream(classes, &ds, spec, 100, 9)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        let b: Vec<_> = episode_stream(classes, &ds, spec, 100, 9)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(a, b);
        let s = episode_stream(classes, &ds, spec, 100, 9).unwrap();
        let mut rng = rng_for(9, Stream::Episode, 42);
        assert_eq!(a[42], sample_episode(classes, &ds, spec, &mut rng).unwrap());
        assert_eq!(s.episode(42).unwrap(), a[42]);
        assert_ne!(a[0], a[1]);
    }
}
