#![allow(dead_code)]

use std::collections::BTreeSet;

use vsalign::datasets::{Dataset, DatasetSplit, ImageShape, LabeledExample, SynthConfig};
use vsalign::ClassId;

/// `classes` classes with `per_class` examples each; every image is a
/// distinct, class-tagged constant so identities are easy to read back.
pub fn labeled_grid(base: u32, val: u32, novel: u32, per_class: usize) -> Dataset {
    let shape = ImageShape::new(2, 2, 1);
    let total = base + val + novel;
    let mut examples = Vec::new();
    for c in 0..total {
        for i in 0..per_class {
            let v = (c as f64 * per_class as f64 + i as f64) / (total as f64 * per_class as f64);
            examples.push(LabeledExample {
                image: vec![v; shape.len()],
                class_id: ClassId(c),
            });
        }
    }
    let ids = |r: std::ops::Range<u32>| r.map(ClassId).collect::<BTreeSet<_>>();
    let split = DatasetSplit::new(ids(0..base), ids(base..base + val), ids(base + val..total)).unwrap();
    Dataset::new(shape, examples, split).unwrap()
}

/// Small, fast synthetic config for training tests.
pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        base_classes: 8,
        val_classes: 5,
        novel_classes: 6,
        examples_per_class: 20,
        image_shape: ImageShape::new(4, 4, 1),
        latent_dim: 8,
        semantic_dim: 8,
        pixel_noise: 0.0,
        ..SynthConfig::default()
    }
}
