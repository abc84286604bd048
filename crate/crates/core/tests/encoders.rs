mod common;

use vsalign::datasets::{synth_generate, DescriptionFormat, SplitKind, SynthConfig};
use vsalign::encoders::{
    init_visual_encoder, semantic_encode, visual_encode, EncoderConfig, SemanticBank, SemanticConfig,
    SemanticEncoder, SemanticMode,
};
use vsalign::objectives::cosine_similarity;
use vsalign::ClassId;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn toy_text_descriptions_cluster_by_class() {
    let cfg = SynthConfig {
        description_format: DescriptionFormat::Text,
        informativeness: 1.0,
        descriptions_per_class: 6,
        ..common::tiny_synth()
    };
    let data = synth_generate(&cfg, 3).unwrap();
    let enc = SemanticEncoder::for_corpus(&data.corpus, 32, &SemanticConfig::default()).unwrap();
    assert_eq!(enc.mode(), SemanticMode::ToyText);
    let emb: Vec<(ClassId, Vec<f64>)> = data
        .corpus
        .entries()
        .iter()
        .flat_map(|(&c, ds)| ds.iter().map(move |d| (c, d)))
        .map(|(c, d)| (c, semantic_encode(&enc, d).unwrap()))
        .collect();
    let (mut within, mut between) = (Vec::new(), Vec::new());
    for (i, (ci, a)) in emb.iter().enumerate() {
        for (cj, b) in &emb[i + 1..] {
            let s = cosine_similarity(a, b).unwrap();
            if ci == cj { within.push(s) } else { between.push(s) }
        }
    }
    assert!(
        mean(&between) < mean(&within),
        "between {} within {}",
        mean(&between),
        mean(&within)
    );
}

#[test]
fn visual_and_semantic_widths_agree() {
    let cfg = SynthConfig {
        image_shape: vsalign::datasets::ImageShape::new(16, 16, 1),
        ..common::tiny_synth()
    };
    let data = synth_generate(&cfg, 3).unwrap();
    for arch in ["mlp-tiny", "reference-conv4-small"] {
        let cfg = EncoderConfig {
            architecture: arch.into(),
            output_dim: 12,
            hidden_width: 8,
        };
        let visual = init_visual_encoder(&cfg, data.dataset.shape(), 1).unwrap();
        let sem = SemanticEncoder::for_corpus(&data.corpus, cfg.output_dim, &SemanticConfig::default()).unwrap();
        let bank = SemanticBank::build(&sem, &data.corpus).unwrap();
        let idx: Vec<usize> = data.dataset.examples_of(ClassId(0)).to_vec();
        let emb = visual_encode(&visual, &data.dataset.image_matrix(&idx)).unwrap();
        assert_eq!(emb.cols(), bank.output_dim());
        for &c in data.dataset.classes(SplitKind::Base) {
            assert_eq!(bank.prototype(c).unwrap().len(), emb.cols());
        }
    }
}

#[test]
fn unknown_architecture_is_rejected() {
    let data = synth_generate(&common::tiny_synth(), 3).unwrap();
    let cfg = EncoderConfig {
        architecture: "resnet-huge".into(),
        ..EncoderConfig::default()
    };
    assert!(matches!(
        init_visual_encoder(&cfg, data.dataset.shape(), 1),
        Err(vsalign::Error::UnknownArchitecture(_))
    ));
}

#[test]
fn encoders_are_deterministic_in_their_seed() {
    let data = synth_generate(&common::tiny_synth(), 3).unwrap();
    let cfg = EncoderConfig::default();
    let a = init_visual_encoder(&cfg, data.dataset.shape(), 4).unwrap();
    let b = init_visual_encoder(&cfg, data.dataset.shape(), 4).unwrap();
    let c = init_visual_encoder(&cfg, data.dataset.shape(), 5).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
}
