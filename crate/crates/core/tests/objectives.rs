use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsalign::objectives::{
    combined_loss, cosine_similarity, query_class_probabilities, semantic_prototype,
    visual_prototype, vs_alignment_loss, PrototypeSet,
};
use vsalign::Error;

fn cos_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Enumerates every numerator and denominator term of the alignment loss
/// separately: negatives are the other visual prototypes plus all semantic
/// prototypes, the matching one included.
fn alignment_oracle(visual: &[Vec<f64>], semantic: &[Vec<f64>], tau: f64) -> f64 {
    let n = visual.len();
    let mut total = 0.0;
    for i in 0..n {
        let numerator = (cos_oracle(&visual[i], &semantic[i]) / tau).exp();
        let mut denominator = 0.0;
        for k in 0..n {
            if k != i {
                denominator += (cos_oracle(&visual[i], &visual[k]) / tau).exp();
            }
        }
        for s in semantic {
            denominator += (cos_oracle(&visual[i], s) / tau).exp();
        }
        total += -(numerator / denominator).ln();
    }
    total / n as f64
}

fn random_vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

#[test]
fn alignment_matches_term_by_term_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    for n in 2..=8 {
        for _ in 0..100 {
            let dim = rng.random_range(2..12);
            let tau = [0.1, 0.5, 1.0][rng.random_range(0..3)];
            let v = random_vectors(&mut rng, n, dim);
            let s = random_vectors(&mut rng, n, dim);
            let got = vs_alignment_loss(&PrototypeSet::new(v.clone(), s.clone()).unwrap(), tau).unwrap();
            let want = alignment_oracle(&v, &s, tau);
            let rel = (got - want).abs() / want.abs();
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-9, "worst relative error {worst:e}");
}

#[test]
fn equal_similarities_give_log_2n_minus_1() {
    for n in 2..=8 {
        let p = vec![vec![0.3, -1.2, 2.0]; n];
        let loss = vs_alignment_loss(&PrototypeSet::new(p.clone(), p).unwrap(), 0.1).unwrap();
        let want = ((2 * n - 1) as f64).ln();
        assert!((loss - want).abs() < 1e-12, "N = {n}: {loss} vs {want}");
    }
    let n3 = vec![vec![1.0, 1.0]; 3];
    let loss = vs_alignment_loss(&PrototypeSet::new(n3.clone(), n3).unwrap(), 0.7).unwrap();
    assert!((loss - 1.6094).abs() < 1e-4);
}

#[test]
fn two_class_hand_example() {
    let v = vec![vec![1.0, 0.0], vec![0.6, 0.8]];
    let s = vec![vec![0.8, 0.6], vec![0.0, 1.0]];
    // cos(v0,s0)=0.8 cos(v0,s1)=0 cos(v0,v1)=0.6
    // cos(v1,s0)=0.96 cos(v1,s1)=0.8 cos(v1,v0)=0.6
    let tau = 0.5;
    let e = |x: f64| (x / tau).exp();
    let a0 = -(e(0.8) / (e(0.6) + e(0.8) + e(0.0))).ln();
    let a1 = -(e(0.8) / (e(0.6) + e(0.96) + e(0.8))).ln();
    let got = vs_alignment_loss(&PrototypeSet::new(v, s).unwrap(), tau).unwrap();
    assert!((got - (a0 + a1) / 2.0).abs() < 1e-9);
}

#[test]
fn better_alignment_lowers_the_loss() {
    let n = 4;
    let visual: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let blend = |w: f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| visual[i].iter().zip(&visual[(i + 1) % n]).map(|(a, b)| w * a + (1.0 - w) * b).collect())
            .collect()
    };
    let loss = |w: f64| vs_alignment_loss(&PrototypeSet::new(visual.clone(), blend(w)).unwrap(), 0.1).unwrap();
    let bound = ((2 * n - 1) as f64).ln();
    assert!(loss(1.0) < bound);
    assert!(loss(1.0) < loss(0.8));
    assert!(loss(0.8) < loss(0.6));
}

#[test]
fn alignment_needs_two_classes_and_nonzero_prototypes() {
    let one = PrototypeSet::new(vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]).unwrap();
    assert!(matches!(vs_alignment_loss(&one, 0.1), Err(Error::InvalidArgument(_))));
    let zero = PrototypeSet::new(vec![vec![1.0, 0.0], vec![0.0, 0.0]], vec![vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    assert!(matches!(vs_alignment_loss(&zero, 0.1), Err(Error::DegenerateVector(_))));
}

#[test]
fn opposite_descriptions_cancel_to_a_degenerate_prototype() {
    let v = vec![0.5, -2.0, 1.0];
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let p = semantic_prototype(&[v.clone(), neg], 2).unwrap();
    assert!(p.iter().all(|&x| x == 0.0));
    assert!(matches!(cosine_similarity(&p, &v), Err(Error::DegenerateVector(_))));
    assert_eq!(semantic_prototype(std::slice::from_ref(&v), 1).unwrap(), v);
}

#[test]
fn prototypes_match_mean_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (count, dim) in [(5, 64), (7, 16)] {
        let xs = random_vectors(&mut rng, count, dim);
        let oracle: Vec<f64> = (0..dim)
            .map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / count as f64)
            .collect();
        let v = visual_prototype(&xs).unwrap();
        let s = semantic_prototype(&xs, count).unwrap();
        for ((a, b), o) in v.iter().zip(&s).zip(&oracle) {
            assert!((a - o).abs() < 1e-12 && (b - o).abs() < 1e-12);
        }
    }
}

#[test]
fn query_probabilities_examples() {
    let p = query_class_probabilities(&[1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap();
    let e = std::f64::consts::E;
    assert!((p[0] - e / (e + 1.0)).abs() < 1e-9);
    assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-9);

    let winner = query_class_probabilities(&[1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]], 100.0).unwrap();
    assert!(winner[0] > 0.999);
}

#[test]
fn combined_loss_is_a_fused_weighted_sum() {
    assert_eq!(combined_loss(1.0, 0.2, 2.5), 1.5);
    assert_eq!(combined_loss(0.731, 9.25, 0.0), 0.731);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (c, v): (f64, f64) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        assert_eq!(combined_loss(c, v, 2.5), 2.5f64.mul_add(v, c));
    }
}

fn vec_in(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, dim).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

fn protos(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(vec_in(dim), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn probabilities_sum_to_one(
        (q, p) in (2usize..9, 1usize..8).prop_flat_map(|(dim, n)| (vec_in(dim), protos(n, dim))),
        tau in 0.01f64..50.0,
    ) {
        let probs = query_class_probabilities(&q, &p, tau).unwrap();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(probs.iter().all(|&x| x >= 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn query_rescaling_and_prototype_permutation(
        (q, p) in (2usize..9, 2usize..8).prop_flat_map(|(dim, n)| (vec_in(dim), protos(n, dim))),
        alpha in 0.001f64..1000.0,
        tau in 0.1f64..20.0,
        rot in 0usize..8,
    ) {
        let base = query_class_probabilities(&q, &p, tau).unwrap();
        let scaled: Vec<f64> = q.iter().map(|x| alpha * x).collect();
        let again = query_class_probabilities(&scaled, &p, tau).unwrap();
        for (a, b) in base.iter().zip(&again) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let n = p.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| p[i].clone()).collect();
        let pp = query_class_probabilities(&q, &permuted, tau).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((pp[j] - base[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_similarities_give_uniform_probabilities(n in 1usize..9, tau in 0.1f64..50.0, dim in 1usize..6) {
        let p = vec![vec![1.5; dim]; n];
        let probs = query_class_probabilities(&vec![0.2; dim], &p, tau).unwrap();
        for x in probs {
            prop_assert!((x - 1.0 / n as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn alignment_is_permutation_equivariant_and_scale_invariant(
        (v, s) in (2usize..7, 2usize..9).prop_flat_map(|(dim, n)| (protos(n, dim), protos(n, dim))),
        rot in 1usize..9,
        which in 0usize..9,
        alpha in 0.01f64..100.0,
        tau in 0.05f64..2.0,
    ) {
        let n = v.len();
        let base = vs_alignment_loss(&PrototypeSet::new(v.clone(), s.clone()).unwrap(), tau).unwrap();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let pv = perm.iter().map(|&i| v[i].clone()).collect();
        let ps = perm.iter().map(|&i| s[i].clone()).collect();
        let permuted = vs_alignment_loss(&PrototypeSet::new(pv, ps).unwrap(), tau).unwrap();
        prop_assert!((permuted - base).abs() <= 1e-10 * base.abs().max(1.0));

        let mut sv = v.clone();
        let k = which % n;
        sv[k] = sv[k].iter().map(|x| alpha * x).collect();
        let rescaled = vs_alignment_loss(&PrototypeSet::new(sv, s).unwrap(), tau).unwrap();
        prop_assert!((rescaled - base).abs() <= 1e-10 * base.abs().max(1.0));
    }

    #[test]
    fn cosine_is_symmetric_scale_invariant_and_bounded(
        (a, b) in (1usize..10).prop_flat_map(|d| (vec_in(d), vec_in(d))),
        alpha in 0.001f64..1000.0,
    ) {
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((c - cosine_similarity(&b, &a).unwrap()).abs() < 1e-15);
        let sa: Vec<f64> = a.iter().map(|x| alpha * x).collect();
        prop_assert!((c - cosine_similarity(&sa, &b).unwrap()).abs() < 1e-12);
        prop_assert!((c - cos_oracle(&a, &b)).abs() < 1e-12);
    }
}
