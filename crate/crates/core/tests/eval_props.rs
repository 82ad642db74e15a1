use coverdet::dataset::PairSample;
use coverdet::eval::{cosine_distance, prec_at_1, EmbeddingIndex, EVAL_BATCH_SIZE};
use coverdet::seed;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn pairs(n: usize) -> Vec<PairSample> {
    (0..n)
        .map(|i| PairSample::new(&format!("a{i:05}"), &format!("b{i:05}"), 1))
        .collect()
}

fn random_index(n: usize, dim: usize, s: u64) -> EmbeddingIndex {
    let mut rng = seed::rng(s);
    let mut idx = EmbeddingIndex::new(dim);
    for p in pairs(n) {
        for t in [p.track_a, p.track_b] {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            idx.insert(t, v).unwrap();
        }
    }
    idx
}

#[test]
fn random_embeddings_score_one_in_fifteen() {
    // 1000 batches of 8 pairs.
    let report = prec_at_1(&random_index(8000, 16, 5), &pairs(8000), EVAL_BATCH_SIZE, 9).unwrap();
    assert_eq!(report.n_batches, 1000);
    assert!(
        (report.prec_at_1 - 1.0 / 15.0).abs() < 0.01,
        "{}",
        report.prec_at_1
    );
}

#[test]
fn perfect_embeddings_score_one() {
    let mut idx = EmbeddingIndex::new(40);
    for (i, p) in pairs(40).into_iter().enumerate() {
        let mut v = vec![0.0; 40];
        v[i] = 1.0;
        idx.insert(p.track_a, v.clone()).unwrap();
        idx.insert(p.track_b, v).unwrap();
    }
    let r = prec_at_1(&idx, &pairs(40), 16, 1).unwrap();
    assert_eq!(r.prec_at_1, 1.0);
    assert_eq!(r.n_batches, 5);
}

#[test]
fn report_mean_equals_batch_mean() {
    let r = prec_at_1(&random_index(83, 8, 2), &pairs(83), 16, 4).unwrap();
    assert_eq!(r.n_batches, 10);
    assert_eq!(r.dropped_pairs, 3);
    let mean = r.per_batch_scores.iter().sum::<f64>() / r.n_batches as f64;
    assert!((r.prec_at_1 - mean).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn positive_rescaling_leaves_scores_unchanged(s in any::<u64>(), scale in 1e-3f64..1e3) {
        let idx = random_index(32, 6, s);
        let scaled = idx.map_vectors(|v| v.iter().map(|x| x * scale).collect()).unwrap();
        let a = prec_at_1(&idx, &pairs(32), 16, s).unwrap();
        let b = prec_at_1(&scaled, &pairs(32), 16, s).unwrap();
        prop_assert_eq!(a.per_batch_scores, b.per_batch_scores);
    }

    #[test]
    fn scores_are_probabilities_and_replay(s in any::<u64>()) {
        let idx = random_index(24, 4, s);
        let a = prec_at_1(&idx, &pairs(24), 16, s).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.prec_at_1));
        prop_assert!(a.per_batch_scores.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert_eq!(a, prec_at_1(&idx, &pairs(24), 16, s).unwrap());
    }

    #[test]
    fn cosine_distance_is_bounded_and_symmetric(
        u in prop::collection::vec(-10.0f64..10.0, 5),
        v in prop::collection::vec(-10.0f64..10.0, 5),
    ) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-6) && v.iter().any(|x| x.abs() > 1e-6));
        let d = cosine_distance(&u, &v).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
        prop_assert_eq!(d, cosine_distance(&v, &u).unwrap());
    }
}

#[test]
fn far_partners_score_zero() {
    // Each pair points in opposite directions; every other track is closer.
    let mut rng = seed::rng(3);
    let mut idx = EmbeddingIndex::new(3);
    for p in pairs(8) {
        let base: Vec<f64> = vec![
            1.0,
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
        ];
        let neg: Vec<f64> = base.iter().map(|x| -x).collect();
        // Alternate sides so both halves of the batch have near neighbours.
        if rng.random_bool(0.5) {
            idx.insert(p.track_a, base).unwrap();
            idx.insert(p.track_b, neg).unwrap();
        } else {
            idx.insert(p.track_a, neg).unwrap();
            idx.insert(p.track_b, base).unwrap();
        }
    }
    let r = prec_at_1(&idx, &pairs(8), 16, 0).unwrap();
    assert_eq!(r.prec_at_1, 0.0);
}
