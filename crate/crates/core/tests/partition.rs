mod common;

use common::{dot, random_block};
use proptest::prelude::*;
use saap_core::partition::{kmeans_train_traced, relative_size_deviation};
use saap_core::{Partition, SeededRng, TensorBlock};

fn brute_argmax(p: &Partition, key: &[f32]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, row) in p.centroids().iter_rows().enumerate() {
        let s = dot(key, row);
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

fn unit_keys(rng: &mut SeededRng, n: usize, d: usize) -> TensorBlock {
    let raw = random_block(rng, n, d);
    let mut out = Vec::with_capacity(n * d);
    for row in raw.iter_rows() {
        let nrm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        out.extend(row.iter().map(|&x| (x as f64 / nrm) as f32));
    }
    TensorBlock::new(n, d, out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn assignment_is_the_brute_force_argmax(seed in any::<u64>(), c in 1usize..20, d in 1usize..10) {
        let mut rng = SeededRng::new(seed);
        let p = Partition::from_directions(&random_block(&mut rng, c, d)).unwrap();
        let keys = random_block(&mut rng, 50, d);
        let a = p.assign_block(&keys, 0).unwrap();
        for (i, row) in keys.iter_rows().enumerate() {
            prop_assert_eq!(a.bucket_of[i] as usize, brute_argmax(&p, row));
        }
    }

    #[test]
    fn assignment_ignores_positive_scale(seed in any::<u64>(), c in 1usize..20, d in 1usize..10, e in -20i32..20) {
        let mut rng = SeededRng::new(seed);
        let p = Partition::from_directions(&random_block(&mut rng, c, d)).unwrap();
        let key: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
        let alpha = 2f32.powi(e);
        let scaled: Vec<f32> = key.iter().map(|x| x * alpha).collect();
        prop_assert_eq!(p.assign(&key).unwrap(), p.assign(&scaled).unwrap());
    }

    #[test]
    fn top_buckets_are_sorted_scores(seed in any::<u64>(), c in 1usize..30, ell in 0usize..30) {
        prop_assume!(ell <= c);
        let mut rng = SeededRng::new(seed);
        let p = Partition::from_directions(&random_block(&mut rng, c, 6)).unwrap();
        let v: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let top = p.top_buckets(&v, ell).unwrap();
        let scores = p.scores(&v);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        prop_assert_eq!(top, order[..ell].to_vec());
    }
}

#[test]
fn scale_invariance_holds_for_generic_factors() {
    let mut rng = SeededRng::new(11);
    let p = Partition::from_directions(&random_block(&mut rng, 16, 8)).unwrap();
    for _ in 0..2000 {
        let key: Vec<f32> = (0..8).map(|_| rng.normal() as f32).collect();
        let alpha = rng.uniform_in(0.01, 100.0) as f32;
        let scaled: Vec<f32> = key.iter().map(|x| x * alpha).collect();
        let mut s: Vec<f64> = p.centroids().iter_rows().map(|c| dot(&key, c)).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        // rounding may only flip genuine near-ties
        if s[0] - s[1] > 1e-5 {
            assert_eq!(p.assign(&key).unwrap(), p.assign(&scaled).unwrap());
        }
    }
}

#[test]
fn zero_key_goes_to_bucket_zero() {
    let mut rng = SeededRng::new(2);
    let p = Partition::from_directions(&random_block(&mut rng, 7, 5)).unwrap();
    let keys = TensorBlock::zeros(3, 5);
    let a = p.assign_block(&keys, 4).unwrap();
    assert_eq!(a.bucket_of, vec![0, 0, 0]);
    assert_eq!(a.zero_keys, 3);
    assert_eq!(a.first_id, 4);
}

#[test]
fn single_bucket_takes_everything() {
    let mut rng = SeededRng::new(5);
    let keys = random_block(&mut rng, 40, 4);
    let (p, _) = kmeans_train_traced(&keys, 1, 3, &mut rng).unwrap();
    assert!(p.assign_block(&keys, 0).unwrap().bucket_of.iter().all(|&b| b == 0));
}

#[test]
fn kmeans_objective_never_decreases() {
    for run in 0..20 {
        let mut rng = SeededRng::new(1000 + run);
        let keys = unit_keys(&mut rng, 600, 8);
        let (p, report) = kmeans_train_traced(&keys, 16, 8, &mut rng).unwrap();
        assert_eq!(report.objective.len(), 9);
        for w in report.objective.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "run {run}: {:?}", report.objective);
        }
        // the reported final objective is the brute-force one
        let brute: f64 = keys
            .iter_rows()
            .map(|k| p.centroids().iter_rows().map(|c| dot(k, c)).fold(f64::NEG_INFINITY, f64::max))
            .sum();
        let last = *report.objective.last().unwrap();
        assert!((brute - last).abs() < 1e-4 * brute.abs().max(1.0), "{brute} vs {last}");
    }
}

#[test]
fn kmeans_leaves_no_empty_cluster_on_spread_data() {
    let mut rng = SeededRng::new(77);
    let keys = unit_keys(&mut rng, 2000, 16);
    let (p, report) = kmeans_train_traced(&keys, 64, 10, &mut rng).unwrap();
    assert_eq!(report.final_empty, 0);
    let sizes = p.assign_block(&keys, 0).unwrap().bucket_sizes(64);
    assert!(sizes.iter().all(|&s| s > 0));
}

#[test]
fn kmeans_rejects_bad_arguments() {
    let mut rng = SeededRng::new(0);
    let keys = random_block(&mut rng, 5, 3);
    assert!(kmeans_train_traced(&keys, 0, 3, &mut rng).is_err());
    assert!(kmeans_train_traced(&keys, 6, 3, &mut rng).is_err());
    assert!(kmeans_train_traced(&keys, 2, 0, &mut rng).is_err());
}

#[test]
fn size_deviation_matches_definition() {
    assert_eq!(relative_size_deviation(&[5, 5, 5, 5]), 0.0);
    // sizes 2, 6: mean 4, population std 2
    assert!((relative_size_deviation(&[2, 6]) - 0.5).abs() < 1e-12);
    assert_eq!(relative_size_deviation(&[0, 0]), 0.0);
}
