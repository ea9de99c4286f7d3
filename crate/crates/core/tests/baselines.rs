mod common;

use common::{dot, naive_attention, random_block};
use proptest::prelude::*;
use saap_core::attention::restricted_attention;
use saap_core::baselines::{
    gray_rank, random_sample_select, ArgmaxBuckets, HyperplaneTable, KdeformerIndex, LshEnsemble, ReformerIndex,
};
use saap_core::SeededRng;

fn brute_code(x: &[f32], projections: &[Vec<f64>]) -> u64 {
    let mut code = 0;
    for (i, p) in projections.iter().enumerate() {
        let s: f64 = p.iter().zip(x).map(|(a, b)| a * *b as f64).sum();
        if s > 0.0 {
            code += 1u64 << i;
        }
    }
    code
}

/// Sorted position a query lands on: the first key of equal rank, otherwise
/// the last key ranked below it, otherwise the first key.
fn anchor_by_scan(sorted_ranks: &[u64], target: u64) -> usize {
    if let Some(i) = sorted_ranks.iter().position(|&r| r == target) {
        return i;
    }
    sorted_ranks.iter().rposition(|&r| r < target).unwrap_or(0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lsh_candidates_match_collision_counts(seed in any::<u64>(), n in 1usize..120, l in 1usize..8, bits in 1usize..6, t in 1usize..8) {
        prop_assume!(t <= l);
        let mut rng = SeededRng::new(seed);
        let d = 6;
        let keys = random_block(&mut rng, n, d);
        let ens = LshEnsemble::build(&keys, l, bits, t, &mut rng).unwrap();
        let q: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
        let projs: Vec<Vec<Vec<f64>>> = ens.tables().iter().map(|tb| tb.projections().to_vec()).collect();
        let expect: Vec<usize> = (0..n)
            .filter(|&i| projs.iter().filter(|p| brute_code(keys.row(i), p) == brute_code(&q, p)).count() >= t)
            .collect();
        prop_assert_eq!(ens.candidates(&q).unwrap(), expect);
    }

    #[test]
    fn kdeformer_bin_matches_resorted_scan(seed in any::<u64>(), n in 1usize..200, bits in 1usize..10, bins in 1usize..20) {
        let mut rng = SeededRng::new(seed);
        let d = 5;
        let keys = random_block(&mut rng, n, d);
        let table = HyperplaneTable::random(bits, d, &mut rng).unwrap();
        let idx = KdeformerIndex::with_table(&keys, table.clone(), bins).unwrap();
        let mut order: Vec<(u64, usize)> = (0..n).map(|i| (gray_rank(brute_code(keys.row(i), table.projections())), i)).collect();
        order.sort();
        let ranks: Vec<u64> = order.iter().map(|x| x.0).collect();
        let size = n.div_ceil(bins);
        prop_assert_eq!(idx.bin_size(), size);
        let q: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
        let bin = anchor_by_scan(&ranks, gray_rank(brute_code(&q, table.projections()))) / size;
        let mut expect: Vec<usize> = order.iter().skip(bin * size).take(size).map(|x| x.1).collect();
        expect.sort();
        let got = idx.select(&q).unwrap();
        prop_assert!(!got.is_empty() && got.len() <= size);
        prop_assert_eq!(got, expect);
    }

    #[test]
    fn reformer_union_matches_chunk_scan(seed in any::<u64>(), n in 1usize..200, nb in 1usize..16, rounds in 1usize..4, size in 1usize..40) {
        let mut rng = SeededRng::new(seed);
        let d = 5;
        let keys = random_block(&mut rng, n, d);
        let hashes: Vec<ArgmaxBuckets> = (0..rounds).map(|_| ArgmaxBuckets::random(nb, d, &mut rng).unwrap()).collect();
        let idx = ReformerIndex::with_buckets(&keys, hashes.clone(), size).unwrap();
        let q: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
        let mut expect = Vec::new();
        for h in &hashes {
            let mut order: Vec<(u64, usize)> = (0..n).map(|i| (h.bucket(keys.row(i)) as u64, i)).collect();
            order.sort();
            let sorted: Vec<u64> = order.iter().map(|x| x.0).collect();
            let bin = anchor_by_scan(&sorted, h.bucket(&q) as u64) / size;
            expect.extend(order.iter().skip(bin * size).take(size).map(|x| x.1));
        }
        expect.sort();
        expect.dedup();
        prop_assert_eq!(idx.select(&q).unwrap(), expect);
    }
}

#[test]
fn argmax_bucket_is_brute_force() {
    let mut rng = SeededRng::new(3);
    let dirs = random_block(&mut rng, 12, 7);
    let h = ArgmaxBuckets::from_directions(dirs.clone()).unwrap();
    for _ in 0..500 {
        let x: Vec<f32> = (0..7).map(|_| rng.normal() as f32).collect();
        let scores: Vec<f64> = dirs.iter_rows().map(|r| dot(&x, r)).collect();
        let best = (0..12).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        assert_eq!(h.bucket(&x), best);
    }
}

#[test]
fn random_sampling_is_uniform() {
    let (n, m, reps) = (16usize, 8usize, 10_000usize);
    let mut rng = SeededRng::new(42);
    let mut counts = vec![0usize; n];
    for _ in 0..reps {
        let ids = random_sample_select(n, m, &mut rng).unwrap();
        assert_eq!(ids.len(), m);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        for i in ids {
            counts[i] += 1;
        }
    }
    let p = m as f64 / n as f64;
    let mean = reps as f64 * p;
    let sd = (reps as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "id {i}: {c} vs {mean}");
    }
    assert!(random_sample_select(3, 4, &mut rng).is_err());
    assert_eq!(random_sample_select(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
}

#[test]
fn selected_sets_feed_restricted_attention() {
    let mut rng = SeededRng::new(6);
    let keys = random_block(&mut rng, 300, 8);
    let values = random_block(&mut rng, 300, 4);
    let q = random_block(&mut rng, 1, 8);
    let idx = KdeformerIndex::build(&keys, 8, 10, &mut rng).unwrap();
    let ids = idx.select(q.row(0)).unwrap();
    let (out, empty) = restricted_attention(&q, &keys, &values, &ids).unwrap();
    assert!(!empty[0]);
    let expect = naive_attention(q.row(0), &keys, &values, &ids);
    for (a, b) in out.row(0).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn hyperplane_validation() {
    let mut rng = SeededRng::new(0);
    assert!(HyperplaneTable::random(0, 4, &mut rng).is_err());
    assert!(HyperplaneTable::random(64, 4, &mut rng).is_err());
    let keys = random_block(&mut rng, 10, 4);
    assert!(LshEnsemble::build(&keys, 3, 4, 4, &mut rng).is_err());
    assert!(LshEnsemble::build(&keys, 3, 4, 0, &mut rng).is_err());
    assert!(KdeformerIndex::build(&keys, 4, 0, &mut rng).is_err());
    assert!(ReformerIndex::build(&keys, 4, 1, 0, &mut rng).is_err());
}
