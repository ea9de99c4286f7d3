mod common;

use common::random_block;
use proptest::prelude::*;
use saap_core::baselines::{gray, gray_rank};
use saap_core::format::{decode_tensor, encode_tensor};
use saap_core::partition::KeyAssignment;
use saap_core::rope::{rope_apply, rope_remove, RopeConfig};
use saap_core::{build_ivf, matmul_scaled, SeededRng, TensorBlock};

fn assignment_strategy() -> impl Strategy<Value = (Vec<u32>, usize, usize)> {
    (1usize..40, 0usize..300, 0usize..5).prop_flat_map(|(c, n, first)| (prop::collection::vec(0..c as u32, n), Just(c), Just(first)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ivf_regroups_losslessly((bucket_of, c, first) in assignment_strategy()) {
        let n = bucket_of.len();
        let a = KeyAssignment { bucket_of: bucket_of.clone(), first_id: first, zero_keys: 0 };
        let ivf = build_ivf(&a, c).unwrap();
        prop_assert_eq!(ivf.off.len(), c + 1);
        prop_assert_eq!(ivf.off[0], 0);
        prop_assert_eq!(ivf.off[c], n);
        prop_assert!(ivf.off.windows(2).all(|w| w[0] <= w[1]));
        let mut seen = ivf.idx.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (first..first + n).collect::<Vec<_>>());
        for b in 0..c {
            let expect: Vec<usize> = (0..n).filter(|&i| bucket_of[i] as usize == b).map(|i| i + first).collect();
            let mut got = ivf.bucket(b).to_vec();
            got.sort_unstable();
            prop_assert_eq!(got, expect);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matmul_matches_triple_loop(m in 0usize..20, n in 0usize..20, d in 1usize..64, seed in any::<u64>(), scale in -2.0f64..2.0) {
        let mut rng = SeededRng::new(seed);
        let draw = |rng: &mut SeededRng, r: usize| {
            TensorBlock::from_f64(r, d, &(0..r * d).map(|_| rng.uniform_in(-10.0, 10.0)).collect::<Vec<_>>()).unwrap()
        };
        let a = draw(&mut rng, m);
        let b = draw(&mut rng, n);
        let c = matmul_scaled(&a, &b, scale).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for k in 0..d {
                    s += a.row(i)[k] as f64 * b.row(j)[k] as f64;
                }
                let expect = scale * s;
                let got = c.row(i)[j] as f64;
                // storage is f32, so the bound is relative to the entry size
                prop_assert!((got - expect).abs() <= 1e-6 * expect.abs().max(1.0), "({i},{j}) {got} vs {expect}");
            }
        }
    }

    #[test]
    fn tensor_encoding_is_bit_exact(rows in 0usize..12, dim in 0usize..12, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let data: Vec<f32> = (0..rows * dim).map(|_| rng.normal() as f32 * 1e3).collect();
        let t = TensorBlock::new(rows, dim, data).unwrap();
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.as_slice().iter().zip(t.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn gray_neighbours_differ_in_one_bit() {
    for b in 0u64..(1 << 16) {
        assert_eq!(gray_rank(gray(b)), b);
        if b + 1 < (1 << 16) {
            assert_eq!((gray(b) ^ gray(b + 1)).count_ones(), 1, "b = {b}");
        }
    }
}

#[test]
fn rope_round_trips_random_pairs() {
    let mut rng = SeededRng::new(3);
    let cfg = RopeConfig::new(64, 10_000.0).unwrap();
    for _ in 0..10_000 {
        let x: Vec<f32> = (0..64).map(|_| rng.uniform_in(-4.0, 4.0) as f32).collect();
        let p = rng.below(1_000_001);
        let there = rope_apply(&x, p, &cfg).unwrap();
        let back = rope_remove(&there, p, &cfg).unwrap();
        let other = rope_apply(&rope_remove(&x, p, &cfg).unwrap(), p, &cfg).unwrap();
        for i in 0..64 {
            assert!((back[i] - x[i]).abs() <= 1e-6 * x[i].abs().max(1.0), "pos {p} comp {i}");
            assert!((other[i] - x[i]).abs() <= 1e-6 * x[i].abs().max(1.0), "pos {p} comp {i}");
        }
        let n0: f64 = x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let n1: f64 = there.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n0 - n1).abs() <= 1e-6 * n0.max(1.0));
    }
}

#[test]
fn rope_preserves_relative_products() {
    let mut rng = SeededRng::new(4);
    let cfg = RopeConfig::new(32, 10_000.0).unwrap();
    let qs = random_block(&mut rng, 200, 32);
    let ks = random_block(&mut rng, 200, 32);
    for i in 0..200 {
        let p = rng.below(100_000);
        let a = rope_apply(qs.row(i), p, &cfg).unwrap();
        let b = rope_apply(ks.row(i), p, &cfg).unwrap();
        let rotated: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let plain: f64 = qs.row(i).iter().zip(ks.row(i)).map(|(x, y)| *x as f64 * *y as f64).sum();
        assert!((rotated - plain).abs() <= 1e-5 * plain.abs().max(1.0), "{rotated} vs {plain}");
    }
}
