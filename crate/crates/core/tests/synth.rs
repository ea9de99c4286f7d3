mod common;

use common::{dot, p_greater, p_two_sided};
use saap_core::harness::{
    assignment_overlap, balance_samples, qmodel_examples, DiagnosticsConfig, HeadArtifacts, KmeansConfig, SuiteConfig,
};
use saap_core::attention::DenseWindow;
use saap_core::harness::generate_head;
use saap_core::synth::{generate_ood_queries, generate_prompt, rope_consistent, HeadSpec, QueryKind};
use saap_core::{kmeans_train, SeededRng};

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let spec = HeadSpec::default().with_seed(5).with_prompt(1);
    let a = generate_prompt(&spec, 4000, 64).unwrap();
    let b = generate_prompt(&spec, 4000, 64).unwrap();
    let bits = |x: &[f32]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.keys_roped.as_slice()), bits(b.keys_roped.as_slice()));
    assert_eq!(bits(a.queries_deroped.as_slice()), bits(b.queries_deroped.as_slice()));
    assert_eq!(bits(a.values.as_slice()), bits(b.values.as_slice()));
    assert_eq!(a.planted_target, b.planted_target);
    let c = generate_prompt(&spec.clone().with_seed(6), 4000, 64).unwrap();
    assert_ne!(bits(a.keys_roped.as_slice()), bits(c.keys_roped.as_slice()));
    let p = generate_prompt(&spec.with_prompt(2), 4000, 64).unwrap();
    assert_ne!(bits(a.keys_roped.as_slice()), bits(p.keys_roped.as_slice()));
}

#[test]
fn both_frames_agree() {
    for seed in 0..3 {
        let p = generate_prompt(&HeadSpec::default().with_seed(seed), 3000, 50).unwrap();
        assert!(rope_consistent(&p, 1e-3).unwrap());
        assert_eq!(p.positions, (0..3000).collect::<Vec<_>>());
        assert!(p.query_positions.iter().all(|&q| q == 3000));
    }
}

#[test]
fn queries_and_keys_point_apart() {
    let p = generate_prompt(&HeadSpec::default().with_seed(1), 8192, 256).unwrap();
    let mut rng = SeededRng::new(1);
    let mut prods: Vec<f64> = (0..20_000)
        .map(|_| dot(p.queries_roped.row(rng.below(256)), p.keys_roped.row(1 + rng.below(8191))))
        .collect();
    prods.sort_by(|a, b| a.total_cmp(b));
    let median = prods[prods.len() / 2];
    assert!(median < 0.0, "median {median}");
}

#[test]
fn planted_queries_find_their_key() {
    let (mut hits, mut total) = (0, 0);
    for seed in 0..2 {
        let p = generate_prompt(&HeadSpec::default().with_seed(10 + seed), 8192, 400).unwrap();
        for i in p.planted_ids() {
            let target = p.planted_target[i].unwrap();
            assert!(p.query_positions[i] - target >= 2048);
            let q = p.queries_roped.row(i);
            let best = (1..8192).max_by(|&a, &b| dot(q, p.keys_roped.row(a)).total_cmp(&dot(q, p.keys_roped.row(b))).then(b.cmp(&a)));
            total += 1;
            hits += (best == Some(target)) as usize;
        }
    }
    assert!(total > 100);
    assert!(hits as f64 >= 0.99 * total as f64, "{hits}/{total}");
}

#[test]
fn local_lookups_stay_recent() {
    let spec = HeadSpec { local_fraction: 1.0, ..HeadSpec::default() }.with_seed(2);
    let p = generate_prompt(&spec, 6000, 300).unwrap();
    for (i, kind) in p.query_kind.iter().enumerate() {
        match kind {
            QueryKind::Local => assert!(6000 - p.planted_target[i].unwrap() <= spec.local_span),
            QueryKind::Planted => assert!(6000 - p.planted_target[i].unwrap() >= spec.planted_min_gap),
            QueryKind::Content => panic!("all non-planted queries should be lookups"),
        }
    }
}

#[test]
fn long_range_retention_tracks_the_planted_share() {
    let spec = HeadSpec { local_fraction: 1.0, ..HeadSpec::default() }.with_seed(4);
    let p = generate_prompt(&spec, 8192, 500).unwrap();
    let partition = kmeans_train(&p.keys_deroped.slice_rows(1, 8192), 32, 5, &mut SeededRng::new(0)).unwrap();
    let (q, t) = qmodel_examples(&p, &partition, 1024, DenseWindow::default()).unwrap();
    let frac = q.rows() as f64 / 500.0;
    assert!((frac - spec.planted_longrange_fraction).abs() <= 0.1, "retained {frac}");
    for i in 0..t.rows() {
        assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

fn small_suite(base: HeadSpec) -> SuiteConfig {
    SuiteConfig { base, n_heads: 1, train_prompts: 2, eval_prompts: 1, n_keys: 12_000, n_queries: 32, seed: 3 }
}

fn head(base: HeadSpec, c: usize) -> HeadArtifacts {
    let cfg = small_suite(base);
    let data = generate_head(&cfg.head_spec(0), &cfg).unwrap();
    HeadArtifacts::train(data, &KmeansConfig { c, iters: 8, ..KmeansConfig::default() }, false, None).unwrap()
}

fn regime<'a>(rows: &'a [(&'static str, Vec<f64>)], name: &str) -> &'a [f64] {
    &rows.iter().find(|r| r.0 == name).unwrap().1
}

#[test]
fn stationary_single_cluster_balance_is_regime_free() {
    let h = head(HeadSpec { n_clusters: 1, drift_rate: 0.0, ..HeadSpec::default() }, 32);
    let cfg = DiagnosticsConfig { sample_size: 2048, repetitions: 10, ..DiagnosticsConfig::default() };
    let rows = balance_samples(&h, &cfg).unwrap();
    let p = p_two_sided(regime(&rows, "temporal"), regime(&rows, "uniform"));
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn drift_unbalances_contiguous_samples() {
    let h = head(HeadSpec { drift_rate: 2e-4, ..HeadSpec::default() }, 32);
    let cfg = DiagnosticsConfig { sample_size: 2048, repetitions: 10, ..DiagnosticsConfig::default() };
    let rows = balance_samples(&h, &cfg).unwrap();
    let p = p_greater(regime(&rows, "temporal"), regime(&rows, "uniform"));
    assert!(p < 0.05, "p = {p}");
}

#[test]
fn shifted_queries_leave_the_key_distribution() {
    let h = head(HeadSpec::default(), 64);
    let eval = &h.data.eval[0];
    let keys = eval.keys_deroped.slice_rows(1, eval.len());
    let near = generate_ood_queries(&h.data.spec, 2000, 0.0).unwrap();
    let far = generate_ood_queries(&h.data.spec, 2000, 1000.0).unwrap();
    let (tv0, _) = assignment_overlap(&h.partition, &keys, &near).unwrap();
    let (tv1, share) = assignment_overlap(&h.partition, &keys, &far).unwrap();
    assert!(tv0 < tv1, "{tv0} vs {tv1}");
    assert!(share >= 0.5, "share {share}");
    assert_eq!(far.shape(), (2000, 64));
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(HeadSpec { d: 7, ..HeadSpec::default() }.validate().is_err());
    assert!(HeadSpec { planted_longrange_fraction: 1.5, ..HeadSpec::default() }.validate().is_err());
    assert!(generate_prompt(&HeadSpec::default(), 0, 1).is_err());
    assert!(generate_ood_queries(&HeadSpec::default(), 5, -1.0).is_err());
}
