#![allow(dead_code)]

use saap_core::{SeededRng, TensorBlock};

pub fn random_block(rng: &mut SeededRng, n: usize, d: usize) -> TensorBlock {
    TensorBlock::from_f64(n, d, &(0..n * d).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()
}

pub fn scaled_block(rng: &mut SeededRng, n: usize, d: usize, scale: f64) -> TensorBlock {
    TensorBlock::from_f64(n, d, &(0..n * d).map(|_| scale * rng.normal()).collect::<Vec<_>>()).unwrap()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Softmax attention of one query over `ids`, written out directly.
pub fn naive_attention(q: &[f32], keys: &TensorBlock, values: &TensorBlock, ids: &[usize]) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let s: Vec<f64> = ids.iter().map(|&i| scale * dot(q, keys.row(i))).collect();
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; values.dim()];
    for (&wi, &i) in w.iter().zip(ids) {
        for (o, &v) in out.iter_mut().zip(values.row(i)) {
            *o += wi / z * v as f64;
        }
    }
    out
}

/// Softmax weights of one query over all keys.
pub fn naive_weights(q: &[f32], keys: &TensorBlock) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let s: Vec<f64> = keys.iter_rows().map(|k| scale * dot(q, k)).collect();
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

pub fn assert_close(a: &[f64], b: &[f64], rel: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let tol = rel * x.abs().max(y.abs()).max(1.0);
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y}");
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Welch t statistic of `a − b` and its degrees of freedom.
pub fn welch(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se = (sa + sb).sqrt();
    let t = if se == 0.0 { 0.0 } else { (ma - mb) / se };
    let df = if se == 0.0 {
        (a.len() + b.len() - 2) as f64
    } else {
        (sa + sb).powi(2) / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0))
    };
    (t, df)
}

/// One-sided p-value for `mean(a) > mean(b)`.
pub fn p_greater(a: &[f64], b: &[f64]) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let (t, df) = welch(a, b);
    1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t)
}

/// Two-sided p-value for equal means.
pub fn p_two_sided(a: &[f64], b: &[f64]) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let (t, df) = welch(a, b);
    2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t.abs()))
}
