//! Query-to-bucket classifier.
//!
//! A two-layer MLP `Linear(d→h) → BatchNorm → ReLU → Linear(h→C) → softmax`
//! mapping a de-roped query to a distribution over buckets. It is trained to
//! match the fraction of attention mass that each bucket receives, with a KL
//! objective, manual backpropagation and Adam.
//!
//! Parameters live in f64 during training; checkpoints store them as f32.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SaapError};
use crate::format;
use crate::partition::{top_k_desc, KeyAssignment};
use crate::rng::SeededRng;
use crate::tensor::{gemm, Matrix, TensorBlock, Trans};

const BN_EPS: f64 = 1e-5;
/// Floor applied to predicted probabilities inside the log.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batch norm.
    Train,
    /// Running statistics; each row is processed independently.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QModel {
    d: usize,
    h: usize,
    c: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub bn_run_mean: Vec<f64>,
    pub bn_run_var: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradients of the trainable parameters, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Grads {
    fn slices(&self) -> [&[f64]; 6] {
        [&self.w1, &self.b1, &self.bn_gamma, &self.bn_beta, &self.w2, &self.b2]
    }
}

/// Cached activations of a train-mode forward pass.
struct Trace {
    n: usize,
    x: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    relu: Vec<f64>,
    probs: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

impl QModel {
    /// Default initialization: uniform `±1/√fan_in` for both linear layers,
    /// identity batch norm.
    pub fn new(d: usize, h: usize, c: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut m = Self::zeros(d, h, c)?;
        let a1 = 1.0 / (d as f64).sqrt();
        let a2 = 1.0 / (h as f64).sqrt();
        for w in m.w1.iter_mut().chain(m.b1.iter_mut()) {
            *w = rng.uniform_in(-a1, a1);
        }
        for w in m.w2.iter_mut().chain(m.b2.iter_mut()) {
            *w = rng.uniform_in(-a2, a2);
        }
        Ok(m)
    }

    /// All weights and biases zero, identity batch norm.
    pub fn zeros(d: usize, h: usize, c: usize) -> Result<Self> {
        if d == 0 || h == 0 || c == 0 {
            return Err(SaapError::invalid(format!("model dims must be positive, got d={d} h={h} C={c}")));
        }
        Ok(Self {
            d,
            h,
            c,
            w1: vec![0.0; d * h],
            b1: vec![0.0; h],
            bn_gamma: vec![1.0; h],
            bn_beta: vec![0.0; h],
            bn_run_mean: vec![0.0; h],
            bn_run_var: vec![1.0; h],
            w2: vec![0.0; h * c],
            b2: vec![0.0; c],
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn hidden(&self) -> usize {
        self.h
    }

    pub fn n_buckets(&self) -> usize {
        self.c
    }

    /// Trainable parameters in a fixed order matching [`Grads`].
    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [&mut self.w1, &mut self.b1, &mut self.bn_gamma, &mut self.bn_beta, &mut self.w2, &mut self.b2]
    }

    fn check_input(&self, x: &TensorBlock) -> Result<()> {
        if x.dim() != self.d {
            return Err(SaapError::shape(format!("queries {}x{}", x.rows(), x.dim()), format!("model input dim {}", self.d)));
        }
        Ok(())
    }

    /// Bucket distributions for each row of `queries`.
    pub fn forward(&self, queries: &TensorBlock, mode: Mode) -> Result<Matrix> {
        self.check_input(queries)?;
        match mode {
            Mode::Train => {
                let x: Vec<f64> = queries.as_slice().iter().map(|&v| v as f64).collect();
                let t = self.forward_train(x, queries.rows())?;
                Matrix::new(t.n, self.c, t.probs)
            }
            Mode::Eval => {
                let x: Vec<f64> = queries.as_slice().iter().map(|&v| v as f64).collect();
                Matrix::new(queries.rows(), self.c, self.forward_eval(&x, queries.rows()))
            }
        }
    }

    /// Eval-mode distribution for one f64 query.
    pub fn predict(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.d {
            return Err(SaapError::shape(format!("query of dim {}", q.len()), format!("model input dim {}", self.d)));
        }
        Ok(self.forward_eval(q, 1))
    }

    fn forward_eval(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (h, c) = (self.h, self.c);
        let mut z = self.linear1(x, n);
        for row in z.chunks_exact_mut(h) {
            for j in 0..h {
                let xhat = (row[j] - self.bn_run_mean[j]) / (self.bn_run_var[j] + BN_EPS).sqrt();
                row[j] = (self.bn_gamma[j] * xhat + self.bn_beta[j]).max(0.0);
            }
        }
        let mut logits = self.linear2(&z, n);
        for row in logits.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        logits
    }

    fn linear1(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut z = Vec::with_capacity(n * self.h);
        for _ in 0..n {
            z.extend_from_slice(&self.b1);
        }
        gemm(n, self.d, self.h, x, Trans::No, &self.w1, Trans::No, 1.0, &mut z);
        z
    }

    fn linear2(&self, a: &[f64], n: usize) -> Vec<f64> {
        let mut z = Vec::with_capacity(n * self.c);
        for _ in 0..n {
            z.extend_from_slice(&self.b2);
        }
        gemm(n, self.h, self.c, a, Trans::No, &self.w2, Trans::No, 1.0, &mut z);
        z
    }

    fn forward_train(&self, x: Vec<f64>, n: usize) -> Result<Trace> {
        if n < 2 {
            return Err(SaapError::invalid("train-mode forward needs at least 2 rows for batch statistics"));
        }
        let h = self.h;
        let z = self.linear1(&x, n);
        let mut mean = vec![0.0; h];
        for row in z.chunks_exact(h) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; h];
        for row in z.chunks_exact(h) {
            for j in 0..h {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let mut xhat = z;
        let mut relu = vec![0.0; n * h];
        for (xr, rr) in xhat.chunks_exact_mut(h).zip(relu.chunks_exact_mut(h)) {
            for j in 0..h {
                xr[j] = (xr[j] - mean[j]) * inv_std[j];
                rr[j] = (self.bn_gamma[j] * xr[j] + self.bn_beta[j]).max(0.0);
            }
        }
        let mut probs = self.linear2(&relu, n);
        for row in probs.chunks_exact_mut(self.c) {
            softmax_in_place(row);
        }
        Ok(Trace { n, x, xhat, inv_std, relu, probs, batch_mean: mean, batch_var: var })
    }

    /// Train-mode loss against `target` and the gradient of every parameter.
    pub fn loss_and_grads(&self, queries: &TensorBlock, target: &Matrix) -> Result<(f64, Grads)> {
        let (loss, grads, _) = self.loss_and_grads_traced(queries, target)?;
        Ok((loss, grads))
    }

    fn loss_and_grads_traced(&self, queries: &TensorBlock, target: &Matrix) -> Result<(f64, Grads, Trace)> {
        self.check_input(queries)?;
        if target.shape() != (queries.rows(), self.c) {
            return Err(SaapError::shape(
                format!("target {}x{}", target.rows(), target.cols()),
                format!("predictions {}x{}", queries.rows(), self.c),
            ));
        }
        let x: Vec<f64> = queries.as_slice().iter().map(|&v| v as f64).collect();
        let t = self.forward_train(x, queries.rows())?;
        let (n, h, c, d) = (t.n, self.h, self.c, self.d);
        let loss = kl_rows(&t.probs, target.as_slice(), c);

        // d loss / d logits = (p - t) / n for row-stochastic targets
        let mut dlogits = vec![0.0; n * c];
        for i in 0..n * c {
            dlogits[i] = (t.probs[i] - target.as_slice()[i]) / n as f64;
        }
        let mut w2 = vec![0.0; h * c];
        gemm(h, n, c, &t.relu, Trans::Yes, &dlogits, Trans::No, 0.0, &mut w2);
        let mut b2 = vec![0.0; c];
        for row in dlogits.chunks_exact(c) {
            for (g, v) in b2.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut da = vec![0.0; n * h];
        gemm(n, c, h, &dlogits, Trans::No, &self.w2, Trans::Yes, 0.0, &mut da);

        // through ReLU and the affine part of batch norm
        let mut gamma = vec![0.0; h];
        let mut beta = vec![0.0; h];
        let mut dxhat = vec![0.0; n * h];
        for i in 0..n {
            for j in 0..h {
                let k = i * h + j;
                let dy = if t.relu[k] > 0.0 { da[k] } else { 0.0 };
                gamma[j] += dy * t.xhat[k];
                beta[j] += dy;
                dxhat[k] = dy * self.bn_gamma[j];
            }
        }
        // through normalization with batch statistics
        let mut sum_dxhat = vec![0.0; h];
        let mut sum_dxhat_xhat = vec![0.0; h];
        for i in 0..n {
            for j in 0..h {
                let k = i * h + j;
                sum_dxhat[j] += dxhat[k];
                sum_dxhat_xhat[j] += dxhat[k] * t.xhat[k];
            }
        }
        let nf = n as f64;
        let mut dz = vec![0.0; n * h];
        for i in 0..n {
            for j in 0..h {
                let k = i * h + j;
                dz[k] = t.inv_std[j] / nf * (nf * dxhat[k] - sum_dxhat[j] - t.xhat[k] * sum_dxhat_xhat[j]);
            }
        }
        let mut w1 = vec![0.0; d * h];
        gemm(d, n, h, &t.x, Trans::Yes, &dz, Trans::No, 0.0, &mut w1);
        let mut b1 = vec![0.0; h];
        for row in dz.chunks_exact(h) {
            for (g, v) in b1.iter_mut().zip(row) {
                *g += v;
            }
        }
        Ok((loss, Grads { w1, b1, bn_gamma: gamma, bn_beta: beta, w2, b2 }, t))
    }

    /// Writes named f32 tensors plus `manifest.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (name, rows, cols, data) in self.named_tensors() {
            let t = TensorBlock::from_f64(rows, cols, data)?;
            format::tensor_write(&t, dir.join(format!("{name}.tns")))?;
            writeln!(manifest, "{name} {rows} {cols}").unwrap();
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut tensors = std::collections::HashMap::new();
        for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, rows, cols] = parts[..] else {
                return Err(SaapError::Malformed(format!("manifest line {line:?}")));
            };
            let t = format::tensor_read(dir.join(format!("{name}.tns")))?;
            if t.rows().to_string() != rows || t.dim().to_string() != cols {
                return Err(SaapError::Malformed(format!("{name} has shape {}x{}, manifest says {rows}x{cols}", t.rows(), t.dim())));
            }
            tensors.insert(name.to_string(), t);
        }
        let w1 = get_from(&mut tensors, "w1")?;
        let w2 = get_from(&mut tensors, "w2")?;
        let (d, h, c) = (w1.rows(), w1.dim(), w2.dim());
        if w2.rows() != h {
            return Err(SaapError::Malformed(format!("w1 is {d}x{h} but w2 is {}x{c}", w2.rows())));
        }
        let mut m = Self::zeros(d, h, c)?;
        m.w1 = to_f64(&w1);
        m.w2 = to_f64(&w2);
        for (name, len) in [("b1", h), ("bn_gamma", h), ("bn_beta", h), ("bn_run_mean", h), ("bn_run_var", h), ("b2", c)] {
            let t = get_from(&mut tensors, name)?;
            if t.as_slice().len() != len {
                return Err(SaapError::Malformed(format!("{name} has {} entries, expected {len}", t.as_slice().len())));
            }
            let v = to_f64(&t);
            match name {
                "b1" => m.b1 = v,
                "bn_gamma" => m.bn_gamma = v,
                "bn_beta" => m.bn_beta = v,
                "bn_run_mean" => m.bn_run_mean = v,
                "bn_run_var" => m.bn_run_var = v,
                _ => m.b2 = v,
            }
        }
        Ok(m)
    }

    fn named_tensors(&self) -> [(&'static str, usize, usize, &[f64]); 8] {
        let (d, h, c) = (self.d, self.h, self.c);
        [
            ("w1", d, h, &self.w1),
            ("b1", 1, h, &self.b1),
            ("bn_gamma", 1, h, &self.bn_gamma),
            ("bn_beta", 1, h, &self.bn_beta),
            ("bn_run_mean", 1, h, &self.bn_run_mean),
            ("bn_run_var", 1, h, &self.bn_run_var),
            ("w2", h, c, &self.w2),
            ("b2", 1, c, &self.b2),
        ]
    }
}

fn get_from(tensors: &mut std::collections::HashMap<String, TensorBlock>, name: &str) -> Result<TensorBlock> {
    tensors.remove(name).ok_or_else(|| SaapError::Malformed(format!("checkpoint is missing {name}")))
}

fn to_f64(t: &TensorBlock) -> Vec<f64> {
    t.as_slice().iter().map(|&x| x as f64).collect()
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn kl_rows(pred: &[f64], target: &[f64], c: usize) -> f64 {
    let n = pred.len() / c;
    let mut total = 0.0;
    for (p, t) in pred.chunks_exact(c).zip(target.chunks_exact(c)) {
        for (&pj, &tj) in p.iter().zip(t) {
            if tj > 0.0 {
                total += tj * (tj.ln() - pj.max(KL_FLOOR).ln());
            }
        }
    }
    total / n as f64
}

/// Mean over rows of `KL(target ‖ pred)`, with `pred` floored at [`KL_FLOOR`].
pub fn kl_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(SaapError::shape(
            format!("pred {}x{}", pred.rows(), pred.cols()),
            format!("target {}x{}", target.rows(), target.cols()),
        ));
    }
    if pred.rows() == 0 {
        return Err(SaapError::Empty("kl_loss rows".into()));
    }
    Ok(kl_rows(pred.as_slice(), target.as_slice(), pred.cols()).max(0.0))
}

/// Row-softmax of `q kᵀ / √d` as an f64 matrix.
pub fn attention_probs(queries_roped: &TensorBlock, keys_roped: &TensorBlock) -> Result<Matrix> {
    if queries_roped.dim() != keys_roped.dim() {
        return Err(SaapError::shape(
            format!("queries {}x{}", queries_roped.rows(), queries_roped.dim()),
            format!("keys {}x{}", keys_roped.rows(), keys_roped.dim()),
        ));
    }
    if keys_roped.is_empty() {
        return Err(SaapError::Empty("attention over zero keys".into()));
    }
    let (n, m, d) = (queries_roped.rows(), keys_roped.rows(), queries_roped.dim());
    let q: Vec<f64> = queries_roped.as_slice().iter().map(|&x| x as f64).collect();
    let k: Vec<f64> = keys_roped.as_slice().iter().map(|&x| x as f64).collect();
    let mut s = vec![0.0; n * m];
    gemm(n, d, m, &q, Trans::No, &k, Trans::Yes, 0.0, &mut s);
    let scale = 1.0 / (d as f64).sqrt();
    for row in s.chunks_exact_mut(m.max(1)) {
        row.iter_mut().for_each(|v| *v *= scale);
        softmax_in_place(row);
    }
    Matrix::new(n, m, s)
}

/// Fraction of each query's attention mass falling into each bucket.
pub fn attention_target(
    queries_roped: &TensorBlock,
    keys_roped: &TensorBlock,
    assignment: &KeyAssignment,
    c: usize,
) -> Result<Matrix> {
    if assignment.len() != keys_roped.rows() {
        return Err(SaapError::shape(format!("{} keys", keys_roped.rows()), format!("{} assignments", assignment.len())));
    }
    if let Some(&b) = assignment.bucket_of.iter().find(|&&b| b as usize >= c) {
        return Err(SaapError::invalid(format!("bucket id {b} out of range for C = {c}")));
    }
    let a = attention_probs(queries_roped, keys_roped)?;
    let mut out = Matrix::zeros(a.rows(), c);
    for i in 0..a.rows() {
        let dst = out.row_mut(i);
        for (&w, &b) in a.row(i).iter().zip(&assignment.bucket_of) {
            dst[b as usize] += w;
        }
    }
    Ok(out)
}

/// Ids of the queries whose highest-weight key lies more than `threshold`
/// positions back.
pub fn sample_long_range(
    query_positions: &[usize],
    key_positions: &[usize],
    attention: &Matrix,
    threshold: usize,
) -> Result<Vec<usize>> {
    if attention.rows() != query_positions.len() || attention.cols() != key_positions.len() {
        return Err(SaapError::shape(
            format!("attention {}x{}", attention.rows(), attention.cols()),
            format!("{} query and {} key positions", query_positions.len(), key_positions.len()),
        ));
    }
    if attention.cols() == 0 {
        return Ok(Vec::new());
    }
    Ok((0..attention.rows())
        .filter(|&i| {
            let top = crate::partition::argmax_lowest(attention.row(i));
            query_positions[i].abs_diff(key_positions[top]) > threshold
        })
        .collect())
}

/// Top-`ell` buckets of the summed eval-mode distributions of a query group.
pub fn batched_bucket_select(model: &QModel, group: &TensorBlock, ell: usize) -> Result<Vec<usize>> {
    if ell > model.c {
        return Err(SaapError::invalid(format!("ell = {ell} exceeds C = {}", model.c)));
    }
    if group.is_empty() {
        return Err(SaapError::Empty("query group".into()));
    }
    let p = model.forward(group, Mode::Eval)?;
    Ok(top_k_desc(&sum_rows(&p), ell))
}

pub(crate) fn sum_rows(p: &Matrix) -> Vec<f64> {
    let mut total = vec![0.0; p.cols()];
    for i in 0..p.rows() {
        for (t, v) in total.iter_mut().zip(p.row(i)) {
            *t += v;
        }
    }
    total
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the old running statistic in the batch-norm update.
    pub bn_momentum: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl TrainerState {
    pub fn new(model: &QModel, lr: f64) -> Self {
        let sizes = [model.w1.len(), model.b1.len(), model.h, model.h, model.w2.len(), model.b2.len()];
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            bn_momentum: 0.9,
            step: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    fn apply(&mut self, model: &mut QModel, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in model.params_mut().into_iter().zip(grads.slices()).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One training batch drawn from a single prompt.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub queries_deroped: TensorBlock,
    pub queries_roped: TensorBlock,
    pub keys_roped: TensorBlock,
    pub key_assignment: KeyAssignment,
    pub query_positions: Vec<usize>,
    pub key_positions: Vec<usize>,
}

impl TrainBatch {
    pub fn target(&self, c: usize) -> Result<Matrix> {
        attention_target(&self.queries_roped, &self.keys_roped, &self.key_assignment, c)
    }
}

/// Computes the batch target and takes one Adam step; returns the loss
/// before the update.
pub fn train_step(model: &mut QModel, state: &mut TrainerState, batch: &TrainBatch) -> Result<f64> {
    let target = batch.target(model.c)?;
    train_step_on(model, state, &batch.queries_deroped, &target)
}

/// One Adam step against a precomputed target.
pub fn train_step_on(model: &mut QModel, state: &mut TrainerState, queries: &TensorBlock, target: &Matrix) -> Result<f64> {
    let (loss, grads, trace) = model.loss_and_grads_traced(queries, target)?;
    if !loss.is_finite() || grads.slices().iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(SaapError::Diverged(format!("non-finite loss or gradient at step {} (loss {loss})", state.step + 1)));
    }
    state.apply(model, &grads);
    let mom = state.bn_momentum;
    let n = trace.n as f64;
    for j in 0..model.h {
        model.bn_run_mean[j] = mom * model.bn_run_mean[j] + (1.0 - mom) * trace.batch_mean[j];
        let unbiased = trace.batch_var[j] * n / (n - 1.0);
        model.bn_run_var[j] = mom * model.bn_run_var[j] + (1.0 - mom) * unbiased;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_block(rng: &mut SeededRng, n: usize, d: usize, scale: f64) -> TensorBlock {
        TensorBlock::from_f64(n, d, &(0..n * d).map(|_| scale * rng.normal()).collect::<Vec<_>>()).unwrap()
    }

    fn random_dist(rng: &mut SeededRng, n: usize, c: usize) -> Matrix {
        let mut data = Vec::new();
        for _ in 0..n {
            let mut row: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
            softmax_in_place(&mut row);
            data.extend(row);
        }
        Matrix::new(n, c, data).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform() {
        let m = QModel::zeros(4, 8, 5).unwrap();
        let mut rng = SeededRng::new(1);
        let x = random_block(&mut rng, 3, 4, 1.0);
        for mode in [Mode::Eval, Mode::Train] {
            let p = m.forward(&x, mode).unwrap();
            assert!(p.as_slice().iter().all(|&v| (v - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn eval_is_batch_independent() {
        let mut rng = SeededRng::new(2);
        let mut m = QModel::new(6, 16, 7, &mut rng).unwrap();
        m.bn_run_mean.iter_mut().for_each(|v| *v = 0.1);
        m.bn_run_var.iter_mut().for_each(|v| *v = 2.0);
        let x = random_block(&mut rng, 5, 6, 1.0);
        let all = m.forward(&x, Mode::Eval).unwrap();
        for i in 0..5 {
            let alone = m.forward(&x.select_rows(&[i]), Mode::Eval).unwrap();
            assert_eq!(alone.row(0), all.row(i));
        }
    }

    #[test]
    fn rows_are_distributions() {
        let mut rng = SeededRng::new(3);
        let m = QModel::new(8, 32, 11, &mut rng).unwrap();
        let x = random_block(&mut rng, 20, 8, 3.0);
        for mode in [Mode::Eval, Mode::Train] {
            let p = m.forward(&x, mode).unwrap();
            for i in 0..20 {
                assert!(p.row(i).iter().all(|&v| v >= 0.0));
                assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn train_mode_needs_two_rows() {
        let m = QModel::zeros(2, 2, 2).unwrap();
        let x = TensorBlock::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(m.forward(&x, Mode::Train).is_err());
        assert!(m.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn target_one_key_is_one_hot() {
        let q = TensorBlock::new(2, 2, vec![1.0, 0.0, -3.0, 2.0]).unwrap();
        let k = TensorBlock::new(1, 2, vec![0.5, 0.5]).unwrap();
        let t = attention_target(&q, &k, &KeyAssignment::new(vec![2]), 4).unwrap();
        for i in 0..2 {
            assert_eq!(t.row(i), &[0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn target_symmetric_pair() {
        let q = TensorBlock::new(1, 2, vec![0.3, -0.7]).unwrap();
        let k = TensorBlock::new(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let t = attention_target(&q, &k, &KeyAssignment::new(vec![0, 1]), 2).unwrap();
        assert!((t.get(0, 0) - 0.5).abs() < 1e-15 && (t.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn target_matches_dense_product() {
        let mut rng = SeededRng::new(4);
        let (nq, nk, d, c) = (6, 40, 8, 5);
        let q = random_block(&mut rng, nq, d, 1.0);
        let k = random_block(&mut rng, nk, d, 1.0);
        let assign = KeyAssignment::new((0..nk).map(|_| rng.below(c) as u32).collect());
        let t = attention_target(&q, &k, &assign, c).unwrap();
        for i in 0..nq {
            let s: Vec<f64> = (0..nk)
                .map(|j| (0..d).map(|x| q.row(i)[x] as f64 * k.row(j)[x] as f64).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            for b in 0..c {
                let h: f64 = (0..nk).filter(|&j| assign.bucket_of[j] as usize == b).map(|j| (s[j] - mx).exp() / z).sum();
                assert!((t.get(i, b) - h).abs() < 1e-6);
            }
            assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn target_needs_keys() {
        let q = TensorBlock::new(1, 2, vec![0.3, -0.7]).unwrap();
        assert!(attention_target(&q, &TensorBlock::zeros(0, 2), &KeyAssignment::new(vec![]), 2).is_err());
    }

    #[test]
    fn kl_cases() {
        let mut rng = SeededRng::new(5);
        let p = random_dist(&mut rng, 4, 6);
        assert!(kl_loss(&p, &p).unwrap() <= 1e-10);
        let uniform = Matrix::new(1, 8, vec![1.0 / 8.0; 8]).unwrap();
        let mut onehot = vec![0.0; 8];
        onehot[3] = 1.0;
        let onehot = Matrix::new(1, 8, onehot).unwrap();
        assert!((kl_loss(&uniform, &onehot).unwrap() - 8f64.ln()).abs() < 1e-12);
        let q = random_dist(&mut rng, 4, 6);
        let mut want = 0.0;
        for i in 0..4 {
            for j in 0..6 {
                want += q.get(i, j) * (q.get(i, j) / p.get(i, j)).ln();
            }
        }
        assert!((kl_loss(&p, &q).unwrap() - want / 4.0).abs() < 1e-8);
        assert!(kl_loss(&p, &Matrix::zeros(4, 5)).is_err());
    }

    #[test]
    fn kl_floors_zero_predictions() {
        let pred = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let target = Matrix::new(1, 2, vec![0.5, 0.5]).unwrap();
        let l = kl_loss(&pred, &target).unwrap();
        assert!(l.is_finite() && l > 10.0);
    }

    #[test]
    fn long_range_filter() {
        let attn = Matrix::new(2, 3, vec![0.1, 0.2, 0.7, 0.8, 0.1, 0.1]).unwrap();
        let keys = [0, 2000, 2995];
        let kept = sample_long_range(&[3000, 3000], &keys, &attn, 1024).unwrap();
        // query 0 looks 5 back, query 1 looks 3000 back
        assert_eq!(kept, vec![1]);
    }

    #[test]
    fn batched_select_reductions() {
        let mut rng = SeededRng::new(6);
        let m = QModel::new(4, 8, 10, &mut rng).unwrap();
        let q = random_block(&mut rng, 1, 4, 1.0);
        let single = top_k_desc(&m.predict(&q.row_f64(0)).unwrap(), 3);
        assert_eq!(batched_bucket_select(&m, &q, 3).unwrap(), single);
        let four = TensorBlock::concat(&[&q, &q, &q, &q]).unwrap();
        assert_eq!(batched_bucket_select(&m, &four, 3).unwrap(), single);
        assert!(batched_bucket_select(&m, &q, 11).is_err());
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut rng = SeededRng::new(7);
        let mut m = QModel::new(4, 8, 4, &mut rng).unwrap();
        let x = random_block(&mut rng, 16, 4, 1.0);
        let t = random_dist(&mut rng, 16, 4);
        let before = m.clone();
        let mut st = TrainerState::new(&m, 0.0);
        train_step_on(&mut m, &mut st, &x, &t).unwrap();
        assert_eq!(m.w1, before.w1);
        assert_eq!(m.w2, before.w2);
        assert_eq!(m.b2, before.b2);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(8);
        let m = QModel::new(4, 6, 3, &mut rng).unwrap();
        m.save(dir.path()).unwrap();
        let back = QModel::load(dir.path()).unwrap();
        for (a, b) in m.w1.iter().zip(&back.w1) {
            assert_eq!(*a as f32, *b as f32);
        }
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.starts_with("w1 4 6\nb1 1 6\n"));
    }
}
