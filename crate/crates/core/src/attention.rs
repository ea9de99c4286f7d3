//! Exact and bucket-restricted attention.
//!
//! Partial results are carried in a [`PartialAccumulator`] holding the
//! unnormalized output `O*`, the running sum of exponentials `s*` and the
//! running max `m*` per query head. Blocks of keys are absorbed with the
//! online-softmax update and independent accumulators are merged by
//! rescaling to a common max, so any split of a key set into blocks and any
//! merge order gives the softmax over the whole set.

use crate::error::{Result, SaapError};
use crate::partition::{top_k_desc, IvfIndex, KeyAssignment, Partition};
use crate::qmodel::{batched_bucket_select, QModel};
use crate::tensor::{dot_mixed, Matrix, TensorBlock};

/// Running `(O*, s*, m*)` for `n_h` query heads with value dimension `dv`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAccumulator {
    n_h: usize,
    dv: usize,
    pub out_acc: Vec<f64>,
    pub sumexp: Vec<f64>,
    pub runmax: Vec<f64>,
}

impl PartialAccumulator {
    /// Accumulator that has absorbed nothing: `m* = −∞`, `s* = 0`.
    pub fn empty(n_h: usize, dv: usize) -> Self {
        Self { n_h, dv, out_acc: vec![0.0; n_h * dv], sumexp: vec![0.0; n_h], runmax: vec![f64::NEG_INFINITY; n_h] }
    }

    pub fn heads(&self) -> usize {
        self.n_h
    }

    pub fn value_dim(&self) -> usize {
        self.dv
    }

    pub fn is_empty(&self) -> bool {
        self.sumexp.iter().all(|&s| s == 0.0)
    }

    /// Absorbs keys `ids` of `keys`/`values` as one block. `q` holds the
    /// `n_h` queries row-major in f64.
    pub fn absorb_ids(&mut self, q: &[f64], keys: &TensorBlock, values: &TensorBlock, ids: &[usize], scratch: &mut Vec<f64>) {
        if ids.is_empty() {
            return;
        }
        let d = keys.dim();
        let scale = 1.0 / (d as f64).sqrt();
        let b = ids.len();
        scratch.clear();
        scratch.resize(b, 0.0);
        for h in 0..self.n_h {
            let qh = &q[h * d..(h + 1) * d];
            let mut block_max = f64::NEG_INFINITY;
            for (s, &id) in scratch.iter_mut().zip(ids) {
                *s = scale * dot_mixed(qh, keys.row(id));
                block_max = block_max.max(*s);
            }
            let m_new = self.runmax[h].max(block_max);
            let alpha = (self.runmax[h] - m_new).exp();
            let out = &mut self.out_acc[h * self.dv..(h + 1) * self.dv];
            if alpha != 1.0 {
                out.iter_mut().for_each(|o| *o *= alpha);
            }
            let mut sum = self.sumexp[h] * alpha;
            for (&s, &id) in scratch.iter().zip(ids) {
                let p = (s - m_new).exp();
                sum += p;
                for (o, &v) in out.iter_mut().zip(values.row(id)) {
                    *o += p * v as f64;
                }
            }
            self.sumexp[h] = sum;
            self.runmax[h] = m_new;
        }
    }

    /// Folds `other` into `self`, rescaling both to the larger max.
    pub fn merge_from(&mut self, other: &PartialAccumulator) -> Result<()> {
        if (self.n_h, self.dv) != (other.n_h, other.dv) {
            return Err(SaapError::shape(
                format!("accumulator {}x{}", self.n_h, self.dv),
                format!("accumulator {}x{}", other.n_h, other.dv),
            ));
        }
        for h in 0..self.n_h {
            if other.sumexp[h] == 0.0 {
                continue;
            }
            if self.sumexp[h] == 0.0 {
                self.out_acc[h * self.dv..(h + 1) * self.dv].copy_from_slice(&other.out_acc[h * self.dv..(h + 1) * self.dv]);
                self.sumexp[h] = other.sumexp[h];
                self.runmax[h] = other.runmax[h];
                continue;
            }
            let m = self.runmax[h].max(other.runmax[h]);
            let a = (self.runmax[h] - m).exp();
            let b = (other.runmax[h] - m).exp();
            let dst = &mut self.out_acc[h * self.dv..(h + 1) * self.dv];
            for (o, &x) in dst.iter_mut().zip(&other.out_acc[h * self.dv..(h + 1) * self.dv]) {
                *o = *o * a + x * b;
            }
            self.sumexp[h] = self.sumexp[h] * a + other.sumexp[h] * b;
            self.runmax[h] = m;
        }
        Ok(())
    }

    /// `O*/s*` per head; heads that absorbed nothing give a zero row and a
    /// `true` flag.
    pub fn finalize(&self) -> (Matrix, Vec<bool>) {
        let mut out = Matrix::zeros(self.n_h, self.dv);
        let mut empty = vec![false; self.n_h];
        for h in 0..self.n_h {
            if self.sumexp[h] == 0.0 {
                empty[h] = true;
                continue;
            }
            let s = self.sumexp[h];
            for (o, &x) in out.row_mut(h).iter_mut().zip(&self.out_acc[h * self.dv..(h + 1) * self.dv]) {
                *o = x / s;
            }
        }
        (out, empty)
    }
}

fn check_qkv(q: &TensorBlock, keys: &TensorBlock, values: &TensorBlock) -> Result<()> {
    if q.dim() != keys.dim() {
        return Err(SaapError::shape(format!("queries {}x{}", q.rows(), q.dim()), format!("keys {}x{}", keys.rows(), keys.dim())));
    }
    if keys.rows() != values.rows() {
        return Err(SaapError::shape(
            format!("keys {}x{}", keys.rows(), keys.dim()),
            format!("values {}x{}", values.rows(), values.dim()),
        ));
    }
    Ok(())
}

/// Algorithm-1 update of `acc` with a block of keys and values.
pub fn pattn_absorb(
    acc: &mut PartialAccumulator,
    q_group: &TensorBlock,
    k_block: &TensorBlock,
    v_block: &TensorBlock,
) -> Result<()> {
    check_qkv(q_group, k_block, v_block)?;
    if q_group.rows() != acc.n_h || v_block.dim() != acc.dv {
        return Err(SaapError::shape(
            format!("accumulator {}x{}", acc.n_h, acc.dv),
            format!("{} queries and values of dim {}", q_group.rows(), v_block.dim()),
        ));
    }
    let ids: Vec<usize> = (0..k_block.rows()).collect();
    acc.absorb_ids(q_group.to_matrix().as_slice(), k_block, v_block, &ids, &mut Vec::new());
    Ok(())
}

/// Merges accumulators in list order.
pub fn merge_partials(parts: &[PartialAccumulator]) -> Result<PartialAccumulator> {
    let (first, rest) = parts.split_first().ok_or_else(|| SaapError::Empty("merge of zero accumulators".into()))?;
    let mut acc = first.clone();
    for p in rest {
        acc.merge_from(p)?;
    }
    Ok(acc)
}

/// Exact softmax attention over every key, two-pass with max subtraction.
pub fn full_attention(q_group: &TensorBlock, keys_roped: &TensorBlock, values: &TensorBlock) -> Result<Matrix> {
    check_qkv(q_group, keys_roped, values)?;
    if keys_roped.is_empty() {
        return Err(SaapError::Empty("attention over zero keys".into()));
    }
    let all: Vec<usize> = (0..keys_roped.rows()).collect();
    Ok(restricted_attention(q_group, keys_roped, values, &all)?.0)
}

/// Exact softmax attention over the keys `ids` only. Heads with no keys get a
/// zero row and a `true` empty flag.
pub fn restricted_attention(
    q_group: &TensorBlock,
    keys_roped: &TensorBlock,
    values: &TensorBlock,
    ids: &[usize],
) -> Result<(Matrix, Vec<bool>)> {
    check_qkv(q_group, keys_roped, values)?;
    if let Some(&bad) = ids.iter().find(|&&i| i >= keys_roped.rows()) {
        return Err(SaapError::invalid(format!("key id {bad} out of range for {} keys", keys_roped.rows())));
    }
    let d = keys_roped.dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(q_group.rows(), values.dim());
    let mut scores = vec![0.0; ids.len()];
    for h in 0..q_group.rows() {
        if ids.is_empty() {
            break;
        }
        let q = q_group.row_f64(h);
        for (s, &id) in scores.iter_mut().zip(ids) {
            *s = scale * dot_mixed(&q, keys_roped.row(id));
        }
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let row = out.row_mut(h);
        for (&s, &id) in scores.iter().zip(ids) {
            let p = (s - m).exp();
            z += p;
            for (o, &v) in row.iter_mut().zip(values.row(id)) {
                *o += p * v as f64;
            }
        }
        row.iter_mut().for_each(|o| *o /= z);
    }
    Ok((out, vec![ids.is_empty(); q_group.rows()]))
}

/// Keys always attended exhaustively: the first `sink_count` and the last
/// `recent_count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseWindow {
    pub sink_count: usize,
    pub recent_count: usize,
}

impl Default for DenseWindow {
    fn default() -> Self {
        Self { sink_count: 1, recent_count: 2047 }
    }
}

impl DenseWindow {
    pub fn new(sink_count: usize, recent_count: usize) -> Self {
        Self { sink_count, recent_count }
    }

    /// Whether the window covers all of `n` keys.
    pub fn covers(&self, n: usize) -> bool {
        n <= self.sink_count + self.recent_count
    }

    pub fn contains(&self, id: usize, n: usize) -> bool {
        id < self.sink_count || id + self.recent_count >= n
    }

    /// Window ids in ascending order.
    pub fn ids(&self, n: usize) -> Vec<usize> {
        if self.covers(n) {
            return (0..n).collect();
        }
        (0..self.sink_count).chain(n - self.recent_count..n).collect()
    }

    pub fn len(&self, n: usize) -> usize {
        n.min(self.sink_count + self.recent_count)
    }

    pub fn is_empty(&self) -> bool {
        self.sink_count + self.recent_count == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SparseAttnConfig {
    pub ell: usize,
    pub block_size: usize,
    pub dense: DenseWindow,
}

impl SparseAttnConfig {
    pub fn new(ell: usize) -> Self {
        Self { ell, block_size: 128, dense: DenseWindow::default() }
    }

    pub fn with_dense(mut self, dense: DenseWindow) -> Self {
        self.dense = dense;
        self
    }
}

#[derive(Debug, Clone)]
pub struct AttnResult {
    pub output: Matrix,
    /// Distinct keys absorbed.
    pub keys_scored: usize,
    /// Size of the largest visited bucket.
    pub max_visited_bucket: usize,
    /// Per-head flag for heads that saw no key at all.
    pub empty: Vec<bool>,
    /// Buckets visited, best first.
    pub buckets: Vec<usize>,
}

/// Keys, values and the inverted file over them.
///
/// The first `sink_count` keys are kept out of the index; they are only ever
/// reached through the dense window.
#[derive(Debug, Clone)]
pub struct SparseStore {
    pub keys_roped: TensorBlock,
    pub values: TensorBlock,
    pub partition: Partition,
    pub index: IvfIndex,
    pub sink_count: usize,
    /// Bucket of each key id; `u32::MAX` for keys outside the index.
    bucket_of: Vec<u32>,
}

impl SparseStore {
    /// Assigns rows `sink_count..` of `assign_keys` (de-roped keys for the
    /// usual setup, roped ones for the roped variant) and indexes them.
    pub fn build(
        keys_roped: TensorBlock,
        values: TensorBlock,
        partition: Partition,
        assign_keys: &TensorBlock,
        sink_count: usize,
    ) -> Result<Self> {
        if keys_roped.rows() != values.rows() || assign_keys.shape() != keys_roped.shape() {
            return Err(SaapError::shape(
                format!("keys {}x{} / assign keys {}x{}", keys_roped.rows(), keys_roped.dim(), assign_keys.rows(), assign_keys.dim()),
                format!("values {}x{}", values.rows(), values.dim()),
            ));
        }
        let sink_count = sink_count.min(keys_roped.rows());
        let tail = assign_keys.slice_rows(sink_count, assign_keys.rows());
        let assignment = partition.assign_block(&tail, sink_count)?;
        Self::from_assignment(keys_roped, values, partition, &assignment)
    }

    /// Uses a precomputed assignment of keys `first_id..N`.
    pub fn from_assignment(
        keys_roped: TensorBlock,
        values: TensorBlock,
        partition: Partition,
        assignment: &KeyAssignment,
    ) -> Result<Self> {
        if assignment.first_id + assignment.len() != keys_roped.rows() {
            return Err(SaapError::shape(
                format!("{} keys", keys_roped.rows()),
                format!("assignment of ids {}..{}", assignment.first_id, assignment.first_id + assignment.len()),
            ));
        }
        let index = crate::partition::build_ivf(assignment, partition.n_buckets())?;
        let mut bucket_of = vec![u32::MAX; assignment.first_id];
        bucket_of.extend_from_slice(&assignment.bucket_of);
        Ok(Self { keys_roped, values, sink_count: assignment.first_id, partition, index, bucket_of })
    }

    pub fn len(&self) -> usize {
        self.keys_roped.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys_roped.is_empty()
    }

    pub fn n_buckets(&self) -> usize {
        self.partition.n_buckets()
    }

    /// Bucket of key `id`, if it is indexed.
    pub fn bucket_of(&self, id: usize) -> Option<usize> {
        self.bucket_of.get(id).filter(|&&b| b != u32::MAX).map(|&b| b as usize)
    }

    fn window(&self, dense: DenseWindow) -> DenseWindow {
        // indexed ids start after the sink, which always stays dense
        DenseWindow { sink_count: dense.sink_count.max(self.sink_count), recent_count: dense.recent_count }
    }
}

/// How a query group picks its buckets.
#[derive(Debug, Clone, Copy)]
pub enum Router<'a> {
    /// Largest summed inner product with the centroids.
    NearestCentroid,
    /// Largest summed probability under a trained model.
    QModel(&'a QModel),
}

impl Router<'_> {
    /// Top-`ell` buckets for the routing representation of a query group.
    pub fn select(&self, partition: &Partition, q_route: &TensorBlock, ell: usize) -> Result<Vec<usize>> {
        if ell > partition.n_buckets() {
            return Err(SaapError::invalid(format!("ell = {ell} exceeds C = {}", partition.n_buckets())));
        }
        match self {
            Router::NearestCentroid => {
                if q_route.dim() != partition.dim() {
                    return Err(SaapError::shape(format!("queries of dim {}", q_route.dim()), format!("centroids of dim {}", partition.dim())));
                }
                let mut total = vec![0.0; partition.n_buckets()];
                for i in 0..q_route.rows() {
                    for (t, s) in total.iter_mut().zip(partition.scores(&q_route.row_f64(i))) {
                        *t += s;
                    }
                }
                Ok(top_k_desc(&total, ell))
            }
            Router::QModel(m) => {
                if m.n_buckets() != partition.n_buckets() {
                    return Err(SaapError::shape(format!("model over {} buckets", m.n_buckets()), format!("partition of {}", partition.n_buckets())));
                }
                batched_bucket_select(m, q_route, ell)
            }
        }
    }
}

/// Attention over the dense window plus every key of the `ell` buckets chosen
/// by `router`. `q_roped` scores keys; `q_route` is what the router sees.
pub fn sparse_attention(
    q_roped: &TensorBlock,
    q_route: &TensorBlock,
    store: &SparseStore,
    router: Router<'_>,
    cfg: &SparseAttnConfig,
) -> Result<AttnResult> {
    if cfg.ell > store.n_buckets() {
        return Err(SaapError::invalid(format!("ell = {} exceeds C = {}", cfg.ell, store.n_buckets())));
    }
    let buckets = if cfg.ell == 0 { Vec::new() } else { router.select(&store.partition, q_route, cfg.ell)? };
    attend_buckets(q_roped, store, &buckets, cfg)
}

/// Attention over the dense window plus the given buckets.
pub fn attend_buckets(q_roped: &TensorBlock, store: &SparseStore, buckets: &[usize], cfg: &SparseAttnConfig) -> Result<AttnResult> {
    check_qkv(q_roped, &store.keys_roped, &store.values)?;
    if cfg.block_size == 0 {
        return Err(SaapError::invalid("block size must be positive"));
    }
    if let Some(&b) = buckets.iter().find(|&&b| b >= store.n_buckets()) {
        return Err(SaapError::invalid(format!("bucket {b} out of range for C = {}", store.n_buckets())));
    }
    let n = store.len();
    let window = store.window(cfg.dense);
    let q: Vec<f64> = q_roped.as_slice().iter().map(|&x| x as f64).collect();
    let (n_h, dv) = (q_roped.rows(), store.values.dim());
    let mut scratch = Vec::new();

    let mut parts = Vec::with_capacity(buckets.len() + 1);
    let dense_ids = window.ids(n);
    let mut dense = PartialAccumulator::empty(n_h, dv);
    for block in dense_ids.chunks(cfg.block_size) {
        dense.absorb_ids(&q, &store.keys_roped, &store.values, block, &mut scratch);
    }
    let mut keys_scored = dense_ids.len();
    parts.push(dense);

    let mut max_visited_bucket = 0;
    let mut ids = Vec::new();
    if !window.covers(n) {
        for &b in buckets {
            let members = store.index.bucket(b);
            max_visited_bucket = max_visited_bucket.max(members.len());
            ids.clear();
            ids.extend(members.iter().copied().filter(|&id| !window.contains(id, n)));
            let mut acc = PartialAccumulator::empty(n_h, dv);
            for block in ids.chunks(cfg.block_size) {
                acc.absorb_ids(&q, &store.keys_roped, &store.values, block, &mut scratch);
            }
            keys_scored += ids.len();
            parts.push(acc);
        }
    }
    let (output, empty) = merge_partials(&parts)?.finalize();
    Ok(AttnResult { output, keys_scored, max_visited_bucket, empty, buckets: buckets.to_vec() })
}

/// Fraction of keys scored.
pub fn selectivity(result: &AttnResult, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(SaapError::invalid("selectivity of an empty context"));
    }
    Ok(result.keys_scored as f64 / n as f64)
}

/// Mean squared entrywise difference.
pub fn mse(approx: &Matrix, exact: &Matrix) -> Result<f64> {
    if approx.shape() != exact.shape() {
        return Err(SaapError::shape(
            format!("approx {}x{}", approx.rows(), approx.cols()),
            format!("exact {}x{}", exact.rows(), exact.cols()),
        ));
    }
    let n = approx.as_slice().len();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(approx.as_slice().iter().zip(exact.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64)
}

/// Softmax weights of `q` over the keys outside the dense window, paired with
/// their ids.
fn non_dense_weights(q: &[f32], keys_roped: &TensorBlock, window: DenseWindow) -> Result<Vec<(usize, f64)>> {
    if q.len() != keys_roped.dim() {
        return Err(SaapError::shape(format!("query of dim {}", q.len()), format!("keys of dim {}", keys_roped.dim())));
    }
    let n = keys_roped.rows();
    let qf: Vec<f64> = q.iter().map(|&x| x as f64).collect();
    let scale = 1.0 / (q.len() as f64).sqrt();
    let mut w: Vec<(usize, f64)> =
        (0..n).filter(|&i| !window.contains(i, n)).map(|i| (i, scale * dot_mixed(&qf, keys_roped.row(i)))).collect();
    if w.is_empty() {
        return Err(SaapError::Empty("no keys outside the dense window".into()));
    }
    let m = w.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in w.iter_mut() {
        x.1 = (x.1 - m).exp();
        z += x.1;
    }
    w.iter_mut().for_each(|x| x.1 /= z);
    Ok(w)
}

/// Softmax mass over non-dense keys falling into each bucket.
pub fn bucket_mass(q_roped: &[f32], store: &SparseStore, dense: DenseWindow) -> Result<Vec<f64>> {
    let weights = non_dense_weights(q_roped, &store.keys_roped, store.window(dense))?;
    let mut mass = vec![0.0; store.n_buckets()];
    for (id, w) in weights {
        if let Some(b) = store.bucket_of(id) {
            mass[b] += w;
        }
    }
    Ok(mass)
}

/// Share of the softmax mass over non-dense keys that lies in `selected`.
pub fn attention_mass_coverage(q_roped: &[f32], store: &SparseStore, selected: &[usize], dense: DenseWindow) -> Result<f64> {
    if let Some(&b) = selected.iter().find(|&&b| b >= store.n_buckets()) {
        return Err(SaapError::invalid(format!("bucket {b} out of range for C = {}", store.n_buckets())));
    }
    let mass = bucket_mass(q_roped, store, dense)?;
    let mut seen = vec![false; mass.len()];
    let mut total = 0.0;
    for &b in selected {
        if !std::mem::replace(&mut seen[b], true) {
            total += mass[b];
        }
    }
    Ok(total)
}

/// Mean over queries of the mass held by the `k` heaviest keys outside the
/// dense window.
pub fn attention_span_fraction(q_set: &TensorBlock, keys_roped: &TensorBlock, k: usize, dense: DenseWindow) -> Result<f64> {
    let n = keys_roped.rows();
    if k >= n {
        return Err(SaapError::invalid(format!("k = {k} must be below N = {n}")));
    }
    if q_set.is_empty() {
        return Err(SaapError::Empty("query set".into()));
    }
    let mut total = 0.0;
    for i in 0..q_set.rows() {
        let mut w: Vec<f64> = non_dense_weights(q_set.row(i), keys_roped, dense)?.into_iter().map(|x| x.1).collect();
        if k > w.len() {
            return Err(SaapError::invalid(format!("k = {k} exceeds the {} keys outside the dense window", w.len())));
        }
        w.sort_unstable_by(|a, b| b.total_cmp(a));
        total += w[..k].iter().sum::<f64>();
    }
    Ok(total / q_set.rows() as f64)
}
