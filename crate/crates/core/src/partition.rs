//! Key partitioning: spherical k-means, nearest-centroid assignment, and the
//! contiguous inverted-file index.
//!
//! Keys are clustered without normalization and compared to unit-norm
//! centroids by inner product, so assignment is a max-inner-product scan.
//! Ties go to the lowest bucket id everywhere.

use std::path::Path;

use log::warn;

use crate::error::{Result, SaapError};
use crate::format;
use crate::rng::SeededRng;
use crate::tensor::{dot_mixed, gemm, norm_f64, TensorBlock, Trans};

/// `C` unit-norm centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    centroids: TensorBlock,
}

impl Partition {
    /// Wraps centroids; rows must have unit norm within 1e-5.
    pub fn new(centroids: TensorBlock) -> Result<Self> {
        if centroids.rows() == 0 {
            return Err(SaapError::invalid("a partition needs at least one centroid"));
        }
        for (c, row) in centroids.iter_rows().enumerate() {
            let n = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(SaapError::invalid(format!("centroid {c} has norm {n}")));
            }
        }
        Ok(Self { centroids })
    }

    /// Normalizes the given rows and wraps them.
    pub fn from_directions(dirs: &TensorBlock) -> Result<Self> {
        let mut data = Vec::with_capacity(dirs.as_slice().len());
        for row in dirs.iter_rows() {
            let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
            let n = norm_f64(&v);
            if n == 0.0 {
                return Err(SaapError::invalid("zero direction cannot be a centroid"));
            }
            data.extend(v.iter().map(|x| (x / n) as f32));
        }
        Self::new(TensorBlock::new(dirs.rows(), dirs.dim(), data)?)
    }

    pub fn n_buckets(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    pub fn centroids(&self) -> &TensorBlock {
        &self.centroids
    }

    /// Inner products of `v` with every centroid.
    pub fn scores(&self, v: &[f64]) -> Vec<f64> {
        self.centroids.iter_rows().map(|c| dot_mixed(v, c)).collect()
    }

    fn argmax(&self, v: &[f64]) -> usize {
        argmax_lowest(&self.scores(v))
    }

    /// Bucket of one key.
    pub fn assign(&self, key: &[f32]) -> Result<usize> {
        self.check_dim(key.len())?;
        let v: Vec<f64> = key.iter().map(|&x| x as f64).collect();
        Ok(self.argmax(&v))
    }

    /// Assigns every row of `keys`; ids start at `first_id`.
    pub fn assign_block(&self, keys: &TensorBlock, first_id: usize) -> Result<KeyAssignment> {
        self.check_dim(keys.dim())?;
        let mut bucket_of = Vec::with_capacity(keys.rows());
        let mut zero_keys = 0;
        let mut v = vec![0.0f64; keys.dim()];
        for row in keys.iter_rows() {
            for (dst, &x) in v.iter_mut().zip(row) {
                *dst = x as f64;
            }
            if v.iter().all(|&x| x == 0.0) {
                zero_keys += 1;
            }
            bucket_of.push(self.argmax(&v) as u32);
        }
        if zero_keys > 0 {
            warn!("{zero_keys} zero key vector(s) assigned to bucket 0");
        }
        Ok(KeyAssignment { bucket_of, first_id, zero_keys })
    }

    /// The `ell` centroids with the largest inner product with `v`.
    pub fn top_buckets(&self, v: &[f64], ell: usize) -> Result<Vec<usize>> {
        self.check_dim(v.len())?;
        if ell > self.n_buckets() {
            return Err(SaapError::invalid(format!("ell = {ell} exceeds C = {}", self.n_buckets())));
        }
        Ok(top_k_desc(&self.scores(v), ell))
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(SaapError::shape(format!("vector of dim {d}"), format!("centroids of dim {}", self.dim())));
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::create_dir_all(dir.as_ref())?;
        format::tensor_write(&self.centroids, dir.as_ref().join("centroids.tns"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::new(format::tensor_read(dir.as_ref().join("centroids.tns"))?)
    }
}

/// Index of the maximum; the first one on ties.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, descending, ties toward smaller index.
pub fn top_k_desc(xs: &[f64], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| xs[*b].total_cmp(&xs[*a]).then(a.cmp(b));
    let mut ids: Vec<usize> = (0..xs.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < ids.len() {
        ids.select_nth_unstable_by(k - 1, cmp);
        ids.truncate(k);
    }
    ids.sort_unstable_by(cmp);
    ids
}

/// One bucket id per key; key `i` has global id `first_id + i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyAssignment {
    pub bucket_of: Vec<u32>,
    pub first_id: usize,
    /// Number of all-zero keys, which land in bucket 0.
    pub zero_keys: usize,
}

impl KeyAssignment {
    pub fn new(bucket_of: Vec<u32>) -> Self {
        Self { bucket_of, first_id: 0, zero_keys: 0 }
    }

    pub fn len(&self) -> usize {
        self.bucket_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bucket_of.is_empty()
    }

    pub fn bucket_sizes(&self, c: usize) -> Vec<usize> {
        let mut sizes = vec![0; c];
        for &b in &self.bucket_of {
            sizes[b as usize] += 1;
        }
        sizes
    }
}

/// Inverted file: the ids of bucket `c` are `idx[off[c]..off[c + 1]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IvfIndex {
    pub off: Vec<usize>,
    pub idx: Vec<usize>,
}

impl IvfIndex {
    pub fn n_buckets(&self) -> usize {
        self.off.len() - 1
    }

    pub fn bucket(&self, c: usize) -> &[usize] {
        &self.idx[self.off[c]..self.off[c + 1]]
    }

    pub fn bucket_len(&self, c: usize) -> usize {
        self.off[c + 1] - self.off[c]
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let off: Vec<u64> = self.off.iter().map(|&x| x as u64).collect();
        let idx: Vec<u64> = self.idx.iter().map(|&x| x as u64).collect();
        format::u64s_write(&off, dir.join("ivf_off.u64"))?;
        format::u64s_write(&idx, dir.join("ivf_idx.u64"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let off: Vec<usize> = format::u64s_read(dir.join("ivf_off.u64"))?.into_iter().map(|x| x as usize).collect();
        let idx: Vec<usize> = format::u64s_read(dir.join("ivf_idx.u64"))?.into_iter().map(|x| x as usize).collect();
        if off.is_empty() || off[0] != 0 || off.windows(2).any(|w| w[0] > w[1]) || *off.last().unwrap() != idx.len() {
            return Err(SaapError::Malformed("inconsistent ivf offsets".into()));
        }
        Ok(Self { off, idx })
    }
}

/// Groups key ids by bucket; ids are ascending within a bucket.
pub fn build_ivf(assignment: &KeyAssignment, c: usize) -> Result<IvfIndex> {
    if let Some((i, &b)) = assignment.bucket_of.iter().enumerate().find(|(_, &b)| b as usize >= c) {
        return Err(SaapError::invalid(format!("key {i} assigned to bucket {b} but C = {c}")));
    }
    let sizes = assignment.bucket_sizes(c);
    let mut off = Vec::with_capacity(c + 1);
    off.push(0);
    for s in &sizes {
        off.push(off.last().unwrap() + s);
    }
    let mut cursor = off[..c].to_vec();
    let mut idx = vec![0; assignment.len()];
    for (i, &b) in assignment.bucket_of.iter().enumerate() {
        let slot = &mut cursor[b as usize];
        idx[*slot] = assignment.first_id + i;
        *slot += 1;
    }
    Ok(IvfIndex { off, idx })
}

/// Trace of a k-means run.
#[derive(Debug, Clone)]
pub struct KmeansReport {
    /// `Σ_i max_c ⟨k_i, c⟩` for the initial centroids and after each iteration.
    pub objective: Vec<f64>,
    /// Number of empty clusters repaired, over all iterations.
    pub repairs: usize,
    /// Clusters left empty by the final assignment of the training keys.
    pub final_empty: usize,
}

/// Spherical k-means with random initialization.
pub fn kmeans_train(keys: &TensorBlock, c: usize, iters: usize, rng: &mut SeededRng) -> Result<Partition> {
    kmeans_train_traced(keys, c, iters, rng).map(|(p, _)| p)
}

/// [`kmeans_train`] that also returns the objective trace.
pub fn kmeans_train_traced(
    keys: &TensorBlock,
    c: usize,
    iters: usize,
    rng: &mut SeededRng,
) -> Result<(Partition, KmeansReport)> {
    if c == 0 {
        return Err(SaapError::invalid("C must be at least 1"));
    }
    if keys.rows() < c {
        return Err(SaapError::invalid(format!("{} keys cannot seed {c} clusters", keys.rows())));
    }
    if iters == 0 {
        return Err(SaapError::invalid("k-means needs at least one iteration"));
    }
    let d = keys.dim();
    let n = keys.rows();
    let data: Vec<f64> = keys.as_slice().iter().map(|&x| x as f64).collect();
    let row = |i: usize| &data[i * d..(i + 1) * d];

    let mut centroids = init_centroids(&data, n, d, c, rng);
    let mut assign = vec![0usize; n];
    let mut best = vec![0.0f64; n];
    let mut objective = Vec::with_capacity(iters + 1);
    let mut repairs = 0;

    for _ in 0..iters {
        objective.push(assign_all(&data, d, &centroids, c, &mut assign, &mut best));

        let mut sizes = vec![0usize; c];
        for &a in &assign {
            sizes[a] += 1;
        }
        for empty in 0..c {
            if sizes[empty] > 0 {
                continue;
            }
            let Some(donor) = pick_donor(&sizes, rng) else { break };
            // farthest member: smallest similarity to its centroid
            let victim = (0..n)
                .filter(|&i| assign[i] == donor)
                .min_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)))
                .expect("donor has members");
            assign[victim] = empty;
            sizes[donor] -= 1;
            sizes[empty] += 1;
            repairs += 1;
        }

        let mut sums = vec![0.0f64; c * d];
        for i in 0..n {
            let a = assign[i];
            for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        for k in 0..c {
            let s = &sums[k * d..(k + 1) * d];
            let nrm = norm_f64(s);
            // a zero mean leaves every member at similarity 0; keep the old centroid
            if nrm > 0.0 {
                for (dst, x) in centroids[k * d..(k + 1) * d].iter_mut().zip(s) {
                    *dst = x / nrm;
                }
            }
        }
    }
    objective.push(assign_all(&data, d, &centroids, c, &mut assign, &mut best));
    let mut sizes = vec![0usize; c];
    for &a in &assign {
        sizes[a] += 1;
    }
    let final_empty = sizes.iter().filter(|&&s| s == 0).count();

    let partition = Partition::new(TensorBlock::from_f64(c, d, &centroids)?)?;
    Ok((partition, KmeansReport { objective, repairs, final_empty }))
}

fn init_centroids(data: &[f64], n: usize, d: usize, c: usize, rng: &mut SeededRng) -> Vec<f64> {
    let nonzero: Vec<usize> = (0..n).filter(|&i| data[i * d..(i + 1) * d].iter().any(|&x| x != 0.0)).collect();
    let mut out = Vec::with_capacity(c * d);
    let take = c.min(nonzero.len());
    for j in rng.sample_indices(nonzero.len(), take) {
        let i = nonzero[j];
        let v = &data[i * d..(i + 1) * d];
        let nrm = norm_f64(v);
        out.extend(v.iter().map(|x| x / nrm));
    }
    for _ in take..c {
        out.extend(rng.unit_vector(d));
    }
    out
}

/// Assigns every point and returns the spherical objective.
fn assign_all(data: &[f64], d: usize, centroids: &[f64], c: usize, assign: &mut [usize], best: &mut [f64]) -> f64 {
    const CHUNK: usize = 2048;
    let mut total = 0.0;
    let mut scores = Vec::new();
    for (chunk_id, chunk) in data.chunks(CHUNK * d).enumerate() {
        let rows = chunk.len() / d;
        scores.clear();
        scores.resize(rows * c, 0.0);
        gemm(rows, d, c, chunk, Trans::No, centroids, Trans::Yes, 0.0, &mut scores);
        for (r, s) in scores.chunks_exact(c).enumerate() {
            let i = chunk_id * CHUNK + r;
            let arg = argmax_lowest(s);
            assign[i] = arg;
            best[i] = s[arg];
            total += s[arg];
        }
    }
    total
}

/// Random cluster with at least two members, weighted by size.
fn pick_donor(sizes: &[usize], rng: &mut SeededRng) -> Option<usize> {
    let total: usize = sizes.iter().filter(|&&s| s >= 2).sum();
    if total == 0 {
        return None;
    }
    let mut r = rng.below(total);
    for (k, &s) in sizes.iter().enumerate() {
        if s >= 2 {
            if r < s {
                return Some(k);
            }
            r -= s;
        }
    }
    None
}

/// Relative standard deviation of bucket sizes around the uniform size `N/C`,
/// one value per key sample.
pub fn bucket_balance_deviation(p: &Partition, samples: &[TensorBlock]) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(SaapError::invalid("bucket balance needs at least two samples"));
    }
    samples
        .iter()
        .map(|s| {
            if s.is_empty() {
                return Err(SaapError::Empty("key sample".into()));
            }
            let a = p.assign_block(s, 0)?;
            Ok(relative_size_deviation(&a.bucket_sizes(p.n_buckets())))
        })
        .collect()
}

/// `std(sizes) / mean(sizes)` with the population standard deviation.
pub fn relative_size_deviation(sizes: &[usize]) -> f64 {
    let c = sizes.len() as f64;
    let total: usize = sizes.iter().sum();
    let mean = total as f64 / c;
    if mean == 0.0 {
        return 0.0;
    }
    let var = sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / c;
    var.sqrt() / mean
}
