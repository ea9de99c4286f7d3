//! Hashing and sampling key selectors used as comparison points.
//!
//! Each selector returns a sorted set of key ids; attention is then computed
//! exactly over that set with [`restricted_attention`](crate::attention::restricted_attention).

use crate::error::{Result, SaapError};
use crate::rng::SeededRng;
use crate::tensor::{dot_mixed, TensorBlock};

/// `r` random hyperplanes through the origin.
#[derive(Debug, Clone)]
pub struct HyperplaneTable {
    projections: Vec<Vec<f64>>,
}

impl HyperplaneTable {
    /// `r` unit Gaussian directions in dimension `d`.
    pub fn random(r: usize, d: usize, rng: &mut SeededRng) -> Result<Self> {
        if r == 0 || r > 63 {
            return Err(SaapError::invalid(format!("hyperplane count must be in 1..=63, got {r}")));
        }
        Ok(Self { projections: (0..r).map(|_| rng.unit_vector(d)).collect() })
    }

    pub fn from_projections(projections: Vec<Vec<f64>>) -> Result<Self> {
        let r = projections.len();
        if r == 0 || r > 63 {
            return Err(SaapError::invalid(format!("hyperplane count must be in 1..=63, got {r}")));
        }
        let d = projections[0].len();
        if projections.iter().any(|p| p.len() != d) {
            return Err(SaapError::invalid("projections of unequal dimension"));
        }
        Ok(Self { projections })
    }

    pub fn bits(&self) -> usize {
        self.projections.len()
    }

    pub fn dim(&self) -> usize {
        self.projections[0].len()
    }

    pub fn projections(&self) -> &[Vec<f64>] {
        &self.projections
    }

    /// Bit `i` is set iff `xᵀπ_i > 0`.
    pub fn code(&self, x: &[f32]) -> u64 {
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        self.code_f64(&xf)
    }

    pub fn code_f64(&self, x: &[f64]) -> u64 {
        let mut code = 0u64;
        for (i, p) in self.projections.iter().enumerate() {
            let s: f64 = p.iter().zip(x).map(|(a, b)| a * b).sum();
            if s > 0.0 {
                code |= 1 << i;
            }
        }
        code
    }

    fn check(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(SaapError::shape(format!("vectors of dim {d}"), format!("hyperplanes of dim {}", self.dim())));
        }
        Ok(())
    }
}

/// Hyperplane code of `x`.
pub fn hyperplane_code(x: &[f32], table: &HyperplaneTable) -> Result<u64> {
    table.check(x.len())?;
    Ok(table.code(x))
}

/// `L` independent tables built over a key set; a key is a candidate when it
/// shares the query's code in at least `t` tables.
#[derive(Debug, Clone)]
pub struct LshEnsemble {
    tables: Vec<HyperplaneTable>,
    key_codes: Vec<Vec<u64>>,
    threshold: usize,
}

impl LshEnsemble {
    pub fn build(keys: &TensorBlock, tables: usize, bits: usize, threshold: usize, rng: &mut SeededRng) -> Result<Self> {
        let tables = (0..tables).map(|_| HyperplaneTable::random(bits, keys.dim(), rng)).collect::<Result<Vec<_>>>()?;
        Self::from_tables(keys, tables, threshold)
    }

    pub fn from_tables(keys: &TensorBlock, tables: Vec<HyperplaneTable>, threshold: usize) -> Result<Self> {
        if tables.len() < threshold || threshold == 0 {
            return Err(SaapError::invalid(format!("need 1 <= t <= L, got t={threshold} L={}", tables.len())));
        }
        for t in &tables {
            t.check(keys.dim())?;
        }
        let key_codes = tables.iter().map(|t| keys.iter_rows().map(|k| t.code(k)).collect()).collect();
        Ok(Self { tables, key_codes, threshold })
    }

    pub fn tables(&self) -> &[HyperplaneTable] {
        &self.tables
    }

    /// Ids colliding with `q` in at least `t` tables, ascending.
    pub fn candidates(&self, q: &[f32]) -> Result<Vec<usize>> {
        self.tables[0].check(q.len())?;
        let n = self.key_codes[0].len();
        let mut hits = vec![0u32; n];
        for (t, codes) in self.tables.iter().zip(&self.key_codes) {
            let qc = t.code(q);
            for (h, &c) in hits.iter_mut().zip(codes) {
                if c == qc {
                    *h += 1;
                }
            }
        }
        Ok((0..n).filter(|&i| hits[i] as usize >= self.threshold).collect())
    }
}

/// Candidate keys for `q` under a multi-table collision rule.
pub fn magicpig_candidates(q: &[f32], ensemble: &LshEnsemble) -> Result<Vec<usize>> {
    ensemble.candidates(q)
}

/// Reflected binary Gray code of `b`.
pub fn gray(b: u64) -> u64 {
    b ^ (b >> 1)
}

/// Position of `code` in the reflected Gray sequence: the `b` with
/// `gray(b) = code`.
pub fn gray_rank(code: u64) -> u64 {
    let mut b = code;
    let mut shift = 1;
    while shift < 64 {
        b ^= b >> shift;
        shift <<= 1;
    }
    b
}

/// Bin of `target` in a sorted sequence cut into bins of `bin_size`.
///
/// An exact match picks the bin of its first occurrence; a value between two
/// entries goes to the bin of the lower neighbour.
fn bin_of(sorted: &[u64], target: u64, bin_size: usize) -> usize {
    let pos = sorted.partition_point(|&x| x < target);
    let anchor = if pos < sorted.len() && sorted[pos] == target { pos } else { pos.max(1) - 1 };
    anchor / bin_size
}

/// Keys ordered by the Gray rank of their hyperplane code and cut into equal
/// bins; a query visits the one bin its own rank falls in.
#[derive(Debug, Clone)]
pub struct KdeformerIndex {
    table: HyperplaneTable,
    /// `(rank, id)` sorted ascending.
    order: Vec<(u64, usize)>,
    ranks: Vec<u64>,
    bin_size: usize,
}

impl KdeformerIndex {
    pub fn build(keys: &TensorBlock, bits: usize, bin_count: usize, rng: &mut SeededRng) -> Result<Self> {
        Self::with_table(keys, HyperplaneTable::random(bits, keys.dim(), rng)?, bin_count)
    }

    pub fn with_table(keys: &TensorBlock, table: HyperplaneTable, bin_count: usize) -> Result<Self> {
        table.check(keys.dim())?;
        if bin_count == 0 || keys.is_empty() {
            return Err(SaapError::invalid("KDEformer binning needs keys and at least one bin"));
        }
        let mut order: Vec<(u64, usize)> = keys.iter_rows().enumerate().map(|(i, k)| (gray_rank(table.code(k)), i)).collect();
        order.sort_unstable();
        let ranks = order.iter().map(|x| x.0).collect();
        let bin_size = keys.rows().div_ceil(bin_count);
        Ok(Self { table, order, ranks, bin_size })
    }

    pub fn bin_size(&self) -> usize {
        self.bin_size
    }

    pub fn select(&self, q: &[f32]) -> Result<Vec<usize>> {
        self.table.check(q.len())?;
        let bin = bin_of(&self.ranks, gray_rank(self.table.code(q)), self.bin_size);
        let end = ((bin + 1) * self.bin_size).min(self.order.len());
        let mut ids: Vec<usize> = self.order[bin * self.bin_size..end].iter().map(|x| x.1).collect();
        ids.sort_unstable();
        Ok(ids)
    }
}

/// KDEformer selection for one query, building the binning on the fly.
pub fn kdeformer_select(q: &[f32], keys: &TensorBlock, table: &HyperplaneTable, bin_count: usize) -> Result<Vec<usize>> {
    KdeformerIndex::with_table(keys, table.clone(), bin_count)?.select(q)
}

/// Bucketing by the random direction with the largest inner product.
#[derive(Debug, Clone)]
pub struct ArgmaxBuckets {
    directions: TensorBlock,
}

impl ArgmaxBuckets {
    pub fn random(n_buckets: usize, d: usize, rng: &mut SeededRng) -> Result<Self> {
        if n_buckets == 0 {
            return Err(SaapError::invalid("need at least one direction"));
        }
        let data: Vec<f64> = (0..n_buckets).flat_map(|_| rng.unit_vector(d)).collect();
        Ok(Self { directions: TensorBlock::from_f64(n_buckets, d, &data)? })
    }

    pub fn from_directions(directions: TensorBlock) -> Result<Self> {
        if directions.is_empty() {
            return Err(SaapError::invalid("need at least one direction"));
        }
        Ok(Self { directions })
    }

    pub fn n_buckets(&self) -> usize {
        self.directions.rows()
    }

    /// `argmax_i ⟨x, π_i⟩`, lowest index on ties.
    pub fn bucket(&self, x: &[f32]) -> usize {
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let scores: Vec<f64> = self.directions.iter_rows().map(|p| dot_mixed(&xf, p)).collect();
        crate::partition::argmax_lowest(&scores)
    }
}

/// Keys sorted by argmax bucket and chunked into fixed-size bins, one sort
/// per round.
#[derive(Debug, Clone)]
pub struct ReformerIndex {
    rounds: Vec<(ArgmaxBuckets, Vec<(u64, usize)>, Vec<u64>)>,
    bin_size: usize,
}

impl ReformerIndex {
    pub fn build(keys: &TensorBlock, n_buckets: usize, rounds: usize, bin_size: usize, rng: &mut SeededRng) -> Result<Self> {
        let hashes = (0..rounds).map(|_| ArgmaxBuckets::random(n_buckets, keys.dim(), rng)).collect::<Result<Vec<_>>>()?;
        Self::with_buckets(keys, hashes, bin_size)
    }

    pub fn with_buckets(keys: &TensorBlock, hashes: Vec<ArgmaxBuckets>, bin_size: usize) -> Result<Self> {
        if hashes.is_empty() || bin_size == 0 {
            return Err(SaapError::invalid("Reformer bucketing needs at least one round and a positive bin size"));
        }
        let mut rounds = Vec::with_capacity(hashes.len());
        for h in hashes {
            if h.directions.dim() != keys.dim() {
                return Err(SaapError::shape(format!("keys of dim {}", keys.dim()), format!("directions of dim {}", h.directions.dim())));
            }
            let mut order: Vec<(u64, usize)> = keys.iter_rows().enumerate().map(|(i, k)| (h.bucket(k) as u64, i)).collect();
            order.sort_unstable();
            let sorted = order.iter().map(|x| x.0).collect();
            rounds.push((h, order, sorted));
        }
        Ok(Self { rounds, bin_size })
    }

    /// Union over rounds of the bin holding the query's bucket position.
    pub fn select(&self, q: &[f32]) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for (h, order, sorted) in &self.rounds {
            if q.len() != h.directions.dim() {
                return Err(SaapError::shape(format!("query of dim {}", q.len()), format!("directions of dim {}", h.directions.dim())));
            }
            if order.is_empty() {
                continue;
            }
            let bin = bin_of(sorted, h.bucket(q) as u64, self.bin_size);
            let end = ((bin + 1) * self.bin_size).min(order.len());
            ids.extend(order[bin * self.bin_size..end].iter().map(|x| x.1));
        }
        ids.sort_unstable();
        ids.dedup();
        Ok(ids)
    }
}

/// Reformer selection for one query.
pub fn reformer_select(q: &[f32], keys: &TensorBlock, hashes: &[ArgmaxBuckets], bin_size: usize) -> Result<Vec<usize>> {
    ReformerIndex::with_buckets(keys, hashes.to_vec(), bin_size)?.select(q)
}

/// Uniform `m`-subset of `0..n` without replacement, ascending.
pub fn random_sample_select(n: usize, m: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    if m > n {
        return Err(SaapError::invalid(format!("cannot sample {m} of {n} keys")));
    }
    let mut ids = rng.sample_indices(n, m);
    ids.sort_unstable();
    Ok(ids)
}
