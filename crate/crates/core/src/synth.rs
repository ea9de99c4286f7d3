//! Seeded synthetic attention heads.
//!
//! A head has `n_clusters` content directions living in the slowest-rotating
//! rope pairs, a common key mean along one slow axis `e_μ`, a constant
//! medium-frequency key component that only looks constant before rope. The
//! fastest pairs carry only key noise.
//! Queries sit on the opposite side of `e_μ` from the keys, so raw `⟨k, q⟩`
//! products are mostly negative while the softmax over keys is unaffected by
//! that offset. Key 0 is an attention sink pointing along `−e_μ`.
//!
//! Three kinds of queries are drawn, all at position `N` (the next token):
//! content queries aimed at one cluster, local lookups that add a copy of one
//! of the last `local_span` keys, and planted global lookups that add a copy
//! of one key at least `planted_min_gap` positions back.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Gamma};

use crate::error::{Result, SaapError};
use crate::format;
use crate::rng::SeededRng;
use crate::rope::{rope_apply, rope_apply_f64, rope_remove, RopeConfig};
use crate::tensor::{norm_f64, TensorBlock};

/// Parameters of one synthetic head and of the prompt drawn from it.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSpec {
    pub d: usize,
    pub n_clusters: usize,
    /// Mean norm of the content part of a key.
    pub key_center_scale: f64,
    /// Log-normal spread of per-cluster content norms.
    pub center_norm_spread: f64,
    /// Common key offset along `e_μ`.
    pub key_mean: f64,
    /// Per-component key noise outside the medium band and `e_μ`.
    pub key_noise: f64,
    /// Norm of the constant medium-band key component.
    pub positional_norm: f64,
    /// Query offset along `−e_μ`.
    pub query_offset: f64,
    /// Norm of the content part of a query.
    pub query_content: f64,
    pub query_noise: f64,
    /// Fraction of non-planted queries that are local lookups.
    pub local_fraction: f64,
    /// Local lookups copy one of the last `local_span` keys.
    pub local_span: usize,
    pub sink_norm: f64,
    /// Rotation of cluster directions per position.
    pub drift_rate: f64,
    pub planted_longrange_fraction: f64,
    /// Weight of the key copy in a planted query.
    pub planted_strength: f64,
    /// Minimum distance between a planted query and its target key.
    pub planted_min_gap: usize,
    /// Extra query translation along `−e_μ`.
    pub ood_shift: f64,
    /// Dirichlet concentration of per-prompt cluster weights.
    pub prompt_concentration: f64,
    pub rope_base: f64,
    /// Head identity: cluster geometry.
    pub seed: u64,
    /// Prompt identity within the head.
    pub prompt: u64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            d: 64,
            n_clusters: 32,
            key_center_scale: 4.0,
            center_norm_spread: 0.1,
            key_mean: 16.0,
            key_noise: 0.75,
            positional_norm: 12.0,
            query_offset: 4.0,
            query_content: 12.0,
            query_noise: 0.25,
            local_fraction: 0.1,
            local_span: 512,
            sink_norm: 10.0,
            drift_rate: 0.0,
            planted_longrange_fraction: 0.2,
            planted_strength: 48.0,
            planted_min_gap: 2048,
            ood_shift: 0.0,
            prompt_concentration: 2.0,
            rope_base: 500_000.0,
            seed: 0,
            prompt: 0,
        }
    }
}

impl HeadSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_prompt(mut self, prompt: u64) -> Self {
        self.prompt = prompt;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 8 || self.d % 2 != 0 {
            return Err(SaapError::invalid(format!("head dim must be even and at least 8, got {}", self.d)));
        }
        if self.n_clusters == 0 {
            return Err(SaapError::invalid("need at least one cluster"));
        }
        let positive = [
            ("key_center_scale", self.key_center_scale),
            ("key_mean", self.key_mean),
            ("sink_norm", self.sink_norm),
            ("rope_base", self.rope_base),
            ("prompt_concentration", self.prompt_concentration),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SaapError::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("center_norm_spread", self.center_norm_spread),
            ("key_noise", self.key_noise),
            ("positional_norm", self.positional_norm),
            ("query_offset", self.query_offset),
            ("query_content", self.query_content),
            ("query_noise", self.query_noise),
            ("drift_rate", self.drift_rate),
            ("planted_strength", self.planted_strength),
            ("ood_shift", self.ood_shift),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SaapError::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [("planted_longrange_fraction", self.planted_longrange_fraction), ("local_fraction", self.local_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SaapError::invalid(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig { dim: self.d, base_theta: self.rope_base }
    }

    /// Sets a field from its name and textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let f = || value.parse::<f64>().map_err(|_| SaapError::invalid(format!("{key}: cannot parse {value:?} as a number")));
        let u = || value.parse::<u64>().map_err(|_| SaapError::invalid(format!("{key}: cannot parse {value:?} as an integer")));
        match key {
            "d" => self.d = u()? as usize,
            "n_clusters" => self.n_clusters = u()? as usize,
            "key_center_scale" => self.key_center_scale = f()?,
            "center_norm_spread" => self.center_norm_spread = f()?,
            "key_mean" => self.key_mean = f()?,
            "key_noise" => self.key_noise = f()?,
            "positional_norm" => self.positional_norm = f()?,
            "query_offset" => self.query_offset = f()?,
            "query_content" => self.query_content = f()?,
            "query_noise" => self.query_noise = f()?,
            "local_fraction" => self.local_fraction = f()?,
            "local_span" => self.local_span = u()? as usize,
            "sink_norm" => self.sink_norm = f()?,
            "drift_rate" => self.drift_rate = f()?,
            "planted_longrange_fraction" => self.planted_longrange_fraction = f()?,
            "planted_strength" => self.planted_strength = f()?,
            "planted_min_gap" => self.planted_min_gap = u()? as usize,
            "ood_shift" => self.ood_shift = f()?,
            "prompt_concentration" => self.prompt_concentration = f()?,
            "rope_base" => self.rope_base = f()?,
            "seed" => self.seed = u()?,
            "prompt" => self.prompt = u()?,
            _ => return Err(SaapError::invalid(format!("unknown head parameter {key:?}"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)`, in the form [`HeadSpec::set`] accepts.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d", self.d.to_string()),
            ("n_clusters", self.n_clusters.to_string()),
            ("key_center_scale", self.key_center_scale.to_string()),
            ("center_norm_spread", self.center_norm_spread.to_string()),
            ("key_mean", self.key_mean.to_string()),
            ("key_noise", self.key_noise.to_string()),
            ("positional_norm", self.positional_norm.to_string()),
            ("query_offset", self.query_offset.to_string()),
            ("query_content", self.query_content.to_string()),
            ("query_noise", self.query_noise.to_string()),
            ("local_fraction", self.local_fraction.to_string()),
            ("local_span", self.local_span.to_string()),
            ("sink_norm", self.sink_norm.to_string()),
            ("drift_rate", self.drift_rate.to_string()),
            ("planted_longrange_fraction", self.planted_longrange_fraction.to_string()),
            ("planted_strength", self.planted_strength.to_string()),
            ("planted_min_gap", self.planted_min_gap.to_string()),
            ("ood_shift", self.ood_shift.to_string()),
            ("prompt_concentration", self.prompt_concentration.to_string()),
            ("rope_base", self.rope_base.to_string()),
            ("seed", self.seed.to_string()),
            ("prompt", self.prompt.to_string()),
        ]
    }
}

/// Dimension bands of a head, by rope frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bands {
    /// Pairs `[0, fast_end)` rotate fastest.
    pub fast_end: usize,
    /// Pairs `[fast_end, slow_start)`.
    pub slow_start: usize,
    pub pairs: usize,
}

impl Bands {
    pub fn for_dim(d: usize) -> Self {
        let pairs = d / 2;
        let slow = (pairs * 3 / 16).max(2);
        Self { fast_end: pairs / 2, slow_start: pairs - slow, pairs }
    }

    /// Coordinate of the common key axis `e_μ`.
    pub fn mean_axis(&self) -> usize {
        2 * self.pairs - 2
    }

    pub fn fast_dims(&self) -> std::ops::Range<usize> {
        0..2 * self.fast_end
    }

    pub fn medium_dims(&self) -> std::ops::Range<usize> {
        2 * self.fast_end..2 * self.slow_start
    }

    /// Slow coordinates other than `e_μ`.
    pub fn content_dims(&self) -> Vec<usize> {
        (2 * self.slow_start..2 * self.pairs).filter(|&i| i != self.mean_axis()).collect()
    }
}

/// Fixed geometry of a head.
#[derive(Debug, Clone)]
struct Geometry {
    bands: Bands,
    /// Unit content directions, full dimension.
    centers: Vec<Vec<f64>>,
    /// Unit drift directions orthogonal to the matching center.
    drifts: Vec<Vec<f64>>,
    center_norms: Vec<f64>,
    positional: Vec<f64>,
}

fn embed(d: usize, dims: &[usize], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (&i, &x) in dims.iter().zip(v) {
        out[i] = x;
    }
    out
}

fn unit_in(rng: &mut SeededRng, d: usize, dims: &[usize]) -> Vec<f64> {
    embed(d, dims, &rng.unit_vector(dims.len()))
}

impl Geometry {
    fn new(spec: &HeadSpec) -> Self {
        let d = spec.d;
        let bands = Bands::for_dim(d);
        let mut rng = SeededRng::new(spec.seed).fork(0);
        let content = bands.content_dims();
        let mut centers = Vec::with_capacity(spec.n_clusters);
        let mut drifts = Vec::with_capacity(spec.n_clusters);
        let mut center_norms = Vec::with_capacity(spec.n_clusters);
        for _ in 0..spec.n_clusters {
            let c = unit_in(&mut rng, d, &content);
            let mut w = unit_in(&mut rng, d, &content);
            let proj: f64 = w.iter().zip(&c).map(|(a, b)| a * b).sum();
            w.iter_mut().zip(&c).for_each(|(a, b)| *a -= proj * b);
            let n = norm_f64(&w).max(1e-12);
            w.iter_mut().for_each(|a| *a /= n);
            centers.push(c);
            drifts.push(w);
            center_norms.push(spec.key_center_scale * (spec.center_norm_spread * rng.normal()).exp());
        }
        let medium: Vec<usize> = bands.medium_dims().collect();
        let positional = unit_in(&mut rng, d, &medium).into_iter().map(|x| x * spec.positional_norm).collect();
        Self { bands, centers, drifts, center_norms, positional }
    }

    /// Content direction of cluster `z` at position `pos`.
    fn center_at(&self, z: usize, pos: usize, drift_rate: f64) -> Vec<f64> {
        let t = drift_rate * pos as f64;
        let (s, c) = t.sin_cos();
        self.centers[z].iter().zip(&self.drifts[z]).map(|(a, b)| c * a + s * b).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Content,
    Local,
    Planted,
}

impl QueryKind {
    fn code(self) -> u64 {
        match self {
            QueryKind::Content => 0,
            QueryKind::Local => 1,
            QueryKind::Planted => 2,
        }
    }

    fn from_code(c: u64) -> Result<Self> {
        match c {
            0 => Ok(QueryKind::Content),
            1 => Ok(QueryKind::Local),
            2 => Ok(QueryKind::Planted),
            _ => Err(SaapError::Malformed(format!("query kind code {c}"))),
        }
    }
}

/// Keys, values and queries of one prompt, in both rope frames.
#[derive(Debug, Clone)]
pub struct SyntheticPrompt {
    pub keys_deroped: TensorBlock,
    pub keys_roped: TensorBlock,
    pub queries_deroped: TensorBlock,
    pub queries_roped: TensorBlock,
    pub values: TensorBlock,
    /// Key positions, `0..N`.
    pub positions: Vec<usize>,
    /// Query positions; generated queries all sit at `N`.
    pub query_positions: Vec<usize>,
    /// Key copied into each lookup query, local or planted.
    pub planted_target: Vec<Option<usize>>,
    pub query_kind: Vec<QueryKind>,
    pub rope: RopeConfig,
}

impl SyntheticPrompt {
    pub fn len(&self) -> usize {
        self.keys_roped.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys_roped.is_empty()
    }

    pub fn n_queries(&self) -> usize {
        self.queries_roped.rows()
    }

    pub fn planted_ids(&self) -> Vec<usize> {
        (0..self.n_queries()).filter(|&i| self.query_kind[i] == QueryKind::Planted).collect()
    }

    /// Keeps only the listed queries.
    pub fn select_queries(&self, ids: &[usize]) -> SyntheticPrompt {
        SyntheticPrompt {
            queries_deroped: self.queries_deroped.select_rows(ids),
            queries_roped: self.queries_roped.select_rows(ids),
            query_positions: ids.iter().map(|&i| self.query_positions[i]).collect(),
            planted_target: ids.iter().map(|&i| self.planted_target[i]).collect(),
            query_kind: ids.iter().map(|&i| self.query_kind[i]).collect(),
            ..self.clone()
        }
    }

    /// Writes the prompt as tensor files plus `manifest.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (name, t) in [
            ("keys_deroped", &self.keys_deroped),
            ("keys_roped", &self.keys_roped),
            ("queries_deroped", &self.queries_deroped),
            ("queries_roped", &self.queries_roped),
            ("values", &self.values),
        ] {
            format::tensor_write(t, dir.join(format!("{name}.tns")))?;
        }
        let u = |v: &[usize]| v.iter().map(|&x| x as u64).collect::<Vec<_>>();
        format::u64s_write(&u(&self.positions), dir.join("positions.u64"))?;
        format::u64s_write(&u(&self.query_positions), dir.join("query_positions.u64"))?;
        let planted: Vec<u64> = self.planted_target.iter().map(|t| t.map_or(u64::MAX, |x| x as u64)).collect();
        format::u64s_write(&planted, dir.join("planted_target.u64"))?;
        let kinds: Vec<u64> = self.query_kind.iter().map(|k| k.code()).collect();
        format::u64s_write(&kinds, dir.join("query_kind.u64"))?;
        let mut m = String::new();
        writeln!(m, "n_keys {}", self.len()).unwrap();
        writeln!(m, "n_queries {}", self.n_queries()).unwrap();
        writeln!(m, "dim {}", self.rope.dim).unwrap();
        writeln!(m, "rope_base {}", self.rope.base_theta).unwrap();
        std::fs::write(dir.join("manifest.txt"), m)?;
        Ok(())
    }

    /// Reads a prompt directory. Only `manifest.txt`, `values.tns` and one
    /// frame of keys and queries are required; missing frames are derived with
    /// rope, missing positions default to `0..N` for keys and `N` for queries.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut base = 10_000.0;
        let mut dim = None;
        for line in manifest.lines() {
            let mut it = line.split_whitespace();
            match (it.next(), it.next()) {
                (Some("rope_base"), Some(v)) => base = v.parse().map_err(|_| SaapError::Malformed(format!("rope_base {v:?}")))?,
                (Some("dim"), Some(v)) => dim = Some(v.parse::<usize>().map_err(|_| SaapError::Malformed(format!("dim {v:?}")))?),
                _ => {}
            }
        }
        let opt_tensor = |name: &str| -> Result<Option<TensorBlock>> {
            let p = dir.join(format!("{name}.tns"));
            if p.exists() {
                Ok(Some(format::tensor_read(p)?))
            } else {
                Ok(None)
            }
        };
        let opt_u64 = |name: &str| -> Result<Option<Vec<u64>>> {
            let p = dir.join(format!("{name}.u64"));
            if p.exists() {
                Ok(Some(format::u64s_read(p)?))
            } else {
                Ok(None)
            }
        };
        let values = format::tensor_read(dir.join("values.tns"))?;
        let kd = opt_tensor("keys_deroped")?;
        let kr = opt_tensor("keys_roped")?;
        let qd = opt_tensor("queries_deroped")?;
        let qr = opt_tensor("queries_roped")?;
        let d = dim
            .or(kd.as_ref().map(|t| t.dim()))
            .or(kr.as_ref().map(|t| t.dim()))
            .ok_or_else(|| SaapError::Malformed("prompt has no keys".into()))?;
        let rope = RopeConfig::new(d, base)?;
        let n = values.rows();
        let positions: Vec<usize> = opt_u64("positions")?.map_or_else(|| (0..n).collect(), |v| v.into_iter().map(|x| x as usize).collect());
        let (keys_deroped, keys_roped) = both_frames(kd, kr, &positions, &rope, "keys")?;
        let n_q = qd.as_ref().or(qr.as_ref()).map_or(0, |t| t.rows());
        let query_positions: Vec<usize> =
            opt_u64("query_positions")?.map_or_else(|| vec![n; n_q], |v| v.into_iter().map(|x| x as usize).collect());
        let (queries_deroped, queries_roped) = if n_q == 0 {
            (TensorBlock::zeros(0, d), TensorBlock::zeros(0, d))
        } else {
            both_frames(qd, qr, &query_positions, &rope, "queries")?
        };
        let planted_target = opt_u64("planted_target")?
            .map_or_else(|| vec![None; n_q], |v| v.into_iter().map(|x| (x != u64::MAX).then_some(x as usize)).collect());
        let query_kind = match opt_u64("query_kind")? {
            Some(v) => v.into_iter().map(QueryKind::from_code).collect::<Result<Vec<_>>>()?,
            None => vec![QueryKind::Content; n_q],
        };
        let p = SyntheticPrompt {
            keys_deroped,
            keys_roped,
            queries_deroped,
            queries_roped,
            values,
            positions,
            query_positions,
            planted_target,
            query_kind,
            rope,
        };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        let n = self.values.rows();
        let nq = self.queries_roped.rows();
        let ok = self.keys_roped.rows() == n
            && self.keys_deroped.shape() == self.keys_roped.shape()
            && self.positions.len() == n
            && self.queries_deroped.shape() == self.queries_roped.shape()
            && self.query_positions.len() == nq
            && self.planted_target.len() == nq
            && self.query_kind.len() == nq
            && self.queries_roped.dim() == self.keys_roped.dim();
        if !ok {
            return Err(SaapError::Malformed("prompt arrays have inconsistent sizes".into()));
        }
        Ok(())
    }
}

fn both_frames(
    deroped: Option<TensorBlock>,
    roped: Option<TensorBlock>,
    positions: &[usize],
    rope: &RopeConfig,
    what: &str,
) -> Result<(TensorBlock, TensorBlock)> {
    match (deroped, roped) {
        (Some(a), Some(b)) => Ok((a, b)),
        (Some(a), None) => {
            let b = crate::rope::rope_apply_block(&a, positions, rope)?;
            Ok((a, b))
        }
        (None, Some(b)) => {
            let a = crate::rope::rope_remove_block(&b, positions, rope)?;
            Ok((a, b))
        }
        (None, None) => Err(SaapError::Malformed(format!("prompt has no {what}"))),
    }
}

/// Per-prompt cluster weights from a symmetric Dirichlet.
fn prompt_weights(spec: &HeadSpec, rng: &mut SeededRng) -> Vec<f64> {
    let gamma = Gamma::new(spec.prompt_concentration, 1.0).expect("validated concentration");
    let mut w: Vec<f64> = (0..spec.n_clusters).map(|_| gamma.sample(rng).max(1e-12)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

fn pick(weights: &[f64], rng: &mut SeededRng) -> usize {
    let mut r = rng.uniform();
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            return i;
        }
        r -= w;
    }
    weights.len() - 1
}

fn to_block(rows: &[Vec<f64>], d: usize) -> Result<TensorBlock> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    TensorBlock::from_f64(rows.len(), d, &flat)
}

/// Share of the cluster center removed from a planted key copy.
const PLANTED_CENTER_DISCOUNT: f64 = 0.25;

/// De-roped key at `pos` from cluster `z`.
fn draw_key(spec: &HeadSpec, g: &Geometry, z: usize, pos: usize, rng: &mut SeededRng) -> Vec<f64> {
    let d = spec.d;
    let medium = g.bands.medium_dims();
    let center = g.center_at(z, pos, spec.drift_rate);
    let mut k: Vec<f64> = (0..d)
        .map(|i| {
            let noise = if medium.contains(&i) { 0.0 } else { spec.key_noise * rng.normal() };
            g.center_norms[z] * center[i] + g.positional[i] + noise
        })
        .collect();
    k[g.bands.mean_axis()] = spec.key_mean;
    k
}

/// Query offset plus content and noise.
fn draw_content_query(spec: &HeadSpec, g: &Geometry, z: usize, pos: usize, rng: &mut SeededRng) -> Vec<f64> {
    let center = g.center_at(z, pos, spec.drift_rate);
    let mut q: Vec<f64> = (0..spec.d).map(|i| spec.query_content * center[i] + spec.query_noise * rng.normal()).collect();
    q[g.bands.mean_axis()] -= spec.query_offset + spec.ood_shift;
    q
}

/// Generates one prompt of `n` keys and `n_q` queries.
pub fn generate_prompt(spec: &HeadSpec, n: usize, n_q: usize) -> Result<SyntheticPrompt> {
    spec.validate()?;
    if n == 0 {
        return Err(SaapError::invalid("a prompt needs at least one key"));
    }
    let d = spec.d;
    let rope = spec.rope();
    let g = Geometry::new(spec);
    let mut rng = SeededRng::new(spec.seed).fork(1 + spec.prompt);
    let weights = prompt_weights(spec, &mut rng);

    let mut keys_deroped = Vec::with_capacity(n);
    keys_deroped.push({
        let mut sink = vec![0.0; d];
        sink[g.bands.mean_axis()] = -spec.sink_norm;
        sink
    });
    let mut key_cluster = vec![0; n];
    for pos in 1..n {
        let z = pick(&weights, &mut rng);
        key_cluster[pos] = z;
        keys_deroped.push(draw_key(spec, &g, z, pos, &mut rng));
    }
    let keys_deroped_block = to_block(&keys_deroped, d)?;
    let positions: Vec<usize> = (0..n).collect();
    let keys_roped = crate::rope::rope_apply_block(&keys_deroped_block, &positions, &rope)?;
    let values = TensorBlock::from_f64(n, d, &(0..n * d).map(|_| rng.normal()).collect::<Vec<_>>())?;

    // a lookup query carries the distinctive part of its target key, brought
    // into the query frame, with the cluster center down-weighted so that a
    // near-duplicate cluster cannot outscore the target
    let lookup = |target: usize, rng: &mut SeededRng| -> Result<Vec<f64>> {
        let mut q: Vec<f64> = (0..d).map(|_| spec.query_noise * rng.normal()).collect();
        q[g.bands.mean_axis()] -= spec.query_offset + spec.ood_shift;
        let z = key_cluster[target];
        let center = g.center_at(z, target, spec.drift_rate);
        let mut x = keys_deroped[target].clone();
        for i in 0..d {
            x[i] -= g.positional[i] + PLANTED_CENTER_DISCOUNT * g.center_norms[z] * center[i];
        }
        x[g.bands.mean_axis()] = 0.0;
        rope_apply_f64(&mut x, target, &rope)?;
        crate::rope::rope_remove_f64(&mut x, n, &rope)?;
        let nrm = norm_f64(&x).max(1e-12);
        for i in 0..d {
            q[i] += spec.planted_strength * x[i] / nrm;
        }
        Ok(q)
    };
    let far_limit = n.saturating_sub(spec.planted_min_gap);
    let near_start = n.saturating_sub(spec.local_span).max(1);
    let mut q_deroped = Vec::with_capacity(n_q);
    let mut planted_target = Vec::with_capacity(n_q);
    let mut query_kind = Vec::with_capacity(n_q);
    for _ in 0..n_q {
        let planted = far_limit > 1 && rng.uniform() < spec.planted_longrange_fraction;
        if planted {
            let target = 1 + rng.below(far_limit - 1);
            q_deroped.push(lookup(target, &mut rng)?);
            planted_target.push(Some(target));
            query_kind.push(QueryKind::Planted);
        } else if near_start < n && rng.uniform() < spec.local_fraction {
            let target = near_start + rng.below(n - near_start);
            q_deroped.push(lookup(target, &mut rng)?);
            planted_target.push(Some(target));
            query_kind.push(QueryKind::Local);
        } else {
            let z = pick(&weights, &mut rng);
            q_deroped.push(draw_content_query(spec, &g, z, n, &mut rng));
            planted_target.push(None);
            query_kind.push(QueryKind::Content);
        }
    }
    let queries_deroped = to_block(&q_deroped, d)?;
    let query_positions = vec![n; n_q];
    let queries_roped = crate::rope::rope_apply_block(&queries_deroped, &query_positions, &rope)?;

    Ok(SyntheticPrompt {
        keys_deroped: keys_deroped_block,
        keys_roped,
        queries_deroped,
        queries_roped,
        values,
        positions,
        query_positions,
        planted_target,
        query_kind,
        rope,
    })
}

/// De-roped content queries translated by `shift` along `−e_μ`.
pub fn generate_ood_queries(spec: &HeadSpec, n_q: usize, shift: f64) -> Result<TensorBlock> {
    spec.validate()?;
    if !(shift >= 0.0 && shift.is_finite()) {
        return Err(SaapError::invalid(format!("shift must be non-negative, got {shift}")));
    }
    let g = Geometry::new(spec);
    let mut rng = SeededRng::new(spec.seed).fork(1 + spec.prompt);
    let weights = prompt_weights(spec, &mut rng);
    let mut rng = SeededRng::new(spec.seed ^ 0x5eed).fork(1 + spec.prompt);
    let mut rows = Vec::with_capacity(n_q);
    for _ in 0..n_q {
        let z = pick(&weights, &mut rng);
        let mut q = draw_content_query(spec, &g, z, 0, &mut rng);
        q[g.bands.mean_axis()] -= shift;
        rows.push(q);
    }
    to_block(&rows, spec.d)
}

/// De-roped keys of a prompt without the sink, at most `max_rows` of them
/// taken evenly.
pub fn training_keys(prompt: &SyntheticPrompt, sink_count: usize, max_rows: usize) -> TensorBlock {
    let n = prompt.len();
    let avail = n.saturating_sub(sink_count);
    if avail <= max_rows {
        return prompt.keys_deroped.slice_rows(sink_count.min(n), n);
    }
    let ids: Vec<usize> = (0..max_rows).map(|i| sink_count + i * avail / max_rows).collect();
    prompt.keys_deroped.select_rows(&ids)
}

/// Checks that both frames agree to within `tol` per component.
pub fn rope_consistent(prompt: &SyntheticPrompt, tol: f32) -> Result<bool> {
    for (i, &p) in prompt.positions.iter().enumerate() {
        let r = rope_apply(prompt.keys_deroped.row(i), p, &prompt.rope)?;
        if r.iter().zip(prompt.keys_roped.row(i)).any(|(a, b)| (a - b).abs() > tol) {
            return Ok(false);
        }
    }
    for (i, &p) in prompt.query_positions.iter().enumerate() {
        let r = rope_remove(prompt.queries_roped.row(i), p, &prompt.rope)?;
        if r.iter().zip(prompt.queries_deroped.row(i)).any(|(a, b)| (a - b).abs() > tol) {
            return Ok(false);
        }
    }
    Ok(true)
}
