//! Python bindings.
//!
//! Tensors cross the boundary as anything exposing a float32 buffer (numpy
//! arrays) or as nested sequences, and come back as nested lists.

use pyo3::buffer::PyBuffer;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use saap_core::attention::{self as attn, DenseWindow, Router, SparseAttnConfig};
use saap_core::qmodel::batched_bucket_select;
use saap_core::synth::{self, HeadSpec as CoreHeadSpec};
use saap_core::{format, rope, SaapError};

create_exception!(saap, Error, PyException);

fn err(e: SaapError) -> PyErr {
    Error::new_err(format!("{}: {e}", e.kind()))
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for saap_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn matrix_rows(m: &saap_core::Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Row-major float32 block of `rows x dim`.
#[pyclass(module = "saap", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct TensorBlock(saap_core::TensorBlock);

#[pymethods]
impl TensorBlock {
    #[new]
    fn py_new(data: &Bound<'_, PyAny>) -> PyResult<Self> {
        if let Ok(buf) = PyBuffer::<f32>::get(data) {
            if buf.dimensions() == 2 && buf.is_c_contiguous() {
                let shape = buf.shape();
                let values = buf.to_vec(data.py())?;
                return saap_core::TensorBlock::new(shape[0], shape[1], values).py().map(Self);
            }
        }
        let rows: Vec<Vec<f32>> = data.extract()?;
        if rows.is_empty() {
            return Err(Error::new_err("empty: a block needs at least one row to fix its dimension"));
        }
        saap_core::TensorBlock::from_rows(&rows).py().map(Self)
    }

    #[staticmethod]
    fn from_bytes(buf: &[u8]) -> PyResult<Self> {
        format::decode_tensor(buf).py().map(Self)
    }

    fn to_bytes(&self) -> Vec<u8> {
        format::encode_tensor(&self.0)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        format::tensor_read(path).py().map(Self)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        format::tensor_write(&self.0, path).py()
    }

    #[getter]
    fn rows(&self) -> usize {
        self.0.rows()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.0.rows() {
            return Err(pyo3::exceptions::PyIndexError::new_err(format!("row {i} of {}", self.0.rows())));
        }
        Ok(self.0.row(i).to_vec())
    }

    fn select_rows(&self, ids: Vec<usize>) -> PyResult<Self> {
        if let Some(&i) = ids.iter().find(|&&i| i >= self.0.rows()) {
            return Err(pyo3::exceptions::PyIndexError::new_err(format!("row {i} of {}", self.0.rows())));
        }
        Ok(Self(self.0.select_rows(&ids)))
    }

    fn tolist(&self) -> Vec<Vec<f32>> {
        self.0.iter_rows().map(<[f32]>::to_vec).collect()
    }

    fn __len__(&self) -> usize {
        self.0.rows()
    }

    fn __repr__(&self) -> String {
        format!("TensorBlock(rows={}, dim={})", self.0.rows(), self.0.dim())
    }
}

#[pyclass(module = "saap", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct RopeConfig(saap_core::RopeConfig);

#[pymethods]
impl RopeConfig {
    #[new]
    #[pyo3(signature = (dim, base_theta = 10_000.0))]
    fn py_new(dim: usize, base_theta: f64) -> PyResult<Self> {
        saap_core::RopeConfig::new(dim, base_theta).py().map(Self)
    }

    fn apply(&self, x: Vec<f32>, position: usize) -> PyResult<Vec<f32>> {
        rope::rope_apply(&x, position, &self.0).py()
    }

    fn remove(&self, x: Vec<f32>, position: usize) -> PyResult<Vec<f32>> {
        rope::rope_remove(&x, position, &self.0).py()
    }

    fn apply_block(&self, block: &TensorBlock, positions: Vec<usize>) -> PyResult<TensorBlock> {
        rope::rope_apply_block(&block.0, &positions, &self.0).py().map(TensorBlock)
    }

    fn remove_block(&self, block: &TensorBlock, positions: Vec<usize>) -> PyResult<TensorBlock> {
        rope::rope_remove_block(&block.0, &positions, &self.0).py().map(TensorBlock)
    }
}

/// Unit centroids of a spherical partition.
#[pyclass(module = "saap", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Partition(saap_core::Partition);

#[pymethods]
impl Partition {
    #[new]
    fn py_new(centroids: &TensorBlock) -> PyResult<Self> {
        saap_core::Partition::new(centroids.0.clone()).py().map(Self)
    }

    /// Spherical k-means over the rows of `keys`.
    #[staticmethod]
    #[pyo3(signature = (keys, c, iters = 10, seed = 0))]
    fn kmeans(py: Python<'_>, keys: &TensorBlock, c: usize, iters: usize, seed: u64) -> PyResult<Self> {
        let keys = keys.0.clone();
        py.detach(move || saap_core::kmeans_train(&keys, c, iters, &mut saap_core::SeededRng::new(seed)))
            .py()
            .map(Self)
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        saap_core::Partition::load(dir).py().map(Self)
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        self.0.save(dir).py()
    }

    #[getter]
    fn n_buckets(&self) -> usize {
        self.0.n_buckets()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn centroids(&self) -> TensorBlock {
        TensorBlock(self.0.centroids().clone())
    }

    fn assign(&self, key: Vec<f32>) -> PyResult<usize> {
        self.0.assign(&key).py()
    }

    fn top_buckets(&self, v: Vec<f64>, ell: usize) -> PyResult<Vec<usize>> {
        self.0.top_buckets(&v, ell).py()
    }
}

/// Bucket-routing network.
#[pyclass(module = "saap", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct QModel(saap_core::qmodel::QModel);

#[pymethods]
impl QModel {
    #[new]
    #[pyo3(signature = (d, hidden, c, seed = 0))]
    fn py_new(d: usize, hidden: usize, c: usize, seed: u64) -> PyResult<Self> {
        saap_core::qmodel::QModel::new(d, hidden, c, &mut saap_core::SeededRng::new(seed)).py().map(Self)
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        saap_core::qmodel::QModel::load(dir).py().map(Self)
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        self.0.save(dir).py()
    }

    #[getter]
    fn n_buckets(&self) -> usize {
        self.0.n_buckets()
    }

    /// Bucket distribution for one de-roped query.
    fn predict(&self, q: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.predict(&q).py()
    }

    /// Top-`ell` buckets for a query group.
    fn select(&self, group: &TensorBlock, ell: usize) -> PyResult<Vec<usize>> {
        batched_bucket_select(&self.0, &group.0, ell).py()
    }
}

#[pyclass(module = "saap", frozen, get_all)]
pub struct AttnResult {
    output: Vec<Vec<f64>>,
    keys_scored: usize,
    max_visited_bucket: usize,
    buckets: Vec<usize>,
    selectivity: f64,
}

#[pymethods]
impl AttnResult {
    fn __repr__(&self) -> String {
        format!("AttnResult(keys_scored={}, selectivity={}, buckets={:?})", self.keys_scored, self.selectivity, self.buckets)
    }
}

/// Keys and values indexed under a partition.
#[pyclass(module = "saap", frozen)]
pub struct SparseStore(attn::SparseStore);

#[pymethods]
impl SparseStore {
    /// Assigns `assign_keys` (usually the de-roped keys) row by row, leaving
    /// the first `sink_count` keys out of the index.
    #[new]
    #[pyo3(signature = (keys_roped, values, partition, assign_keys, sink_count = 1))]
    fn py_new(
        keys_roped: &TensorBlock,
        values: &TensorBlock,
        partition: &Partition,
        assign_keys: &TensorBlock,
        sink_count: usize,
    ) -> PyResult<Self> {
        attn::SparseStore::build(keys_roped.0.clone(), values.0.clone(), partition.0.clone(), &assign_keys.0, sink_count)
            .py()
            .map(Self)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn n_buckets(&self) -> usize {
        self.0.n_buckets()
    }

    fn bucket_of(&self, id: usize) -> Option<usize> {
        self.0.bucket_of(id)
    }

    fn bucket(&self, c: usize) -> PyResult<Vec<usize>> {
        if c >= self.0.n_buckets() {
            return Err(pyo3::exceptions::PyIndexError::new_err(format!("bucket {c} of {}", self.0.n_buckets())));
        }
        Ok(self.0.index.bucket(c).to_vec())
    }

    /// Sparse attention for a query group. Routes by nearest centroid unless
    /// a `model` is given.
    #[pyo3(signature = (q_roped, q_route, ell, sink = 1, recent = 2047, model = None))]
    fn attend(
        &self,
        py: Python<'_>,
        q_roped: &TensorBlock,
        q_route: &TensorBlock,
        ell: usize,
        sink: usize,
        recent: usize,
        model: Option<&QModel>,
    ) -> PyResult<AttnResult> {
        let router = match model {
            Some(m) => Router::QModel(&m.0),
            None => Router::NearestCentroid,
        };
        let cfg = SparseAttnConfig::new(ell).with_dense(DenseWindow::new(sink, recent));
        let r = py.detach(|| attn::sparse_attention(&q_roped.0, &q_route.0, &self.0, router, &cfg)).py()?;
        Ok(AttnResult {
            selectivity: attn::selectivity(&r, self.0.len()).py()?,
            output: matrix_rows(&r.output),
            keys_scored: r.keys_scored,
            max_visited_bucket: r.max_visited_bucket,
            buckets: r.buckets,
        })
    }

    /// Share of the softmax mass over non-dense keys that falls in `buckets`.
    #[pyo3(signature = (q_roped, buckets, sink = 1, recent = 2047))]
    fn coverage(&self, q_roped: Vec<f32>, buckets: Vec<usize>, sink: usize, recent: usize) -> PyResult<f64> {
        attn::attention_mass_coverage(&q_roped, &self.0, &buckets, DenseWindow::new(sink, recent)).py()
    }
}

/// Exact attention of a query group over all keys.
#[pyfunction]
fn full_attention(q_roped: &TensorBlock, keys_roped: &TensorBlock, values: &TensorBlock) -> PyResult<Vec<Vec<f64>>> {
    attn::full_attention(&q_roped.0, &keys_roped.0, &values.0).py().map(|m| matrix_rows(&m))
}

#[pyfunction]
fn mse(approx: Vec<Vec<f64>>, exact: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = saap_core::Matrix::from_rows(&approx).py()?;
    let b = saap_core::Matrix::from_rows(&exact).py()?;
    attn::mse(&a, &b).py()
}

/// Parameters of a synthetic head; keyword arguments override the defaults.
#[pyclass(module = "saap", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct HeadSpec(CoreHeadSpec);

#[pymethods]
impl HeadSpec {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn py_new(kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut spec = CoreHeadSpec::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                spec.set(&key, &v.str()?.to_string()).py()?;
            }
        }
        spec.validate().py()?;
        Ok(Self(spec))
    }

    fn as_dict(&self) -> Vec<(&'static str, String)> {
        self.0.entries()
    }

    fn __repr__(&self) -> String {
        let fields: Vec<String> = self.0.entries().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("HeadSpec({})", fields.join(", "))
    }
}

#[pyclass(module = "saap", frozen)]
pub struct SyntheticPrompt(synth::SyntheticPrompt);

#[pymethods]
impl SyntheticPrompt {
    #[getter]
    fn keys_roped(&self) -> TensorBlock {
        TensorBlock(self.0.keys_roped.clone())
    }

    #[getter]
    fn keys_deroped(&self) -> TensorBlock {
        TensorBlock(self.0.keys_deroped.clone())
    }

    #[getter]
    fn queries_roped(&self) -> TensorBlock {
        TensorBlock(self.0.queries_roped.clone())
    }

    #[getter]
    fn queries_deroped(&self) -> TensorBlock {
        TensorBlock(self.0.queries_deroped.clone())
    }

    #[getter]
    fn values(&self) -> TensorBlock {
        TensorBlock(self.0.values.clone())
    }

    #[getter]
    fn planted_target(&self) -> Vec<Option<usize>> {
        self.0.planted_target.clone()
    }

    #[getter]
    fn query_kind(&self) -> Vec<&'static str> {
        self.0
            .query_kind
            .iter()
            .map(|k| match k {
                synth::QueryKind::Content => "content",
                synth::QueryKind::Local => "local",
                synth::QueryKind::Planted => "planted",
            })
            .collect()
    }

    fn planted_ids(&self) -> Vec<usize> {
        self.0.planted_ids()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        synth::SyntheticPrompt::load(dir).py().map(Self)
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        self.0.save(dir).py()
    }
}

/// Draws a prompt of `n` keys and `n_q` queries from `spec`.
#[pyfunction]
fn generate_prompt(py: Python<'_>, spec: &HeadSpec, n: usize, n_q: usize) -> PyResult<SyntheticPrompt> {
    let spec = spec.0.clone();
    py.detach(move || synth::generate_prompt(&spec, n, n_q)).py().map(SyntheticPrompt)
}

#[pymodule]
pub fn saap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("Error", m.py().get_type::<Error>())?;
    m.add_class::<TensorBlock>()?;
    m.add_class::<RopeConfig>()?;
    m.add_class::<Partition>()?;
    m.add_class::<QModel>()?;
    m.add_class::<SparseStore>()?;
    m.add_class::<AttnResult>()?;
    m.add_class::<HeadSpec>()?;
    m.add_class::<SyntheticPrompt>()?;
    m.add_function(wrap_pyfunction!(full_attention, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(generate_prompt, m)?)?;
    Ok(())
}
