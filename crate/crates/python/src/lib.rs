//! Python bindings: configs travel as JSON strings, tensors as nested lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pha::checkpoint;
use pha::cli::{init_seed, FD_EPS};
use pha::config::RunConfig;
use pha::model::{Conditioning, PhaModel};
use pha::pha::{count_parameters, info_nce_loss as info_nce, prototype_loss as proto_loss, ContrastiveBatch};
use pha::tasks::{detokenize as detok, tokenize as tok};
use pha::train::{build_datasets, pretrain_backbone, train_multitask, NoObserver};
use pha::verify::{census_matches, check_gradients, zero_init_mismatches};
use pha::{PhaError, Tape, Tensor};

fn py_err(e: PhaError) -> PyErr {
    match e {
        PhaError::Io(_) | PhaError::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        PhaError::Config(_)
        | PhaError::Tokenize(_)
        | PhaError::Contract(_)
        | PhaError::Dimension { .. }
        | PhaError::Index(_)
        | PhaError::Degenerate(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_config(json: &str) -> PyResult<RunConfig> {
    RunConfig::from_json(json).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.last_dim().max(1)).map(<[f64]>::to_vec).collect()
}

fn matrix(v: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(v).map_err(py_err)
}

/// `[BOS, chars.., EOS]` token ids.
#[pyfunction]
fn tokenize(text: &str) -> PyResult<Vec<usize>> {
    tok(text).map_err(py_err)
}

#[pyfunction]
fn detokenize(ids: Vec<usize>) -> PyResult<String> {
    detok(&ids).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (preset = "reference"))]
fn default_config(preset: &str) -> PyResult<String> {
    let cfg = match preset {
        "reference" => RunConfig::reference(),
        "tiny" => RunConfig::tiny(),
        other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
    };
    serde_json::to_string_pretty(&cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyfunction]
fn param_count<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyDict>> {
    let c = parse_config(config)?;
    let r = count_parameters(&c.model, c.pha.retrieval_dim, c.pha.hyper_dim, c.tasks.len());
    let d = PyDict::new(py);
    d.set_item("retriever", r.retriever)?;
    d.set_item("embeddings", r.embeddings)?;
    d.set_item("projection", r.projection)?;
    d.set_item("hypernet", r.hypernet)?;
    d.set_item("shared_adapters", r.shared_adapters)?;
    d.set_item("total", r.total)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (z, task_ids, temperature = 1.0, include_positive = true))]
fn info_nce_loss(z: Vec<Vec<f64>>, task_ids: Vec<usize>, temperature: f64, include_positive: bool) -> PyResult<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(matrix(&z)?);
    let cb = ContrastiveBatch::new(&tape, zv, task_ids).map_err(py_err)?;
    let l = info_nce(&mut tape, &cb, temperature, include_positive).map_err(py_err)?;
    Ok(tape.value(l).item())
}

#[pyfunction]
#[pyo3(signature = (z, task_ids, prototypes, temperature = 1.0))]
fn prototype_loss(z: Vec<Vec<f64>>, task_ids: Vec<usize>, prototypes: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(matrix(&z)?);
    let kv = tape.constant(matrix(&prototypes)?);
    let cb = ContrastiveBatch::new(&tape, zv, task_ids).map_err(py_err)?;
    let l = proto_loss(&mut tape, &cb, kv, temperature, true).map_err(py_err)?;
    Ok(tape.value(l).item())
}

/// Index of the prototype with the highest mean cosine, and all scores.
#[pyfunction]
fn match_prototype(z: Vec<Vec<f64>>, prototypes: Vec<Vec<f64>>) -> PyResult<(usize, Vec<f64>)> {
    pha::pha::match_prototype(&matrix(&z)?, &matrix(&prototypes)?).map_err(py_err)
}

/// The three `pha verify` checks, as numbers.
#[pyfunction]
#[pyo3(signature = (config, seed = 0))]
fn verify<'py>(py: Python<'py>, config: &str, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let c = parse_config(config)?;
    let ab = c.train.ablations.clone();
    let g = check_gradients(&c, ab.clone(), seed, FD_EPS).map_err(py_err)?;
    let m = PhaModel::new(c.model.clone(), c.pha.clone(), ab.clone(), &c.task_names(), seed).map_err(py_err)?;
    let (formula, registry) = census_matches(&m);
    let d = PyDict::new(py);
    d.set_item("max_rel_error", g.max_rel_error)?;
    d.set_item("coordinates", g.coordinates)?;
    d.set_item("census_formula", formula)?;
    d.set_item("census_registry", registry)?;
    if !ab.literal_eq8 {
        d.set_item("zero_init_mismatches", zero_init_mismatches(&c, ab, 100, seed).map_err(py_err)?)?;
    }
    Ok(d)
}

/// A PHA model: frozen backbone plus retriever, prototypes and hypernetwork.
#[pyclass(module = "pha")]
struct Model {
    inner: PhaModel,
}

impl Model {
    fn encode_all(&self, texts: &[String]) -> PyResult<Vec<Vec<usize>>> {
        texts.iter().map(|t| tok(t).map_err(py_err)).collect()
    }
}

#[pymethods]
impl Model {
    /// Fresh model with a random (frozen) backbone.
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let c = parse_config(config)?;
        let names = c.task_names();
        let inner = PhaModel::new(c.model, c.pha, c.train.ablations, &names, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load_file(&path).map_err(py_err)?.model,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_file(&path, &self.inner, None, 0, None).map_err(py_err)
    }

    #[getter]
    fn task_names(&self) -> Vec<String> {
        self.inner.task_names().to_vec()
    }

    #[getter]
    fn key_dim(&self) -> usize {
        self.inner.key_dim()
    }

    fn trainable_parameters(&self) -> usize {
        self.inner.store.trainable_census()
    }

    fn prototypes(&self) -> Vec<Vec<f64>> {
        rows(self.inner.store.value(self.inner.bank.prototypes))
    }

    /// Retrieval vectors for raw input strings.
    fn embed(&self, texts: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let ids = self.encode_all(&texts)?;
        Ok(rows(&self.inner.embed_inputs(&ids).map_err(py_err)?))
    }

    /// Registered task whose prototype best matches these inputs, with scores.
    fn retrieve(&self, texts: Vec<String>) -> PyResult<(String, Vec<f64>)> {
        let z = self.inner.embed_inputs(&self.encode_all(&texts)?).map_err(py_err)?;
        let (i, scores) =
            pha::pha::match_prototype(&z, self.inner.store.value(self.inner.bank.prototypes)).map_err(py_err)?;
        Ok((self.inner.task_names()[i].clone(), scores))
    }

    /// Greedy outputs with adapters generated from `task`'s prototype.
    #[pyo3(signature = (texts, task, max_steps = 32))]
    fn generate(&self, texts: Vec<String>, task: &str, max_steps: usize) -> PyResult<Vec<String>> {
        let t = self
            .inner
            .task_names()
            .iter()
            .position(|n| n == task)
            .ok_or_else(|| PyValueError::new_err(format!("unknown task {task:?}")))?;
        let ids = self.encode_all(&texts)?;
        let out = self
            .inner
            .greedy_decode(&ids, &Conditioning::Tasks(vec![t; ids.len()]), max_steps)
            .map_err(py_err)?;
        out.iter().map(|o| detok(o).map_err(py_err)).collect()
    }
}

/// Pre-train a backbone and run multi-task training; returns the model and
/// per-task sequence accuracy.
#[pyfunction]
fn train(py: Python<'_>, config: &str) -> PyResult<(Model, Vec<(String, f64)>)> {
    let c = parse_config(config)?;
    let run = || -> pha::Result<(PhaModel, Vec<(String, f64)>)> {
        let (bb, _) = pretrain_backbone(&c.model, &c.pretrain)?;
        let mut m = PhaModel::new(
            c.model.clone(),
            c.pha.clone(),
            c.train.ablations.clone(),
            &c.task_names(),
            init_seed(&c),
        )?;
        m.load_backbone(&bb.store)?;
        let (tr, ev) = build_datasets(&c.tasks, c.data.train_examples, c.data.eval_examples)?;
        let r = train_multitask(&mut m, &tr, &ev, &c.train, &mut NoObserver)?;
        let acc = r.per_task.into_iter().map(|(n, e)| (n, e.sequence_accuracy)).collect();
        Ok((m, acc))
    };
    let (inner, acc) = py.detach(run).map_err(py_err)?;
    Ok((Model { inner }, acc))
}

#[pymodule]
#[pyo3(name = "pha")]
fn pha_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(prototype_loss, m)?)?;
    m.add_function(wrap_pyfunction!(match_prototype, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_split_on_the_last_axis() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(rows(&t), vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(matrix(&rows(&t)).unwrap(), t);
    }
}
