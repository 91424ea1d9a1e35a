//! Python bindings for the disease-detection engine: dataset loading,
//! synthetic generation, training, evaluation, per-patient prediction, and
//! the disease-pair discrepancy analysis.

use std::collections::HashSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cldd_core::analysis::discrepancy_rank;
use cldd_core::checkpoint;
use cldd_core::data;
use cldd_core::eval;
use cldd_core::model::{
    final_embeddings, forward_eval, FinalEmbeddings, ModelConfig, ModelState, PropagationGraph,
};
use cldd_core::train::{self, TrainConfig};

fn to_py_err(e: cldd_core::Error) -> PyErr {
    use cldd_core::Error::*;
    match e {
        Config(_) | Domain(_) | Ingest { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// A prepared dataset: interned ids, temporal train/test split, features.
#[pyclass(frozen)]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    /// Ingest CSV files, optionally keep only the most frequent diseases,
    /// and split per patient by admission time.
    #[staticmethod]
    #[pyo3(signature = (interactions, demographics, max_diseases=None, split_ratio=0.8))]
    fn load(
        interactions: PathBuf,
        demographics: PathBuf,
        max_diseases: Option<usize>,
        split_ratio: f64,
    ) -> PyResult<Self> {
        let inner = data::load_dataset(&interactions, &demographics, max_diseases, split_ratio)
            .map_err(to_py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn num_patients(&self) -> usize {
        self.inner.num_patients()
    }

    #[getter]
    fn num_diseases(&self) -> usize {
        self.inner.num_diseases()
    }

    #[getter]
    fn train_interactions(&self) -> usize {
        self.inner.train.nnz()
    }

    #[getter]
    fn test_interactions(&self) -> usize {
        self.inner.test.nnz()
    }

    fn patient_ids(&self) -> Vec<String> {
        self.inner.patient_ids.clone()
    }

    fn disease_codes(&self) -> Vec<String> {
        self.inner.disease_codes.clone()
    }

    /// Training positives of one patient (disease indices).
    fn train_positives(&self, patient: usize) -> PyResult<Vec<usize>> {
        if patient >= self.inner.num_patients() {
            return Err(PyValueError::new_err(format!(
                "patient index {patient} out of range"
            )));
        }
        let mut v: Vec<usize> = self.inner.train_positives(patient).into_iter().collect();
        v.sort_unstable();
        Ok(v)
    }

    fn test_positives(&self, patient: usize) -> PyResult<Vec<usize>> {
        if patient >= self.inner.num_patients() {
            return Err(PyValueError::new_err(format!(
                "patient index {patient} out of range"
            )));
        }
        let mut v: Vec<usize> = self.inner.test_positives(patient).into_iter().collect();
        v.sort_unstable();
        Ok(v)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} patients, {} diseases, {} train / {} test interactions)",
            self.inner.num_patients(),
            self.inner.num_diseases(),
            self.inner.train.nnz(),
            self.inner.test.nnz()
        )
    }
}

/// A trained model: parameter state plus scoring and analysis entry points.
#[pyclass]
struct Model {
    state: ModelState,
}

impl Model {
    fn embeddings_for(&self, ds: &data::Dataset) -> PyResult<FinalEmbeddings> {
        if self.state.num_patients() != ds.num_patients()
            || self.state.num_diseases() != ds.num_diseases()
        {
            return Err(PyValueError::new_err(
                "model and dataset disagree on patient/disease counts",
            ));
        }
        let graph = PropagationGraph::from_interactions(&ds.train);
        let outputs = forward_eval(&self.state, &graph).map_err(to_py_err)?;
        Ok(final_embeddings(&outputs))
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (state, _provenance) = checkpoint::load(&path).map_err(to_py_err)?;
        Ok(Self { state })
    }

    #[pyo3(signature = (path, provenance=None))]
    fn save(&self, path: PathBuf, provenance: Option<String>) -> PyResult<()> {
        let provenance = match provenance {
            Some(text) => serde_json::from_str(&text)
                .map_err(|e| PyValueError::new_err(format!("provenance is not JSON: {e}")))?,
            None => serde_json::Value::Null,
        };
        checkpoint::save(&self.state, provenance, &path).map_err(to_py_err)
    }

    /// Model configuration as a dict.
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let dict = PyDict::new(py);
        let cfg = &self.state.config;
        dict.set_item("embed_dim", cfg.embed_dim)?;
        dict.set_item("fixed_dim", cfg.fixed_dim)?;
        dict.set_item("num_layers", cfg.num_layers)?;
        dict.set_item("max_hops", cfg.max_hops)?;
        dict.set_item("layer_dims", cfg.layer_dims.clone())?;
        dict.set_item("dropout", cfg.dropout.clone())?;
        dict.set_item("leaky_slope", cfg.leaky_slope)?;
        dict.set_item("seed", cfg.seed)?;
        Ok(dict)
    }

    /// Predicted score for one (patient, disease) index pair.
    fn score(&self, ds: &Dataset, patient: usize, disease: usize) -> PyResult<f64> {
        if patient >= self.state.num_patients() || disease >= self.state.num_diseases() {
            return Err(PyValueError::new_err("patient or disease index out of range"));
        }
        let embeddings = self.embeddings_for(&ds.inner)?;
        Ok(embeddings.score(patient, disease))
    }

    /// Scores over all diseases for one patient. Training positives are
    /// excluded (scored -inf) unless `exclude_train` is false.
    #[pyo3(signature = (ds, patient, exclude_train=true))]
    fn score_all(&self, ds: &Dataset, patient: usize, exclude_train: bool) -> PyResult<Vec<f64>> {
        if patient >= self.state.num_patients() {
            return Err(PyValueError::new_err("patient index out of range"));
        }
        let embeddings = self.embeddings_for(&ds.inner)?;
        let exclude = if exclude_train {
            ds.inner.train_positives(patient)
        } else {
            HashSet::new()
        };
        Ok(embeddings.score_all(patient, &exclude))
    }

    /// Macro-averaged ranking metrics over the test split.
    #[pyo3(signature = (ds, k=20))]
    fn evaluate<'py>(&self, py: Python<'py>, ds: &Dataset, k: usize) -> PyResult<Bound<'py, PyDict>> {
        let report = eval::evaluate(&self.state, &ds.inner, k).map_err(to_py_err)?;
        let dict = PyDict::new(py);
        dict.set_item("k", report.k)?;
        dict.set_item("evaluated_patients", report.evaluated_patients)?;
        dict.set_item("recall", report.means.recall)?;
        dict.set_item("precision", report.means.precision)?;
        dict.set_item("ndcg", report.means.ndcg)?;
        dict.set_item("hit", report.means.hit)?;
        dict.set_item("auc", report.means.auc)?;
        Ok(dict)
    }

    /// Ranked top-K diseases for a patient id, with hit flags against the
    /// held-out positives.
    #[pyo3(signature = (ds, patient_id, k=5))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        ds: &Dataset,
        patient_id: &str,
        k: usize,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let rows = eval::case_report(&self.state, &ds.inner, patient_id, k).map_err(to_py_err)?;
        rows.into_iter()
            .map(|row| {
                let dict = PyDict::new(py);
                dict.set_item("rank", row.rank)?;
                dict.set_item("disease_code", row.disease_code)?;
                dict.set_item("score", row.score)?;
                dict.set_item("hit", row.hit)?;
                Ok(dict)
            })
            .collect()
    }

    /// Top disease pairs by |comorbidity − pearson|.
    #[pyo3(signature = (ds, top_n=50))]
    fn discrepancy<'py>(
        &self,
        py: Python<'py>,
        ds: &Dataset,
        top_n: usize,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let embeddings = self.embeddings_for(&ds.inner)?;
        let disease_block = embeddings
            .matrix()
            .slice(ndarray::s![ds.inner.num_patients().., ..]);
        let full = ds.inner.full_matrix();
        let records = discrepancy_rank(&full, &ds.inner.disease_codes, &disease_block, top_n)
            .map_err(to_py_err)?;
        records
            .into_iter()
            .map(|r| {
                let dict = PyDict::new(py);
                dict.set_item("code_a", r.code_a.clone())?;
                dict.set_item("code_b", r.code_b.clone())?;
                dict.set_item("comorbidity", r.comorbidity)?;
                dict.set_item("pearson", r.pearson)?;
                dict.set_item("discrepancy", r.discrepancy)?;
                dict.set_item("support_a", r.support_a)?;
                dict.set_item("support_b", r.support_b)?;
                dict.set_item("low_support", r.low_support())?;
                Ok(dict)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({} patients, {} diseases, k={}, L={})",
            self.state.num_patients(),
            self.state.num_diseases(),
            self.state.config.embed_dim,
            self.state.config.num_layers
        )
    }
}

/// Write a synthetic planted-structure dataset and return its manifest.
#[pyfunction]
#[pyo3(signature = (out_dir, patients=300, diseases=150, rank=8, density=0.05, seed=42, confound=false))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    patients: usize,
    diseases: usize,
    rank: usize,
    density: f64,
    seed: u64,
    confound: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = data::SynthConfig {
        patients,
        diseases,
        rank,
        density,
        seed,
        confound,
    };
    let output = data::synth_generate(&cfg, &out_dir).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("patients", patients)?;
    dict.set_item("diseases", diseases)?;
    dict.set_item("interactions", output.tables.interactions.len())?;
    dict.set_item("per_patient", output.per_patient)?;
    dict.set_item("out_dir", out_dir)?;
    Ok(dict)
}

/// Train a model on the dataset's training split; returns the model and
/// the per-epoch mean losses.
#[pyfunction]
#[pyo3(signature = (ds, *, epochs=30, batch_size=1024, learning_rate=1e-3, l2=1e-5,
                    negatives=1, embed_dim=64, fixed_dim=43, layers=3, hops=3,
                    dropout=0.1, leaky_slope=0.2, seed=42))]
#[allow(clippy::too_many_arguments)]
fn train_model(
    ds: &Dataset,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    l2: f64,
    negatives: usize,
    embed_dim: usize,
    fixed_dim: usize,
    layers: usize,
    hops: usize,
    dropout: f64,
    leaky_slope: f64,
    seed: u64,
) -> PyResult<(Model, Vec<f64>)> {
    let model_cfg = ModelConfig {
        embed_dim,
        fixed_dim,
        num_layers: layers,
        max_hops: hops,
        layer_dims: vec![embed_dim; layers],
        dropout: vec![dropout; layers],
        leaky_slope,
        seed,
    };
    model_cfg.validate().map_err(to_py_err)?;
    let train_cfg = TrainConfig {
        learning_rate,
        batch_size,
        epochs,
        l2_weight: l2,
        negatives_per_positive: negatives,
        seed,
        ..TrainConfig::default()
    };
    let result = train::fit(&ds.inner, &model_cfg, &train_cfg, None).map_err(|e| match e {
        train::FitError::Core(c) => to_py_err(c),
        diverged => PyRuntimeError::new_err(diverged.to_string()),
    })?;
    let losses = result.log.iter().map(|s| s.mean_loss).collect();
    Ok((Model { state: result.state }, losses))
}

#[pymodule]
fn cldd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
