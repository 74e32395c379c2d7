//! Python bindings: datasets, training, checkpoints, generation, metrics and
//! retrieval.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vismem::checkpoint::{Checkpoint, CheckpointMeta};
use vismem::corpus::{self, Split};
use vismem::eval;
use vismem::inference::{
    self, Direction, GenConfig, LengthHistogram, Protocol, RetrievalOptions, ScoreMode, ScoreTables,
};
use vismem::model::{ModelDims, ModelParams, Variant};
use vismem::numkit::{derive_seed, SeededRng};
use vismem::training::{self, TrainConfig};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(err)
}

/// Captioned examples with a classed vocabulary.
#[pyclass(name = "Dataset", module = "vismem_py")]
struct PyDataset {
    inner: corpus::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic binary-attribute scenes with templated captions.
    #[staticmethod]
    #[pyo3(signature = (attrs, n, seed = 1))]
    fn synthetic(attrs: usize, n: usize, seed: u64) -> PyResult<Self> {
        let inner = corpus::generate_synthetic(attrs, n, &mut SeededRng::new(seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, class_count = None))]
    fn load(path: PathBuf, class_count: Option<usize>) -> PyResult<Self> {
        let inner = corpus::load_dataset(&path, None, class_count).map_err(err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        corpus::write_dataset(&path, &self.inner).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.examples.len()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim
    }

    /// Example ids in `split` ("train", "valid" or "test").
    fn ids(&self, split: &str) -> PyResult<Vec<String>> {
        let split: Split = parse(split)?;
        Ok(self.inner.split(split).map(|e| e.id.clone()).collect())
    }

    fn features(&self, id: &str) -> PyResult<Vec<f64>> {
        Ok(self.example(id)?.features.values().to_vec())
    }

    fn captions(&self, id: &str) -> PyResult<Vec<String>> {
        Ok(self
            .example(id)?
            .captions
            .iter()
            .map(|c| c.tokens.join(" "))
            .collect())
    }
}

impl PyDataset {
    fn example(&self, id: &str) -> PyResult<&corpus::CaptionedExample> {
        self.inner
            .example(id)
            .ok_or_else(|| err(format!("no example with id {id}")))
    }

    fn examples(&self, split: &str) -> PyResult<Vec<&corpus::CaptionedExample>> {
        let v = self.inner.split_vec(parse(split)?);
        if v.is_empty() {
            return Err(err(format!("split {split} is empty")));
        }
        Ok(v)
    }
}

/// A trained model together with its vocabulary.
#[pyclass(name = "Model", module = "vismem_py")]
struct PyModel {
    ck: Checkpoint,
    /// Per-epoch `(train_ppl, valid_ppl, lr)` when trained in this process.
    history: Vec<(f64, f64, f64)>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (
        data, variant = "full", s_dim = 32, u_dim = 32, epochs = 15, learning_rate = 0.1,
        lambda_recon = 0.5, bptt_unroll = 5, maxent_order = 3, maxent_hash_bits = 16, seed = 1
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        data: &PyDataset,
        variant: &str,
        s_dim: usize,
        u_dim: usize,
        epochs: usize,
        learning_rate: f64,
        lambda_recon: f64,
        bptt_unroll: usize,
        maxent_order: usize,
        maxent_hash_bits: u32,
        seed: u64,
    ) -> PyResult<Self> {
        let data = &data.inner;
        let variant: Variant = parse(variant)?;
        if maxent_hash_bits > 40 {
            return Err(err("maxent_hash_bits must be at most 40"));
        }
        let dims = ModelDims {
            s_dim,
            u_dim,
            maxent_order,
            maxent_hash_size: 1usize << maxent_hash_bits,
            ..ModelDims::new(data.vocab.classes(), data.feature_dim, variant)
        };
        dims.validate().map_err(err)?;
        let cfg = TrainConfig {
            learning_rate,
            lambda_recon,
            bptt_unroll,
            max_epochs: epochs,
            seed: derive_seed(seed, 3),
            ..TrainConfig::default()
        };
        cfg.validate().map_err(err)?;
        let init_seed = derive_seed(seed, 2);
        let (params, hist) = py
            .detach(|| {
                let p =
                    ModelParams::init(dims, data.vocab.classes(), &mut SeededRng::new(init_seed))?;
                training::train(p, data, &cfg)
            })
            .map_err(err)?;
        let meta = CheckpointMeta {
            lambda_recon,
            seeds: [
                ("run".to_string(), seed),
                ("init".to_string(), init_seed),
                ("shuffle".to_string(), cfg.seed),
            ]
            .into_iter()
            .collect(),
            length_counts: data.train_length_counts(),
        };
        let ck = Checkpoint::new(params, data.vocab.clone(), meta).map_err(err)?;
        let history = hist
            .epochs
            .iter()
            .map(|e| (e.train_ppl, e.valid_ppl, e.lr))
            .collect();
        Ok(Self { ck, history })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            ck: Checkpoint::load(&path).map_err(err)?,
            history: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.ck.save(&path).map_err(err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.ck.params.dims().variant.to_string()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.ck.params.parameter_count()
    }

    #[getter]
    fn history(&self) -> Vec<(f64, f64, f64)> {
        self.history.clone()
    }

    #[pyo3(signature = (data, split = "test"))]
    fn perplexity(&self, py: Python<'_>, data: &PyDataset, split: &str) -> PyResult<f64> {
        let data = self.aligned(data)?;
        let ex = data.examples(split)?;
        py.detach(|| eval::perplexity_of(&self.ck.params, &ex))
            .map_err(err)
    }

    /// `ln P(caption | features)` for a whitespace-tokenized caption.
    fn log_likelihood(&self, features: Vec<f64>, caption: &str) -> PyResult<f64> {
        let tokens = corpus::tokenize(caption);
        let sent = corpus::encode(&tokens, &self.ck.vocab);
        inference::log_likelihood(&self.ck.params, &features, &sent).map_err(err)
    }

    /// One caption per example in `split`, as `(id, caption, score)`.
    #[pyo3(signature = (data, split = "test", candidates = 100, seed = 1))]
    fn generate(
        &self,
        py: Python<'_>,
        data: &PyDataset,
        split: &str,
        candidates: usize,
        seed: u64,
    ) -> PyResult<Vec<(String, String, f64)>> {
        let data = self.aligned(data)?;
        let ex = data.examples(split)?;
        let cfg = GenConfig {
            candidate_count: candidates,
            lambda_recon: self.ck.meta.lambda_recon,
            seed: derive_seed(seed, 4),
        };
        let hist = LengthHistogram::from_counts(&self.ck.meta.length_counts).map_err(err)?;
        let feats: Vec<&[f64]> = ex.iter().map(|e| e.features.values()).collect();
        let out = py
            .detach(|| {
                inference::generate_all(&self.ck.params, &self.ck.vocab, &feats, &hist, &cfg)
            })
            .map_err(err)?;
        Ok(ex
            .iter()
            .zip(out)
            .map(|(e, g)| (e.id.clone(), g.sentence.tokens.join(" "), g.score))
            .collect())
    }

    /// Retrieval over `split`; `mode` is "t", "i" or "t+i", `direction` is
    /// "image" or "sentence".
    #[pyo3(signature = (data, split = "test", mode = "t+i", direction = "image", concatenated = false))]
    fn retrieve<'py>(
        &self,
        py: Python<'py>,
        data: &PyDataset,
        split: &str,
        mode: &str,
        direction: &str,
        concatenated: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mode: ScoreMode = parse(mode)?;
        let direction = match direction {
            "image" => Direction::Image,
            "sentence" => Direction::Sentence,
            other => return Err(err(format!("unknown direction {other:?}"))),
        };
        let protocol = if concatenated {
            Protocol::Concatenated
        } else {
            Protocol::PerSentence
        };
        let data = self.aligned(data)?;
        let ex = data.examples(split)?;
        let res = py
            .detach(|| {
                let tables = ScoreTables::compute(&self.ck.params, &ex, protocol)?;
                inference::rank_tables(&tables, &RetrievalOptions::new(mode, direction))
            })
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("r_at_1", res.recall_at_1)?;
        d.set_item("r_at_5", res.recall_at_5)?;
        d.set_item("r_at_10", res.recall_at_10)?;
        d.set_item("median_rank", res.median_rank)?;
        d.set_item("mean_rank", res.mean_rank)?;
        d.set_item("ranks", res.ranks)?;
        Ok(d)
    }

    /// Mean per-step change of `s` and `u` over the first caption of `id`.
    fn stability(&self, data: &PyDataset, id: &str) -> PyResult<(f64, f64)> {
        let data = self.aligned(data)?;
        let e = data.example(id)?;
        let t = inference::activation_trace(
            &self.ck.params,
            &self.ck.vocab,
            e.features.values(),
            &e.captions[0],
        )
        .map_err(err)?;
        Ok((
            inference::mean(&t.s_stability()),
            inference::mean(&t.u_stability()),
        ))
    }
}

impl PyModel {
    /// Re-encodes `data` with this model's vocabulary.
    fn aligned(&self, data: &PyDataset) -> PyResult<PyDataset> {
        let inner = data.inner.clone().with_vocab(self.ck.vocab.clone());
        let dims = self.ck.params.dims();
        if dims.uses_visual() && inner.feature_dim != dims.v_dim {
            return Err(err(format!(
                "dataset features have dim {}, model expects {}",
                inner.feature_dim, dims.v_dim
            )));
        }
        Ok(PyDataset { inner })
    }
}

/// Sentence BLEU of `candidate` against `references`, both whitespace-split.
#[pyfunction]
#[pyo3(signature = (candidate, references, max_order = 4))]
fn bleu(candidate: &str, references: Vec<String>, max_order: usize) -> PyResult<f64> {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<Vec<&str>> = references
        .iter()
        .map(|s| s.split_whitespace().collect())
        .collect();
    eval::bleu(&c, &r, max_order).map_err(err)
}

/// Largest relative error between analytic and finite-difference gradients
/// on a small random model.
#[pyfunction]
#[pyo3(signature = (variant = "full", seed = 1, lambda_recon = 0.5))]
fn gradcheck(variant: &str, seed: u64, lambda_recon: f64) -> PyResult<f64> {
    let s = training::small_gradcheck_setup(parse(variant)?, seed).map_err(err)?;
    let r = training::grad_check(&s.params, &s.features, &s.sentence, lambda_recon, 1e-5)
        .map_err(err)?;
    Ok(r.max_rel_error)
}

#[pymodule]
fn vismem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
