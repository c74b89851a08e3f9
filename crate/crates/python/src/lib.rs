//! Python bindings: data generation, the pipeline commands, metrics, focal
//! loss, gradient checks, checkpoints and seq2seq decoding.

use std::path::PathBuf;

use macnet::cli::{self, Outcome, Settings};
use macnet::data::Vocab;
use macnet::metrics;
use macnet::seq2seq::{self, DecodeMode, Seq2SeqConfig, Seq2SeqModel};
use macnet::transfer::{self, FreezePolicy, ModelKind, CONFIG_KEY};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};

create_exception!(macnet_py, MacnetError, PyException);

fn to_py(e: macnet::Error) -> PyErr {
    MacnetError::new_err(e.to_string())
}

/// Python values as setting strings; booleans are spelled the Rust way.
fn settings_layer(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<(String, String)>> {
    let Some(kwargs) = kwargs else {
        return Ok(Vec::new());
    };
    kwargs
        .iter()
        .map(|(k, v)| {
            let value = if let Ok(b) = v.cast::<PyBool>() {
                b.is_true().to_string()
            } else {
                v.str()?.to_string()
            };
            Ok((k.extract::<String>()?, value))
        })
        .collect()
}

fn resolve(command: &str, pairs: Vec<(String, String)>, force: bool) -> macnet::Result<Settings> {
    Settings::resolve(command, &[pairs.into_iter().collect()], force)
}

/// Runs a pipeline command with keyword settings; returns False only when
/// gradient checks fail.
#[pyfunction]
#[pyo3(signature = (command, force = false, **settings))]
fn run(py: Python<'_>, command: &str, force: bool, settings: Option<&Bound<'_, PyDict>>) -> PyResult<bool> {
    let s = resolve(command, settings_layer(settings)?, force).map_err(to_py)?;
    let outcome = py.detach(|| cli::run_settings(&s)).map_err(to_py)?;
    Ok(outcome == Outcome::Done)
}

/// Writes the synthetic QA and parallel corpora into `out`.
#[pyfunction]
#[pyo3(signature = (out, force = false, **settings))]
fn gen_data(py: Python<'_>, out: PathBuf, force: bool, settings: Option<&Bound<'_, PyDict>>) -> PyResult<()> {
    let mut pairs = settings_layer(settings)?;
    pairs.push(("out".into(), out.display().to_string()));
    run_pairs(py, "gen-data", pairs, force)
}

fn run_pairs(py: Python<'_>, command: &str, pairs: Vec<(String, String)>, force: bool) -> PyResult<()> {
    let s = resolve(command, pairs, force).map_err(to_py)?;
    py.detach(|| cli::run_settings(&s)).map_err(to_py)?;
    Ok(())
}

fn split(lines: &[String]) -> Vec<Vec<String>> {
    metrics::tokenize_lines(lines)
}

/// Corpus BLEU over whitespace-tokenized lines.
#[pyfunction]
#[pyo3(signature = (hypotheses, references, max_n = 4))]
fn bleu(hypotheses: Vec<String>, references: Vec<String>, max_n: usize) -> PyResult<f64> {
    metrics::bleu(&split(&hypotheses), &split(&references), max_n)
        .map(|r| r.score)
        .map_err(to_py)
}

/// ROUGE-1, ROUGE-2 and ROUGE-L F-scores.
#[pyfunction]
fn rouge(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<(f64, f64, f64)> {
    let [r1, r2, rl] = metrics::rouge(&split(&hypotheses), &split(&references)).map_err(to_py)?;
    Ok((r1.score, r2.score, rl.score))
}

/// Exact match and token F1 of one predicted answer.
#[pyfunction]
fn em_f1(prediction: &str, gold: &str) -> (f64, f64) {
    let p: Vec<&str> = prediction.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    metrics::em_f1(&p, &g)
}

/// Summed focal loss of gold-token probabilities.
#[pyfunction]
fn focal_loss(probs: Vec<f64>, gamma: f64) -> PyResult<f64> {
    seq2seq::focal_loss(&probs, gamma).map(|v| v.loss).map_err(to_py)
}

/// Every finite-difference check as `(name, passed, max_rel_err)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, bool, f64)>> {
    let opts = macnet::checks::SuiteOptions { seed, fault: None };
    let report = py.detach(|| macnet::checks::run_all(&opts)).map_err(to_py)?;
    Ok(report
        .reports
        .iter()
        .map(|r| (r.name.clone(), r.passed(), r.max_rel_err))
        .collect())
}

/// A named-tensor checkpoint with JSON metadata.
#[pyclass(name = "Checkpoint", module = "macnet_py", frozen)]
struct PyCheckpoint {
    inner: transfer::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: transfer::load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        transfer::save_checkpoint(&path, &self.inner).map_err(to_py)?;
        Ok(())
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }

    fn names(&self) -> Vec<String> {
        self.inner.params.iter().map(|(n, _)| n.to_string()).collect()
    }

    fn shape(&self, name: &str) -> PyResult<Vec<usize>> {
        Ok(self.param(name)?.value.shape().to_vec())
    }

    /// Row-major values of one tensor.
    fn values(&self, name: &str) -> PyResult<Vec<f32>> {
        Ok(self.param(name)?.value.data().to_vec())
    }

    fn frozen(&self, name: &str) -> PyResult<bool> {
        Ok(self.param(name)?.frozen)
    }

    fn metadata_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.metadata).map_err(|e| MacnetError::new_err(e.to_string()))
    }

    /// The transplantable encoder and modeling-layer tensors of an MC
    /// checkpoint, as a bundle checkpoint.
    #[pyo3(signature = (freeze_encoder = false, freeze_modeling = false))]
    fn extract_bundle(&self, freeze_encoder: bool, freeze_modeling: bool) -> PyResult<Self> {
        let freeze = FreezePolicy {
            encoder: freeze_encoder,
            modeling: freeze_modeling,
        };
        let bundle = transfer::extract_bundle(&self.inner, freeze).map_err(to_py)?;
        Ok(PyCheckpoint {
            inner: bundle.to_checkpoint().map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.params.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(kind={}, tensors={})",
            self.inner.kind,
            self.inner.params.len()
        )
    }
}

impl PyCheckpoint {
    fn param(&self, name: &str) -> PyResult<&macnet::params::Param> {
        self.inner
            .params
            .get(name)
            .ok_or_else(|| MacnetError::new_err(format!("no tensor named {name}")))
    }
}

/// A trained seq2seq checkpoint ready for decoding token strings.
#[pyclass(name = "Translator", module = "macnet_py", frozen)]
struct PyTranslator {
    model: Seq2SeqModel,
    params: macnet::params::ParamStore,
    src: Vocab,
    tgt: Vocab,
}

#[pymethods]
impl PyTranslator {
    /// `decode` overrides the stored strategy: "greedy" or "beam:K".
    #[staticmethod]
    #[pyo3(signature = (path, decode = None))]
    fn load(path: PathBuf, decode: Option<&str>) -> PyResult<Self> {
        let ckpt = transfer::load_checkpoint(&path).map_err(to_py)?;
        ckpt.expect_kind(ModelKind::Seq2seq).map_err(to_py)?;
        let mut config: Seq2SeqConfig = ckpt.meta(CONFIG_KEY).map_err(to_py)?;
        if let Some(d) = decode {
            config.decode = d.parse::<DecodeMode>().map_err(to_py)?;
        }
        let vocab = |key| ckpt.meta(key).and_then(Vocab::from_tokens).map_err(to_py);
        Ok(PyTranslator {
            src: vocab(cli::SRC_VOCAB_KEY)?,
            tgt: vocab(cli::TGT_VOCAB_KEY)?,
            model: Seq2SeqModel::new(config).map_err(to_py)?,
            params: ckpt.params,
        })
    }

    #[getter]
    fn mode(&self) -> String {
        self.model.config.macnet.to_string()
    }

    fn translate(&self, py: Python<'_>, sentence: &str) -> PyResult<String> {
        let tokens: Vec<&str> = sentence.split_whitespace().collect();
        let ids = self.src.encode(&tokens);
        let out = py
            .detach(|| seq2seq::decode(&self.model, &self.params, &ids))
            .map_err(to_py)?;
        Ok(self.tgt.decode(&out).join(" "))
    }

    fn __repr__(&self) -> String {
        format!(
            "Translator(mode={}, src_vocab={}, tgt_vocab={})",
            self.model.config.macnet,
            self.src.len(),
            self.tgt.len()
        )
    }
}

#[pymodule]
fn macnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MacnetError", m.py().get_type::<MacnetError>())?;
    m.add("MACNET_MODES", seq2seq::MacnetMode::ALL.map(|x| x.to_string()).to_vec())?;
    m.add("COMMANDS", cli::COMMANDS.map(|(name, _)| name).to_vec())?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyTranslator>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge, m)?)?;
    m.add_function(wrap_pyfunction!(em_f1, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolve_applies_keyword_layer() {
        let s = resolve("gen-data", vec![("pairs_train".into(), "7".into())], false).unwrap();
        assert_eq!(s.get::<usize>("pairs_train").unwrap(), 7);
        assert!(resolve("gen-data", vec![("bogus".into(), "1".into())], false).is_err());
    }

    #[test]
    fn split_is_whitespace_tokenization() {
        assert_eq!(split(&["a  b\tc".into()]), vec![vec!["a", "b", "c"]]);
    }
}
