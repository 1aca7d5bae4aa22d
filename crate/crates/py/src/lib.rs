//! Python bindings. Images cross the boundary as flat CHW float lists plus
//! height and width; values are in `[0, 1]`.

use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{DType, Device};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use uranker::annotation::{Choice, ComparisonSession, SessionSpec, Vote};
use uranker::dataset::{load_dataset as load_manifest, load_images, load_pairs, synth_generate as synth, SynthOptions};
use uranker::metrics::{self, RankVector};
use uranker::ranking::{margin_ranking_loss as hinge, train_uranker, PairOrder, TrainRecipe};
use uranker::runconfig::{apply_overrides, KeyValue};
use uranker::uie::{self, evaluate_uie, train_uie, Nu2Net, Nu2NetConfig, UieLossConfig, UieRecipe};
use uranker::uranker::{URanker, URankerConfig};
use uranker::ImageTensor;

create_exception!(uranker_py, URankerError, PyException);

trait OrPyErr<T> {
    fn py(self) -> PyResult<T>;
}

impl<T, E: Into<uranker::Error>> OrPyErr<T> for Result<T, E> {
    fn py(self) -> PyResult<T> {
        self.map_err(|e| {
            let e: uranker::Error = e.into();
            URankerError::new_err(format!("{}: {e}", e.kind()))
        })
    }
}

fn image(data: Vec<f32>, height: usize, width: usize) -> PyResult<ImageTensor> {
    ImageTensor::new(height, width, data).py()
}

fn sorted_overrides(overrides: Option<HashMap<String, String>>) -> Vec<(String, String)> {
    let mut v: Vec<_> = overrides.unwrap_or_default().into_iter().collect();
    v.sort();
    v
}

fn apply(overrides: &[(String, String)], targets: &mut [&mut dyn KeyValue]) -> PyResult<()> {
    apply_overrides(overrides, targets).py()
}

#[pyfunction]
fn srcc(pred: Vec<f64>, ranks: Vec<usize>) -> PyResult<f64> {
    metrics::srcc(&pred, &RankVector::new(ranks).py()?).py()
}

#[pyfunction]
fn krcc(pred: Vec<f64>, ranks: Vec<usize>) -> PyResult<f64> {
    metrics::krcc(&pred, &RankVector::new(ranks).py()?).py()
}

#[pyfunction]
#[pyo3(signature = (a, b, height, width, peak = 1.0))]
fn psnr(a: Vec<f32>, b: Vec<f32>, height: usize, width: usize, peak: f64) -> PyResult<f64> {
    metrics::psnr(&image(a, height, width)?, &image(b, height, width)?, peak).py()
}

#[pyfunction]
fn ssim(a: Vec<f32>, b: Vec<f32>, height: usize, width: usize) -> PyResult<f64> {
    metrics::ssim(&image(a, height, width)?, &image(b, height, width)?).py()
}

/// Hinge loss for a pair; `n_better` says which image is the better one.
#[pyfunction]
#[pyo3(signature = (s_n, s_m, n_better, margin = 0.5))]
fn margin_ranking_loss(s_n: f64, s_m: f64, n_better: bool, margin: f64) -> PyResult<f64> {
    let order = if n_better { PairOrder::NBetter } else { PairOrder::MBetter };
    hinge(s_n, s_m, order, margin).py()
}

/// Returns the channel after the normalization tail and whether it was
/// rescaled.
#[pyfunction]
fn normalize_channel(mut values: Vec<f32>) -> (Vec<f32>, bool) {
    let changed = uie::normalize_channel(&mut values);
    (values, changed)
}

#[pyfunction]
fn load_png(path: PathBuf) -> PyResult<(Vec<f32>, usize, usize)> {
    let img = ImageTensor::load_png(&path).py()?;
    let (h, w) = (img.height(), img.width());
    Ok((img.into_data(), h, w))
}

#[pyfunction]
fn save_png(data: Vec<f32>, height: usize, width: usize, path: PathBuf) -> PyResult<()> {
    image(data, height, width)?.save_png(&path).py()
}

/// Writes a synthetic dataset; returns `(group_id, filenames best first)`.
#[pyfunction]
#[pyo3(signature = (n_groups, k, seed, out, size = 256, pairs = true))]
fn synth_generate(n_groups: usize, k: usize, seed: u64, out: PathBuf, size: usize, pairs: bool) -> PyResult<Vec<(String, Vec<String>)>> {
    let m = synth(n_groups, k, seed, &out, &SynthOptions { size, pairs }).py()?;
    Ok(m.groups.into_iter().map(|g| (g.id, g.images)).collect())
}

#[pyfunction]
fn load_dataset(root: PathBuf) -> PyResult<Vec<(String, Vec<String>)>> {
    let m = load_manifest(&root).py()?;
    Ok(m.groups.into_iter().map(|g| (g.id, g.images)).collect())
}

#[pyclass(unsendable)]
struct Ranker {
    model: URanker,
}

#[pymethods]
impl Ranker {
    /// `preset` is one of default, toy, tiny; `overrides` holds model keys.
    #[new]
    #[pyo3(signature = (preset = "toy", seed = 0, overrides = None))]
    fn new(preset: &str, seed: u64, overrides: Option<HashMap<String, String>>) -> PyResult<Self> {
        let mut cfg = match preset {
            "default" => URankerConfig::default(),
            "toy" => URankerConfig::toy(),
            "tiny" => URankerConfig::tiny(),
            _ => return Err(URankerError::new_err(format!("config: unknown preset {preset:?}"))),
        };
        apply(&sorted_overrides(overrides), &mut [&mut cfg])?;
        Ok(Self {
            model: URanker::new(cfg, seed, DType::F32, &Device::Cpu).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            model: URanker::load(&path, DType::F32, &Device::Cpu).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.save(&path).py()
    }

    fn score(&self, data: Vec<f32>, height: usize, width: usize) -> PyResult<f32> {
        self.model.score(&image(data, height, width)?).py()
    }

    fn score_png(&self, path: PathBuf) -> PyResult<f32> {
        self.model.score(&ImageTensor::load_png(&path).py()?).py()
    }

    fn config(&self) -> HashMap<String, String> {
        self.model.config().to_kv().into_iter().collect()
    }

    /// Trains on every group of a dataset; returns `(initial, final)` loss.
    #[pyo3(signature = (root, overrides = None))]
    fn train(&self, root: PathBuf, overrides: Option<HashMap<String, String>>) -> PyResult<(f64, f64)> {
        let mut recipe = TrainRecipe::default();
        apply(&sorted_overrides(overrides), &mut [&mut recipe])?;
        let m = load_manifest(&root).py()?;
        let groups = load_images(&m.root, &m.groups).py()?;
        let r = train_uranker(&self.model, &groups, &recipe, None).py()?;
        Ok((r.initial_loss, r.final_loss))
    }

    /// Mean per-group `(srcc, krcc)` over a dataset.
    fn evaluate(&self, root: PathBuf) -> PyResult<(f64, f64)> {
        let m = load_manifest(&root).py()?;
        let groups = load_images(&m.root, &m.groups).py()?;
        let r = uranker::ranking::evaluate_ranker(&self.model, &groups).py()?;
        Ok((r.srcc, r.krcc))
    }
}

#[pyclass(unsendable)]
struct Enhancer {
    net: Nu2Net,
}

#[pymethods]
impl Enhancer {
    #[new]
    #[pyo3(signature = (preset = "toy", seed = 0, overrides = None))]
    fn new(preset: &str, seed: u64, overrides: Option<HashMap<String, String>>) -> PyResult<Self> {
        let mut cfg = match preset {
            "default" => Nu2NetConfig::default(),
            "toy" => Nu2NetConfig::toy(),
            _ => return Err(URankerError::new_err(format!("config: unknown preset {preset:?}"))),
        };
        apply(&sorted_overrides(overrides), &mut [&mut cfg])?;
        Ok(Self {
            net: Nu2Net::new(cfg, seed, DType::F32, &Device::Cpu).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            net: Nu2Net::load(&path, DType::F32, &Device::Cpu).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.net.save(&path).py()
    }

    fn enhance(&self, data: Vec<f32>, height: usize, width: usize) -> PyResult<Vec<f32>> {
        Ok(self.net.enhance(&image(data, height, width)?).py()?.into_data())
    }

    fn enhance_png(&self, input: PathBuf, out: PathBuf) -> PyResult<()> {
        let img = ImageTensor::load_png(&input).py()?;
        self.net.enhance(&img).py()?.save_png(&out).py()
    }

    /// Trains on the dataset's pairs; returns `(initial, final)` mean
    /// absolute error.
    #[pyo3(signature = (root, overrides = None, ranker = None))]
    fn train(&self, root: PathBuf, overrides: Option<HashMap<String, String>>, ranker: Option<PyRef<'_, Ranker>>) -> PyResult<(f64, f64)> {
        let mut recipe = UieRecipe::default();
        let mut loss = UieLossConfig::default();
        apply(&sorted_overrides(overrides), &mut [&mut recipe, &mut loss])?;
        let m = load_manifest(&root).py()?;
        let pairs = load_pairs(&m).py()?;
        let r = train_uie(&self.net, &pairs, &recipe, &loss, ranker.as_ref().map(|r| &r.model), None).py()?;
        Ok((r.initial_mae, r.final_mae))
    }

    /// Mean `(psnr, ssim)` over the dataset's pairs.
    fn evaluate(&self, root: PathBuf) -> PyResult<(f64, f64)> {
        let m = load_manifest(&root).py()?;
        let r = evaluate_uie(&self.net, &load_pairs(&m).py()?).py()?;
        Ok((r.psnr, r.ssim))
    }
}

/// Majority-vote bubble sort session held in memory.
#[pyclass(unsendable)]
struct Session {
    inner: ComparisonSession,
}

#[pymethods]
impl Session {
    #[new]
    #[pyo3(signature = (images, voters, seed = 0, tiebreak = None))]
    fn new(images: Vec<String>, voters: Vec<String>, seed: u64, tiebreak: Option<String>) -> PyResult<Self> {
        let spec = SessionSpec { images, voters, tiebreak, seed };
        Ok(Self {
            inner: ComparisonSession::create("py", spec).py()?,
        })
    }

    fn current_pair(&self) -> Option<(String, String)> {
        self.inner.current_pair().map(|(l, r)| (l.to_string(), r.to_string()))
    }

    /// `choice` is "left" or "right". Returns whether the pair was swapped
    /// when this vote resolved it, otherwise None.
    fn vote(&mut self, voter: String, choice: &str) -> PyResult<Option<bool>> {
        let choice = match choice {
            "left" => Choice::Left,
            "right" => Choice::Right,
            _ => return Err(URankerError::new_err(format!("invalid_input: choice {choice:?}"))),
        };
        Ok(self.inner.submit_vote(&Vote::new(voter, choice)).py()?.map(|d| d.swapped))
    }

    fn result(&self) -> PyResult<Vec<String>> {
        self.inner.result().py()
    }

    fn arrangement(&self) -> Vec<String> {
        self.inner.arrangement().to_vec()
    }

    #[getter]
    fn is_complete(&self) -> bool {
        self.inner.is_complete()
    }

    #[getter]
    fn comparisons(&self) -> usize {
        self.inner.comparisons()
    }

    #[getter]
    fn pass_no(&self) -> usize {
        self.inner.pass_no()
    }

    #[getter]
    fn cursor(&self) -> usize {
        self.inner.cursor()
    }
}

/// Adds every binding to `m`; shared by the extension entry point and tests.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("URankerError", m.py().get_type::<URankerError>())?;
    m.add("TAIL_DELTA", uie::TAIL_DELTA)?;
    m.add_function(wrap_pyfunction!(srcc, m)?)?;
    m.add_function(wrap_pyfunction!(krcc, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(margin_ranking_loss, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_channel, m)?)?;
    m.add_function(wrap_pyfunction!(load_png, m)?)?;
    m.add_function(wrap_pyfunction!(save_png, m)?)?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_class::<Ranker>()?;
    m.add_class::<Enhancer>()?;
    m.add_class::<Session>()?;
    Ok(())
}

#[pymodule]
fn uranker_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
