//! Python bindings: corpus and dataset generation, dataset access, metrics,
//! template matching, and model init/train/evaluate/save/load.

use std::path::PathBuf;

use omniseg::eval::{aggregate_report, evaluate_model, predict_siamese, EvalOptions, EvalResult};
use omniseg::glyph_synth::{write_corpus, SynthCorpusConfig};
use omniseg::io::{load_checkpoint, save_checkpoint, DatasetReader, TrainSettings, DEFAULT_SHARD_RECORDS};
use omniseg::model::{init_params, ModelConfig, ModelKind};
use omniseg::omniglot::{load_corpus, make_splits, Corpus, CorpusSplit, SplitName};
use omniseg::raster::Mask;
use omniseg::scene::{generate_range, generate_sample, DatasetSpec, SceneSample};
use omniseg::tensor::ModelParams;
use omniseg::training::{train_baseline, Schedule, TrainOptions};
use omniseg::{eval, template, Error};
use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::CorpusNotFound(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for omniseg::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Rows of 0/1 (any nonzero is set) to a mask.
fn mask_from_rows(rows: &[Vec<u8>]) -> PyResult<Mask> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask rows differ in length"));
    }
    Ok(Mask::from_fn(w, h, |x, y| rows[y][x] != 0))
}

fn mask_to_rows(m: &Mask) -> Vec<Vec<u8>> {
    (0..m.height()).map(|y| (0..m.width()).map(|x| m.get(x, y) as u8).collect()).collect()
}

/// One glyph split (train, validation or one_shot) of a corpus on disk.
#[pyclass(name = "Split", frozen)]
struct PySplit {
    inner: CorpusSplit,
}

#[pymethods]
impl PySplit {
    /// Loads `split` from an Omniglot-layout directory.
    #[new]
    fn new(root: PathBuf, split: &str) -> PyResult<Self> {
        let name: SplitName = split.parse().py()?;
        let (bg, ev) = match name {
            SplitName::OneShot => (Vec::new(), load_corpus(&root, Corpus::Evaluation).py()?),
            _ => (load_corpus(&root, Corpus::Background).py()?, Vec::new()),
        };
        let (train, val, one_shot) = make_splits(&bg, &ev).py()?;
        let inner = match name {
            SplitName::Train => train,
            SplitName::Validation => val,
            SplitName::OneShot => one_shot,
        };
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.inner.name.as_str()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// One cluttered scene with `level` characters.
    fn sample(&self, py: Python<'_>, level: usize, seed: u64) -> PyResult<PySample> {
        let s = py.detach(|| generate_sample(level, &self.inner, seed)).py()?;
        Ok(PySample { inner: s })
    }

    /// Writes `count` samples as a sharded dataset directory.
    #[pyo3(signature = (out, level, count, seed=0, shard_records=DEFAULT_SHARD_RECORDS))]
    fn write_dataset(
        &self,
        py: Python<'_>,
        out: PathBuf,
        level: usize,
        count: u64,
        seed: u64,
        shard_records: u64,
    ) -> PyResult<u64> {
        let spec = DatasetSpec {
            split: self.inner.name,
            level,
            count,
            global_seed: seed,
        };
        py.detach(|| {
            let samples = generate_range(&spec, &self.inner, 0..count)?;
            omniseg::io::write_dataset(&out, &spec, samples.into_iter().map(Ok), shard_records)
        })
        .py()
        .map(|m| m.count)
    }
}

#[pyclass(name = "Sample", frozen)]
struct PySample {
    inner: SceneSample,
}

#[pymethods]
impl PySample {
    /// 32×32×3 RGB bytes, row-major.
    #[getter]
    fn target_image<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.target_image.as_bytes())
    }

    /// 96×96×3 RGB bytes, row-major.
    #[getter]
    fn scene<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.scene.as_bytes())
    }

    /// Ground-truth visible target mask as 96 rows of 0/1.
    #[getter]
    fn seg_map(&self) -> Vec<Vec<u8>> {
        mask_to_rows(&self.inner.seg_map)
    }

    #[getter]
    fn level(&self) -> usize {
        self.inner.level
    }

    #[getter]
    fn target_index(&self) -> usize {
        self.inner.target_index
    }

    #[getter]
    fn sample_seed(&self) -> u64 {
        self.inner.sample_seed
    }

    #[getter]
    fn target_com(&self) -> Option<(f32, f32)> {
        self.inner.target().com
    }

    /// Visible mask of every instance, back to front.
    fn visible_masks(&self) -> Vec<Vec<Vec<u8>>> {
        self.inner.instances.iter().map(|i| mask_to_rows(&i.visible_mask)).collect()
    }

    /// Template-matching pick over the visible instances: (index, is_target).
    fn template_match(&self, py: Python<'_>) -> PyResult<(usize, bool)> {
        py.detach(|| template::classify_scene(&self.inner, template::MatchOptions::default())).py()
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample(level={}, target_index={}, seed={})",
            self.inner.level, self.inner.target_index, self.inner.sample_seed
        )
    }
}

/// Read-only view of a dataset directory.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: DatasetReader,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: DatasetReader::open(&dir).py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len() as usize
    }

    fn __getitem__(&self, index: isize) -> PyResult<PySample> {
        let n = self.inner.len() as isize;
        let i = if index < 0 { index + n } else { index };
        if !(0..n).contains(&i) {
            return Err(PyIndexError::new_err("dataset index out of range"));
        }
        Ok(PySample {
            inner: self.inner.get(i as u64).py()?,
        })
    }

    #[getter]
    fn level(&self) -> usize {
        self.inner.manifest.level
    }

    #[getter]
    fn split(&self) -> &'static str {
        self.inner.manifest.split.as_str()
    }

    /// The manifest as a JSON string.
    fn manifest_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.manifest).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pyclass(name = "EvalResult", frozen)]
struct PyEvalResult {
    inner: EvalResult,
}

#[pymethods]
impl PyEvalResult {
    #[getter]
    fn model(&self) -> &str {
        &self.inner.model
    }

    #[getter]
    fn split(&self) -> &str {
        &self.inner.split
    }

    #[getter]
    fn level(&self) -> usize {
        self.inner.level
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples
    }

    #[getter]
    fn mean_iou(&self) -> Option<f64> {
        self.inner.mean_iou
    }

    #[getter]
    fn localization_accuracy(&self) -> f64 {
        self.inner.localization_accuracy
    }

    /// Per-sample IoUs (None where the model has no mask output).
    fn ious(&self) -> Vec<Option<f64>> {
        self.inner.records.iter().map(|r| r.iou).collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }
}

/// Parameters of one model kind plus the architecture they belong to.
#[pyclass(name = "Model")]
struct PyModel {
    kind: ModelKind,
    config: ModelConfig,
    params: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Fresh parameters. `kind` is one of siamese_unet, masknet,
    /// preseg_discriminator, clutter_discriminator.
    #[new]
    #[pyo3(signature = (kind, widths=None, seed=0))]
    fn new(kind: &str, widths: Option<[usize; 6]>, seed: u64) -> PyResult<Self> {
        let kind: ModelKind = kind.parse().py()?;
        let config = widths.map(ModelConfig::with_widths).unwrap_or_default();
        let params = init_params(kind, &config, seed).py()?;
        Ok(Self { kind, config, params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = load_checkpoint(&path).py()?;
        Ok(Self {
            kind: c.kind,
            config: c.config,
            params: c.params,
        })
    }

    #[pyo3(signature = (path, with_optimizer=true))]
    fn save(&self, path: PathBuf, with_optimizer: bool) -> PyResult<()> {
        save_checkpoint(&path, self.kind, &self.config, &self.params, with_optimizer).py()
    }

    /// Trains a Siamese U-net. `settings` is TOML in the training config
    /// format; unset fields take the published baseline schedule.
    #[staticmethod]
    #[pyo3(signature = (dataset, settings=""))]
    fn train_siamese(py: Python<'_>, dataset: &PyDataset, settings: &str) -> PyResult<(Self, Vec<f64>)> {
        let r = TrainSettings::from_toml(settings).py()?.resolve(Schedule::baseline()).py()?;
        let opts = TrainOptions {
            seed: r.seed,
            max_steps: r.max_steps,
            micro_batch: r.micro_batch,
            ..Default::default()
        };
        let (params, run) = py.detach(|| train_baseline(&r.config, &dataset.inner, &r.schedule, &opts)).py()?;
        let losses = run.metrics.iter().map(|m| m.loss).collect();
        Ok((
            Self {
                kind: ModelKind::SiameseUnet,
                config: r.config,
                params,
            },
            losses,
        ))
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.kind.as_str()
    }

    #[getter]
    fn widths(&self) -> [usize; 6] {
        self.config.widths
    }

    #[getter]
    fn num_values(&self) -> usize {
        self.params.num_values()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.params.names().map(str::to_string).collect()
    }

    /// Siamese U-net foreground probabilities, 96·96 row-major.
    fn predict(&self, py: Python<'_>, sample: &PySample) -> PyResult<Vec<f32>> {
        if self.kind != ModelKind::SiameseUnet {
            return Err(PyValueError::new_err(format!("predict needs siamese_unet, not {}", self.kind)));
        }
        let s = std::slice::from_ref(&sample.inner);
        let mut out = py.detach(|| predict_siamese(&self.params, &self.config, s)).py()?;
        Ok(out.remove(0))
    }

    #[pyo3(signature = (dataset, best_proposal=false, partial_credit=false))]
    fn evaluate(
        &self,
        py: Python<'_>,
        dataset: &PyDataset,
        best_proposal: bool,
        partial_credit: bool,
    ) -> PyResult<PyEvalResult> {
        let opts = EvalOptions {
            best_proposal,
            partial_credit,
            ..Default::default()
        };
        let split = dataset.inner.manifest.split.as_str();
        let inner = py
            .detach(|| evaluate_model(self.kind, &self.params, &self.config, &dataset.inner, split, &opts))
            .py()?;
        Ok(PyEvalResult { inner })
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={}, widths={:?}, values={})", self.kind, self.config.widths, self.params.num_values())
    }
}

/// Writes a synthetic stand-in corpus in the Omniglot layout.
#[pyfunction]
#[pyo3(signature = (out, alphabets=6, characters=12, seed=2018))]
fn synth_corpus(out: PathBuf, alphabets: usize, characters: usize, seed: u64) -> PyResult<()> {
    let cfg = SynthCorpusConfig {
        alphabets,
        characters_per_alphabet: characters,
        seed,
    };
    write_corpus(&out, &cfg).py()
}

/// IoU of `pred >= threshold` (row-major probabilities) against a 0/1 mask.
#[pyfunction]
#[pyo3(signature = (pred, truth, threshold=eval::IOU_THRESHOLD))]
fn iou(pred: Vec<f32>, truth: Vec<Vec<u8>>, threshold: f32) -> PyResult<f64> {
    eval::iou(&pred, &mask_from_rows(&truth)?, threshold).py()
}

#[pyfunction]
#[pyo3(signature = (pred, truth, radius=eval::LOC_RADIUS))]
fn localization_hit(pred: (f64, f64), truth: (f64, f64), radius: f64) -> bool {
    eval::localization_hit(pred, truth, radius)
}

/// Best IoU of two 0/1 masks over all relative offsets.
#[pyfunction]
fn match_score(template: Vec<Vec<u8>>, candidate: Vec<Vec<u8>>) -> PyResult<f64> {
    template::match_score(&mask_from_rows(&template)?, &mask_from_rows(&candidate)?).py()
}

/// Picks the candidate best matching any transformed copy of `target`.
/// Returns (winner index, per-candidate scores).
#[pyfunction]
fn template_classify(py: Python<'_>, target: Vec<Vec<u8>>, candidates: Vec<Vec<Vec<u8>>>) -> PyResult<(usize, Vec<f64>)> {
    let t = mask_from_rows(&target)?;
    let c = candidates.iter().map(|m| mask_from_rows(m)).collect::<PyResult<Vec<_>>>()?;
    let r = py.detach(|| template::template_classify(&t, &c)).py()?;
    Ok((r.winner, r.scores))
}

/// CSV table and JSON-lines plot data for a set of results.
#[pyfunction]
fn report(results: Vec<PyRef<'_, PyEvalResult>>) -> PyResult<(String, String)> {
    let all: Vec<EvalResult> = results.iter().map(|r| r.inner.clone()).collect();
    let rep = aggregate_report(&all).py()?;
    let mut plot = String::new();
    for s in &rep.series {
        plot.push_str(&serde_json::to_string(s).map_err(|e| PyValueError::new_err(e.to_string()))?);
        plot.push('\n');
    }
    Ok((rep.csv, plot))
}

#[pymodule]
fn omniseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySplit>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEvalResult>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(localization_hit, m)?)?;
    m.add_function(wrap_pyfunction!(match_score, m)?)?;
    m.add_function(wrap_pyfunction!(template_classify, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add("IOU_THRESHOLD", eval::IOU_THRESHOLD)?;
    m.add("LOC_RADIUS", eval::LOC_RADIUS)?;
    Ok(())
}
