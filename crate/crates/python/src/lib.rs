//! Python bindings: hiding transforms, CAM localization, metrics, synthetic
//! data, and training/evaluation of CAM classifiers.
//!
//! Tensors cross the boundary as nested Python lists.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hideseek::cam::{self, BBox, Cam, Interval};
use hideseek::eval::{self, Detection, GroundTruth, IouCriterion};
use hideseek::hiding::{self, HideSpec};
use hideseek::numerics::{Checkpoint, Tensor};
use hideseek::pipeline::{self, Dataset, EvalSettings, Evaluation, ExperimentConfig, TrainedModel};
use hideseek::synth::{self, SyntheticImageSpec, SyntheticSequenceSpec};
use hideseek::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (Error::Shape(_)
        | Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::Empty(_)
        | Error::Format { .. }) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tensor3(v: Vec<Vec<Vec<f64>>>) -> PyResult<Tensor> {
    let c = v.len();
    let h = v.first().map_or(0, |p| p.len());
    let w = v.first().and_then(|p| p.first()).map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(c * h * w);
    for plane in &v {
        if plane.len() != h {
            return Err(PyValueError::new_err("ragged nested list"));
        }
        for row in plane {
            if row.len() != w {
                return Err(PyValueError::new_err("ragged nested list"));
            }
            data.extend_from_slice(row);
        }
    }
    Tensor::new(vec![c, h, w], data).map_err(to_py)
}

fn tensor2(v: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let h = v.len();
    let w = v.first().map_or(0, |r| r.len());
    if v.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged nested list"));
    }
    Tensor::new(vec![h, w], v.concat()).map_err(to_py)
}

fn nested3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    t.data()
        .chunks(h * w)
        .map(|p| p.chunks(w).map(|r| r.to_vec()).collect())
        .collect()
}

fn nested2(t: &Tensor) -> Vec<Vec<f64>> {
    match *t.shape() {
        [_, w] => t.data().chunks(w).map(|r| r.to_vec()).collect(),
        _ => vec![t.data().to_vec()],
    }
}

type BoxTuple = (f64, f64, f64, f64);

fn bbox(b: BoxTuple) -> BBox {
    BBox::new(b.0, b.1, b.2, b.3)
}

/// CAM of one class from M x H x W feature maps and that class's weight row.
#[pyfunction]
fn compute_cam(features: Vec<Vec<Vec<f64>>>, weights: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let f = tensor3(features)?;
    let cam = cam::compute_cam(&f, &weights, 0, 0).map_err(to_py)?;
    Ok(nested2(&cam.values))
}

/// Tight box (x0, y0, x1, y1, score) around the largest above-threshold
/// component, or None when nothing is localized.
#[pyfunction]
#[pyo3(signature = (cam, fraction, scale_y=1.0, scale_x=1.0))]
fn localize_bbox(cam: Vec<Vec<f64>>, fraction: f64, scale_y: f64, scale_x: f64) -> PyResult<Option<(f64, f64, f64, f64, f64)>> {
    let mut c = Cam::new(tensor2(cam)?, 0, 0);
    c.scale_y = scale_y;
    c.scale_x = scale_x;
    let b = cam::localize_bbox(&c, fraction).map_err(to_py)?;
    Ok(b.map(|b| (b.x0, b.y0, b.x1, b.y1, b.score.unwrap_or(f64::NAN))))
}

/// Maximal above-threshold runs as (start, end, score).
#[pyfunction]
fn extract_temporal_segments(cam: Vec<f64>, fraction: f64) -> PyResult<Vec<(f64, f64, f64)>> {
    let n = cam.len();
    let c = Cam::new(Tensor::new(vec![n], cam).map_err(to_py)?, 0, 0);
    let segs = cam::extract_temporal_segments(&c, fraction).map_err(to_py)?;
    Ok(segs.into_iter().map(|i| (i.start, i.end, i.score)).collect())
}

/// 8-connected labels (0 = background, components numbered in raster order).
#[pyfunction]
fn connected_components(mask: Vec<Vec<bool>>) -> PyResult<Vec<Vec<u32>>> {
    let h = mask.len();
    let w = mask.first().map_or(0, |r| r.len());
    let m = cam::BinaryMask::new(h, w, mask.concat()).map_err(to_py)?;
    let l = cam::connected_components(&m);
    Ok(l.labels.chunks(w.max(1)).map(|r| r.to_vec()).collect())
}

#[pyfunction]
fn iou_box(a: BoxTuple, b: BoxTuple) -> f64 {
    eval::iou_box(&bbox(a), &bbox(b))
}

#[pyfunction]
fn iou_interval(a: (f64, f64), b: (f64, f64)) -> f64 {
    eval::iou_interval(&Interval::new(a.0, a.1), &Interval::new(b.0, b.1))
}

/// AP of (video, start, end, score) detections against (video, start, end)
/// ground truth.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, theta, strict=false))]
fn average_precision(detections: Vec<(u64, f64, f64, f64)>, ground_truth: Vec<(u64, f64, f64)>, theta: f64, strict: bool) -> f64 {
    let dets: Vec<Detection> = detections
        .into_iter()
        .map(|(v, s, e, sc)| Detection {
            video_id: v,
            interval: Interval::new(s, e).with_score(sc),
        })
        .collect();
    let gts: Vec<GroundTruth> = ground_truth
        .into_iter()
        .map(|(v, s, e)| GroundTruth {
            video_id: v,
            interval: Interval::new(s, e),
        })
        .collect();
    let crit = if strict { IouCriterion::Strict } else { IouCriterion::Inclusive };
    eval::average_precision(&dets, &gts, theta, crit)
}

/// Hides grid cells of a C x H x W image; returns (image, cell grid of hidden flags).
#[pyfunction]
#[pyo3(signature = (image, patch_size, hide_prob, fill, seed, epoch=0, sample_id=0))]
fn hide_patches(
    image: Vec<Vec<Vec<f64>>>,
    patch_size: usize,
    hide_prob: f64,
    fill: Vec<f64>,
    seed: u64,
    epoch: u64,
    sample_id: u64,
) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<Vec<bool>>)> {
    let t = tensor3(image)?;
    let spec = HideSpec::new(patch_size, hide_prob, fill, seed);
    let (out, mask) = hiding::hide_patches_image(&t, &spec, spec.mask_seed(sample_id, epoch)).map_err(to_py)?;
    let grid = mask.cells.chunks(mask.grid_w).map(|r| r.to_vec()).collect();
    Ok((nested3(&out), grid))
}

#[pyfunction]
fn dataset_mean(images: Vec<Vec<Vec<Vec<f64>>>>) -> PyResult<Vec<f64>> {
    let ts = images.into_iter().map(tensor3).collect::<PyResult<Vec<_>>>()?;
    hiding::compute_dataset_mean(ts.iter()).map_err(to_py)
}

/// A generated or loaded dataset.
#[pyclass(name = "Dataset", module = "hideseek_py")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic images; `spec` is an optional JSON object overriding defaults.
    #[staticmethod]
    #[pyo3(signature = (n_train, n_val, seed=0, spec=None))]
    fn images(n_train: usize, n_val: usize, seed: u64, spec: Option<&str>) -> PyResult<Self> {
        let spec: SyntheticImageSpec = match spec {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => SyntheticImageSpec::default(),
        };
        let d = synth::generate_image_dataset(&spec, n_train, n_val, seed).map_err(to_py)?;
        Ok(Self {
            inner: Dataset::Images(d),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (n_train, n_val, seed=0, spec=None))]
    fn sequences(n_train: usize, n_val: usize, seed: u64, spec: Option<&str>) -> PyResult<Self> {
        let spec: SyntheticSequenceSpec = match spec {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => SyntheticSequenceSpec::default(),
        };
        let d = synth::generate_sequence_dataset(&spec, n_train, n_val, seed).map_err(to_py)?;
        Ok(Self {
            inner: Dataset::Sequences(d),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let r = pipeline::DatasetRef::Dir { path: path.into() };
        Ok(Self {
            inner: r.load().map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let p = std::path::Path::new(path);
        match &self.inner {
            Dataset::Images(d) => d.save(p),
            Dataset::Sequences(d) => d.save(p),
        }
        .map_err(to_py)
    }

    #[getter]
    fn task(&self) -> &'static str {
        match self.inner.task() {
            pipeline::Task::Image => "image",
            pipeline::Task::Temporal => "temporal",
        }
    }

    fn split_sizes(&self) -> (usize, usize) {
        (self.inner.train_inputs().len(), self.inner.val_inputs().len())
    }

    /// One sample as a dict: id, label, input (nested lists), and boxes or intervals.
    #[pyo3(signature = (index, split="train"))]
    fn sample<'py>(&self, py: Python<'py>, index: usize, split: &str) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        let oob = || pyo3::exceptions::PyIndexError::new_err("sample index out of range");
        match &self.inner {
            Dataset::Images(ds) => {
                let s = match split {
                    "train" => ds.train.get(index),
                    "val" => ds.val.get(index),
                    _ => return Err(PyValueError::new_err("split must be 'train' or 'val'")),
                }
                .ok_or_else(oob)?;
                d.set_item("id", s.id)?;
                d.set_item("label", s.label)?;
                d.set_item("input", nested3(&s.image))?;
                let boxes: Vec<BoxTuple> = s.gt_boxes.iter().map(|b| (b.x0, b.y0, b.x1, b.y1)).collect();
                d.set_item("boxes", boxes)?;
            }
            Dataset::Sequences(ds) => {
                let s = match split {
                    "train" => ds.train.get(index),
                    "val" => ds.val.get(index),
                    _ => return Err(PyValueError::new_err("split must be 'train' or 'val'")),
                }
                .ok_or_else(oob)?;
                d.set_item("id", s.id)?;
                d.set_item("label", s.label)?;
                d.set_item("input", nested3(&s.features))?;
                let iv: Vec<(f64, f64)> = s.instances.iter().map(|i| (i.start, i.end)).collect();
                d.set_item("intervals", iv)?;
            }
        }
        Ok(d)
    }
}

/// A trained network with its input pipeline.
#[pyclass(name = "Model", module = "hideseek_py")]
struct PyModel {
    model: TrainedModel,
    config: ExperimentConfig,
    checkpoint: Checkpoint,
    log: Vec<pipeline::EpochLog>,
}

fn evaluation_dict<'py>(py: Python<'py>, e: &Evaluation) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    match e {
        Evaluation::Image { report, .. } => {
            d.set_item("task", "image")?;
            d.set_item("gt_known_loc", report.overall.gt_known_loc)?;
            d.set_item("top1_loc", report.overall.top1_loc)?;
            d.set_item("top1_clas", report.overall.top1_clas)?;
        }
        Evaluation::Temporal { report, .. } => {
            d.set_item("task", "temporal")?;
            d.set_item("thresholds", report.thresholds.clone())?;
            d.set_item("map", report.map.clone())?;
        }
    }
    Ok(d)
}

#[pymethods]
impl PyModel {
    /// Trains on `dataset` with an experiment config given as JSON.
    #[staticmethod]
    #[pyo3(signature = (config_json, dataset, seed=0))]
    fn train(py: Python<'_>, config_json: &str, dataset: &PyDataset, seed: u64) -> PyResult<Self> {
        let config = ExperimentConfig::from_json(config_json).map_err(to_py)?;
        let data = &dataset.inner;
        let outcome = py
            .detach(|| pipeline::train(&config, data, seed, None))
            .map_err(to_py)?;
        Ok(Self {
            model: TrainedModel::from_outcome(&outcome),
            config,
            checkpoint: outcome.checkpoint,
            log: outcome.log,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(std::path::Path::new(path)).map_err(to_py)?;
        let (model, config) = TrainedModel::from_checkpoint(&ck).map_err(to_py)?;
        Ok(Self {
            model,
            config,
            checkpoint: ck,
            log: vec![],
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.checkpoint.save(std::path::Path::new(path)).map_err(to_py)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    fn checkpoint_hash(&self) -> PyResult<String> {
        self.checkpoint.hash().map_err(to_py)
    }

    /// Per-epoch (train_loss, val_loss, val_accuracy).
    fn training_log(&self) -> Vec<(f64, f64, f64)> {
        self.log
            .iter()
            .map(|e| (e.train_loss, e.val_loss, e.val_accuracy))
            .collect()
    }

    fn predict(&self, input: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
        let t = tensor3(input)?;
        let p = pipeline::predict(std::slice::from_ref(&self.model), &t, 0, None).map_err(to_py)?;
        Ok(p.probs)
    }

    /// CAM of `class` (feature-map resolution).
    fn cam(&self, input: Vec<Vec<Vec<f64>>>, class_id: usize) -> PyResult<Vec<Vec<f64>>> {
        let t = tensor3(input)?;
        let models = std::slice::from_ref(&self.model);
        let p = pipeline::predict(models, &t, 0, None).map_err(to_py)?;
        Ok(nested2(&p.cam(models, class_id).map_err(to_py)?.values))
    }

    /// Metrics on the validation split of `dataset`.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        let settings = EvalSettings::from_config(&self.config, &dataset.inner);
        let models = std::slice::from_ref(&self.model);
        let data = &dataset.inner;
        let e = py
            .detach(|| pipeline::evaluate(models, data, &settings, None))
            .map_err(to_py)?;
        evaluation_dict(py, &e)
    }
}

/// Largest relative finite-difference error of the analytic gradients of a
/// small random network (config JSON) on a random input.
#[pyfunction]
#[pyo3(signature = (network_json, height, width, seed=0, epsilon=1e-6, samples=8))]
fn gradient_check(network_json: &str, height: usize, width: usize, seed: u64, epsilon: f64, samples: usize) -> PyResult<f64> {
    use hideseek::numerics::{finite_difference_check, ConvNetConfig, ModelParams};
    let cfg: ConvNetConfig = serde_json::from_str(network_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let params = ModelParams::init(&cfg, seed).map_err(to_py)?;
    let input = Tensor::from_fn(&[cfg.in_channels, height, width], |i| ((i as f64 + seed as f64) * 0.731).sin());
    let r = finite_difference_check(&cfg, &params, &input, 0, epsilon, samples, seed).map_err(to_py)?;
    Ok(r.max_rel_error)
}

#[pymodule]
fn hideseek_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(compute_cam, m)?)?;
    m.add_function(wrap_pyfunction!(localize_bbox, m)?)?;
    m.add_function(wrap_pyfunction!(extract_temporal_segments, m)?)?;
    m.add_function(wrap_pyfunction!(connected_components, m)?)?;
    m.add_function(wrap_pyfunction!(iou_box, m)?)?;
    m.add_function(wrap_pyfunction!(iou_interval, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(hide_patches, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_mean, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
