//! Python bindings: model building, inference, persistence, the accounting
//! queries and the evaluation metrics.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use segdec_core::arch::{
    build_variant, forward_eval, load_model, save_model, storage_cost, ModelSpec, VariantKind,
};
use segdec_core::data::{image_to_input, ByteImage, LabelMap};
use segdec_core::metrics::{argmax_labels, bf_image_score, ConfusionMatrix};
use segdec_core::train::median_frequency_weights as mfw;

fn err(e: segdec_core::Error) -> PyErr {
    match e {
        segdec_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Receptive field of one deepest-layer unit for a conv(k)/pool(2) stack.
#[pyfunction]
fn receptive_field(depth: usize, kernel: usize) -> usize {
    segdec_core::arch::receptive_field(depth, kernel)
}

/// Boundary-F1 tolerance: 0.75% of the image diagonal.
#[pyfunction]
fn default_theta(h: usize, w: usize) -> f64 {
    segdec_core::metrics::default_theta(h, w)
}

/// The eight decoder variant names.
#[pyfunction]
fn variant_names() -> Vec<&'static str> {
    VariantKind::ALL.iter().map(|v| v.name()).collect()
}

/// weight[c] = median(nonzero freqs) / freq[c]; absent classes get 0.
#[pyfunction]
fn median_frequency_weights(freqs: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(mfw(&freqs).map_err(err)?.weights)
}

fn label_map_from(data: Vec<u8>, h: usize, w: usize) -> PyResult<LabelMap> {
    LabelMap::new(h, w, data).map_err(err)
}

/// Boundary-F1 of one image pair; None when the ground truth has no class
/// boundary.
#[pyfunction]
fn bf_score(pred: Vec<u8>, gt: Vec<u8>, h: usize, w: usize, theta: f64) -> PyResult<Option<f64>> {
    let pred = label_map_from(pred, h, w)?;
    let gt = label_map_from(gt, h, w)?;
    bf_image_score(&pred, &gt, theta).map_err(err)
}

/// Confusion-matrix metrics over one prediction/ground-truth pair.
#[pyfunction]
#[pyo3(signature = (pred, gt, h, w, num_classes, ignore_label=None))]
fn evaluate_maps<'py>(
    py: Python<'py>,
    pred: Vec<u8>,
    gt: Vec<u8>,
    h: usize,
    w: usize,
    num_classes: usize,
    ignore_label: Option<u8>,
) -> PyResult<Bound<'py, PyDict>> {
    let pred = label_map_from(pred, h, w)?;
    let gt = label_map_from(gt, h, w)?;
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(&pred, &gt, ignore_label).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("G", cm.global_accuracy().map_err(err)?)?;
    out.set_item("C", cm.class_average().map_err(err)?)?;
    out.set_item("mIoU", cm.mean_iou().map_err(err)?)?;
    Ok(out)
}

/// A built (or loaded) network in single precision.
#[pyclass]
struct Model {
    spec: ModelSpec<f32>,
}

#[pymethods]
impl Model {
    /// Build a variant: `Model("segnet-basic", classes=6)`.
    #[new]
    #[pyo3(signature = (variant, classes, depth=4, channels=64, kernel=7, seed=1))]
    fn new(
        variant: &str,
        classes: usize,
        depth: usize,
        channels: usize,
        kernel: usize,
        seed: u64,
    ) -> PyResult<Model> {
        let kind = VariantKind::from_name(variant)
            .ok_or_else(|| PyValueError::new_err(format!("unknown variant '{variant}'")))?;
        let spec = build_variant::<f32>(kind, classes, depth, channels, kernel, seed).map_err(err)?;
        Ok(Model { spec })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        Ok(Model { spec: load_model::<f32>(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(&self.spec, path).map_err(err)
    }

    fn variant(&self) -> &'static str {
        self.spec.kind().name()
    }

    fn classes(&self) -> usize {
        self.spec.num_classes()
    }

    fn param_count(&self) -> usize {
        self.spec.count_params()
    }

    fn receptive_field(&self) -> usize {
        segdec_core::arch::receptive_field(self.spec.depth(), self.spec.kernel())
    }

    /// Inference storage accounting at the given input size.
    #[pyo3(signature = (h, w, precision_bytes=4))]
    fn storage<'py>(
        &self,
        py: Python<'py>,
        h: usize,
        w: usize,
        precision_bytes: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let r = storage_cost(&self.spec, h, w, precision_bytes).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("bytes_indices", r.bytes_indices)?;
        out.set_item("bytes_encoder_maps", r.bytes_encoder_maps)?;
        out.set_item("multiplier", r.multiplier)?;
        out.set_item("multiplier_not_applicable", r.multiplier_not_applicable)?;
        Ok(out)
    }

    /// Segment one interleaved-RGB image; returns the label map row-major.
    fn predict(&self, image: Vec<u8>, h: usize, w: usize) -> PyResult<Vec<u8>> {
        let img = ByteImage::new(h, w, image).map_err(err)?;
        let input = image_to_input::<f32>(&img, &self.spec.preproc);
        let art = forward_eval(&self.spec, &input).map_err(err)?;
        Ok(argmax_labels(&art.logits).remove(0).data)
    }

    /// Per-class probability maps, flattened (classes, h, w) row-major.
    fn predict_probabilities(&self, image: Vec<u8>, h: usize, w: usize) -> PyResult<Vec<f32>> {
        let img = ByteImage::new(h, w, image).map_err(err)?;
        let input = image_to_input::<f32>(&img, &self.spec.preproc);
        let art = forward_eval(&self.spec, &input).map_err(err)?;
        Ok(art.probabilities.data().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant='{}', classes={}, depth={}, params={})",
            self.spec.kind().name(),
            self.spec.num_classes(),
            self.spec.depth(),
            self.spec.count_params()
        )
    }
}

#[pymodule]
fn segdec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(receptive_field, m)?)?;
    m.add_function(wrap_pyfunction!(default_theta, m)?)?;
    m.add_function(wrap_pyfunction!(variant_names, m)?)?;
    m.add_function(wrap_pyfunction!(median_frequency_weights, m)?)?;
    m.add_function(wrap_pyfunction!(bf_score, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_maps, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
