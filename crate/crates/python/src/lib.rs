use std::path::PathBuf;

use adsrnet_core::conv::{self, WeightSharing};
use adsrnet_core::data::{self, FloatImage};
use adsrnet_core::gradcheck::{self as gc, GradcheckOptions};
use adsrnet_core::metrics;
use adsrnet_core::model::{conv_layer_count, count_parameters, estimate_flops};
use adsrnet_core::{ops, Checkpoint, Error, Fusion, Model as CoreModel, ModelConfig as CoreConfig, Shape, Variant};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Shape4 = (usize, usize, usize, usize);

fn tensor<T: adsrnet_core::Scalar>(shape: Shape4, data: Vec<T>) -> PyResult<adsrnet_core::Tensor<T>> {
    adsrnet_core::Tensor::from_vec([shape.0, shape.1, shape.2, shape.3], data).map_err(to_py)
}

fn dims(s: Shape) -> Shape4 {
    (s.n(), s.c(), s.h(), s.w())
}

/// Architecture choice: scale, variant, number of dynamic kernels and fusion.
#[pyclass(module = "adsrnet", frozen, eq, skip_from_py_object)]
#[derive(Clone, Copy, PartialEq)]
struct ModelConfig {
    inner: CoreConfig,
}

#[pymethods]
impl ModelConfig {
    #[new]
    #[pyo3(signature = (scale=2, variant="full", kernels=4, fusion="multiply"))]
    fn new(scale: usize, variant: &str, kernels: usize, fusion: &str) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(to_py)?;
        let fusion: Fusion = fusion.parse().map_err(to_py)?;
        let inner = CoreConfig::new(scale, variant).with_kernels(kernels).with_fusion(fusion);
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Names accepted by the `variant` argument.
    #[staticmethod]
    fn variants() -> Vec<&'static str> {
        Variant::ALL.iter().map(|v| v.name()).collect()
    }

    #[getter]
    fn scale(&self) -> usize {
        self.inner.scale
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }

    #[getter]
    fn kernels(&self) -> usize {
        self.inner.kernels
    }

    #[getter]
    fn fusion(&self) -> &'static str {
        self.inner.fusion.name()
    }

    fn fingerprint(&self) -> u64 {
        self.inner.fingerprint()
    }

    /// Parameter count from the layer formulas.
    fn param_count(&self) -> PyResult<usize> {
        count_parameters(&self.inner).map_err(to_py)
    }

    /// FLOP estimate for an output of `height x width` pixels.
    fn flops(&self, height: usize, width: usize) -> PyResult<u64> {
        estimate_flops(&self.inner, height, width).map_err(to_py)
    }

    fn conv_layers(&self) -> PyResult<usize> {
        conv_layer_count(&self.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig(scale={}, variant='{}', kernels={}, fusion='{}')",
            self.inner.scale, self.inner.variant, self.inner.kernels, self.inner.fusion
        )
    }
}

/// A network with single-precision parameters.
#[pyclass(module = "adsrnet")]
struct Model {
    inner: CoreModel<f32>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &ModelConfig, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: CoreModel::new(config.inner, seed).map_err(to_py)? })
    }

    /// Loads a checkpoint; the configuration is recovered from its fingerprint
    /// unless given.
    #[staticmethod]
    #[pyo3(signature = (path, config=None))]
    fn load(path: PathBuf, config: Option<&ModelConfig>) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(to_py)?;
        Ok(Self { inner: ckpt.into_model(config.map(|c| &c.inner)).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.inner).save(&path).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> ModelConfig {
        ModelConfig { inner: self.inner.config }
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.names().map(str::to_string).collect()
    }

    /// `(shape, values)` of one parameter tensor.
    fn parameter(&self, name: &str) -> PyResult<(Shape4, Vec<f32>)> {
        let t = self.inner.params.get(name).map_err(to_py)?;
        Ok((dims(t.shape()), t.data().to_vec()))
    }

    /// Forward pass at the final temperature on an `N x 3 x H x W` batch in
    /// `[0, 1]`. Returns `(shape, values)`.
    fn predict(&self, py: Python<'_>, shape: Shape4, values: Vec<f32>) -> PyResult<(Shape4, Vec<f32>)> {
        let x = tensor(shape, values)?;
        let y = py.detach(|| self.inner.predict(&x)).map_err(to_py)?;
        Ok((dims(y.shape()), y.into_data()))
    }

    /// Reads an LR PNG, upscales it and writes the SR PNG.
    fn upscale_png(&self, py: Python<'_>, input: PathBuf, output: PathBuf) -> PyResult<(u32, u32)> {
        py.detach(|| {
            let lr = data::read_png(&input)?;
            let sr = data::tensor_to_image(&self.inner.predict(&data::image_to_tensor::<f32>(&lr))?, 0)?;
            data::write_png(&output, &sr)?;
            Ok((sr.width(), sr.height()))
        })
        .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Model({}, params={})", self.config().__repr__(), self.inner.param_count())
    }
}

/// 3x3 convolution with zero padding equal to the dilation.
#[pyfunction]
#[pyo3(signature = (x_shape, x, w_shape, w, bias, dilation=1))]
fn conv2d(
    x_shape: Shape4,
    x: Vec<f64>,
    w_shape: Shape4,
    w: Vec<f64>,
    bias: Vec<f64>,
    dilation: usize,
) -> PyResult<(Shape4, Vec<f64>)> {
    let b = tensor((bias.len(), 1, 1, 1), bias)?;
    let y = conv::conv2d_forward(&tensor(x_shape, x)?, &tensor(w_shape, w)?, &b, dilation, WeightSharing::Shared)
        .map_err(to_py)?;
    Ok((dims(y.shape()), y.into_data()))
}

#[pyfunction]
fn pixel_shuffle(shape: Shape4, x: Vec<f64>, r: usize) -> PyResult<(Shape4, Vec<f64>)> {
    let y = conv::pixel_shuffle(&tensor(shape, x)?, r).map_err(to_py)?;
    Ok((dims(y.shape()), y.into_data()))
}

#[pyfunction]
fn softmax(logits: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    let t = tensor((1, logits.len(), 1, 1), logits)?;
    Ok(ops::softmax_temperature(&t, tau).map_err(to_py)?.into_data())
}

#[pyfunction]
fn mae(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    let (p, t) = (tensor((1, 1, 1, pred.len()), pred)?, tensor((1, 1, 1, target.len()), target)?);
    Ok(ops::mean_abs_error(&p, &t).map_err(to_py)?.data()[0])
}

fn plane(values: Vec<f64>, height: usize, width: usize) -> PyResult<FloatImage> {
    if values.len() != height * width {
        return Err(PyValueError::new_err(format!("expected {} values for {height}x{width}, got {}", height * width, values.len())));
    }
    Ok(FloatImage::new(1, height, width, values))
}

/// PSNR in dB between two `height x width` planes; `inf` when identical.
#[pyfunction]
#[pyo3(signature = (a, b, height, width, peak=255.0))]
fn psnr(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize, peak: f64) -> PyResult<f64> {
    metrics::psnr(&plane(a, height, width)?, &plane(b, height, width)?, peak).map_err(to_py)
}

/// Mean SSIM over valid 11x11 Gaussian windows.
#[pyfunction]
#[pyo3(signature = (a, b, height, width, peak=255.0))]
fn ssim(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize, peak: f64) -> PyResult<f64> {
    metrics::ssim(&plane(a, height, width)?, &plane(b, height, width)?, peak).map_err(to_py)
}

/// Bicubic-downscales every PNG in `hr_dir` into `out_dir`.
/// Returns `(written, skipped)` counts.
#[pyfunction]
fn degrade(py: Python<'_>, hr_dir: PathBuf, scale: usize, out_dir: PathBuf) -> PyResult<(usize, usize)> {
    let report = py.detach(|| data::degrade(&hr_dir, scale, &out_dir)).map_err(to_py)?;
    Ok((report.written.len(), report.skipped.len()))
}

#[pyfunction]
fn bicubic_upscale_png(input: PathBuf, output: PathBuf, scale: usize) -> PyResult<(u32, u32)> {
    let up = data::read_png(&input).and_then(|lr| data::upscale_bicubic(&lr, scale)).map_err(to_py)?;
    data::write_png(&output, &up).map_err(to_py)?;
    Ok((up.width(), up.height()))
}

/// Finite-difference check of every op and the network of `config`.
/// Returns `(name, max_relative_error)` rows.
#[pyfunction]
#[pyo3(signature = (config, samples=8, seed=0))]
fn gradcheck(py: Python<'_>, config: &ModelConfig, samples: usize, seed: u64) -> PyResult<Vec<(String, f64)>> {
    let opts = GradcheckOptions { samples, seed, ..GradcheckOptions::default() };
    let results = py.detach(|| gc::full_suite(&config.inner, &opts)).map_err(to_py)?;
    Ok(results.into_iter().map(|r| (r.name, r.max_rel_error)).collect())
}

#[pymodule]
fn adsrnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ModelConfig>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_shuffle, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(bicubic_upscale_png, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
