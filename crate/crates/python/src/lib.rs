//! Python bindings exposing the fingerprinting pipeline: image planes,
//! synthetic cameras, fingerprint extraction, model training, and the
//! sequential test. Build with `cargo build -p prnuseq-python --release`
//! and import the produced cdylib as `prnuseq_py`.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use prnuseq::fingerprint;
use prnuseq::plane::{self, AdaptiveWiener, Denoiser};
use prnuseq::sprt;
use prnuseq::stats::VarianceEstimator;
use prnuseq::training;
use prnuseq::synth;

fn to_py_err(err: prnuseq::Error) -> PyErr {
    match &err {
        prnuseq::Error::Io { .. } | prnuseq::Error::Format { .. } => {
            PyIOError::new_err(err.to_string())
        }
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn parse_variance(name: &str, num_shifts: usize) -> PyResult<VarianceEstimator> {
    match name {
        "fast" => Ok(VarianceEstimator::Fast),
        "shift" => Ok(VarianceEstimator::Shift {
            exclusion_radius: prnuseq::stats::DEFAULT_EXCLUSION_RADIUS,
            num_shifts,
        }),
        other => Err(PyValueError::new_err(format!(
            "variance must be 'fast' or 'shift', got '{other}'"
        ))),
    }
}

/// Single-channel image with intensities in [0, 255], row-major.
#[pyclass(name = "ImagePlane", from_py_object)]
#[derive(Clone)]
struct PyImagePlane {
    inner: plane::ImagePlane,
}

#[pymethods]
impl PyImagePlane {
    #[new]
    fn new(width: usize, height: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: plane::ImagePlane::new(width, height, data).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    /// Pixel values as a flat row-major list.
    fn values(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("ImagePlane({}x{})", self.inner.width(), self.inner.height())
    }
}

/// Estimated PRNU fingerprint.
#[pyclass(name = "Fingerprint", from_py_object)]
#[derive(Clone)]
struct PyFingerprint {
    inner: fingerprint::Fingerprint,
}

#[pymethods]
impl PyFingerprint {
    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn training_count(&self) -> u32 {
        self.inner.training_count()
    }

    #[getter]
    fn postprocessed(&self) -> bool {
        self.inner.is_postprocessed()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    /// Sample correlation against a reference plane (e.g. a simulator's
    /// ground-truth PRNU).
    fn correlation_with(&self, other: &PyImagePlane) -> PyResult<f64> {
        if self.inner.values().len() != other.inner.len() {
            return Err(PyValueError::new_err("dimension mismatch"));
        }
        Ok(synth::correlation_slices(
            self.inner.values(),
            other.inner.data(),
        ))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        fingerprint::write_fingerprint(&self.inner, path).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: fingerprint::read_fingerprint(path).map_err(to_py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Fingerprint({}x{}, L={}, postprocessed={})",
            self.inner.width(),
            self.inner.height(),
            self.inner.training_count(),
            self.inner.is_postprocessed()
        )
    }
}

/// Per-device detection model: binned or fixed H1 law plus the H0 GGD.
#[pyclass(name = "DeviceModel", from_py_object)]
#[derive(Clone)]
struct PyDeviceModel {
    inner: training::DeviceModel,
}

#[pymethods]
impl PyDeviceModel {
    #[getter]
    fn kind(&self) -> &'static str {
        if self.inner.h1.is_fixed() {
            "fixed"
        } else {
            "binned"
        }
    }

    #[getter]
    fn bin_count(&self) -> usize {
        self.inner.h1.bin_count()
    }

    #[getter]
    fn m_tr(&self) -> usize {
        self.inner.h1.m_tr
    }

    #[getter]
    fn alpha0(&self) -> f64 {
        self.inner.h0.alpha0
    }

    #[getter]
    fn c0(&self) -> f64 {
        self.inner.h0.c0
    }

    /// (mu, sigma2) of the H1 law at a given v.
    fn lookup(&self, v: f64) -> (f64, f64) {
        self.inner.h1.lookup(v)
    }

    fn to_json(&self) -> PyResult<String> {
        training::model_to_json(&self.inner).map_err(to_py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        training::write_model(&self.inner, path).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: training::read_model(path).map_err(to_py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "DeviceModel(kind={}, bins={}, M_tr={}, alpha0={:.4}, c0={:.4})",
            self.kind(),
            self.bin_count(),
            self.inner.h1.m_tr,
            self.inner.h0.alpha0,
            self.inner.h0.c0
        )
    }
}

/// Sequential test plan with derived thresholds.
#[pyclass(name = "SprtPlan", from_py_object)]
#[derive(Clone)]
struct PySprtPlan {
    inner: sprt::SprtPlan,
}

#[pymethods]
impl PySprtPlan {
    #[getter]
    fn threshold_a(&self) -> f64 {
        self.inner.threshold_a
    }

    #[getter]
    fn threshold_b(&self) -> f64 {
        self.inner.threshold_b
    }

    #[getter]
    fn target_pm(&self) -> f64 {
        self.inner.target_pm
    }

    #[getter]
    fn subset_size(&self) -> usize {
        self.inner.subset_size
    }

    #[getter]
    fn max_observations(&self) -> usize {
        self.inner.max_observations
    }

    fn __repr__(&self) -> String {
        format!(
            "SprtPlan(A={:.5}, B={:.6}, T={}, N={})",
            self.inner.threshold_a,
            self.inner.threshold_b,
            self.inner.subset_size,
            self.inner.max_observations
        )
    }
}

/// Outcome of a sequential run plus the optional full-image retest.
#[pyclass(name = "Decision")]
struct PyDecision {
    #[pyo3(get)]
    sprt_outcome: String,
    #[pyo3(get)]
    n_used: usize,
    #[pyo3(get)]
    pixels_used: usize,
    #[pyo3(get)]
    llr_final: f64,
    #[pyo3(get)]
    llr_trace: Vec<f64>,
    #[pyo3(get)]
    retest_positive: Option<bool>,
    #[pyo3(get)]
    retest_score: Option<f64>,
    #[pyo3(get)]
    positive: bool,
}

#[pymethods]
impl PyDecision {
    fn __repr__(&self) -> String {
        format!(
            "Decision(sprt={}, n={}, positive={})",
            self.sprt_outcome, self.n_used, self.positive
        )
    }
}

/// Synthetic sensor with a known ground-truth PRNU.
#[pyclass(name = "SynthCamera")]
struct PySynthCamera {
    inner: synth::SynthCamera,
}

#[pymethods]
impl PySynthCamera {
    #[new]
    #[pyo3(signature = (width, height, sigma_k=0.02, sigma_n=2.0, seed=0))]
    fn new(width: usize, height: usize, sigma_k: f64, sigma_n: f64, seed: u64) -> PyResult<Self> {
        if width == 0 || height == 0 || sigma_k < 0.0 || sigma_n < 0.0 {
            return Err(PyValueError::new_err(
                "camera needs positive dimensions and non-negative noise levels",
            ));
        }
        Ok(Self {
            inner: synth::SynthCamera::new(width, height, sigma_k, sigma_n, seed),
        })
    }

    /// Ground-truth PRNU plane.
    fn ground_truth(&self) -> PyImagePlane {
        PyImagePlane {
            inner: self.inner.ground_truth().clone(),
        }
    }

    /// One exposure of a scene, clipped to [0, 255].
    ///
    /// Scenes: "flatfield" (intensity), "gradient" (low..high across
    /// columns), "textured" (base ± amplitude), "dark", "near_saturated".
    #[pyo3(signature = (scene, shot_seed, intensity=128.0, low=40.0, high=210.0, amplitude=50.0))]
    fn shoot(
        &self,
        scene: &str,
        shot_seed: u64,
        intensity: f64,
        low: f64,
        high: f64,
        amplitude: f64,
    ) -> PyResult<PyImagePlane> {
        let scene = match scene {
            "flatfield" => synth::SceneConfig::Flatfield { intensity },
            "gradient" => synth::SceneConfig::Gradient { low, high },
            "textured" => synth::SceneConfig::TexturedNoise {
                base: intensity,
                amplitude,
            },
            "dark" => synth::SceneConfig::Dark,
            "near_saturated" => synth::SceneConfig::NearSaturated { intensity },
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown scene kind '{other}'"
                )))
            }
        };
        Ok(PyImagePlane {
            inner: self.inner.shoot(&scene, shot_seed),
        })
    }

    fn __repr__(&self) -> String {
        let spec = self.inner.spec();
        format!(
            "SynthCamera({}x{}, sigma_k={}, sigma_n={}, seed={})",
            spec.width, spec.height, spec.sigma_k, spec.sigma_n, spec.seed
        )
    }
}

/// Decode a raster file (PNG/TIFF/PGM) into a luminance plane.
#[pyfunction]
fn load_grayscale(path: &str) -> PyResult<PyImagePlane> {
    Ok(PyImagePlane {
        inner: plane::load_grayscale(path).map_err(to_py_err)?,
    })
}

/// Locally adaptive Wiener denoising.
#[pyfunction]
#[pyo3(signature = (img, window=3))]
fn denoise(img: &PyImagePlane, window: usize) -> PyResult<PyImagePlane> {
    Ok(PyImagePlane {
        inner: plane::denoise(&img.inner, window).map_err(to_py_err)?,
    })
}

/// Noise residual y − x̂.
#[pyfunction]
fn residual(img: &PyImagePlane, denoised: &PyImagePlane) -> PyResult<PyImagePlane> {
    Ok(PyImagePlane {
        inner: plane::residual(&img.inner, &denoised.inner).map_err(to_py_err)?,
    })
}

/// Estimate a PRNU fingerprint from training planes.
#[pyfunction]
#[pyo3(signature = (images, postprocess=true, window=3, saturation_threshold=250.0))]
fn extract_fingerprint(
    images: Vec<PyImagePlane>,
    postprocess: bool,
    window: usize,
    saturation_threshold: f64,
) -> PyResult<PyFingerprint> {
    let denoiser = AdaptiveWiener::new(window).map_err(to_py_err)?;
    let denoised: Vec<plane::ImagePlane> = images
        .iter()
        .map(|p| denoiser.denoise(&p.inner))
        .collect::<prnuseq::Result<_>>()
        .map_err(to_py_err)?;
    let masks = images
        .iter()
        .map(|p| plane::saturation_mask(&p.inner, saturation_threshold))
        .collect::<prnuseq::Result<Vec<_>>>()
        .map_err(to_py_err)?;
    let pairs: Vec<_> = images.iter().map(|p| &p.inner).zip(&denoised).collect();
    let mask_refs: Vec<_> = masks.iter().collect();
    let mut fp = fingerprint::estimate(&pairs, Some(&mask_refs)).map_err(to_py_err)?;
    if postprocess {
        fp = fingerprint::postprocess(&fp, None).map_err(to_py_err)?;
    }
    Ok(PyFingerprint { inner: fp })
}

/// Train a device model: leave-one-out H1 pairs from `h1_images`, H0 GGD
/// from `h0_images` correlated against `fp`.
#[pyfunction]
#[pyo3(signature = (h1_images, h0_images, fp, t=1024, bins=20, seed=0, fixed=false, window=3))]
#[allow(clippy::too_many_arguments)]
fn train_model(
    h1_images: Vec<PyImagePlane>,
    h0_images: Vec<PyImagePlane>,
    fp: &PyFingerprint,
    t: usize,
    bins: usize,
    seed: u64,
    fixed: bool,
    window: usize,
) -> PyResult<PyDeviceModel> {
    let denoiser = AdaptiveWiener::new(window).map_err(to_py_err)?;
    let planes: Vec<plane::ImagePlane> = h1_images.iter().map(|p| p.inner.clone()).collect();
    let cfg = training::TrainingConfig {
        subset_size: t,
        ..training::TrainingConfig::default()
    };
    let pairs = training::collect_pairs(&planes, &cfg, seed, &denoiser).map_err(to_py_err)?;
    let h1 = if fixed {
        training::fit_h1_fixed(&pairs, t).map_err(to_py_err)?
    } else {
        training::fit_h1(&pairs, bins, t).map_err(to_py_err)?
    };

    let mut samples = Vec::new();
    for (i, img) in h0_images.iter().enumerate() {
        let den = denoiser.denoise(&img.inner).map_err(to_py_err)?;
        let res = plane::residual(&img.inner, &den).map_err(to_py_err)?;
        let mask = plane::saturation_mask(&img.inner, 250.0).map_err(to_py_err)?;
        let img_seed = prnuseq::seed::mix(seed, 0xB0 + i as u64);
        let subsets =
            sprt::partition_subsets(&mask, t, 64, img_seed).map_err(to_py_err)?;
        for (sid, subset) in subsets.iter().enumerate() {
            if let Some(obs) = prnuseq::stats::subset_observation(
                &res,
                &den,
                &fp.inner,
                subset,
                sid,
                VarianceEstimator::Fast,
                prnuseq::seed::mix(img_seed, sid as u64),
            )
            .map_err(to_py_err)?
            {
                samples.push(obs.u_prime);
            }
        }
    }
    let h0 = training::fit_h0_ggd(&samples).map_err(to_py_err)?;
    Ok(PyDeviceModel {
        inner: training::DeviceModel { h1, h0 },
    })
}

/// Build a sequential plan from the error targets.
#[pyfunction]
#[pyo3(signature = (pd=0.98, pf=0.3, p=0.0285, beta=0.65, t=1024, n=256, seed=0))]
fn make_plan(
    pd: f64,
    pf: f64,
    p: f64,
    beta: f64,
    t: usize,
    n: usize,
    seed: u64,
) -> PyResult<PySprtPlan> {
    Ok(PySprtPlan {
        inner: sprt::make_plan(pd, pf, p, beta, t, n, seed).map_err(to_py_err)?,
    })
}

/// Sequential test plus full-image retest for positives and undecideds.
#[pyfunction]
#[pyo3(signature = (img, fp, model, plan, variance="fast", num_shifts=64, retest_pf=0.01,
                    detector="improved", window=3, mc_samples=20000))]
#[allow(clippy::too_many_arguments)]
fn decide(
    img: &PyImagePlane,
    fp: &PyFingerprint,
    model: &PyDeviceModel,
    plan: &PySprtPlan,
    variance: &str,
    num_shifts: usize,
    retest_pf: f64,
    detector: &str,
    window: usize,
    mc_samples: usize,
) -> PyResult<PyDecision> {
    let denoiser = AdaptiveWiener::new(window).map_err(to_py_err)?;
    let variance = parse_variance(variance, num_shifts)?;
    let detector = match detector {
        "improved" => sprt::DetectorKind::Improved,
        "fixed" => sprt::DetectorKind::Fixed,
        other => {
            return Err(PyValueError::new_err(format!(
                "detector must be 'improved' or 'fixed', got '{other}'"
            )))
        }
    };
    let h1 = model
        .inner
        .h1
        .rescale(plan.inner.subset_size)
        .map_err(to_py_err)?;
    let cfg = sprt::DetectorConfig {
        variance,
        saturation_threshold: plane::DEFAULT_SATURATION_THRESHOLD,
    };
    let decision = sprt::run(
        &img.inner,
        &fp.inner,
        &h1,
        &model.inner.h0,
        &plan.inner,
        &denoiser,
        &cfg,
    )
    .map_err(to_py_err)?;

    let retest = match decision.outcome {
        sprt::SprtOutcome::AcceptH0 => None,
        _ => {
            let ft = sprt::FullTestConfig {
                detector,
                target_pf: retest_pf,
                variance,
                saturation_threshold: plane::DEFAULT_SATURATION_THRESHOLD,
                mc_samples,
                seed: prnuseq::seed::mix(plan.inner.seed, 0xFE57),
            };
            Some(
                sprt::full_image_test_with_denoiser(
                    &img.inner,
                    &fp.inner,
                    &model.inner.h1,
                    &model.inner.h0,
                    &ft,
                    &denoiser,
                )
                .map_err(to_py_err)?,
            )
        }
    };
    Ok(PyDecision {
        sprt_outcome: decision.outcome.to_string(),
        n_used: decision.n_used,
        pixels_used: decision.pixels_used,
        llr_final: decision.final_llr(),
        llr_trace: decision.llr_trace.clone(),
        retest_positive: retest.map(|r| r.positive),
        retest_score: retest.map(|r| r.score),
        positive: retest.map(|r| r.positive).unwrap_or(false),
    })
}

/// Expected scan cost relative to full-image testing everything.
#[pyfunction]
fn cost_ratio(pd: f64, pf: f64, p_h1: f64, n_bar: f64, t: usize, m: usize) -> f64 {
    sprt::cost_ratio(pd, pf, p_h1, n_bar, t, m)
}

#[pymodule]
fn prnuseq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyImagePlane>()?;
    m.add_class::<PyFingerprint>()?;
    m.add_class::<PyDeviceModel>()?;
    m.add_class::<PySprtPlan>()?;
    m.add_class::<PyDecision>()?;
    m.add_class::<PySynthCamera>()?;
    m.add_function(wrap_pyfunction!(load_grayscale, m)?)?;
    m.add_function(wrap_pyfunction!(denoise, m)?)?;
    m.add_function(wrap_pyfunction!(residual, m)?)?;
    m.add_function(wrap_pyfunction!(extract_fingerprint, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(make_plan, m)?)?;
    m.add_function(wrap_pyfunction!(decide, m)?)?;
    m.add_function(wrap_pyfunction!(cost_ratio, m)?)?;
    Ok(())
}
