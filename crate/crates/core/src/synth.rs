//! Synthetic sensor simulator.
//!
//! Generates ground-truth cameras following the multiplicative model
//! y = (1 + k) ∘ x + n with an i.i.d. Gaussian PRNU plane k and sensor noise
//! n, so estimators and the sequential test can be validated against a known
//! fingerprint at desk scale.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::plane::ImagePlane;
use crate::seed;

/// Scene radiance generator. Parameters are clamped so intensities stay in
/// [0, 255] before the sensor model is applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneConfig {
    Flatfield { intensity: f64 },
    /// Horizontal ramp from `low` at the left edge to `high` at the right.
    Gradient { low: f64, high: f64 },
    /// Flat base plus uniform texture of the given amplitude.
    TexturedNoise { base: f64, amplitude: f64 },
    Dark,
    NearSaturated { intensity: f64 },
}

impl SceneConfig {
    fn radiance(&self, width: usize, height: usize, rng: &mut impl Rng) -> Vec<f64> {
        let n = width * height;
        match self {
            SceneConfig::Flatfield { intensity } => vec![intensity.clamp(0.0, 255.0); n],
            SceneConfig::Gradient { low, high } => {
                let lo = low.clamp(0.0, 255.0);
                let hi = high.clamp(0.0, 255.0);
                let mut data = Vec::with_capacity(n);
                for _ in 0..height {
                    for j in 0..width {
                        let t = if width > 1 {
                            j as f64 / (width - 1) as f64
                        } else {
                            0.0
                        };
                        data.push(lo + t * (hi - lo));
                    }
                }
                data
            }
            SceneConfig::TexturedNoise { base, amplitude } => (0..n)
                .map(|_| {
                    let tex = amplitude * (rng.random::<f64>() - 0.5) * 2.0;
                    (base + tex).clamp(0.0, 255.0)
                })
                .collect(),
            SceneConfig::Dark => vec![0.0; n],
            SceneConfig::NearSaturated { intensity } => vec![intensity.clamp(0.0, 255.0); n],
        }
    }
}

/// Serializable camera parameters; the PRNU plane is reproducible from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub sigma_k: f64,
    pub sigma_n: f64,
    pub seed: u64,
}

impl CameraSpec {
    pub fn build(&self) -> SynthCamera {
        SynthCamera::new(self.width, self.height, self.sigma_k, self.sigma_n, self.seed)
    }
}

/// A simulated sensor with a fixed ground-truth PRNU plane.
#[derive(Debug, Clone)]
pub struct SynthCamera {
    spec: CameraSpec,
    k: ImagePlane,
}

impl SynthCamera {
    /// Draw the PRNU plane i.i.d. N(0, σ_k²) from the camera seed.
    pub fn new(width: usize, height: usize, sigma_k: f64, sigma_n: f64, seed: u64) -> Self {
        assert!(sigma_k >= 0.0 && sigma_n >= 0.0, "noise levels must be >= 0");
        assert!(width > 0 && height > 0, "camera dimensions must be positive");
        let mut rng = seed::rng(seed);
        let k_data = if sigma_k > 0.0 {
            let normal = Normal::new(0.0, sigma_k).expect("validated sigma_k");
            (0..width * height).map(|_| normal.sample(&mut rng)).collect()
        } else {
            vec![0.0; width * height]
        };
        Self {
            spec: CameraSpec {
                width,
                height,
                sigma_k,
                sigma_n,
                seed,
            },
            k: ImagePlane::from_raw(width, height, k_data),
        }
    }

    pub fn from_spec(spec: &CameraSpec) -> Self {
        spec.build()
    }

    pub fn spec(&self) -> &CameraSpec {
        &self.spec
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    /// Ground-truth PRNU plane.
    pub fn ground_truth(&self) -> &ImagePlane {
        &self.k
    }

    /// One exposure, clipped to the [0, 255] sensor range.
    pub fn shoot(&self, scene: &SceneConfig, shot_seed: u64) -> ImagePlane {
        let mut plane = self.shoot_unclipped(scene, shot_seed);
        let data = plane.data().to_vec();
        plane = ImagePlane::from_raw(
            self.spec.width,
            self.spec.height,
            data.into_iter().map(|v| v.clamp(0.0, 255.0)).collect(),
        );
        plane
    }

    /// One exposure without sensor clipping, for estimator tests where the
    /// multiplicative model must hold exactly.
    pub fn shoot_unclipped(&self, scene: &SceneConfig, shot_seed: u64) -> ImagePlane {
        let (w, h) = (self.spec.width, self.spec.height);
        let mut rng = seed::rng(seed::mix(self.spec.seed, seed::mix(0x5CE_E, shot_seed)));
        let x = scene.radiance(w, h, &mut rng);
        let data: Vec<f64> = if self.spec.sigma_n > 0.0 {
            let noise = Normal::new(0.0, self.spec.sigma_n).expect("validated sigma_n");
            x.iter()
                .zip(self.k.data())
                .map(|(xv, kv)| (1.0 + kv) * xv + noise.sample(&mut rng))
                .collect()
        } else {
            x.iter()
                .zip(self.k.data())
                .map(|(xv, kv)| (1.0 + kv) * xv)
                .collect()
        };
        ImagePlane::from_raw(w, h, data)
    }

    /// Fraction of pixels that the [0, 255] clip would alter for this shot.
    pub fn clipped_fraction(&self, scene: &SceneConfig, shot_seed: u64) -> f64 {
        let raw = self.shoot_unclipped(scene, shot_seed);
        let clipped = raw
            .data()
            .iter()
            .filter(|v| **v < 0.0 || **v > 255.0)
            .count();
        clipped as f64 / raw.len() as f64
    }
}

/// Sample correlation between two equally sized planes.
pub fn correlation(a: &ImagePlane, b: &ImagePlane) -> f64 {
    correlation_slices(a.data(), b.data())
}

pub fn correlation_slices(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "correlation needs equal lengths");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}
