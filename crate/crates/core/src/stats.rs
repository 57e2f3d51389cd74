//! Detection statistics and hypothesis densities.
//!
//! An observation on a pixel subset carries u′, the residual/fingerprint
//! correlation normalized by its estimated standard deviation, and v, the
//! normalized fingerprint energy that conditions the H1 law. Two variance
//! estimators are provided: the circular-shift estimator and the fast
//! separable one; the fast form is the default everywhere and the choice is
//! exposed as configuration.

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;
use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::plane::ImagePlane;
use crate::seed;

/// One subset observation: the pair (u′, v) feeding the sequential test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub u_prime: f64,
    pub v: f64,
    pub subset_id: usize,
}

/// Zero-mean generalized Gaussian law of u′ under H0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct H0Model {
    pub alpha0: f64,
    pub c0: f64,
}

impl H0Model {
    pub fn new(alpha0: f64, c0: f64) -> Result<Self> {
        if !(alpha0 > 0.0) || !(c0 > 0.0) {
            return Err(Error::Domain(format!(
                "GGD parameters must be positive, got alpha0={alpha0}, c0={c0}"
            )));
        }
        Ok(Self { alpha0, c0 })
    }

    /// log f(x) = log[c₀/(2α₀Γ(1/c₀))] − (|x|/α₀)^c₀
    pub fn log_pdf(&self, x: f64) -> f64 {
        self.c0.ln() - self.log_normalizer() - (x.abs() / self.alpha0).powf(self.c0)
    }

    /// log(2α₀Γ(1/c₀)), the term that separates the likelihood-ratio
    /// increment from its n-dependent threshold form.
    pub fn log_normalizer(&self) -> f64 {
        (2.0 * self.alpha0).ln() + ln_gamma(1.0 / self.c0)
    }

    /// Quantile of the GGD via the Gamma inverse CDF: |X|^c₀/α₀^c₀ is
    /// Gamma(1/c₀, 1)-distributed and the law is symmetric about zero.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("quantile level {p} outside (0,1)")));
        }
        if p == 0.5 {
            return Ok(0.0);
        }
        let shape = 1.0 / self.c0;
        let gamma_dist = statrs::distribution::Gamma::new(shape, 1.0)
            .map_err(|e| Error::Domain(format!("gamma law: {e}")))?;
        let (tail, sign) = if p > 0.5 {
            (2.0 * p - 1.0, 1.0)
        } else {
            (1.0 - 2.0 * p, -1.0)
        };
        let w = gamma_dist.inverse_cdf(tail);
        Ok(sign * self.alpha0 * w.powf(1.0 / self.c0))
    }

    /// Draw one sample: α₀·W^{1/c₀} with W ~ Gamma(1/c₀, 1) and a random sign.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let gamma_dist = rand_distr::Gamma::new(1.0 / self.c0, 1.0)
            .expect("valid gamma shape by construction");
        let w: f64 = gamma_dist.sample(rng);
        let mag = self.alpha0 * w.powf(1.0 / self.c0);
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    }
}

/// Scalar product ⟨residual, k̂ ∘ x̂⟩ over a subset.
pub fn statistic_u(residual: &[f64], kx: &[f64]) -> Result<f64> {
    if residual.len() != kx.len() {
        return Err(Error::Shape(format!(
            "statistic_u operands of length {} vs {}",
            residual.len(),
            kx.len()
        )));
    }
    Ok(residual.iter().zip(kx).map(|(r, k)| r * k).sum())
}

/// Fast variance estimate ‖kx‖²·‖residual‖²/M.
pub fn variance_fast(kx: &[f64], residual: &[f64]) -> Result<f64> {
    if kx.len() != residual.len() {
        return Err(Error::Shape(format!(
            "variance_fast operands of length {} vs {}",
            kx.len(),
            residual.len()
        )));
    }
    if kx.is_empty() {
        return Err(Error::Shape("variance_fast on empty vectors".into()));
    }
    let e_kx: f64 = kx.iter().map(|v| v * v).sum();
    let e_r: f64 = residual.iter().map(|v| v * v).sum();
    Ok(e_kx * e_r / kx.len() as f64)
}

/// Normalized fingerprint energy v = ‖kx‖²/σ̂_u.
pub fn statistic_v(kx: &[f64], sigma_u: f64) -> Result<f64> {
    if !(sigma_u > 0.0) {
        return Err(Error::Domain(format!(
            "statistic_v needs sigma_u > 0, got {sigma_u}"
        )));
    }
    Ok(kx.iter().map(|v| v * v).sum::<f64>() / sigma_u)
}

/// Count of circular shifts outside the exclusion set, i.e. shifts
/// (q1, q2) ∈ [0, H)×[0, W) with max(q1, q2) > radius.
fn admissible_shift_count(width: usize, height: usize, radius: usize) -> usize {
    let excluded = (radius + 1).min(height) * (radius + 1).min(width);
    width * height - excluded
}

/// Variance of u estimated from circular shifts of the residual.
///
/// Averages ⟨Δ_(q1,q2)(residual), kx⟩² over `num_shifts` shifts drawn
/// without replacement (seeded) from the admissible set; if `num_shifts`
/// covers the whole set the average runs over every admissible shift.
/// Averaging over all shifts is O(M²), hence the sampled default.
pub fn variance_shift(
    residual: &ImagePlane,
    kx: &ImagePlane,
    exclusion_radius: usize,
    num_shifts: usize,
    seed_value: u64,
) -> Result<f64> {
    if !residual.same_shape(kx) {
        return Err(Error::Shape(format!(
            "variance_shift planes {}x{} vs {}x{}",
            residual.width(),
            residual.height(),
            kx.width(),
            kx.height()
        )));
    }
    let sparse: Vec<(u32, f64)> = kx
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| (i as u32, *v))
        .collect();
    variance_shift_indexed(residual, &sparse, exclusion_radius, num_shifts, seed_value)
}

/// Shift-variance core over a sparse kx support. Equivalent to the dense
/// form because zero kx entries contribute exactly nothing to each scalar
/// product; entries must be in ascending index order.
pub(crate) fn variance_shift_indexed(
    residual: &ImagePlane,
    kx: &[(u32, f64)],
    exclusion_radius: usize,
    num_shifts: usize,
    seed_value: u64,
) -> Result<f64> {
    if num_shifts == 0 {
        return Err(Error::InvalidArgument("num_shifts must be >= 1".into()));
    }
    let (w, h) = (residual.width(), residual.height());
    let total = admissible_shift_count(w, h, exclusion_radius);
    if total == 0 {
        return Err(Error::DegenerateInput(format!(
            "no admissible shifts for {w}x{h} with exclusion radius {exclusion_radius}"
        )));
    }

    let shifts: Vec<(usize, usize)> = if num_shifts >= total {
        let mut all = Vec::with_capacity(total);
        for q1 in 0..h {
            for q2 in 0..w {
                if q1.max(q2) > exclusion_radius {
                    all.push((q1, q2));
                }
            }
        }
        all
    } else {
        let mut rng = seed::rng(seed_value);
        let mut seen = std::collections::HashSet::with_capacity(num_shifts);
        let mut picked = Vec::with_capacity(num_shifts);
        while picked.len() < num_shifts {
            let q1 = rng.random_range(0..h);
            let q2 = rng.random_range(0..w);
            if q1.max(q2) > exclusion_radius && seen.insert((q1, q2)) {
                picked.push((q1, q2));
            }
        }
        picked
    };

    let rdata = residual.data();
    let mut acc = 0.0f64;
    for (q1, q2) in &shifts {
        let mut dot = 0.0f64;
        for (idx, kv) in kx {
            let idx = *idx as usize;
            let i = idx / w;
            let j = idx % w;
            let si = (i + h - q1) % h;
            let sj = (j + w - q2) % w;
            dot += rdata[si * w + sj] * kv;
        }
        acc += dot * dot;
    }
    Ok(acc / shifts.len() as f64)
}

/// Which σ̂_u estimator to use when building observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VarianceEstimator {
    Fast,
    Shift {
        exclusion_radius: usize,
        num_shifts: usize,
    },
}

impl Default for VarianceEstimator {
    fn default() -> Self {
        VarianceEstimator::Fast
    }
}

impl VarianceEstimator {
    /// Shift estimator with the default neighborhood and sample count.
    pub fn shift_default() -> Self {
        VarianceEstimator::Shift {
            exclusion_radius: DEFAULT_EXCLUSION_RADIUS,
            num_shifts: DEFAULT_NUM_SHIFTS,
        }
    }
}

pub const DEFAULT_EXCLUSION_RADIUS: usize = 2;
pub const DEFAULT_NUM_SHIFTS: usize = 64;

/// Build the (u′, v) observation for one pixel subset, or `None` when the
/// subset is degenerate (σ̂_u = 0, e.g. a perfectly flat region), in which
/// case the caller skips it and moves to the next subset.
pub fn subset_observation(
    residual: &ImagePlane,
    denoised: &ImagePlane,
    fp: &Fingerprint,
    subset: &[u32],
    subset_id: usize,
    variance: VarianceEstimator,
    seed_value: u64,
) -> Result<Option<Observation>> {
    if !fp.same_shape(residual) || !residual.same_shape(denoised) {
        return Err(Error::Shape(
            "residual, denoised plane and fingerprint dimensions differ".into(),
        ));
    }
    let rdata = residual.data();
    let xdata = denoised.data();
    let kdata = fp.values();

    let mut r_sub = Vec::with_capacity(subset.len());
    let mut kx_sub = Vec::with_capacity(subset.len());
    for idx in subset {
        let i = *idx as usize;
        r_sub.push(rdata[i]);
        kx_sub.push(kdata[i] * xdata[i]);
    }

    let u = statistic_u(&r_sub, &kx_sub)?;
    let var = match variance {
        VarianceEstimator::Fast => variance_fast(&kx_sub, &r_sub)?,
        VarianceEstimator::Shift {
            exclusion_radius,
            num_shifts,
        } => {
            let sparse: Vec<(u32, f64)> = subset
                .iter()
                .zip(&kx_sub)
                .map(|(idx, kv)| (*idx, *kv))
                .collect();
            variance_shift_indexed(residual, &sparse, exclusion_radius, num_shifts, seed_value)?
        }
    };
    let sigma_u = var.sqrt();
    if !(sigma_u > 0.0) {
        return Ok(None);
    }
    let v = statistic_v(&kx_sub, sigma_u)?;
    Ok(Some(Observation {
        u_prime: u / sigma_u,
        v,
        subset_id,
    }))
}

/// Log-likelihood-ratio increment for one observation, up to the constant
/// log(2α₀Γ(1/c₀)):
///
/// ```text
/// D = (|u′|/α₀)^c₀ − (u′ − μ)²/(2σ²) − log(c₀·√(2πσ²))
/// ```
pub fn increment_d(obs: &Observation, h0: &H0Model, mu: f64, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!(
            "increment needs sigma2 > 0, got {sigma2}"
        )));
    }
    let u = obs.u_prime;
    let ggd_term = (u.abs() / h0.alpha0).powf(h0.c0);
    let gauss_term = (u - mu) * (u - mu) / (2.0 * sigma2);
    let log_term = (h0.c0 * (2.0 * std::f64::consts::PI * sigma2).sqrt()).ln();
    Ok(ggd_term - gauss_term - log_term)
}

/// Moments of the GGD, used by the trainer's initializer and by tests.
pub(crate) fn ggd_kurtosis(c: f64) -> f64 {
    gamma(1.0 / c) * gamma(5.0 / c) / (gamma(3.0 / c) * gamma(3.0 / c))
}
