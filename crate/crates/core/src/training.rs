//! Model training: the H1 laws μ(v) and σ²(v) by leave-one-out binning,
//! the H0 generalized-Gaussian fit, and cross-size rescaling.
//!
//! For each of the L training images a fingerprint is estimated from the
//! remaining L−1, the held-out image is split into subsets of the test size,
//! and one (u′, v) pair is collected per subset. Quantile binning of v then
//! yields per-bin means and variances of u′. The H0 shape/scale pair is the
//! maximum-likelihood GGD fit over cross-camera u′ samples.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::fingerprint::{estimate, postprocess};
use crate::plane::{residual, saturation_mask, Denoiser, ImagePlane, DEFAULT_SATURATION_THRESHOLD};
use crate::seed;
use crate::sprt::partition_subsets;
use crate::stats::{ggd_kurtosis, subset_observation, H0Model, VarianceEstimator};

/// Variance floor keeping every likelihood increment finite.
pub const SIGMA2_FLOOR: f64 = 1e-6;

/// Default number of quantile bins for the v axis.
pub const DEFAULT_NUM_BINS: usize = 20;

/// Binned or fixed law of (μ(v), σ²(v)).
#[derive(Debug, Clone, PartialEq)]
pub enum H1Law {
    /// Piecewise-constant over half-open quantile bins of v. `edges` holds
    /// bin_count + 1 strictly ascending values including both outer edges.
    Binned {
        edges: Vec<f64>,
        mu: Vec<f64>,
        sigma2: Vec<f64>,
    },
    /// v-independent parameters (the fixed-parameter sequential test).
    Fixed { mu: f64, sigma2: f64 },
}

/// H1 detection model bound to the training subset size M_tr.
#[derive(Debug, Clone, PartialEq)]
pub struct H1Model {
    pub law: H1Law,
    pub m_tr: usize,
}

impl H1Model {
    pub fn fixed(mu: f64, sigma2: f64, m_tr: usize) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(Error::Domain(format!(
                "fixed sigma2 must be > 0, got {sigma2}"
            )));
        }
        Ok(Self {
            law: H1Law::Fixed { mu, sigma2 },
            m_tr,
        })
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self.law, H1Law::Fixed { .. })
    }

    pub fn bin_count(&self) -> usize {
        match &self.law {
            H1Law::Binned { mu, .. } => mu.len(),
            H1Law::Fixed { .. } => 1,
        }
    }

    /// (μ(v), σ²(v)) for any v ≥ 0; values beyond the outer edges clamp to
    /// the first/last bin, interior edges belong to the right bin.
    pub fn lookup(&self, v: f64) -> (f64, f64) {
        match &self.law {
            H1Law::Fixed { mu, sigma2 } => (*mu, *sigma2),
            H1Law::Binned { edges, mu, sigma2 } => {
                let interior = &edges[1..edges.len() - 1];
                let bin = interior.partition_point(|e| *e <= v);
                (mu[bin], sigma2[bin])
            }
        }
    }

    /// Apply the subset-size change of variables: v, μ(v) and σ²(v) all
    /// scale by √(M_t/M_tr).
    pub fn rescale(&self, m_t: usize) -> Result<H1Model> {
        if m_t == 0 || self.m_tr == 0 {
            return Err(Error::Domain("rescale needs positive pixel counts".into()));
        }
        let s = (m_t as f64 / self.m_tr as f64).sqrt();
        let law = match &self.law {
            H1Law::Fixed { mu, sigma2 } => H1Law::Fixed {
                mu: s * mu,
                sigma2: s * sigma2,
            },
            H1Law::Binned { edges, mu, sigma2 } => H1Law::Binned {
                edges: edges.iter().map(|e| s * e).collect(),
                mu: mu.iter().map(|m| s * m).collect(),
                sigma2: sigma2.iter().map(|x| s * x).collect(),
            },
        };
        Ok(H1Model { law, m_tr: m_t })
    }
}

/// Settings for pair collection during training.
#[derive(Debug, Clone, Copy)]
pub struct TrainingConfig {
    pub subset_size: usize,
    pub variance: VarianceEstimator,
    pub saturation_threshold: f64,
    pub postprocess_fingerprint: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            subset_size: 1024,
            variance: VarianceEstimator::Fast,
            saturation_threshold: DEFAULT_SATURATION_THRESHOLD,
            postprocess_fingerprint: true,
        }
    }
}

/// Leave-one-out collection of (u′, v) pairs over all training images.
///
/// Every image is held out once; a fingerprint estimated from the others is
/// correlated against the held-out image's subsets. Deterministic for a
/// given seed.
pub fn collect_pairs(
    images: &[ImagePlane],
    cfg: &TrainingConfig,
    seed_value: u64,
    denoiser: &dyn Denoiser,
) -> Result<Vec<(f64, f64)>> {
    let l = images.len();
    if l < 3 {
        return Err(Error::InsufficientData(format!(
            "leave-one-out training needs at least 3 images, got {l}"
        )));
    }
    for img in images {
        if !img.same_shape(&images[0]) {
            return Err(Error::Shape("training images differ in dimensions".into()));
        }
    }

    let denoised: Vec<ImagePlane> = images
        .iter()
        .map(|img| denoiser.denoise(img))
        .collect::<Result<_>>()?;
    let masks: Vec<_> = images
        .iter()
        .map(|img| saturation_mask(img, cfg.saturation_threshold))
        .collect::<Result<Vec<_>>>()?;

    let mut pairs = Vec::new();
    for held_out in 0..l {
        let training: Vec<_> = (0..l)
            .filter(|m| *m != held_out)
            .map(|m| (&images[m], &denoised[m]))
            .collect();
        let fold_masks: Vec<_> = (0..l)
            .filter(|m| *m != held_out)
            .map(|m| &masks[m])
            .collect();
        let mut fp = estimate(&training, Some(&fold_masks))?;
        if cfg.postprocess_fingerprint {
            fp = postprocess(&fp, None)?;
        }

        let fold_seed = seed::mix(seed_value, held_out as u64);
        let subsets = partition_subsets(
            &masks[held_out],
            cfg.subset_size,
            usize::MAX,
            fold_seed,
        )?;
        let res = residual(&images[held_out], &denoised[held_out])?;
        for (sid, subset) in subsets.iter().enumerate() {
            let obs = subset_observation(
                &res,
                &denoised[held_out],
                &fp,
                subset,
                sid,
                cfg.variance,
                seed::mix(fold_seed, sid as u64),
            )?;
            if let Some(obs) = obs {
                pairs.push((obs.u_prime, obs.v));
            }
        }
    }
    Ok(pairs)
}

/// Fit the binned H1 law from (u′, v) pairs with equal-population bins.
///
/// Bins that end up empty or with a single member are merged with their
/// nearest neighbor; if everything collapses into one bin the model
/// degenerates to the fixed kind. Sample variances are unbiased and floored
/// at [`SIGMA2_FLOOR`]. The fit is invariant to the order of the input list.
pub fn fit_h1(pairs: &[(f64, f64)], num_bins: usize, m_tr: usize) -> Result<H1Model> {
    if num_bins == 0 {
        return Err(Error::InvalidArgument("num_bins must be >= 1".into()));
    }
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no training pairs".into()));
    }
    if pairs.iter().any(|(u, v)| !u.is_finite() || !v.is_finite()) {
        return Err(Error::Data("non-finite training pair".into()));
    }

    // Sort by (v, u′): bins become contiguous ranges and every later sum
    // runs in a canonical order.
    let mut sorted: Vec<(f64, f64)> = pairs.iter().map(|(u, v)| (*v, *u)).collect();
    sorted.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n = sorted.len();

    let v_min = sorted[0].0;
    let v_max = sorted[n - 1].0;
    if v_min == v_max {
        // all v identical: single bin, fixed kind
        return fixed_from_sorted(&sorted, m_tr);
    }

    // Equal-population edges over v, deduplicated.
    let mut edges = Vec::with_capacity(num_bins + 1);
    edges.push(v_min);
    for t in 1..num_bins {
        let e = sorted[t * n / num_bins].0;
        if e > *edges.last().unwrap() {
            edges.push(e);
        }
    }
    if v_max > *edges.last().unwrap() {
        edges.push(v_max);
    } else if edges.len() == 1 {
        return fixed_from_sorted(&sorted, m_tr);
    }

    // Assign sorted pairs to bins with the lookup rule (half-open, clamp).
    let bins = edges.len() - 1;
    let interior = &edges[1..edges.len() - 1];
    let mut starts = vec![0usize; bins + 1];
    starts[bins] = n;
    for b in 0..interior.len() {
        // first element with v >= interior edge b
        starts[b + 1] = sorted.partition_point(|(v, _)| *v < interior[b]);
    }

    // Ranges over the sorted array, one per bin; merge undersized bins into
    // their neighbor until every bin holds at least two pairs.
    let mut ranges: Vec<(usize, usize)> = (0..bins).map(|b| (starts[b], starts[b + 1])).collect();
    let mut kept_edges = edges.clone();
    loop {
        let Some(small) = ranges.iter().position(|(s, e)| e - s < 2) else {
            break;
        };
        if ranges.len() == 1 {
            return fixed_from_sorted(&sorted, m_tr);
        }
        let merge_left = small > 0;
        let neighbor = if merge_left { small - 1 } else { small + 1 };
        let (a, b) = if merge_left {
            (neighbor, small)
        } else {
            (small, neighbor)
        };
        ranges[a] = (ranges[a].0, ranges[b].1);
        ranges.remove(b);
        kept_edges.remove(b); // drop the edge shared by the merged bins
    }
    if ranges.len() == 1 {
        return fixed_from_sorted(&sorted, m_tr);
    }

    let mut mu = Vec::with_capacity(ranges.len());
    let mut sigma2 = Vec::with_capacity(ranges.len());
    for (s, e) in &ranges {
        let (m, var) = mean_var_unbiased(sorted[*s..*e].iter().map(|(_, u)| *u));
        mu.push(m);
        sigma2.push(var.max(SIGMA2_FLOOR));
    }

    Ok(H1Model {
        law: H1Law::Binned {
            edges: kept_edges,
            mu,
            sigma2,
        },
        m_tr,
    })
}

/// Fixed-kind fit: global mean and variance of u′, ignoring v.
pub fn fit_h1_fixed(pairs: &[(f64, f64)], m_tr: usize) -> Result<H1Model> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no training pairs".into()));
    }
    let mut us: Vec<f64> = pairs.iter().map(|(u, _)| *u).collect();
    us.sort_unstable_by(f64::total_cmp);
    let (m, var) = mean_var_unbiased(us.iter().copied());
    H1Model::fixed(m, var.max(SIGMA2_FLOOR), m_tr)
}

fn fixed_from_sorted(sorted: &[(f64, f64)], m_tr: usize) -> Result<H1Model> {
    let (m, var) = mean_var_unbiased(sorted.iter().map(|(_, u)| *u));
    H1Model::fixed(m, var.max(SIGMA2_FLOOR), m_tr)
}

fn mean_var_unbiased(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss = values.map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, ss / (n - 1) as f64)
}

const GGD_SHAPE_LO: f64 = 0.1;
const GGD_SHAPE_HI: f64 = 10.0;
const GGD_MAX_ITERS: usize = 200;

/// Maximum-likelihood GGD fit of the H0 samples.
///
/// The scale has the closed form α(c) = (c·mean(|x|^c))^{1/c}; the shape is
/// found by golden-section search on the profile log-likelihood over
/// c ∈ [0.1, 10], started from a kurtosis moment match. The returned pair
/// never has lower likelihood than the initializer.
pub fn fit_h0_ggd(samples: &[f64]) -> Result<H0Model> {
    let n = samples.len();
    if n < 100 {
        return Err(Error::InsufficientData(format!(
            "GGD fit needs at least 100 samples, got {n}"
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite H0 sample".into()));
    }
    let first = samples[0];
    if samples.iter().all(|x| *x == first) {
        return Err(Error::Fit("all H0 samples identical".into()));
    }

    let abs: Vec<f64> = samples.iter().map(|x| x.abs()).collect();
    let m2 = samples.iter().map(|x| x * x).sum::<f64>() / n as f64;
    let m4 = samples.iter().map(|x| x * x * x * x).sum::<f64>() / n as f64;
    if !(m2 > 0.0) {
        return Err(Error::Fit("zero second moment".into()));
    }
    let sample_kurtosis = m4 / (m2 * m2);
    let c_init = invert_kurtosis(sample_kurtosis);

    // Profile log-likelihood per sample (up to constants in n):
    //   ln c − ln 2 − lnΓ(1/c) − ln α̂(c) − 1/c
    let profile = |c: f64| -> f64 {
        let mean_pow = abs.iter().map(|a| a.powf(c)).sum::<f64>() / n as f64;
        if !(mean_pow > 0.0) {
            return f64::NEG_INFINITY;
        }
        let ln_alpha = (c * mean_pow).ln() / c;
        c.ln() - std::f64::consts::LN_2 - ln_gamma(1.0 / c) - ln_alpha - 1.0 / c
    };

    let (mut lo, mut hi) = (GGD_SHAPE_LO, GGD_SHAPE_HI);
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = profile(x1);
    let mut f2 = profile(x2);
    let mut iters = 0usize;
    while hi - lo > 1e-10 {
        iters += 1;
        if iters > GGD_MAX_ITERS {
            return Err(Error::Fit(format!(
                "shape search did not converge in {GGD_MAX_ITERS} iterations; last c in [{lo}, {hi}]"
            )));
        }
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = profile(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = profile(x1);
        }
    }
    let mut c = 0.5 * (lo + hi);
    if profile(c_init) > profile(c) {
        c = c_init;
    }
    if c - GGD_SHAPE_LO < 1e-3 || GGD_SHAPE_HI - c < 1e-3 {
        return Err(Error::Fit(format!(
            "shape estimate {c} pinned at the search boundary"
        )));
    }

    let mean_pow = abs.iter().map(|a| a.powf(c)).sum::<f64>() / n as f64;
    let alpha = (c * mean_pow).powf(1.0 / c);
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Fit(format!("degenerate scale estimate {alpha}")));
    }
    H0Model::new(alpha, c)
}

/// Shape value whose theoretical kurtosis matches the sample kurtosis,
/// clamped to the search interval. Kurtosis is decreasing in c.
fn invert_kurtosis(target: f64) -> f64 {
    let (mut lo, mut hi) = (GGD_SHAPE_LO, GGD_SHAPE_HI);
    if target >= ggd_kurtosis(lo) {
        return lo;
    }
    if target <= ggd_kurtosis(hi) {
        return hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ggd_kurtosis(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Per-device model: the H1 law plus the GGD parameters of u′ under H0.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceModel {
    pub h1: H1Model,
    pub h0: H0Model,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    kind: String,
    bin_edges: Vec<f64>,
    mu: Vec<f64>,
    sigma2: Vec<f64>,
    #[serde(rename = "M_tr")]
    m_tr: usize,
    h0: H0Model,
}

/// Serialize the model as JSON with ≥ 15 significant digits per real.
pub fn model_to_json(model: &DeviceModel) -> Result<String> {
    let file = match &model.h1.law {
        H1Law::Binned { edges, mu, sigma2 } => ModelFile {
            kind: "binned".into(),
            bin_edges: edges.clone(),
            mu: mu.clone(),
            sigma2: sigma2.clone(),
            m_tr: model.h1.m_tr,
            h0: model.h0,
        },
        H1Law::Fixed { mu, sigma2 } => ModelFile {
            kind: "fixed".into(),
            bin_edges: Vec::new(),
            mu: vec![*mu],
            sigma2: vec![*sigma2],
            m_tr: model.h1.m_tr,
            h0: model.h0,
        },
    };
    crate::pipeline::to_json_full_precision(&file)
}

pub fn model_from_json(text: &str) -> Result<DeviceModel> {
    let file: ModelFile =
        serde_json::from_str(text).map_err(|e| Error::Data(format!("model parse: {e}")))?;
    let h1 = match file.kind.as_str() {
        "binned" => {
            if file.bin_edges.len() != file.mu.len() + 1 || file.mu.len() != file.sigma2.len() {
                return Err(Error::Data("inconsistent binned model arrays".into()));
            }
            if file.sigma2.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::Data("non-positive sigma2 bin".into()));
            }
            if file.bin_edges.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Data("bin edges not strictly ascending".into()));
            }
            H1Model {
                law: H1Law::Binned {
                    edges: file.bin_edges,
                    mu: file.mu,
                    sigma2: file.sigma2,
                },
                m_tr: file.m_tr,
            }
        }
        "fixed" => {
            if file.mu.len() != 1 || file.sigma2.len() != 1 {
                return Err(Error::Data("fixed model needs exactly one mu/sigma2".into()));
            }
            H1Model::fixed(file.mu[0], file.sigma2[0], file.m_tr)?
        }
        other => return Err(Error::Data(format!("unknown model kind '{other}'"))),
    };
    let h0 = H0Model::new(file.h0.alpha0, file.h0.c0)?;
    Ok(DeviceModel { h1, h0 })
}

pub fn write_model(model: &DeviceModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<DeviceModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}
