//! PRNU fingerprint estimation and postprocessing.
//!
//! The per-pixel estimate aggregates L training images: with y the raw
//! samples and x̂ the denoised ones, k̂ = ⟨(y − x̂), x̂⟩ / ‖x̂‖². Postprocessing
//! removes systematic artifacts shared by same-model cameras: row/column
//! zero-meaning followed by spectral peak suppression in the Fourier domain.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::{ImagePlane, PixelMask};

/// Estimated per-pixel PRNU with its training provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    width: usize,
    height: usize,
    k: Vec<f64>,
    training_count: u32,
    postprocessed: bool,
}

impl Fingerprint {
    pub fn new(
        width: usize,
        height: usize,
        k: Vec<f64>,
        training_count: u32,
        postprocessed: bool,
    ) -> Result<Self> {
        if k.len() != width * height {
            return Err(Error::Shape(format!(
                "fingerprint length {} does not match {}x{}",
                k.len(),
                width,
                height
            )));
        }
        if !k.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("fingerprint contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            k,
            training_count,
            postprocessed,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.k
    }

    pub fn training_count(&self) -> u32 {
        self.training_count
    }

    pub fn is_postprocessed(&self) -> bool {
        self.postprocessed
    }

    pub fn same_shape(&self, plane: &ImagePlane) -> bool {
        self.width == plane.width() && self.height == plane.height()
    }
}

/// Estimate the PRNU from (raw, denoised) training pairs.
///
/// Masked-out samples are excluded from both the numerator and denominator
/// of the per-pixel ratio; pixels whose denominator vanishes (all-black or
/// fully masked across training) get k̂ = 0 so the fingerprint stays dense.
///
/// Per-pixel contributions are accumulated in value order, which makes the
/// result bit-identical under any permutation of the training images.
pub fn estimate(
    training: &[(&ImagePlane, &ImagePlane)],
    masks: Option<&[&PixelMask]>,
) -> Result<Fingerprint> {
    let l = training.len();
    if l < 2 {
        return Err(Error::InsufficientData(format!(
            "fingerprint estimation needs at least 2 training images, got {l}"
        )));
    }
    let (w, h) = (training[0].0.width(), training[0].0.height());
    for (y, xhat) in training {
        if y.width() != w || y.height() != h || !y.same_shape(xhat) {
            return Err(Error::Shape("training planes differ in dimensions".into()));
        }
    }
    if let Some(masks) = masks {
        if masks.len() != l {
            return Err(Error::Shape(format!(
                "{} masks for {} training images",
                masks.len(),
                l
            )));
        }
        for (m, (y, _)) in masks.iter().zip(training) {
            if !m.matches(y) {
                return Err(Error::Shape("mask dimensions differ from planes".into()));
            }
        }
    }

    let n_pixels = w * h;
    let mut k = vec![0.0f64; n_pixels];

    // Chunked pixel-major accumulation keeps the per-image reads sequential.
    const CHUNK: usize = 4096;
    let mut num = vec![0.0f64; CHUNK * l];
    let mut den = vec![0.0f64; CHUNK * l];
    let mut counts = vec![0usize; CHUNK];

    let mut start = 0;
    while start < n_pixels {
        let len = CHUNK.min(n_pixels - start);
        counts[..len].fill(0);
        for (m, (y, xhat)) in training.iter().enumerate() {
            let yd = &y.data()[start..start + len];
            let xd = &xhat.data()[start..start + len];
            match masks {
                Some(masks) => {
                    let flags = &masks[m].flags()[start..start + len];
                    for i in 0..len {
                        if flags[i] {
                            let c = counts[i];
                            let x = xd[i];
                            num[i * l + c] = (yd[i] - x) * x;
                            den[i * l + c] = x * x;
                            counts[i] = c + 1;
                        }
                    }
                }
                None => {
                    for i in 0..len {
                        let x = xd[i];
                        num[i * l + m] = (yd[i] - x) * x;
                        den[i * l + m] = x * x;
                    }
                    // all samples usable
                }
            }
        }
        if masks.is_none() {
            counts[..len].fill(l);
        }
        for i in 0..len {
            let c = counts[i];
            let ns = &mut num[i * l..i * l + c];
            let ds = &mut den[i * l..i * l + c];
            ns.sort_unstable_by(f64::total_cmp);
            ds.sort_unstable_by(f64::total_cmp);
            let d: f64 = ds.iter().sum();
            k[start + i] = if d > 0.0 {
                ns.iter().sum::<f64>() / d
            } else {
                0.0
            };
        }
        start += len;
    }

    Fingerprint::new(w, h, k, l as u32, false)
}

/// Maximum-likelihood shifted-PRNU estimate for one pixel, solving the
/// quadratic stationarity equation
///
/// ```text
/// κ²⟨x̂,y⟩σ_r² + (‖x̂‖²σ_n² − ‖y‖²σ_r²)κ − ⟨x̂,y⟩σ_n² = 0
/// ```
///
/// and returning the root closest to the weighted-MSE solution ⟨x̂,y⟩/‖x̂‖².
/// With σ_r² = 0 the ratio itself is returned.
pub fn estimate_mle_quadratic(
    xhat: &[f64],
    y: &[f64],
    sigma_n2: f64,
    sigma_r2: f64,
) -> Result<f64> {
    if xhat.len() != y.len() {
        return Err(Error::Shape(format!(
            "sample vectors of length {} vs {}",
            xhat.len(),
            y.len()
        )));
    }
    if xhat.len() < 2 {
        return Err(Error::InsufficientData(
            "quadratic estimator needs at least 2 samples".into(),
        ));
    }
    if !(sigma_n2 > 0.0) {
        return Err(Error::Domain(format!("sigma_n2 must be > 0, got {sigma_n2}")));
    }
    if !(sigma_r2 >= 0.0) {
        return Err(Error::Domain(format!("sigma_r2 must be >= 0, got {sigma_r2}")));
    }

    let sxy: f64 = xhat.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = xhat.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();

    if sigma_r2 == 0.0 {
        if sxx == 0.0 {
            return Err(Error::NumericalDegeneracy(
                "zero denoised energy with sigma_r2 = 0".into(),
            ));
        }
        return Ok(sxy / sxx);
    }

    let a = sxy * sigma_r2;
    let b = sxx * sigma_n2 - syy * sigma_r2;
    let c = -sxy * sigma_n2;

    if a == 0.0 {
        // ⟨x̂,y⟩ = 0 degenerates the quadratic to bκ + c = 0 (with c = 0 too).
        if b == 0.0 {
            return Err(Error::NumericalDegeneracy(
                "quadratic collapsed with zero linear coefficient".into(),
            ));
        }
        return Ok(-c / b);
    }

    let disc = b * b - 4.0 * a * c;
    if !(disc >= 0.0) {
        return Err(Error::NumericalDegeneracy(format!(
            "no real root, discriminant {disc}"
        )));
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    let r1 = q / a;
    let r2 = if q != 0.0 { c / q } else { -b / a - r1 };

    if sxx == 0.0 {
        return Err(Error::NumericalDegeneracy(
            "zero denoised energy, no reference ratio".into(),
        ));
    }
    let reference = sxy / sxx;
    if (r1 - reference).abs() <= (r2 - reference).abs() {
        Ok(r1)
    } else {
        Ok(r2)
    }
}

/// Remove systematic fingerprint artifacts.
///
/// Step 1 subtracts every row mean, then every column mean. Step 2 moves to
/// the 2-D Fourier domain and suppresses spectral peaks: each bin with power
/// above the noise floor is shrunk by floor/power, which removes the
/// above-floor excess where periodic artifacts concentrate and leaves a flat
/// spectrum untouched. `noise_floor` defaults to the variance of the
/// zero-meaned fingerprint.
pub fn postprocess(fp: &Fingerprint, noise_floor: Option<f64>) -> Result<Fingerprint> {
    if fp.postprocessed {
        return Err(Error::InvalidArgument(
            "fingerprint is already postprocessed".into(),
        ));
    }
    if !fp.k.iter().all(|v| v.is_finite()) {
        return Err(Error::Data("fingerprint contains non-finite values".into()));
    }
    let (w, h) = (fp.width, fp.height);
    let mut k = fp.k.clone();
    subtract_row_col_means(&mut k, w, h);

    let floor = match noise_floor {
        Some(f) => {
            if !(f >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "noise floor must be >= 0, got {f}"
                )));
            }
            f
        }
        None => {
            let mean = k.iter().sum::<f64>() / k.len() as f64;
            k.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k.len() as f64
        }
    };

    let mut buf: Vec<Complex<f64>> = k.iter().map(|v| Complex::new(*v, 0.0)).collect();
    fft_2d(&mut buf, w, h, false);
    let n = (w * h) as f64;
    for c in buf.iter_mut() {
        let power = c.norm_sqr() / n;
        if power > floor {
            *c *= floor / power;
        }
    }
    fft_2d(&mut buf, w, h, true);
    let out: Vec<f64> = buf.iter().map(|c| c.re / n).collect();

    Fingerprint::new(w, h, out, fp.training_count, true)
}

/// Subtract each row's mean from its row, then each column's mean from its
/// column. Applying the row step after the column step would disturb nothing:
/// the combined map is a projection.
pub(crate) fn subtract_row_col_means(k: &mut [f64], w: usize, h: usize) {
    for i in 0..h {
        let row = &mut k[i * w..(i + 1) * w];
        let m = row.iter().sum::<f64>() / w as f64;
        for v in row.iter_mut() {
            *v -= m;
        }
    }
    for j in 0..w {
        let mut m = 0.0;
        for i in 0..h {
            m += k[i * w + j];
        }
        m /= h as f64;
        for i in 0..h {
            k[i * w + j] -= m;
        }
    }
}

/// In-place 2-D FFT, rows then columns via transpose. Unnormalized; a
/// forward/inverse round trip scales by width × height.
fn fft_2d(buf: &mut [Complex<f64>], w: usize, h: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft_row = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in buf.chunks_exact_mut(w) {
        fft_row.process(row);
    }
    let mut transposed = vec![Complex::default(); buf.len()];
    transpose(buf, &mut transposed, w, h);
    let fft_col = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    for col in transposed.chunks_exact_mut(h) {
        fft_col.process(col);
    }
    transpose(&transposed, buf, h, w);
}

fn transpose(src: &[Complex<f64>], dst: &mut [Complex<f64>], w: usize, h: usize) {
    for i in 0..h {
        for j in 0..w {
            dst[j * h + i] = src[i * w + j];
        }
    }
}

const MAGIC: &[u8; 8] = b"PRNUFP1\0";

/// Write the binary fingerprint file: magic "PRNUFP1\0", little-endian u32
/// width, height, L, a u8 postprocessed flag, then row-major f64 values.
pub fn write_fingerprint(fp: &Fingerprint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes =
        Vec::with_capacity(MAGIC.len() + 13 + fp.k.len() * std::mem::size_of::<f64>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(fp.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(fp.height as u32).to_le_bytes());
    bytes.extend_from_slice(&fp.training_count.to_le_bytes());
    bytes.push(u8::from(fp.postprocessed));
    for v in &fp.k {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_fingerprint(path: impl AsRef<Path>) -> Result<Fingerprint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 13 || &bytes[..8] != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "not a PRNUFP1 fingerprint file".into(),
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let width = u32_at(8) as usize;
    let height = u32_at(12) as usize;
    let l = u32_at(16);
    let postprocessed = bytes[20] != 0;
    let expected = 21 + width * height * 8;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let k: Vec<f64> = bytes[21..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Fingerprint::new(width, height, k, l, postprocessed)
}

/// Sidecar metadata written next to the fingerprint file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FingerprintMeta {
    pub sources: Vec<String>,
    pub training_count: u32,
    pub seed: u64,
    pub window: usize,
    pub saturation_threshold: f64,
    pub postprocessed: bool,
    pub noise_floor: Option<f64>,
}

/// `<basename>.meta.json` next to the fingerprint file.
pub fn sidecar_path(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

pub fn write_sidecar(meta: &FingerprintMeta, fingerprint_path: impl AsRef<Path>) -> Result<()> {
    let path = sidecar_path(fingerprint_path);
    let json = crate::pipeline::to_json_full_precision(meta)?;
    fs::write(&path, json).map_err(|e| Error::io(path, e))
}

pub fn read_sidecar(fingerprint_path: impl AsRef<Path>) -> Result<FingerprintMeta> {
    let path = sidecar_path(fingerprint_path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("sidecar parse: {e}")))
}
