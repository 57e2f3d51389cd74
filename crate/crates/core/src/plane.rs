//! Image planes: decoding, grayscale conversion, denoising, noise residuals,
//! and saturation masking.
//!
//! Everything downstream works on a single luminance plane with real
//! intensities in [0, 255]. The denoiser is pluggable behind [`Denoiser`];
//! the default is a locally adaptive Wiener filter, since the detection
//! statistics are agnostic to the concrete filter.

use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel image, row-major, intensities in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "plane data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("plane contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Constant plane.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value at (row, col).
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &ImagePlane) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }
}

/// Per-pixel usability flags (true = usable). Dimensions always match the
/// plane the mask was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    width: usize,
    height: usize,
    flags: Vec<bool>,
}

impl PixelMask {
    pub fn all_usable(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            flags: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn is_usable(&self, index: usize) -> bool {
        self.flags[index]
    }

    pub fn usable_count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    /// Indices of usable pixels in ascending order.
    pub fn usable_indices(&self) -> Vec<u32> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.then_some(i as u32))
            .collect()
    }

    pub fn matches(&self, plane: &ImagePlane) -> bool {
        self.width == plane.width && self.height == plane.height
    }
}

const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;
const U16_SCALE: f64 = 255.0 / 65535.0;

/// Decode a raster file (PNG, TIFF, PGM) into a luminance plane.
///
/// RGB inputs reduce to 0.299 R + 0.587 G + 0.114 B; 16-bit samples are
/// rescaled so that full scale maps to 255.0.
pub fn load_grayscale(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);

    use image::DynamicImage as D;
    let data: Vec<f64> = match img {
        D::ImageLuma8(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        D::ImageLumaA8(buf) => buf.pixels().map(|p| f64::from(p.0[0])).collect(),
        D::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) * U16_SCALE)
            .collect(),
        D::ImageLumaA16(buf) => buf.pixels().map(|p| f64::from(p.0[0]) * U16_SCALE).collect(),
        D::ImageRgb8(buf) => buf.pixels().map(|p| luma8(p.0[0], p.0[1], p.0[2])).collect(),
        D::ImageRgba8(buf) => buf.pixels().map(|p| luma8(p.0[0], p.0[1], p.0[2])).collect(),
        D::ImageRgb16(buf) => buf
            .pixels()
            .map(|p| luma16(p.0[0], p.0[1], p.0[2]))
            .collect(),
        D::ImageRgba16(buf) => buf
            .pixels()
            .map(|p| luma16(p.0[0], p.0[1], p.0[2]))
            .collect(),
        other => {
            // Float formats do not occur in the supported container set;
            // normalize through 16-bit RGB if a decoder produces one anyway.
            let buf = other.to_rgb16();
            buf.pixels()
                .map(|p| luma16(p.0[0], p.0[1], p.0[2]))
                .collect()
        }
    };
    ImagePlane::new(w, h, data)
}

fn luma8(r: u8, g: u8, b: u8) -> f64 {
    LUMA_R * f64::from(r) + LUMA_G * f64::from(g) + LUMA_B * f64::from(b)
}

fn luma16(r: u16, g: u16, b: u16) -> f64 {
    LUMA_R * (f64::from(r) * U16_SCALE)
        + LUMA_G * (f64::from(g) * U16_SCALE)
        + LUMA_B * (f64::from(b) * U16_SCALE)
}

/// Estimator of the noise-free scene from a raw plane.
pub trait Denoiser {
    fn denoise(&self, img: &ImagePlane) -> Result<ImagePlane>;
}

/// Locally adaptive Wiener filter.
///
/// Per pixel, with m and s² the mean and variance over the clipped local
/// window and σ_n² the mean of the local variances over the whole plane:
///
/// ```text
/// x̂ = m + max(0, s² − σ_n²) / max(s², σ_n²) · (y − m)
/// ```
///
/// Windows are clipped at the image edges; no padding is invented.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveWiener {
    window: usize,
}

impl AdaptiveWiener {
    pub fn new(window: usize) -> Result<Self> {
        if window < 3 || window % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "window must be odd and >= 3, got {window}"
            )));
        }
        Ok(Self { window })
    }

    pub fn window(&self) -> usize {
        self.window
    }
}

impl Default for AdaptiveWiener {
    fn default() -> Self {
        Self { window: 3 }
    }
}

impl Denoiser for AdaptiveWiener {
    fn denoise(&self, img: &ImagePlane) -> Result<ImagePlane> {
        denoise(img, self.window)
    }
}

/// Locally adaptive Wiener estimate of the noise-free image.
/// See [`AdaptiveWiener`] for the formula.
pub fn denoise(img: &ImagePlane, window: usize) -> Result<ImagePlane> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "window must be odd and >= 3, got {window}"
        )));
    }
    let (w, h) = (img.width, img.height);
    if w < window || h < window {
        return Err(Error::DegenerateInput(format!(
            "image {w}x{h} smaller than {window}x{window} window"
        )));
    }
    let r = window / 2;

    // Summed-area tables over values and squares; one extra row/col of zeros.
    let mut sat = vec![0.0f64; (w + 1) * (h + 1)];
    let mut sat2 = vec![0.0f64; (w + 1) * (h + 1)];
    for i in 0..h {
        let mut row_acc = 0.0;
        let mut row_acc2 = 0.0;
        for j in 0..w {
            let v = img.data[i * w + j];
            row_acc += v;
            row_acc2 += v * v;
            sat[(i + 1) * (w + 1) + (j + 1)] = sat[i * (w + 1) + (j + 1)] + row_acc;
            sat2[(i + 1) * (w + 1) + (j + 1)] = sat2[i * (w + 1) + (j + 1)] + row_acc2;
        }
    }
    let box_sum = |sat: &[f64], i0: usize, i1: usize, j0: usize, j1: usize| -> f64 {
        // inclusive pixel range [i0, i1] x [j0, j1]
        sat[(i1 + 1) * (w + 1) + (j1 + 1)] + sat[i0 * (w + 1) + j0]
            - sat[i0 * (w + 1) + (j1 + 1)]
            - sat[(i1 + 1) * (w + 1) + j0]
    };

    let mut mean = vec![0.0f64; w * h];
    let mut var = vec![0.0f64; w * h];
    let mut var_sum = 0.0f64;
    for i in 0..h {
        let i0 = i.saturating_sub(r);
        let i1 = (i + r).min(h - 1);
        for j in 0..w {
            let j0 = j.saturating_sub(r);
            let j1 = (j + r).min(w - 1);
            let count = ((i1 - i0 + 1) * (j1 - j0 + 1)) as f64;
            let m = box_sum(&sat, i0, i1, j0, j1) / count;
            let msq = box_sum(&sat2, i0, i1, j0, j1) / count;
            let s2 = (msq - m * m).max(0.0);
            mean[i * w + j] = m;
            var[i * w + j] = s2;
            var_sum += s2;
        }
    }
    let noise = var_sum / (w * h) as f64;

    let mut out = Vec::with_capacity(w * h);
    for idx in 0..w * h {
        let m = mean[idx];
        let s2 = var[idx];
        let denom = s2.max(noise);
        let gain = if denom > 0.0 {
            (s2 - noise).max(0.0) / denom
        } else {
            0.0
        };
        out.push(m + gain * (img.data[idx] - m));
    }
    Ok(ImagePlane::from_raw(w, h, out))
}

/// Element-wise noise residual y − x̂.
pub fn residual(img: &ImagePlane, denoised: &ImagePlane) -> Result<ImagePlane> {
    if !img.same_shape(denoised) {
        return Err(Error::Shape(format!(
            "residual operands {}x{} vs {}x{}",
            img.width, img.height, denoised.width, denoised.height
        )));
    }
    let data = img
        .data
        .iter()
        .zip(&denoised.data)
        .map(|(y, x)| y - x)
        .collect();
    Ok(ImagePlane::from_raw(img.width, img.height, data))
}

/// Flag pixels below the saturation threshold as usable.
///
/// Saturated pixels carry no PRNU, so they are excluded from subsets and
/// fingerprint sums. The threshold is inclusive: intensity ≥ threshold is
/// flagged unusable.
pub fn saturation_mask(img: &ImagePlane, threshold: f64) -> Result<PixelMask> {
    if !(threshold > 0.0 && threshold <= 255.0) {
        return Err(Error::InvalidArgument(format!(
            "saturation threshold must be in (0, 255], got {threshold}"
        )));
    }
    Ok(PixelMask {
        width: img.width,
        height: img.height,
        flags: img.data.iter().map(|v| *v < threshold).collect(),
    })
}

/// Default saturation cutoff on the [0, 255] scale.
pub const DEFAULT_SATURATION_THRESHOLD: f64 = 250.0;
