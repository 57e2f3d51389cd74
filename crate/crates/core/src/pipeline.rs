//! Batch orchestration: scanning image sets, routing positives and
//! undecided cases to the full-image retest, report files, and evaluation
//! metrics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::plane::{AdaptiveWiener, ImagePlane};
use crate::seed;
use crate::sprt::{
    self, DetectorConfig, DetectorKind, FullTestConfig, SprtOutcome, SprtPlan,
};
use crate::stats::VarianceEstimator;
use crate::synth::{CameraSpec, SceneConfig, SynthCamera};
use crate::training::DeviceModel;

/// JSON with every f64 printed at 17 significant digits, so model and
/// report files are lossless and byte-stable across reruns.
pub fn to_json_full_precision<T: Serialize>(value: &T) -> Result<String> {
    struct FullPrecision;
    impl serde_json::ser::Formatter for FullPrecision {
        fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
        where
            W: ?Sized + std::io::Write,
        {
            write!(writer, "{value:.16e}")
        }
    }
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Data(format!("serialize: {e}")))?;
    Ok(String::from_utf8(out).expect("serializer emits utf-8"))
}

/// Per-image scan outcome. `true_label` is true for same-camera (H1) images
/// when ground truth is known; `retest` is present exactly when the SPRT
/// outcome routed the image to the full-image test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub image_id: String,
    pub true_label: Option<bool>,
    pub sprt_outcome: SprtOutcome,
    pub n_used: usize,
    pub pixels_used: usize,
    pub retest: Option<bool>,
    pub final_positive: bool,
    pub llr_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanAggregates {
    pub scanned: usize,
    pub skipped: usize,
    /// Final detection rate over labeled H1 images.
    pub p_d: Option<f64>,
    /// Final false-positive rate over labeled H0 images.
    pub p_f: Option<f64>,
    /// Mean SPRT observations over labeled H1 / H0 images.
    pub n_bar_h1: Option<f64>,
    pub n_bar_h0: Option<f64>,
    /// n̄ = n̄₀·p_H0 + n̄₁·p_H1 under the empirical priors.
    pub n_bar: Option<f64>,
    pub cost_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub subset_size: usize,
    pub image_pixels: usize,
    pub records: Vec<ScanRecord>,
    pub skipped: Vec<String>,
    pub aggregates: ScanAggregates,
}

/// Recompute the aggregate block from the records.
pub fn compute_aggregates(
    records: &[ScanRecord],
    skipped: usize,
    subset_size: usize,
    image_pixels: usize,
) -> ScanAggregates {
    let mut h1_total = 0usize;
    let mut h1_hits = 0usize;
    let mut h1_n = 0usize;
    let mut h0_total = 0usize;
    let mut h0_hits = 0usize;
    let mut h0_n = 0usize;
    for r in records {
        match r.true_label {
            Some(true) => {
                h1_total += 1;
                h1_n += r.n_used;
                if r.final_positive {
                    h1_hits += 1;
                }
            }
            Some(false) => {
                h0_total += 1;
                h0_n += r.n_used;
                if r.final_positive {
                    h0_hits += 1;
                }
            }
            None => {}
        }
    }
    let p_d = (h1_total > 0).then(|| h1_hits as f64 / h1_total as f64);
    let p_f = (h0_total > 0).then(|| h0_hits as f64 / h0_total as f64);
    let n_bar_h1 = (h1_total > 0).then(|| h1_n as f64 / h1_total as f64);
    let n_bar_h0 = (h0_total > 0).then(|| h0_n as f64 / h0_total as f64);
    let labeled = h1_total + h0_total;
    let n_bar = (labeled > 0).then(|| {
        let p_h1 = h1_total as f64 / labeled as f64;
        let p_h0 = h0_total as f64 / labeled as f64;
        n_bar_h0.unwrap_or(0.0) * p_h0 + n_bar_h1.unwrap_or(0.0) * p_h1
    });
    let cost_ratio = match (p_d, p_f, n_bar) {
        (Some(pd), Some(pf), Some(nb)) if image_pixels > 0 => {
            let p_h1 = h1_total as f64 / labeled as f64;
            Some(sprt::cost_ratio(pd, pf, p_h1, nb, subset_size, image_pixels))
        }
        _ => None,
    };
    ScanAggregates {
        scanned: records.len(),
        skipped,
        p_d,
        p_f,
        n_bar_h1,
        n_bar_h0,
        n_bar,
        cost_ratio,
    }
}

/// Everything the scan loop needs besides the fingerprint and model.
#[derive(Debug, Clone, Copy)]
pub struct ScanConfig {
    pub plan: SprtPlan,
    pub variance: VarianceEstimator,
    pub detector: DetectorKind,
    pub retest_pf: f64,
    pub saturation_threshold: f64,
    pub window: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl ScanConfig {
    pub fn new(plan: SprtPlan, seed: u64) -> Self {
        Self {
            plan,
            variance: VarianceEstimator::Fast,
            detector: DetectorKind::Improved,
            retest_pf: 0.01,
            saturation_threshold: crate::plane::DEFAULT_SATURATION_THRESHOLD,
            window: 3,
            mc_samples: 100_000,
            seed,
        }
    }
}

/// Scan a stream of images: sequential test first, then the full-image
/// retest for accept-H1 and undecided outcomes; accept-H0 is final.
///
/// Items carry (id, optional truth label, load result); failed loads and
/// images without enough usable pixels are logged to the skip list. Each
/// image derives its own seed from (scan seed, image id), so results do not
/// depend on scan order or batch composition.
pub fn scan_stream(
    inputs: impl IntoIterator<Item = (String, Option<bool>, Result<ImagePlane>)>,
    fp: &Fingerprint,
    model: &DeviceModel,
    cfg: &ScanConfig,
) -> Result<ScanReport> {
    let denoiser = AdaptiveWiener::new(cfg.window)?;
    let h1 = model.h1.rescale(cfg.plan.subset_size)?;
    let det_cfg = DetectorConfig {
        variance: cfg.variance,
        saturation_threshold: cfg.saturation_threshold,
    };

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (id, label, loaded) in inputs {
        let image = match loaded {
            Ok(img) => img,
            Err(err) => {
                eprintln!("skipping {id}: {err}");
                skipped.push(id);
                continue;
            }
        };
        let image_seed = seed::mix_str(cfg.seed, &id);
        let plan = cfg.plan.with_seed(image_seed);
        let decision = match sprt::run(&image, fp, &h1, &model.h0, &plan, &denoiser, &det_cfg) {
            Ok(d) => d,
            Err(err @ Error::InsufficientData(_)) => {
                eprintln!("skipping {id}: {err}");
                skipped.push(id);
                continue;
            }
            Err(err) => return Err(err),
        };

        let (retest, final_positive) = match decision.outcome {
            SprtOutcome::AcceptH0 => (None, false),
            SprtOutcome::AcceptH1 | SprtOutcome::Undecided => {
                let ft = FullTestConfig {
                    detector: cfg.detector,
                    target_pf: cfg.retest_pf,
                    variance: cfg.variance,
                    saturation_threshold: cfg.saturation_threshold,
                    mc_samples: cfg.mc_samples,
                    seed: seed::mix(image_seed, 0xFE57),
                };
                let result = sprt::full_image_test_with_denoiser(
                    &image, fp, &model.h1, &model.h0, &ft, &denoiser,
                )?;
                (Some(result.positive), result.positive)
            }
        };

        records.push(ScanRecord {
            image_id: id,
            true_label: label,
            sprt_outcome: decision.outcome,
            n_used: decision.n_used,
            pixels_used: decision.pixels_used,
            retest,
            final_positive,
            llr_final: decision.final_llr(),
        });
    }

    let image_pixels = fp.width() * fp.height();
    let aggregates = compute_aggregates(&records, skipped.len(), cfg.plan.subset_size, image_pixels);
    Ok(ScanReport {
        subset_size: cfg.plan.subset_size,
        image_pixels,
        records,
        skipped,
        aggregates,
    })
}

const CSV_HEADER: [&str; 8] = [
    "image_id",
    "true_label",
    "sprt_outcome",
    "n_used",
    "pixels_used",
    "retest",
    "final",
    "llr_final",
];

fn label_str(label: Option<bool>) -> &'static str {
    match label {
        Some(true) => "h1",
        Some(false) => "h0",
        None => "unknown",
    }
}

fn retest_str(retest: Option<bool>) -> &'static str {
    match retest {
        Some(true) => "positive",
        Some(false) => "negative",
        None => "none",
    }
}

pub fn report_to_csv(report: &ScanReport) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(CSV_HEADER)
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    for r in &report.records {
        writer
            .write_record([
                r.image_id.as_str(),
                label_str(r.true_label),
                &r.sprt_outcome.to_string(),
                &r.n_used.to_string(),
                &r.pixels_used.to_string(),
                retest_str(r.retest),
                if r.final_positive { "positive" } else { "negative" },
                &format!("{}", r.llr_final),
            ])
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv emits utf-8"))
}

/// Parse the CSV record form back; carries exactly the per-image data.
pub fn records_from_csv(text: &str) -> Result<Vec<ScanRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("csv: {e}")))?
        .clone();
    if headers.iter().ne(CSV_HEADER) {
        return Err(Error::Data(format!("unexpected csv header: {headers:?}")));
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Data(format!("csv: {e}")))?;
        let field = |i: usize| row.get(i).unwrap_or_default();
        let true_label = match field(1) {
            "h1" => Some(true),
            "h0" => Some(false),
            "unknown" => None,
            other => return Err(Error::Data(format!("bad label '{other}'"))),
        };
        let sprt_outcome = match field(2) {
            "accept_h1" => SprtOutcome::AcceptH1,
            "accept_h0" => SprtOutcome::AcceptH0,
            "undecided" => SprtOutcome::Undecided,
            other => return Err(Error::Data(format!("bad outcome '{other}'"))),
        };
        let retest = match field(5) {
            "positive" => Some(true),
            "negative" => Some(false),
            "none" => None,
            other => return Err(Error::Data(format!("bad retest '{other}'"))),
        };
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Data(format!("bad count '{s}': {e}")))
        };
        records.push(ScanRecord {
            image_id: field(0).to_string(),
            true_label,
            sprt_outcome,
            n_used: parse_usize(field(3))?,
            pixels_used: parse_usize(field(4))?,
            retest,
            final_positive: match field(6) {
                "positive" => true,
                "negative" => false,
                other => return Err(Error::Data(format!("bad final '{other}'"))),
            },
            llr_final: field(7)
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("bad llr '{}': {e}", field(7))))?,
        });
    }
    Ok(records)
}

pub fn write_report(report: &ScanReport, prefix: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let prefix = prefix.as_ref();
    let json_path = prefix.with_extension("json");
    let csv_path = prefix.with_extension("csv");
    fs::write(&json_path, to_json_full_precision(report)?)
        .map_err(|e| Error::io(&json_path, e))?;
    fs::write(&csv_path, report_to_csv(report)?).map_err(|e| Error::io(&csv_path, e))?;
    Ok((json_path, csv_path))
}

/// Load the JSON report and audit it: the stored aggregates must match a
/// recomputation from the records.
pub fn read_report(json_path: impl AsRef<Path>) -> Result<ScanReport> {
    let json_path = json_path.as_ref();
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let report: ScanReport =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("report parse: {e}")))?;
    audit_report(&report)?;
    Ok(report)
}

pub fn audit_report(report: &ScanReport) -> Result<()> {
    let recomputed = compute_aggregates(
        &report.records,
        report.skipped.len(),
        report.subset_size,
        report.image_pixels,
    );
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9 * (1.0 + y.abs()),
        _ => false,
    };
    let ok = report.aggregates.scanned == recomputed.scanned
        && report.aggregates.skipped == recomputed.skipped
        && close(report.aggregates.p_d, recomputed.p_d)
        && close(report.aggregates.p_f, recomputed.p_f)
        && close(report.aggregates.n_bar_h1, recomputed.n_bar_h1)
        && close(report.aggregates.n_bar_h0, recomputed.n_bar_h0)
        && close(report.aggregates.n_bar, recomputed.n_bar)
        && close(report.aggregates.cost_ratio, recomputed.cost_ratio);
    if !ok {
        return Err(Error::Data(
            "report aggregates do not match the records".into(),
        ));
    }
    for r in &report.records {
        let routed = r.sprt_outcome != SprtOutcome::AcceptH0;
        if routed != r.retest.is_some() {
            return Err(Error::Data(format!(
                "record {} violates the retest routing",
                r.image_id
            )));
        }
    }
    Ok(())
}

/// Area under the ROC curve by pairwise comparison (ties count half).
pub fn roc_auc(h0_scores: &[f64], h1_scores: &[f64]) -> f64 {
    assert!(
        !h0_scores.is_empty() && !h1_scores.is_empty(),
        "AUC needs scores under both hypotheses"
    );
    let mut wins = 0.0f64;
    for s1 in h1_scores {
        for s0 in h0_scores {
            if s1 > s0 {
                wins += 1.0;
            } else if s1 == s0 {
                wins += 0.5;
            }
        }
    }
    wins / (h0_scores.len() as f64 * h1_scores.len() as f64)
}

/// Ground truth sidecar for a simulated corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusTruth {
    pub cameras: Vec<CameraSpec>,
    pub images: Vec<TruthEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TruthEntry {
    pub file: String,
    pub camera: usize,
}

impl CorpusTruth {
    /// file name -> camera index
    pub fn camera_by_file(&self) -> BTreeMap<&str, usize> {
        self.images
            .iter()
            .map(|e| (e.file.as_str(), e.camera))
            .collect()
    }
}

pub fn write_truth(truth: &CorpusTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json_full_precision(truth)?).map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<CorpusTruth> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("truth parse: {e}")))
}

/// Scene schedules available to the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneSchedule {
    /// Flatfields sweeping a range of intensities with the shot index.
    FlatSweep,
    /// Flatfields interleaved with gradients, texture, and near-saturation.
    Mixed,
    /// All-dark frames (a PRNU-free failure mode).
    Dark,
}

impl SceneSchedule {
    pub fn scene_for(&self, shot: usize) -> SceneConfig {
        match self {
            SceneSchedule::FlatSweep => SceneConfig::Flatfield {
                intensity: 70.0 + ((shot * 7) % 131) as f64,
            },
            SceneSchedule::Mixed => match shot % 4 {
                0 => SceneConfig::Flatfield {
                    intensity: 70.0 + ((shot * 7) % 131) as f64,
                },
                1 => SceneConfig::Gradient {
                    low: 40.0,
                    high: 210.0,
                },
                2 => SceneConfig::TexturedNoise {
                    base: 120.0,
                    amplitude: 50.0,
                },
                _ => SceneConfig::NearSaturated { intensity: 252.0 },
            },
            SceneSchedule::Dark => SceneConfig::Dark,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimulateConfig {
    pub cameras: usize,
    pub shots: usize,
    pub width: usize,
    pub height: usize,
    pub sigma_k: f64,
    pub sigma_n: f64,
    pub schedule: SceneSchedule,
    pub seed: u64,
}

/// Write a seeded synthetic corpus of 16-bit grayscale PNGs plus the
/// ground-truth JSON listing camera assignments and camera parameters.
pub fn simulate_corpus(out_dir: impl AsRef<Path>, cfg: &SimulateConfig) -> Result<CorpusTruth> {
    let out_dir = out_dir.as_ref();
    if cfg.cameras == 0 || cfg.shots == 0 {
        return Err(Error::InvalidArgument(
            "need at least one camera and one shot".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut cameras = Vec::with_capacity(cfg.cameras);
    let mut images = Vec::with_capacity(cfg.cameras * cfg.shots);
    for c in 0..cfg.cameras {
        let cam = SynthCamera::new(
            cfg.width,
            cfg.height,
            cfg.sigma_k,
            cfg.sigma_n,
            seed::mix(cfg.seed, c as u64),
        );
        cameras.push(*cam.spec());
        for s in 0..cfg.shots {
            let scene = cfg.schedule.scene_for(s);
            let shot_seed = seed::mix(seed::mix(cfg.seed, 0xCA0 + c as u64), s as u64);
            let plane = cam.shoot(&scene, shot_seed);
            let file = format!("cam{c:02}_shot{s:04}.png");
            write_png16(&plane, out_dir.join(&file))?;
            images.push(TruthEntry { file, camera: c });
        }
    }
    let truth = CorpusTruth { cameras, images };
    write_truth(&truth, out_dir.join("truth.json"))?;
    Ok(truth)
}

/// Save a plane as 16-bit grayscale PNG: 255.0 maps to full scale.
pub fn write_png16(plane: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u16> = plane
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 255.0) * 257.0).round() as u16)
        .collect();
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(plane.width() as u32, plane.height() as u32, raw)
            .expect("matching buffer size");
    buf.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

const RASTER_EXTENSIONS: [&str; 5] = ["png", "tif", "tiff", "pgm", "pnm"];

/// Raster files in a directory, sorted by file name for run-to-run
/// determinism.
pub fn list_raster_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if RASTER_EXTENSIONS.contains(&ext.as_str()) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plane::Denoiser;
    use crate::sprt::make_plan;
    use crate::stats::H0Model;
    use crate::training::{fit_h0_ggd, fit_h1, TrainingConfig};

    fn tiny_record(id: &str, label: Option<bool>, outcome: SprtOutcome, positive: bool) -> ScanRecord {
        ScanRecord {
            image_id: id.into(),
            true_label: label,
            sprt_outcome: outcome,
            n_used: 3,
            pixels_used: 3 * 64,
            retest: if outcome == SprtOutcome::AcceptH0 {
                None
            } else {
                Some(positive)
            },
            final_positive: positive,
            llr_final: if positive { 1.5 } else { -3.5 },
        }
    }

    #[test]
    fn aggregates_recompute_and_prior_identity() {
        let records = vec![
            tiny_record("a", Some(true), SprtOutcome::AcceptH1, true),
            tiny_record("b", Some(true), SprtOutcome::Undecided, true),
            tiny_record("c", Some(false), SprtOutcome::AcceptH0, false),
            tiny_record("d", Some(false), SprtOutcome::AcceptH1, false),
        ];
        let agg = compute_aggregates(&records, 1, 64, 4096);
        assert_eq!(agg.scanned, 4);
        assert_eq!(agg.skipped, 1);
        assert_eq!(agg.p_d, Some(1.0));
        assert_eq!(agg.p_f, Some(0.0));
        // n̄ = n̄₀·p₀ + n̄₁·p₁
        let expected =
            agg.n_bar_h0.unwrap() * 0.5 + agg.n_bar_h1.unwrap() * 0.5;
        assert!((agg.n_bar.unwrap() - expected).abs() < 1e-15);
        assert!(agg.cost_ratio.is_some());
    }

    #[test]
    fn csv_json_roundtrip_identical_data() {
        let records = vec![
            tiny_record("x.png", Some(true), SprtOutcome::AcceptH1, true),
            tiny_record("y.png", None, SprtOutcome::AcceptH0, false),
            tiny_record("z.png", Some(false), SprtOutcome::Undecided, false),
        ];
        let aggregates = compute_aggregates(&records, 0, 64, 4096);
        let report = ScanReport {
            subset_size: 64,
            image_pixels: 4096,
            records,
            skipped: vec![],
            aggregates,
        };
        let csv_text = report_to_csv(&report).unwrap();
        assert!(csv_text.starts_with(
            "image_id,true_label,sprt_outcome,n_used,pixels_used,retest,final,llr_final"
        ));
        let parsed = records_from_csv(&csv_text).unwrap();
        assert_eq!(parsed, report.records);

        let json_text = to_json_full_precision(&report).unwrap();
        let back: ScanReport = serde_json::from_str(&json_text).unwrap();
        assert_eq!(back, report);
        audit_report(&back).unwrap();
    }

    #[test]
    fn audit_catches_tampered_aggregates() {
        let records = vec![tiny_record("a", Some(true), SprtOutcome::AcceptH1, true)];
        let mut aggregates = compute_aggregates(&records, 0, 64, 4096);
        aggregates.p_d = Some(0.25);
        let report = ScanReport {
            subset_size: 64,
            image_pixels: 4096,
            records,
            skipped: vec![],
            aggregates,
        };
        assert!(audit_report(&report).is_err());
    }

    #[test]
    fn audit_catches_routing_violation() {
        let mut record = tiny_record("a", Some(true), SprtOutcome::AcceptH0, false);
        record.retest = Some(false);
        let aggregates = compute_aggregates(std::slice::from_ref(&record), 0, 64, 4096);
        let report = ScanReport {
            subset_size: 64,
            image_pixels: 4096,
            records: vec![record],
            skipped: vec![],
            aggregates,
        };
        assert!(audit_report(&report).is_err());
    }

    #[test]
    fn roc_auc_known_values() {
        assert_eq!(roc_auc(&[0.0, 0.1], &[1.0, 2.0]), 1.0);
        assert_eq!(roc_auc(&[1.0, 2.0], &[0.0, 0.1]), 0.0);
        assert_eq!(roc_auc(&[1.0], &[1.0]), 0.5);
        let auc = roc_auc(&[0.0, 1.0], &[0.5, 2.0]);
        assert!((auc - 0.75).abs() < 1e-15);
    }

    #[test]
    fn simulate_writes_corpus_and_truth() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SimulateConfig {
            cameras: 2,
            shots: 3,
            width: 16,
            height: 16,
            sigma_k: 0.02,
            sigma_n: 2.0,
            schedule: SceneSchedule::Mixed,
            seed: 5,
        };
        let truth = simulate_corpus(dir.path(), &cfg).unwrap();
        assert_eq!(truth.images.len(), 6);
        assert_eq!(truth.cameras.len(), 2);
        assert!(truth.images.iter().all(|e| e.camera < 2));
        let files = list_raster_files(dir.path()).unwrap();
        assert_eq!(files.len(), 6);
        let loaded = read_truth(dir.path().join("truth.json")).unwrap();
        assert_eq!(loaded, truth);

        // 16-bit round trip keeps intensities within the quantization step
        let plane = crate::plane::load_grayscale(&files[0]).unwrap();
        assert!(plane.data().iter().all(|v| (0.0..=255.0).contains(v)));
    }

    #[test]
    fn scan_stream_routes_and_aggregates() {
        // small but complete end-to-end scan over synthetic planes
        let denoiser = AdaptiveWiener::default();
        let cam_a = SynthCamera::new(64, 64, 0.06, 1.5, 21);
        let cam_b = SynthCamera::new(64, 64, 0.06, 1.5, 22);

        let training: Vec<ImagePlane> = (0..8)
            .map(|s| {
                cam_a.shoot(
                    &SceneConfig::Flatfield {
                        intensity: 80.0 + 12.0 * (s % 8) as f64,
                    },
                    s,
                )
            })
            .collect();
        let shots: Vec<_> = training
            .iter()
            .map(|y| (y.clone(), denoiser.denoise(y).unwrap()))
            .collect();
        let pairs: Vec<_> = shots.iter().map(|(y, x)| (y, x)).collect();
        let fp = crate::fingerprint::estimate(&pairs, None).unwrap();

        let t = 256;
        let tcfg = TrainingConfig {
            subset_size: t,
            postprocess_fingerprint: false,
            ..TrainingConfig::default()
        };
        let h1_pairs = crate::training::collect_pairs(&training, &tcfg, 3, &denoiser).unwrap();
        let h1 = fit_h1(&h1_pairs, 4, t).unwrap();

        // H0 samples: camera-B images against camera-A fingerprint
        let mut h0_samples = Vec::new();
        for s in 0..30 {
            let y = cam_b.shoot(&SceneConfig::Flatfield { intensity: 120.0 }, 400 + s);
            let x = denoiser.denoise(&y).unwrap();
            let res = crate::plane::residual(&y, &x).unwrap();
            let mask = crate::plane::saturation_mask(&y, 250.0).unwrap();
            for (sid, subset) in crate::sprt::partition_subsets(&mask, t, 16, s)
                .unwrap()
                .iter()
                .enumerate()
            {
                if let Some(obs) = crate::stats::subset_observation(
                    &res,
                    &x,
                    &fp,
                    subset,
                    sid,
                    VarianceEstimator::Fast,
                    s,
                )
                .unwrap()
                {
                    h0_samples.push(obs.u_prime);
                }
            }
        }
        let h0 = fit_h0_ggd(&h0_samples).unwrap_or(H0Model::new(1.24, 1.78).unwrap());
        let model = DeviceModel { h1, h0 };

        let plan = make_plan(0.95, 0.3, 0.0, 1.0, t, 16, 9).unwrap();
        let cfg = ScanConfig {
            mc_samples: 5_000,
            ..ScanConfig::new(plan, 9)
        };

        let inputs: Vec<(String, Option<bool>, Result<ImagePlane>)> = (0..12)
            .map(|i| {
                let (label, plane) = if i % 2 == 0 {
                    (
                        true,
                        cam_a.shoot(&SceneConfig::Flatfield { intensity: 110.0 }, 900 + i),
                    )
                } else {
                    (
                        false,
                        cam_b.shoot(&SceneConfig::Flatfield { intensity: 110.0 }, 900 + i),
                    )
                };
                (format!("img{i:02}.png"), Some(label), Ok(plane))
            })
            .chain(std::iter::once((
                "broken.png".to_string(),
                None,
                Err(Error::Data("simulated load failure".into())),
            )))
            .collect();

        let report = scan_stream(inputs, &fp, &model, &cfg).unwrap();
        assert_eq!(report.records.len(), 12);
        assert_eq!(report.skipped, vec!["broken.png".to_string()]);
        audit_report(&report).unwrap();
        // routing: accept_h0 has no retest, others exactly one
        for r in &report.records {
            match r.sprt_outcome {
                SprtOutcome::AcceptH0 => assert!(r.retest.is_none()),
                _ => assert!(r.retest.is_some()),
            }
        }
        // strong-PRNU same-camera images must be detected
        assert_eq!(report.aggregates.p_d, Some(1.0));
        assert!(report.aggregates.p_f.unwrap() <= 0.5);

        // determinism: identical rerun gives an identical report
        let inputs2: Vec<(String, Option<bool>, Result<ImagePlane>)> = (0..12)
            .map(|i| {
                let (label, plane) = if i % 2 == 0 {
                    (
                        true,
                        cam_a.shoot(&SceneConfig::Flatfield { intensity: 110.0 }, 900 + i),
                    )
                } else {
                    (
                        false,
                        cam_b.shoot(&SceneConfig::Flatfield { intensity: 110.0 }, 900 + i),
                    )
                };
                (format!("img{i:02}.png"), Some(label), Ok(plane))
            })
            .collect();
        let report2 = scan_stream(inputs2, &fp, &model, &cfg).unwrap();
        assert_eq!(report2.records, report.records);
    }

    #[test]
    fn full_precision_floats_survive_roundtrip() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Probe {
            x: f64,
            y: f64,
        }
        let probe = Probe {
            x: std::f64::consts::PI,
            y: -1.0 / 3.0,
        };
        let text = to_json_full_precision(&probe).unwrap();
        let back: Probe = serde_json::from_str(&text).unwrap();
        assert_eq!(back.x.to_bits(), probe.x.to_bits());
        assert_eq!(back.y.to_bits(), probe.y.to_bits());
    }
}
