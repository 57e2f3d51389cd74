//! Command-line front end: extract fingerprints, train device models, scan
//! image directories with the sequential test, and generate synthetic
//! corpora for evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use prnuseq::error::{Error, Result};
use prnuseq::fingerprint::{
    estimate, postprocess, read_fingerprint, write_fingerprint, write_sidecar, FingerprintMeta,
};
use prnuseq::pipeline::{
    self, list_raster_files, read_report, read_truth, scan_stream, write_report, ScanConfig,
    SceneSchedule, SimulateConfig,
};
use prnuseq::plane::{load_grayscale, saturation_mask, AdaptiveWiener, Denoiser, ImagePlane};
use prnuseq::seed;
use prnuseq::sprt::{
    self, make_plan, DetectorConfig, DetectorKind, FullTestConfig, SprtOutcome,
};
use prnuseq::stats::VarianceEstimator;
use prnuseq::training::{
    collect_pairs, fit_h0_ggd, fit_h1, fit_h1_fixed, read_model, write_model, DeviceModel,
    TrainingConfig, DEFAULT_NUM_BINS,
};

#[derive(Parser)]
#[command(
    name = "prnuseq",
    version,
    about = "PRNU camera fingerprinting with sequential source identification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum VarianceArg {
    Fast,
    Shift,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum DetectorArg {
    Improved,
    Fixed,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SceneArg {
    FlatSweep,
    Mixed,
    Dark,
}

/// Sequential-plan targets; defaults follow the reference preset
/// (P_D* = 0.98, P_F* = 0.3, p = 0.0285, beta = 0.65, T = 1024, N = 256).
#[derive(Args, Clone, Copy)]
struct PlanArgs {
    /// Target detection probability P_D*
    #[arg(long, default_value_t = 0.98)]
    pd: f64,
    /// Target false-positive probability P_F* of the sequential stage
    #[arg(long, default_value_t = 0.3)]
    pf: f64,
    /// Probability that a same-camera image carries no detectable fingerprint
    #[arg(long, default_value_t = 0.0285)]
    p: f64,
    /// Multiplicative threshold relaxation in (0, 1]
    #[arg(long, default_value_t = 0.65)]
    beta: f64,
    /// Subset size in pixels
    #[arg(long = "T", default_value_t = 1024)]
    subset_size: usize,
    /// Maximum number of observations before the full-image fallback
    #[arg(long = "N", default_value_t = 256)]
    max_observations: usize,
}

#[derive(Args, Clone, Copy)]
struct DetectorArgs {
    /// Variance estimator for the u normalization
    #[arg(long, value_enum, default_value_t = VarianceArg::Fast)]
    variance: VarianceArg,
    /// Exclusion radius around the zero shift (shift estimator)
    #[arg(long, default_value_t = 2)]
    exclusion_radius: usize,
    /// Number of sampled circular shifts (shift estimator)
    #[arg(long, default_value_t = 64)]
    num_shifts: usize,
    /// Full-image detector for retests
    #[arg(long, value_enum, default_value_t = DetectorArg::Improved)]
    detector: DetectorArg,
    /// False-positive target of the full-image retest
    #[arg(long, default_value_t = 0.01)]
    retest_pf: f64,
    /// Monte Carlo draws calibrating the improved-mode threshold
    #[arg(long, default_value_t = 100_000)]
    mc_samples: usize,
}

impl DetectorArgs {
    fn variance(&self) -> VarianceEstimator {
        match self.variance {
            VarianceArg::Fast => VarianceEstimator::Fast,
            VarianceArg::Shift => VarianceEstimator::Shift {
                exclusion_radius: self.exclusion_radius,
                num_shifts: self.num_shifts,
            },
        }
    }

    fn detector(&self) -> DetectorKind {
        match self.detector {
            DetectorArg::Improved => DetectorKind::Improved,
            DetectorArg::Fixed => DetectorKind::Fixed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a PRNU fingerprint from a directory of training images.
    Extract {
        /// Directory of training images (PNG/TIFF/PGM)
        #[arg(long)]
        images: PathBuf,
        /// Output fingerprint file
        #[arg(long)]
        out: PathBuf,
        /// Number of training images drawn from the directory
        #[arg(long, default_value_t = 50)]
        l: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Denoiser window (odd, >= 3)
        #[arg(long, default_value_t = 3)]
        window: usize,
        /// Saturation cutoff on the [0,255] scale
        #[arg(long, default_value_t = 250.0)]
        sat_threshold: f64,
        /// Skip artifact removal (row/column zero-mean + spectral cleanup)
        #[arg(long)]
        no_postprocess: bool,
        /// Spectral noise floor; defaults to the fingerprint variance
        #[arg(long)]
        noise_floor: Option<f64>,
    },
    /// Learn the per-device H1 law and the H0 GGD, writing a model file.
    Train {
        /// Same-camera training images
        #[arg(long)]
        images: PathBuf,
        /// Cross-camera images providing H0 samples
        #[arg(long)]
        h0_images: PathBuf,
        /// Fingerprint of the device under training (for the H0 statistics)
        #[arg(long)]
        fingerprint: PathBuf,
        /// Output model JSON
        #[arg(long)]
        out: PathBuf,
        /// Training subset size M_tr in pixels
        #[arg(long = "T", default_value_t = 1024)]
        subset_size: usize,
        /// Number of quantile bins over v
        #[arg(long, default_value_t = DEFAULT_NUM_BINS)]
        bins: usize,
        /// Images per random selection
        #[arg(long, default_value_t = 50)]
        l: usize,
        /// Random selections of l images whose pairs are pooled
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fit the v-independent (fixed-parameter) model
        #[arg(long)]
        fixed: bool,
        /// Subsets per H0 image feeding the GGD fit
        #[arg(long, default_value_t = 64)]
        h0_subsets: usize,
        #[arg(long, default_value_t = 3)]
        window: usize,
        #[arg(long, default_value_t = 250.0)]
        sat_threshold: f64,
        #[command(flatten)]
        detector: DetectorArgs,
    },
    /// Scan a directory: sequential test plus full-image retest per image.
    Scan {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        fingerprint: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Ground-truth JSON from `simulate` enabling error-rate aggregates
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Camera index in the truth file playing H1
        #[arg(long, default_value_t = 0)]
        h1_camera: usize,
        /// Report path prefix; writes <prefix>.json and <prefix>.csv
        #[arg(long)]
        out_prefix: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        window: usize,
        #[arg(long, default_value_t = 250.0)]
        sat_threshold: f64,
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        detector: DetectorArgs,
    },
    /// Decide camera of origin for a single image; prints JSON.
    Test {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        fingerprint: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        window: usize,
        #[arg(long, default_value_t = 250.0)]
        sat_threshold: f64,
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        detector: DetectorArgs,
    },
    /// Write a seeded synthetic corpus with ground-truth camera assignments.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        cameras: usize,
        #[arg(long, default_value_t = 60)]
        shots: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 512)]
        height: usize,
        /// PRNU strength σ_k
        #[arg(long, default_value_t = 0.02)]
        sigma_k: f64,
        /// Sensor noise σ_n in intensity units
        #[arg(long, default_value_t = 2.0)]
        sigma_n: f64,
        #[arg(long, value_enum, default_value_t = SceneArg::FlatSweep)]
        scenes: SceneArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Audit a report file and print its aggregates.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Extract {
            images,
            out,
            l,
            seed,
            window,
            sat_threshold,
            no_postprocess,
            noise_floor,
        } => cmd_extract(
            &images,
            &out,
            l,
            seed,
            window,
            sat_threshold,
            !no_postprocess,
            noise_floor,
        ),
        Command::Train {
            images,
            h0_images,
            fingerprint,
            out,
            subset_size,
            bins,
            l,
            repeats,
            seed,
            fixed,
            h0_subsets,
            window,
            sat_threshold,
            detector,
        } => cmd_train(
            &images,
            &h0_images,
            &fingerprint,
            &out,
            subset_size,
            bins,
            l,
            repeats,
            seed,
            fixed,
            h0_subsets,
            window,
            sat_threshold,
            &detector,
        ),
        Command::Scan {
            images,
            fingerprint,
            model,
            truth,
            h1_camera,
            out_prefix,
            seed,
            window,
            sat_threshold,
            plan,
            detector,
        } => cmd_scan(
            &images,
            &fingerprint,
            &model,
            truth.as_deref(),
            h1_camera,
            &out_prefix,
            seed,
            window,
            sat_threshold,
            &plan,
            &detector,
        ),
        Command::Test {
            image,
            fingerprint,
            model,
            seed,
            window,
            sat_threshold,
            plan,
            detector,
        } => cmd_test(
            &image,
            &fingerprint,
            &model,
            seed,
            window,
            sat_threshold,
            &plan,
            &detector,
        ),
        Command::Simulate {
            out,
            cameras,
            shots,
            width,
            height,
            sigma_k,
            sigma_n,
            scenes,
            seed,
        } => {
            let schedule = match scenes {
                SceneArg::FlatSweep => SceneSchedule::FlatSweep,
                SceneArg::Mixed => SceneSchedule::Mixed,
                SceneArg::Dark => SceneSchedule::Dark,
            };
            let cfg = SimulateConfig {
                cameras,
                shots,
                width,
                height,
                sigma_k,
                sigma_n,
                schedule,
                seed,
            };
            let truth = pipeline::simulate_corpus(&out, &cfg)?;
            println!(
                "wrote {} images from {} cameras to {}",
                truth.images.len(),
                truth.cameras.len(),
                out.display()
            );
            Ok(())
        }
        Command::Report { report } => cmd_report(&report),
    }
}

/// Seeded selection of `l` files; uses all of them when the pool is small.
fn select_files(files: &[PathBuf], l: usize, seed_value: u64) -> Vec<PathBuf> {
    if files.len() <= l {
        return files.to_vec();
    }
    let mut shuffled = files.to_vec();
    let mut rng = seed::rng(seed_value);
    for i in (1..shuffled.len()).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        shuffled.swap(i, j);
    }
    shuffled.truncate(l);
    shuffled
}

fn load_planes(paths: &[PathBuf]) -> Result<Vec<ImagePlane>> {
    paths.iter().map(load_grayscale).collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_extract(
    images: &Path,
    out: &Path,
    l: usize,
    seed_value: u64,
    window: usize,
    sat_threshold: f64,
    do_postprocess: bool,
    noise_floor: Option<f64>,
) -> Result<()> {
    let files = list_raster_files(images)?;
    if files.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "fingerprint extraction needs at least 2 images, found {}",
            files.len()
        )));
    }
    let selected = select_files(&files, l, seed::mix(seed_value, 0x5E1));
    let denoiser = AdaptiveWiener::new(window)?;
    let planes = load_planes(&selected)?;
    let denoised: Vec<ImagePlane> = planes
        .iter()
        .map(|p| denoiser.denoise(p))
        .collect::<Result<_>>()?;
    let masks: Vec<_> = planes
        .iter()
        .map(|p| saturation_mask(p, sat_threshold))
        .collect::<Result<Vec<_>>>()?;

    let training: Vec<_> = planes.iter().zip(&denoised).collect();
    let mask_refs: Vec<_> = masks.iter().collect();
    let mut fp = estimate(&training, Some(&mask_refs))?;
    if do_postprocess {
        fp = postprocess(&fp, noise_floor)?;
    }

    write_fingerprint(&fp, out)?;
    let meta = FingerprintMeta {
        sources: selected
            .iter()
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
        training_count: fp.training_count(),
        seed: seed_value,
        window,
        saturation_threshold: sat_threshold,
        postprocessed: fp.is_postprocessed(),
        noise_floor,
    };
    write_sidecar(&meta, out)?;
    println!(
        "fingerprint {}x{} from {} images -> {}",
        fp.width(),
        fp.height(),
        fp.training_count(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    images: &Path,
    h0_images: &Path,
    fingerprint: &Path,
    out: &Path,
    subset_size: usize,
    bins: usize,
    l: usize,
    repeats: usize,
    seed_value: u64,
    fixed: bool,
    h0_subsets: usize,
    window: usize,
    sat_threshold: f64,
    detector: &DetectorArgs,
) -> Result<()> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    let files = list_raster_files(images)?;
    if files.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "training needs at least 3 same-camera images, found {}",
            files.len()
        )));
    }
    let denoiser = AdaptiveWiener::new(window)?;
    let tcfg = TrainingConfig {
        subset_size,
        variance: detector.variance(),
        saturation_threshold: sat_threshold,
        postprocess_fingerprint: true,
    };

    // Pool (u', v) pairs over seeded selections of l images.
    let mut pairs = Vec::new();
    for r in 0..repeats {
        let selected = select_files(&files, l, seed::mix(seed_value, 0x9E7 + r as u64));
        let planes = load_planes(&selected)?;
        let mut fold = collect_pairs(&planes, &tcfg, seed::mix(seed_value, 0x117 + r as u64), &denoiser)?;
        pairs.append(&mut fold);
        if files.len() <= l {
            break; // identical selections would only duplicate pairs
        }
    }

    let h1 = if fixed {
        fit_h1_fixed(&pairs, subset_size)?
    } else {
        fit_h1(&pairs, bins, subset_size)?
    };

    // H0 samples: cross-camera images against this device's fingerprint.
    let fp = read_fingerprint(fingerprint)?;
    let h0_files = list_raster_files(h0_images)?;
    if h0_files.is_empty() {
        return Err(Error::InsufficientData(
            "no cross-camera images for the H0 fit".into(),
        ));
    }
    let mut h0_samples = Vec::new();
    for (fi, path) in h0_files.iter().enumerate() {
        let img = load_grayscale(path)?;
        if !fp.same_shape(&img) {
            return Err(Error::Shape(format!(
                "H0 image {} does not match the fingerprint dimensions",
                path.display()
            )));
        }
        let den = denoiser.denoise(&img)?;
        let res = prnuseq::plane::residual(&img, &den)?;
        let mask = saturation_mask(&img, sat_threshold)?;
        let img_seed = seed::mix(seed_value, 0xB0 + fi as u64);
        let subsets = sprt::partition_subsets(&mask, subset_size, h0_subsets, img_seed)?;
        for (sid, subset) in subsets.iter().enumerate() {
            if let Some(obs) = prnuseq::stats::subset_observation(
                &res,
                &den,
                &fp,
                subset,
                sid,
                detector.variance(),
                seed::mix(img_seed, sid as u64),
            )? {
                h0_samples.push(obs.u_prime);
            }
        }
    }
    let h0 = fit_h0_ggd(&h0_samples)?;

    let model = DeviceModel { h1, h0 };
    write_model(&model, out)?;
    println!(
        "model: {} bins, M_tr = {}, alpha0 = {:.4}, c0 = {:.4} -> {}",
        model.h1.bin_count(),
        model.h1.m_tr,
        model.h0.alpha0,
        model.h0.c0,
        out.display()
    );
    Ok(())
}

fn plan_from_args(plan: &PlanArgs, seed_value: u64) -> Result<prnuseq::SprtPlan> {
    make_plan(
        plan.pd,
        plan.pf,
        plan.p,
        plan.beta,
        plan.subset_size,
        plan.max_observations,
        seed_value,
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_scan(
    images: &Path,
    fingerprint: &Path,
    model: &Path,
    truth: Option<&Path>,
    h1_camera: usize,
    out_prefix: &Path,
    seed_value: u64,
    window: usize,
    sat_threshold: f64,
    plan: &PlanArgs,
    detector: &DetectorArgs,
) -> Result<()> {
    let fp = read_fingerprint(fingerprint)?;
    let device_model = read_model(model)?;
    let plan = plan_from_args(plan, seed_value)?;
    let truth = truth.map(read_truth).transpose()?;

    let files = list_raster_files(images)?;
    let labels: Vec<Option<bool>> = files
        .iter()
        .map(|path| {
            let name = path.file_name().unwrap_or_default().to_string_lossy();
            truth.as_ref().and_then(|t| {
                t.camera_by_file()
                    .get(name.as_ref())
                    .map(|cam| *cam == h1_camera)
            })
        })
        .collect();

    let cfg = ScanConfig {
        plan,
        variance: detector.variance(),
        detector: detector.detector(),
        retest_pf: detector.retest_pf,
        saturation_threshold: sat_threshold,
        window,
        mc_samples: detector.mc_samples,
        seed: seed_value,
    };
    let inputs = files.iter().zip(labels).map(|(path, label)| {
        let id = path
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        (id, label, load_grayscale(path))
    });
    let report = scan_stream(inputs, &fp, &device_model, &cfg)?;
    let (json_path, csv_path) = write_report(&report, out_prefix)?;
    println!(
        "scanned {} images ({} skipped) -> {}, {}",
        report.aggregates.scanned,
        report.aggregates.skipped,
        json_path.display(),
        csv_path.display()
    );
    print_aggregates(&report.aggregates);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_test(
    image: &Path,
    fingerprint: &Path,
    model: &Path,
    seed_value: u64,
    window: usize,
    sat_threshold: f64,
    plan: &PlanArgs,
    detector: &DetectorArgs,
) -> Result<()> {
    let fp = read_fingerprint(fingerprint)?;
    let device_model = read_model(model)?;
    let denoiser = AdaptiveWiener::new(window)?;
    let img = load_grayscale(image)?;
    let id = image
        .file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();
    let plan = plan_from_args(plan, seed::mix_str(seed_value, &id))?;
    let h1 = device_model.h1.rescale(plan.subset_size)?;
    let det_cfg = DetectorConfig {
        variance: detector.variance(),
        saturation_threshold: sat_threshold,
    };
    let decision = sprt::run(
        &img,
        &fp,
        &h1,
        &device_model.h0,
        &plan,
        &denoiser,
        &det_cfg,
    )?;

    let retest = match decision.outcome {
        SprtOutcome::AcceptH0 => None,
        _ => {
            let ft = FullTestConfig {
                detector: detector.detector(),
                target_pf: detector.retest_pf,
                variance: detector.variance(),
                saturation_threshold: sat_threshold,
                mc_samples: detector.mc_samples,
                seed: seed::mix(plan.seed, 0xFE57),
            };
            Some(sprt::full_image_test_with_denoiser(
                &img,
                &fp,
                &device_model.h1,
                &device_model.h0,
                &ft,
                &denoiser,
            )?)
        }
    };
    let final_positive = retest.map(|r| r.positive).unwrap_or(false);

    #[derive(serde::Serialize)]
    struct TestOutput {
        image: String,
        sprt_outcome: SprtOutcome,
        n_used: usize,
        pixels_used: usize,
        llr_final: f64,
        retest: Option<prnuseq::sprt::FullTestResult>,
        decision: &'static str,
    }
    let out = TestOutput {
        image: id,
        sprt_outcome: decision.outcome,
        n_used: decision.n_used,
        pixels_used: decision.pixels_used,
        llr_final: decision.final_llr(),
        retest,
        decision: if final_positive { "positive" } else { "negative" },
    };
    println!("{}", pipeline::to_json_full_precision(&out)?);
    Ok(())
}

fn cmd_report(report_path: &Path) -> Result<()> {
    let report = read_report(report_path)?;
    println!(
        "report audit OK: {} records, {} skipped",
        report.records.len(),
        report.skipped.len()
    );
    print_aggregates(&report.aggregates);
    Ok(())
}

fn print_aggregates(agg: &pipeline::ScanAggregates) {
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.4}"),
        None => "n/a".to_string(),
    };
    println!(
        "P_D = {}  P_F = {}  n_h1 = {}  n_h0 = {}  n = {}  cost_ratio = {}",
        fmt(agg.p_d),
        fmt(agg.p_f),
        fmt(agg.n_bar_h1),
        fmt(agg.n_bar_h0),
        fmt(agg.n_bar),
        fmt(agg.cost_ratio)
    );
}
