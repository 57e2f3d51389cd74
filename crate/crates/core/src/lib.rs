//! PRNU camera fingerprinting with sequential source identification.
//!
//! The library extracts a per-device PRNU fingerprint from training images,
//! learns the detection-statistic laws for both hypotheses, and then decides
//! camera of origin for query images with Wald's sequential probability ratio
//! test over pseudorandom pixel subsets, so that most images are resolved
//! after examining only a small fraction of their pixels. Positives and
//! undecided cases are confirmed with a non-sequential full-image test.
//!
//! Module map:
//! - [`plane`]: image decoding, denoising, noise residuals, saturation masks
//! - [`fingerprint`]: PRNU estimation and artifact removal, fingerprint files
//! - [`stats`]: detection statistics, variance estimators, densities
//! - [`training`]: leave-one-out training of the H1 law, GGD fit for H0
//! - [`sprt`]: sequential test engine, thresholds, full-image retest
//! - [`synth`]: synthetic sensor simulator for ground-truth experiments
//! - [`pipeline`]: batch scanning, reports, evaluation metrics

pub mod error;
pub mod fingerprint;
pub mod pipeline;
pub mod plane;
pub mod seed;
pub mod sprt;
pub mod stats;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use fingerprint::Fingerprint;
pub use plane::{AdaptiveWiener, Denoiser, ImagePlane, PixelMask};
pub use sprt::{SprtDecision, SprtOutcome, SprtPlan};
pub use stats::{H0Model, Observation, VarianceEstimator};
pub use synth::{SceneConfig, SynthCamera};
pub use training::{DeviceModel, H1Model};
