//! Wasserstein-distance adversarial domain adaptation for a desk-scale
//! two-stage object detector.

pub mod alignment;
pub mod autodiff;
pub mod config;
pub mod critic;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod nn;
pub mod tensor;

pub use autodiff::{grad_check, RoiRegion, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
pub use alignment::{AlignmentConfig, Checkpoint, MetricsRecord, Phase};
pub use config::RunConfig;
pub use critic::CriticVariant;
pub use data::{Dataset, DetectionSample, DomainParams, Scenario};
pub use detector::{BBox, Detection, DetectorConfig};
pub use eval::EvalReport;
