//! Deformation-field analysis of longitudinal tumor scans.
//!
//! The pipeline registers consecutive weekly volumes with symmetric
//! log-domain demons, turns each forward field into a Jacobian determinant
//! map, splits the tumor into regressed, grown, unchanged and background
//! regions, and classifies a patient as partial responder when the
//! regressed region contracts the most.

pub mod cohort;
pub mod config;
pub mod defanalysis;
pub mod error;
pub mod io;
pub mod phantom;
pub mod registration;
pub mod stats;
pub mod volume;

pub use cohort::{classify, Decision, RecistLabel, RegionMeans, WeekLimit};
pub use config::PipelineConfig;
pub use defanalysis::{
    collect_samples, jacobian_map, partition_regions, JacobianMap, RegionLabel, RegionPartition,
    RegionSamples,
};
pub use error::{Error, Result};
pub use registration::{register, RegistrationParams, SymmetricTransform};
pub use volume::{GridGeometry, Mask, VectorField, Volume};
