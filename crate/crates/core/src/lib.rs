//! Plane-wave ultrasound beamforming with an apodization window estimated by
//! one-unit FastICA, alongside delay-and-sum and coherence-factor baselines,
//! a point-scatterer simulator and the usual image-quality metrics.
//!
//! Units are SI throughout. Images are indexed `(z, x)`.

pub mod beamform;
pub mod error;
pub mod fastica;
pub mod geometry;
pub mod image_io;
pub mod metrics;
pub mod model;
pub mod native;
pub mod pipeline;
pub mod report;
pub mod simulate;
pub mod windows;

pub use beamform::{BeamformConfig, Interpolation, ObservationLayout, ProfileMapping, ProfileSource, Window};
pub use error::{Error, Result};
pub use fastica::{Contrast, IcaConfig, IcaResult, ObservationMatrix};
pub use model::{
    ApodizationProfile, BModeImage, DelayedCube, ImageGrid, Normalization, PlaneWaveAcquisition, ProbeGeometry, RfImage,
};
pub use native::Dataset;
pub use windows::WindowShape;
