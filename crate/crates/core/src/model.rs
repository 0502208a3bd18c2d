//! Domain types shared by every stage of the pipeline.
//!
//! All quantities are SI (meters, seconds, Hz, m/s). Images are indexed
//! `(z, x)`: axis 0 is depth, axis 1 is lateral position.

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ApertureSpan;

/// Linear array with elements on the x axis, symmetric about the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGeometry {
    element_x: Vec<f64>,
    pitch: f64,
}

impl ProbeGeometry {
    /// Tolerance on mirror symmetry of element positions, meters.
    pub const SYMMETRY_TOL: f64 = 1e-9;

    /// Uniform linear array of `n_elements` centered on x = 0.
    pub fn linear(n_elements: usize, pitch: f64) -> Result<Self> {
        let offset = (n_elements as f64 - 1.0) / 2.0;
        let element_x = (0..n_elements).map(|i| (i as f64 - offset) * pitch).collect();
        Self::new(element_x, pitch)
    }

    pub fn new(element_x: Vec<f64>, pitch: f64) -> Result<Self> {
        let probe = Self { element_x, pitch };
        probe.validate()?;
        Ok(probe)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.element_x.len();
        if n < 2 {
            return Err(Error::InvalidProbe(format!("need at least 2 elements, got {n}")));
        }
        if !(self.pitch.is_finite() && self.pitch > 0.0) {
            return Err(Error::InvalidProbe(format!(
                "pitch must be positive, got {}",
                self.pitch
            )));
        }
        for (i, w) in self.element_x.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidProbe(format!(
                    "element order: x[{}] = {} is not greater than x[{}] = {}",
                    i + 1,
                    w[1],
                    i,
                    w[0]
                )));
            }
        }
        for i in 0..n / 2 {
            let (a, b) = (self.element_x[i], self.element_x[n - 1 - i]);
            if (a + b).abs() > Self::SYMMETRY_TOL {
                return Err(Error::InvalidProbe(format!(
                    "elements {i} and {} are not symmetric about x = 0 ({a} vs {b})",
                    n - 1 - i
                )));
            }
        }
        Ok(())
    }

    pub fn element_x(&self) -> &[f64] {
        &self.element_x
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn n_elements(&self) -> usize {
        self.element_x.len()
    }

    /// Total lateral extent between the outermost element centers.
    pub fn width(&self) -> f64 {
        self.element_x[self.element_x.len() - 1] - self.element_x[0]
    }

    /// Index of the element whose center is nearest to `x`.
    pub fn nearest_element(&self, x: f64) -> usize {
        let pos = (x - self.element_x[0]) / self.pitch;
        let idx = pos.round();
        if idx <= 0.0 {
            0
        } else {
            (idx as usize).min(self.n_elements() - 1)
        }
    }
}

/// Received echoes for a set of steered plane-wave transmits.
///
/// `channel_data` is indexed `(angle, element, sample)`; sample `k` was taken
/// at `start_time + k / sampling_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneWaveAcquisition {
    pub angles: Vec<f64>,
    pub channel_data: Array3<f64>,
    pub sampling_rate: f64,
    pub sound_speed: f64,
    pub start_time: f64,
}

impl PlaneWaveAcquisition {
    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn n_elements(&self) -> usize {
        self.channel_data.dim().1
    }

    pub fn n_samples(&self) -> usize {
        self.channel_data.dim().2
    }

    pub fn trace(&self, angle: usize, element: usize) -> ArrayView1<'_, f64> {
        self.channel_data.slice(ndarray::s![angle, element, ..])
    }

    /// Index of the transmit closest to normal incidence.
    pub fn zero_angle_index(&self) -> usize {
        let mut best = 0;
        for (i, a) in self.angles.iter().enumerate() {
            if a.abs() < self.angles[best].abs() {
                best = i;
            }
        }
        best
    }

    /// Copy of this acquisition restricted to the given transmit indices.
    pub fn select_angles(&self, indices: &[usize]) -> Result<Self> {
        for &i in indices {
            if i >= self.n_angles() {
                return Err(Error::InvalidConfig(format!(
                    "angle index {i} out of range (dataset has {} angles)",
                    self.n_angles()
                )));
            }
        }
        let channel_data = self.channel_data.select(ndarray::Axis(0), indices);
        Ok(Self {
            angles: indices.iter().map(|&i| self.angles[i]).collect(),
            channel_data,
            ..*self
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (na, ne, ns) = self.channel_data.dim();
        if na != self.angles.len() {
            return Err(Error::InvalidAcquisition(format!(
                "channel data has {na} angle slices but {} angles are listed",
                self.angles.len()
            )));
        }
        if na == 0 || ne == 0 || ns == 0 {
            return Err(Error::InvalidAcquisition(format!(
                "empty channel data of shape ({na}, {ne}, {ns})"
            )));
        }
        if !(self.sampling_rate.is_finite() && self.sampling_rate > 0.0) {
            return Err(Error::InvalidAcquisition(format!(
                "sampling_rate must be positive, got {}",
                self.sampling_rate
            )));
        }
        if !(self.sound_speed.is_finite() && self.sound_speed > 0.0) {
            return Err(Error::InvalidAcquisition(format!(
                "sound_speed must be positive, got {}",
                self.sound_speed
            )));
        }
        if !self.start_time.is_finite() {
            return Err(Error::InvalidAcquisition("start_time is not finite".into()));
        }
        for (i, a) in self.angles.iter().enumerate() {
            if !a.is_finite() || a.abs() >= std::f64::consts::FRAC_PI_2 {
                return Err(Error::InvalidAcquisition(format!(
                    "angle[{i}] = {a} rad is outside (-pi/2, pi/2)"
                )));
            }
        }
        if let Some(((a, e, s), v)) = self.channel_data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidAcquisition(format!(
                "non-finite sample {v} at angle {a}, element {e}, sample {s}"
            )));
        }
        Ok(())
    }
}

/// Validate an acquisition against the probe that recorded it.
pub fn validate(acquisition: &PlaneWaveAcquisition, probe: &ProbeGeometry) -> Result<()> {
    probe.validate()?;
    acquisition.validate()?;
    if acquisition.n_elements() != probe.n_elements() {
        return Err(Error::InvalidAcquisition(format!(
            "channel data has {} elements but the probe has {}",
            acquisition.n_elements(),
            probe.n_elements()
        )));
    }
    Ok(())
}

/// Pixel-center coordinates of a rectilinear image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    x_coords: Vec<f64>,
    z_coords: Vec<f64>,
}

impl ImageGrid {
    pub const UNIFORMITY_TOL: f64 = 1e-12;

    pub fn new(x_coords: Vec<f64>, z_coords: Vec<f64>) -> Result<Self> {
        let grid = Self { x_coords, z_coords };
        grid.validate()?;
        Ok(grid)
    }

    /// `nx` columns from `x_min` and `nz` rows from `z_min`, spaced `dx`/`dz`.
    pub fn uniform(x_min: f64, dx: f64, nx: usize, z_min: f64, dz: f64, nz: usize) -> Result<Self> {
        Self::new(
            (0..nx).map(|i| x_min + i as f64 * dx).collect(),
            (0..nz).map(|i| z_min + i as f64 * dz).collect(),
        )
    }

    /// Grid covering `[x_min, x_max] x [z_min, z_max]` with the given spacings.
    pub fn spanning(x_min: f64, x_max: f64, dx: f64, z_min: f64, z_max: f64, dz: f64) -> Result<Self> {
        let nx = ((x_max - x_min) / dx + 1e-9).floor() as usize + 1;
        let nz = ((z_max - z_min) / dz + 1e-9).floor() as usize + 1;
        Self::uniform(x_min, dx, nx, z_min, dz, nz)
    }

    pub fn validate(&self) -> Result<()> {
        check_axis("x", &self.x_coords)?;
        check_axis("z", &self.z_coords)?;
        if self.z_coords[0] <= 0.0 {
            return Err(Error::InvalidGrid(format!(
                "depths must be positive, first z = {}",
                self.z_coords[0]
            )));
        }
        Ok(())
    }

    pub fn x(&self) -> &[f64] {
        &self.x_coords
    }

    pub fn z(&self) -> &[f64] {
        &self.z_coords
    }

    pub fn nx(&self) -> usize {
        self.x_coords.len()
    }

    pub fn nz(&self) -> usize {
        self.z_coords.len()
    }

    /// `(nz, nx)`, the shape of every image on this grid.
    pub fn shape(&self) -> (usize, usize) {
        (self.nz(), self.nx())
    }

    /// Lateral spacing; zero for a single-column grid.
    pub fn dx(&self) -> f64 {
        spacing(&self.x_coords)
    }

    pub fn dz(&self) -> f64 {
        spacing(&self.z_coords)
    }

    /// Sub-grid restricted to column range `cols`.
    pub fn columns(&self, cols: std::ops::Range<usize>) -> Result<Self> {
        Self::new(self.x_coords[cols].to_vec(), self.z_coords.clone())
    }

    /// Sub-grid restricted to row range `rows`.
    pub fn rows(&self, rows: std::ops::Range<usize>) -> Result<Self> {
        Self::new(self.x_coords.clone(), self.z_coords[rows].to_vec())
    }

    /// Column index nearest to lateral position `x`.
    pub fn nearest_col(&self, x: f64) -> usize {
        nearest_index(&self.x_coords, x)
    }

    pub fn nearest_row(&self, z: f64) -> usize {
        nearest_index(&self.z_coords, z)
    }
}

fn spacing(axis: &[f64]) -> f64 {
    if axis.len() < 2 {
        0.0
    } else {
        (axis[axis.len() - 1] - axis[0]) / (axis.len() - 1) as f64
    }
}

fn nearest_index(axis: &[f64], v: f64) -> usize {
    if axis.len() < 2 {
        return 0;
    }
    let d = spacing(axis);
    let pos = ((v - axis[0]) / d).round();
    if pos <= 0.0 {
        0
    } else {
        (pos as usize).min(axis.len() - 1)
    }
}

fn check_axis(name: &str, axis: &[f64]) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::InvalidGrid(format!("{name} axis is empty")));
    }
    if let Some(v) = axis.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidGrid(format!("{name} axis has non-finite value {v}")));
    }
    if axis.len() < 2 {
        return Ok(());
    }
    let d = spacing(axis);
    if !(d > 0.0) {
        return Err(Error::InvalidGrid(format!("{name} axis is not increasing")));
    }
    for (i, w) in axis.windows(2).enumerate() {
        let step = w[1] - w[0];
        if !(step > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "{name} axis not strictly increasing at index {}",
                i + 1
            )));
        }
    }
    // Position error against the ideal uniform axis, relative to the spacing.
    let scale = d.max(axis[0].abs().max(axis[axis.len() - 1].abs()));
    for (i, v) in axis.iter().enumerate() {
        let ideal = axis[0] + i as f64 * d;
        if (v - ideal).abs() > 16.0 * ImageGrid::UNIFORMITY_TOL * scale {
            return Err(Error::InvalidGrid(format!(
                "{name} axis is not uniformly spaced at index {i} ({v} vs {ideal})"
            )));
        }
    }
    Ok(())
}

/// Per-element RF samples resampled onto an image grid for one transmit.
///
/// `values` is indexed `(element, z, x)`. Elements outside the active aperture
/// of a pixel hold exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedCube {
    pub values: Array3<f64>,
    pub grid: ImageGrid,
    /// Active aperture of every pixel, indexed `(z, x)`.
    pub apertures: Array2<ApertureSpan>,
}

impl DelayedCube {
    pub fn n_elements(&self) -> usize {
        self.values.dim().0
    }

    pub fn is_active(&self, element: usize, iz: usize, ix: usize) -> bool {
        self.apertures[(iz, ix)].contains(element)
    }

    /// Largest active aperture anywhere in the cube.
    pub fn widest_aperture(&self) -> usize {
        self.apertures.iter().map(|s| s.len()).max().unwrap_or(0)
    }
}

/// How an [`ApodizationProfile`]'s weights are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Parametric window, peak value 1.
    Peak,
    /// Canonical form: L1 norm 1, center weight non-negative.
    L1,
    /// Raw weights as produced, no convention applied.
    Raw,
}

/// Weights over consecutive aperture positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApodizationProfile {
    pub weights: Vec<f64>,
    pub normalization: Normalization,
}

impl ApodizationProfile {
    pub fn new(weights: Vec<f64>, normalization: Normalization) -> Self {
        Self { weights, normalization }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Fix the sign and scale ambiguity: the center weight is made
    /// non-negative (falling back to the largest-magnitude weight when the
    /// center is zero) and the L1 norm is set to 1. Idempotent.
    pub fn canonicalize(&self) -> Result<Self> {
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::ProfileMismatch("non-finite weight".into()));
        }
        let l1: f64 = self.weights.iter().map(|w| w.abs()).sum();
        if !(l1 > 0.0) {
            return Err(Error::ProfileMismatch("all weights are zero".into()));
        }
        let n = self.weights.len();
        let center = self.weights[(n - 1) / 2];
        let pivot = if n % 2 == 1 && center != 0.0 {
            center
        } else {
            // Even length or zero center: first element of maximal magnitude.
            let mut best = self.weights[0];
            for &w in &self.weights {
                if w.abs() > best.abs() {
                    best = w;
                }
            }
            best
        };
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        Ok(Self {
            weights: self.weights.iter().map(|w| sign * w / l1).collect(),
            normalization: Normalization::L1,
        })
    }

    /// Linear resampling of the profile onto `count` evenly spaced positions
    /// spanning the same support.
    pub fn resample(&self, count: usize) -> Vec<f64> {
        resample_linear(&self.weights, count)
    }
}

pub(crate) fn resample_linear(weights: &[f64], count: usize) -> Vec<f64> {
    let p = weights.len();
    if count == 0 || p == 0 {
        return Vec::new();
    }
    if p == count {
        return weights.to_vec();
    }
    if p == 1 {
        return vec![weights[0]; count];
    }
    if count == 1 {
        return vec![sample_at(weights, 0.5)];
    }
    (0..count)
        .map(|k| sample_at(weights, k as f64 / (count - 1) as f64))
        .collect()
}

fn sample_at(weights: &[f64], u: f64) -> f64 {
    let pos = u * (weights.len() - 1) as f64;
    let i = (pos.floor() as usize).min(weights.len() - 2);
    let frac = pos - i as f64;
    weights[i] * (1.0 - frac) + weights[i + 1] * frac
}

/// Beamformed RF image, indexed `(z, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfImage {
    pub data: Array2<f64>,
    pub grid: ImageGrid,
}

impl RfImage {
    pub fn new(data: Array2<f64>, grid: ImageGrid) -> Result<Self> {
        if data.dim() != grid.shape() {
            return Err(Error::GridMismatch(format!(
                "image shape {:?} does not match grid shape {:?}",
                data.dim(),
                grid.shape()
            )));
        }
        Ok(Self { data, grid })
    }
}

/// Log-compressed envelope image in dB, peak at 0 dB, floor at
/// `-dynamic_range_db`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BModeImage {
    pub db: Array2<f64>,
    pub grid: ImageGrid,
    pub dynamic_range_db: f64,
}
