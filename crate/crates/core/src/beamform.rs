//! Delay-and-sum beamforming, the coherence-factor baseline, coherent
//! compounding and the ICA apodization pipeline.
//!
//! Two code paths compute the same images. The cube path materializes the
//! delayed per-element data `(element, z, x)` and is convenient for tests and
//! inspection. The fused path resamples channel data on the fly and never
//! holds more than one image in memory; the CLI uses it.

use std::collections::HashMap;
use std::ops::Range;

use ndarray::{s, Array2, Array3, Axis, CowArray, Ix3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastica::{estimate_apodization, IcaConfig, IcaResult, ObservationMatrix};
use crate::geometry::{active_aperture, aperture_element_count, ApertureSpan};
use crate::model::{
    self, resample_linear, ApodizationProfile, DelayedCube, ImageGrid, PlaneWaveAcquisition, ProbeGeometry, RfImage,
};
use crate::windows::WindowShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    #[default]
    Linear,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nearest" => Ok(Self::Nearest),
            "linear" => Ok(Self::Linear),
            other => Err(Error::InvalidConfig(format!("unknown interpolation `{other}`"))),
        }
    }
}

/// Receive apodization: a fixed window shape or one estimated by ICA.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Fixed(WindowShape),
    Ica,
}

impl Default for Window {
    fn default() -> Self {
        Window::Fixed(WindowShape::default())
    }
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Window::Fixed(w) => w.fmt(f),
            Window::Ica => f.write_str("ica"),
        }
    }
}

impl std::str::FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("ica") {
            Ok(Window::Ica)
        } else {
            s.parse().map(Window::Fixed)
        }
    }
}

/// How an estimated profile over observation rows becomes per-pixel weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMapping {
    /// Resample the whole profile onto each pixel's nominal aperture,
    /// centered on the pixel; positions clipped by the array edge are dropped.
    Centered,
    /// Row `i` of the profile weights element `i` wherever that element is
    /// inside a pixel's active aperture.
    #[default]
    Element,
}

impl std::str::FromStr for ProfileMapping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "centered" => Ok(Self::Centered),
            "element" => Ok(Self::Element),
            other => Err(Error::InvalidConfig(format!("unknown profile mapping `{other}`"))),
        }
    }
}

/// Which channel feeds each row of the ICA observation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationLayout {
    /// Row `i` is physical element `i`; the profile has one weight per element.
    #[default]
    Element,
    /// Row `k` is position `k` of the widest aperture centered on each cropped
    /// pixel; the profile spans that aperture.
    Aperture,
}

impl std::str::FromStr for ObservationLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "element" => Ok(Self::Element),
            "aperture" => Ok(Self::Aperture),
            other => Err(Error::InvalidConfig(format!("unknown observation layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamformConfig {
    pub f_number: f64,
    pub window: Window,
    pub interpolation: Interpolation,
    /// Estimate ICA weights once on the transmit nearest 0° and reuse them for
    /// every compounded angle.
    pub compound_reuse_zero_weights: bool,
    /// Rescale each pixel's active weights to unit sum.
    pub renormalize: bool,
    pub profile_mapping: ProfileMapping,
    /// Deepest row of the ICA crop; the grid's last row when unset.
    pub crop_max_depth: Option<f64>,
    /// Build ICA observations from every element rather than only the
    /// F-number aperture of each pixel.
    pub observe_full_aperture: bool,
    pub observation_layout: ObservationLayout,
    /// Beamform with a non-converged ICA estimate instead of failing.
    pub allow_nonconverged: bool,
}

impl Default for BeamformConfig {
    fn default() -> Self {
        Self {
            f_number: 1.75,
            window: Window::default(),
            interpolation: Interpolation::Linear,
            compound_reuse_zero_weights: true,
            renormalize: true,
            profile_mapping: ProfileMapping::default(),
            crop_max_depth: None,
            observe_full_aperture: true,
            observation_layout: ObservationLayout::default(),
            allow_nonconverged: false,
        }
    }
}

impl BeamformConfig {
    pub fn with_window(window: Window) -> Self {
        Self {
            window,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_number.is_finite() && self.f_number > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "f_number must be positive, got {}",
                self.f_number
            )));
        }
        if let Window::Fixed(WindowShape::Tukey(t)) = self.window {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!("Tukey taper must lie in [0, 1], got {t}")));
            }
        }
        if self.observation_layout == ObservationLayout::Aperture && self.profile_mapping == ProfileMapping::Element {
            return Err(Error::InvalidConfig(
                "an aperture-layout profile has no element positions; use the centered mapping".into(),
            ));
        }
        if let Some(d) = self.crop_max_depth {
            if !(d > 0.0) {
                return Err(Error::InvalidConfig(format!("crop depth must be positive, got {d}")));
            }
        }
        Ok(())
    }
}

/// Reads delayed samples of one transmit.
struct Sampler<'a> {
    data: CowArray<'a, f64, Ix3>,
    n_elements: usize,
    n_samples: usize,
    angle: usize,
    sin: f64,
    cos: f64,
    inv_c: f64,
    fs: f64,
    t0: f64,
    interpolation: Interpolation,
    element_x: &'a [f64],
}

impl<'a> Sampler<'a> {
    fn new(
        acq: &'a PlaneWaveAcquisition,
        angle: usize,
        probe: &'a ProbeGeometry,
        interpolation: Interpolation,
    ) -> Result<Self> {
        model::validate(acq, probe)?;
        if angle >= acq.n_angles() {
            return Err(Error::InvalidConfig(format!(
                "angle index {angle} out of range (dataset has {} angles)",
                acq.n_angles()
            )));
        }
        let a = acq.angles[angle];
        Ok(Self {
            data: acq.channel_data.as_standard_layout(),
            n_elements: acq.n_elements(),
            n_samples: acq.n_samples(),
            angle,
            sin: a.sin(),
            cos: a.cos(),
            inv_c: 1.0 / acq.sound_speed,
            fs: acq.sampling_rate,
            t0: acq.start_time,
            interpolation,
            element_x: probe.element_x(),
        })
    }

    /// Transmit leg in seconds; shared by every element of a pixel.
    #[inline]
    fn transmit_time(&self, x: f64, z: f64) -> f64 {
        (z * self.cos + x * self.sin) * self.inv_c
    }

    #[inline]
    fn sample(&self, element: usize, x: f64, z: f64, t_tx: f64) -> f64 {
        let dx = x - self.element_x[element];
        let tau = t_tx + (dx * dx + z * z).sqrt() * self.inv_c;
        let pos = (tau - self.t0) * self.fs;
        let start = (self.angle * self.n_elements + element) * self.n_samples;
        let all = self.data.as_slice().expect("standard layout");
        let trace = &all[start..start + self.n_samples];
        let last = (self.n_samples - 1) as f64;
        if !(pos >= 0.0 && pos <= last) {
            return 0.0;
        }
        match self.interpolation {
            Interpolation::Nearest => trace[pos.round() as usize],
            Interpolation::Linear => {
                let i = pos.floor() as usize;
                let frac = pos - i as f64;
                if frac == 0.0 {
                    trace[i]
                } else {
                    trace[i] * (1.0 - frac) + trace[i + 1] * frac
                }
            }
        }
    }
}

fn aperture_map(grid: &ImageGrid, probe: &ProbeGeometry, f_number: f64) -> Array2<ApertureSpan> {
    Array2::from_shape_fn(grid.shape(), |(iz, ix)| {
        active_aperture(grid.z()[iz], f_number, probe, grid.x()[ix])
    })
}

/// Delay every channel of transmit `angle` onto `grid`. Elements outside a
/// pixel's F-number aperture hold zero.
pub fn delayed_channel_cube(
    acq: &PlaneWaveAcquisition,
    angle: usize,
    grid: &ImageGrid,
    probe: &ProbeGeometry,
    config: &BeamformConfig,
) -> Result<DelayedCube> {
    config.validate()?;
    let apertures = aperture_map(grid, probe, config.f_number);
    build_cube(acq, angle, grid, probe, config, apertures)
}

/// Like [`delayed_channel_cube`] but every element is active at every pixel.
pub fn delayed_channel_cube_full(
    acq: &PlaneWaveAcquisition,
    angle: usize,
    grid: &ImageGrid,
    probe: &ProbeGeometry,
    config: &BeamformConfig,
) -> Result<DelayedCube> {
    let apertures = Array2::from_elem(grid.shape(), ApertureSpan::full(probe.n_elements()));
    build_cube(acq, angle, grid, probe, config, apertures)
}

fn build_cube(
    acq: &PlaneWaveAcquisition,
    angle: usize,
    grid: &ImageGrid,
    probe: &ProbeGeometry,
    config: &BeamformConfig,
    apertures: Array2<ApertureSpan>,
) -> Result<DelayedCube> {
    let sampler = Sampler::new(acq, angle, probe, config.interpolation)?;
    let (nz, nx) = grid.shape();
    let n = probe.n_elements();
    let mut values = Array3::<f64>::zeros((n, nz, nx));
    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(e, mut plane)| {
            for iz in 0..nz {
                let z = grid.z()[iz];
                for ix in 0..nx {
                    if apertures[(iz, ix)].contains(e) {
                        let x = grid.x()[ix];
                        plane[(iz, ix)] = sampler.sample(e, x, z, sampler.transmit_time(x, z));
                    }
                }
            }
        });
    Ok(DelayedCube {
        values,
        grid: grid.clone(),
        apertures,
    })
}

/// Where per-pixel weights come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ProfileSource {
    /// Window shape evaluated at each pixel's nominal aperture length.
    Shape(WindowShape),
    /// A fixed profile mapped to each aperture as described by the mapping.
    Profile(ApodizationProfile, ProfileMapping),
}

impl From<WindowShape> for ProfileSource {
    fn from(w: WindowShape) -> Self {
        ProfileSource::Shape(w)
    }
}

/// Per-pixel weights for the active elements `first..=last`, cached by
/// nominal aperture length.
struct WeightTable {
    source: ProfileSource,
    n_elements: usize,
    renormalize: bool,
    cache: HashMap<usize, Vec<f64>>,
}

impl WeightTable {
    fn new(source: &ProfileSource, n_elements: usize, renormalize: bool, widest: usize) -> Result<Self> {
        match source {
            ProfileSource::Profile(p, mapping) => {
                if p.is_empty() || p.weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::ProfileMismatch("profile is empty or non-finite".into()));
                }
                if *mapping == ProfileMapping::Element && p.len() != n_elements {
                    return Err(Error::ProfileMismatch(format!(
                        "element-mapped profile has {} weights for {n_elements} elements",
                        p.len()
                    )));
                }
                if *mapping == ProfileMapping::Centered && p.len() < 2 && widest > 1 {
                    return Err(Error::ProfileMismatch(format!(
                        "a {}-weight profile cannot span a {widest}-element aperture",
                        p.len()
                    )));
                }
            }
            ProfileSource::Shape(shape) => {
                shape.weights(1)?;
            }
        }
        Ok(Self {
            source: source.clone(),
            n_elements,
            renormalize,
            cache: HashMap::new(),
        })
    }

    /// Nominal-aperture weights before clipping, length `nominal_len`.
    fn nominal(&mut self, nominal_len: usize) -> Result<&[f64]> {
        if !self.cache.contains_key(&nominal_len) {
            let w = match &self.source {
                ProfileSource::Shape(shape) => shape.weights(nominal_len)?,
                ProfileSource::Profile(p, ProfileMapping::Centered) => resample_linear(&p.weights, nominal_len),
                ProfileSource::Profile(p, ProfileMapping::Element) => p.weights.clone(),
            };
            self.cache.insert(nominal_len, w);
        }
        Ok(&self.cache[&nominal_len])
    }

    /// Weights for the active elements of `span`.
    fn active(&mut self, span: &ApertureSpan, out: &mut Vec<f64>) -> Result<()> {
        let element_mapped = matches!(self.source, ProfileSource::Profile(_, ProfileMapping::Element));
        let renormalize = self.renormalize;
        debug_assert!(span.last < self.n_elements);
        let nominal = self.nominal(span.nominal_len)?;
        out.clear();
        for e in span.first..=span.last {
            out.push(if element_mapped {
                nominal[e]
            } else {
                nominal[span.nominal_position(e)]
            });
        }
        if renormalize {
            normalize_unit_sum(out);
        }
        Ok(())
    }
}

/// Scale to unit sum. Windows whose sum nearly cancels are scaled by their
/// absolute sum instead so the image does not blow up.
fn normalize_unit_sum(w: &mut [f64]) {
    let sum: f64 = w.iter().sum();
    let abs: f64 = w.iter().map(|v| v.abs()).sum();
    if abs == 0.0 {
        return;
    }
    let denom = if sum.abs() >= 1e-3 * abs { sum } else { abs };
    w.iter_mut().for_each(|v| *v /= denom);
}

/// Precomputed weights for every pixel of a grid, stored as a flat table
/// with per-pixel offsets into it.
struct PixelWeights {
    spans: Array2<ApertureSpan>,
    offsets: Array2<usize>,
    weights: Vec<f64>,
}

impl PixelWeights {
    fn build(spans: Array2<ApertureSpan>, source: &ProfileSource, n: usize, renormalize: bool) -> Result<Self> {
        let widest = spans.iter().map(|s| s.nominal_len).max().unwrap_or(1);
        let mut table = WeightTable::new(source, n, renormalize, widest)?;
        // Spans repeat heavily; reuse identical ones.
        let mut seen: HashMap<ApertureSpan, usize> = HashMap::new();
        let mut weights = Vec::new();
        let mut buf = Vec::new();
        let mut offsets = Array2::zeros(spans.dim());
        for (idx, span) in spans.indexed_iter() {
            let off = match seen.get(span) {
                Some(&o) => o,
                None => {
                    table.active(span, &mut buf)?;
                    let o = weights.len();
                    weights.extend_from_slice(&buf);
                    seen.insert(*span, o);
                    o
                }
            };
            offsets[idx] = off;
        }
        Ok(Self {
            spans,
            offsets,
            weights,
        })
    }

    #[inline]
    fn at(&self, iz: usize, ix: usize) -> (&ApertureSpan, &[f64]) {
        let span = &self.spans[(iz, ix)];
        let off = self.offsets[(iz, ix)];
        (span, &self.weights[off..off + span.len()])
    }
}

/// Weighted sum over each pixel's active aperture.
pub fn das(cube: &DelayedCube, source: &ProfileSource, config: &BeamformConfig) -> Result<RfImage> {
    config.validate()?;
    let n = cube.n_elements();
    let pw = PixelWeights::build(cube.apertures.clone(), source, n, config.renormalize)?;
    let (nz, nx) = cube.grid.shape();
    let mut data = Array2::<f64>::zeros((nz, nx));
    data.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(iz, mut row)| {
            for ix in 0..nx {
                let (span, w) = pw.at(iz, ix);
                let mut acc = 0.0;
                for (k, e) in (span.first..=span.last).enumerate() {
                    acc += w[k] * cube.values[(e, iz, ix)];
                }
                row[ix] = acc;
            }
        });
    RfImage::new(data, cube.grid.clone())
}

/// DAS of one transmit straight from channel data, without a cube.
/// Matches `das(delayed_channel_cube(..))` exactly.
pub fn das_direct(
    acq: &PlaneWaveAcquisition,
    angle: usize,
    grid: &ImageGrid,
    probe: &ProbeGeometry,
    source: &ProfileSource,
    config: &BeamformConfig,
) -> Result<RfImage> {
    config.validate()?;
    let sampler = Sampler::new(acq, angle, probe, config.interpolation)?;
    let pw = PixelWeights::build(
        aperture_map(grid, probe, config.f_number),
        source,
        probe.n_elements(),
        config.renormalize,
    )?;
    let (nz, nx) = grid.shape();
    let mut data = Array2::<f64>::zeros((nz, nx));
    data.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(iz, mut row)| {
            let z = grid.z()[iz];
            for ix in 0..nx {
                let x = grid.x()[ix];
                let t_tx = sampler.transmit_time(x, z);
                let (span, w) = pw.at(iz, ix);
                let mut acc = 0.0;
                for (k, e) in (span.first..=span.last).enumerate() {
                    acc += w[k] * sampler.sample(e, x, z, t_tx);
                }
                row[ix] = acc;
            }
        });
    RfImage::new(data, grid.clone())
}

/// Ratio of coherent to incoherent energy over each pixel's active aperture,
/// in `[0, 1]`; zero where every channel is zero.
pub fn coherence_factor_image(cube: &DelayedCube) -> Array2<f64> {
    let (nz, nx) = cube.grid.shape();
    Array2::from_shape_fn((nz, nx), |(iz, ix)| {
        let span = cube.apertures[(iz, ix)];
        coherence_factor((span.first..=span.last).map(|e| cube.values[(e, iz, ix)]))
    })
}

#[inline]
fn coherence_factor(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut energy, mut n) = (0.0, 0.0, 0usize);
    for v in values {
        sum += v;
        energy += v * v;
        n += 1;
    }
    if energy == 0.0 {
        0.0
    } else {
        (sum * sum / (n as f64 * energy)).clamp(0.0, 1.0)
    }
}

/// Boxcar DAS weighted pixel-wise by the coherence factor.
pub fn cf_das(cube: &DelayedCube, config: &BeamformConfig) -> Result<RfImage> {
    let mut image = das(cube, &ProfileSource::Shape(WindowShape::Boxcar), config)?;
    image.data *= &coherence_factor_image(cube);
    Ok(image)
}

/// Fused equivalent of `cf_das(delayed_channel_cube(..))`.
pub fn cf_das_direct(
    acq: &PlaneWaveAcquisition,
    angle: usize,
    grid: &ImageGrid,
    probe: &ProbeGeometry,
    config: &BeamformConfig,
) -> Result<RfImage> {
    config.validate()?;
    let sampler = Sampler::new(acq, angle, probe, config.interpolation)?;
    let pw = PixelWeights::build(
        aperture_map(grid, probe, config.f_number),
        &ProfileSource::Shape(WindowShape::Boxcar),
        probe.n_elements(),
        config.renormalize,
    )?;
    let (nz, nx) = grid.shape();
    let mut data = Array2::<f64>::zeros((nz, nx));
    data.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(iz, mut row)| {
            let z = grid.z()[iz];
            let mut buf = Vec::new();
            for ix in 0..nx {
                let x = grid.x()[ix];
                let t_tx = sampler.transmit_time(x, z);
                let (span, w) = pw.at(iz, ix);
                buf.clear();
                buf.extend((span.first..=span.last).map(|e| sampler.sample(e, x, z, t_tx)));
                let das: f64 = buf.iter().zip(w).map(|(v, w)| v * w).sum();
                row[ix] = das * coherence_factor(buf.iter().copied());
            }
        });
    RfImage::new(data, grid.clone())
}

/// Pixel-wise mean of per-angle images (uniform angular weights).
pub fn compound(images: &[RfImage]) -> Result<RfImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidConfig("nothing to compound".into()))?;
    let mut sum = first.data.clone();
    for img in &images[1..] {
        if img.grid != first.grid {
            return Err(Error::GridMismatch("compounded images use different grids".into()));
        }
        sum += &img.data;
    }
    if images.len() > 1 {
        sum /= images.len() as f64;
    }
    RfImage::new(sum, first.grid.clone())
}

/// Pixels used to estimate ICA weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegion {
    pub cols: Range<usize>,
    pub rows: Range<usize>,
    /// Aperture size, in elements, at the deepest cropped row.
    pub aperture_elements: usize,
}

impl CropRegion {
    pub fn n_pixels(&self) -> usize {
        self.cols.len() * self.rows.len()
    }
}

/// Lateral range of pixels whose full symmetric aperture at `max_depth` fits
/// inside the array, together with the rows not deeper than `max_depth`.
pub fn central_crop_region(
    grid: &ImageGrid,
    probe: &ProbeGeometry,
    f_number: f64,
    max_depth: f64,
) -> Result<CropRegion> {
    let n = probe.n_elements();
    let count = aperture_element_count(max_depth / f_number, probe.pitch());
    let empty = || Error::EmptyCrop {
        aperture_elements: count,
        n_elements: n,
        max_depth_m: max_depth,
    };
    if count > n {
        return Err(empty());
    }
    let half = (count - 1) / 2;
    let fits = |ix: &usize| {
        let c = probe.nearest_element(grid.x()[*ix]);
        c >= half && c + half < n
    };
    let first = (0..grid.nx()).find(fits).ok_or_else(empty)?;
    let last = (first..grid.nx()).take_while(fits).last().unwrap_or(first);
    let rows_end = grid.z().iter().take_while(|&&z| z <= max_depth * (1.0 + 1e-12)).count();
    if rows_end == 0 {
        return Err(Error::InvalidConfig(format!(
            "crop depth {max_depth} m is shallower than the first image row"
        )));
    }
    Ok(CropRegion {
        cols: first..last + 1,
        rows: 0..rows_end,
        aperture_elements: count,
    })
}

/// Stack the cropped slice of each element, vectorized row-major
/// (depth-major, then lateral), into one observation row per element.
pub fn build_observation_matrix(cube: &DelayedCube, crop: &CropRegion) -> Result<ObservationMatrix> {
    let (n, nz, nx) = cube.values.dim();
    if crop.cols.end > nx || crop.rows.end > nz || crop.cols.is_empty() || crop.rows.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "crop {:?} x {:?} does not fit a {nz} x {nx} grid",
            crop.rows, crop.cols
        )));
    }
    let m = crop.n_pixels();
    let mut x = Array2::<f64>::zeros((n, m));
    for (e, mut row) in x.outer_iter_mut().enumerate() {
        let slice = cube.values.slice(s![e, crop.rows.clone(), crop.cols.clone()]);
        for (dst, src) in row.iter_mut().zip(slice.iter()) {
            *dst = *src;
        }
    }
    ObservationMatrix::from_rows(x)
}

/// Observation matrix for `crop` straight from channel data. Rows follow
/// `config.observation_layout`. Samples outside a pixel's F-number aperture
/// are zeroed unless `config.observe_full_aperture` is set, and rows left
/// entirely zero are dropped.
pub fn observation_matrix_direct(
    acq: &PlaneWaveAcquisition,
    angle: usize,
    grid: &ImageGrid,
    probe: &ProbeGeometry,
    crop: &CropRegion,
    config: &BeamformConfig,
) -> Result<ObservationMatrix> {
    let sampler = Sampler::new(acq, angle, probe, config.interpolation)?;
    let n = probe.n_elements();
    let half = (crop.aperture_elements - 1) / 2;
    let n_rows = match config.observation_layout {
        ObservationLayout::Element => n,
        ObservationLayout::Aperture => crop.aperture_elements,
    };
    let width = crop.cols.len();
    let m = crop.n_pixels();
    let centers: Vec<usize> = crop
        .cols
        .clone()
        .map(|ix| probe.nearest_element(grid.x()[ix]))
        .collect();
    let mut x = Array2::<f64>::zeros((n_rows, m));
    x.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(k, mut row)| {
            for (r, iz) in crop.rows.clone().enumerate() {
                let z = grid.z()[iz];
                for (c, ix) in crop.cols.clone().enumerate() {
                    let x = grid.x()[ix];
                    let e = match config.observation_layout {
                        ObservationLayout::Element => k,
                        // The crop guarantees the widest aperture fits.
                        ObservationLayout::Aperture => centers[c] - half + k,
                    };
                    if !config.observe_full_aperture && !active_aperture(z, config.f_number, probe, x).contains(e) {
                        continue;
                    }
                    row[r * width + c] = sampler.sample(e, x, z, sampler.transmit_time(x, z));
                }
            }
        });
    let keep: Vec<usize> = (0..n_rows).filter(|&k| x.row(k).iter().any(|&v| v != 0.0)).collect();
    if keep.len() < n_rows {
        log::debug!(
            "dropping {} observation rows that are identically zero",
            n_rows - keep.len()
        );
        x = x.select(Axis(0), &keep);
    }
    ObservationMatrix::new(x, keep)
}

/// Result of the ICA pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct IcaBeamformed {
    pub image: RfImage,
    /// One estimate per compounded frame, in angle order. With weight reuse
    /// every entry is the 0° estimate.
    pub estimates: Vec<IcaResult>,
    pub crop: CropRegion,
}

/// Estimate ICA apodization from the central crop of one transmit.
pub fn estimate_ica_profile(
    acq: &PlaneWaveAcquisition,
    angle: usize,
    grid: &ImageGrid,
    probe: &ProbeGeometry,
    ica_config: &IcaConfig,
    config: &BeamformConfig,
) -> Result<(IcaResult, CropRegion)> {
    config.validate()?;
    let max_depth = config.crop_max_depth.unwrap_or(grid.z()[grid.nz() - 1]);
    let crop = central_crop_region(grid, probe, config.f_number, max_depth)?;
    let x = observation_matrix_direct(acq, angle, grid, probe, &crop, config)?;
    let mut est = estimate_apodization(&x, ica_config)?;
    let n_rows = match config.observation_layout {
        ObservationLayout::Element => probe.n_elements(),
        ObservationLayout::Aperture => crop.aperture_elements,
    };
    if est.row_element.len() < n_rows {
        // Rows dropped for being empty get zero weight.
        for p in [&mut est.w_aperture, &mut est.mixing_aperture] {
            let mut full = vec![0.0; n_rows];
            for (&r, &w) in est.row_element.iter().zip(&p.weights) {
                full[r] = w;
            }
            p.weights = full;
        }
        est.row_element = (0..n_rows).collect();
    }
    if !est.converged && !config.allow_nonconverged {
        return Err(Error::NotConverged {
            iterations: est.iterations_used,
            last_dot: est.convergence_trace.last().copied().unwrap_or(0.0),
        });
    }
    if !est.converged {
        log::warn!(
            "FastICA did not converge after {} iterations; using the last estimate",
            est.iterations_used
        );
    }
    Ok((est, crop))
}

/// Delayed cube, central crop, observation matrix, FastICA, then DAS with the
/// estimated window on every transmit, compounded.
pub fn ica_beamform(
    acq: &PlaneWaveAcquisition,
    grid: &ImageGrid,
    probe: &ProbeGeometry,
    ica_config: &IcaConfig,
    config: &BeamformConfig,
) -> Result<IcaBeamformed> {
    let zero = acq.zero_angle_index();
    let mut estimates = Vec::with_capacity(acq.n_angles());
    let mut crop = None;
    let mut frames = Vec::with_capacity(acq.n_angles());
    let mut shared: Option<IcaResult> = None;
    let order: Vec<usize> = std::iter::once(zero)
        .chain((0..acq.n_angles()).filter(|&a| a != zero))
        .collect();
    let mut per_angle: Vec<Option<(IcaResult, RfImage)>> = vec![None; acq.n_angles()];
    for a in order {
        let est = match (&shared, config.compound_reuse_zero_weights) {
            (Some(est), true) => est.clone(),
            _ => {
                let (est, c) = estimate_ica_profile(acq, a, grid, probe, ica_config, config)?;
                crop.get_or_insert(c);
                shared.get_or_insert_with(|| est.clone());
                est
            }
        };
        let source = ProfileSource::Profile(est.w_aperture.clone(), config.profile_mapping);
        let image = das_direct(acq, a, grid, probe, &source, config)?;
        per_angle[a] = Some((est, image));
    }
    for slot in per_angle.into_iter().flatten() {
        estimates.push(slot.0);
        frames.push(slot.1);
    }
    Ok(IcaBeamformed {
        image: compound(&frames)?,
        estimates,
        crop: crop.expect("at least one estimate"),
    })
}

/// Fixed-window DAS over every transmit, compounded.
pub fn das_compound(
    acq: &PlaneWaveAcquisition,
    grid: &ImageGrid,
    probe: &ProbeGeometry,
    source: &ProfileSource,
    config: &BeamformConfig,
) -> Result<RfImage> {
    let frames = (0..acq.n_angles())
        .map(|a| das_direct(acq, a, grid, probe, source, config))
        .collect::<Result<Vec<_>>>()?;
    compound(&frames)
}

/// CF-weighted DAS over every transmit, compounded.
pub fn cf_compound(
    acq: &PlaneWaveAcquisition,
    grid: &ImageGrid,
    probe: &ProbeGeometry,
    config: &BeamformConfig,
) -> Result<RfImage> {
    let frames = (0..acq.n_angles())
        .map(|a| cf_das_direct(acq, a, grid, probe, config))
        .collect::<Result<Vec<_>>>()?;
    compound(&frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Normalization;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probe(n: usize) -> ProbeGeometry {
        ProbeGeometry::linear(n, 0.3e-3).unwrap()
    }

    fn random_acq(n: usize, ns: usize, seed: u64) -> PlaneWaveAcquisition {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PlaneWaveAcquisition {
            angles: vec![0.0, 0.1],
            channel_data: Array3::from_shape_fn((2, n, ns), |_| rng.gen_range(-1.0..1.0)),
            sampling_rate: 20e6,
            sound_speed: 1540.0,
            start_time: 0.0,
        }
    }

    fn small_grid() -> ImageGrid {
        ImageGrid::uniform(-1.2e-3, 0.3e-3, 8, 5e-3, 0.1e-3, 8).unwrap()
    }

    fn synthetic_cube(n: usize, nz: usize, nx: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> DelayedCube {
        let grid = ImageGrid::uniform(0.0, 1e-4, nx, 1e-3, 1e-4, nz).unwrap();
        DelayedCube {
            values: Array3::from_shape_fn((n, nz, nx), |(e, z, x)| f(e, z, x)),
            grid,
            apertures: Array2::from_elem((nz, nx), ApertureSpan::full(n)),
        }
    }

    #[test]
    fn zero_data_gives_zero_cube() {
        let mut acq = random_acq(8, 200, 0);
        acq.channel_data.fill(0.0);
        let cube = delayed_channel_cube(&acq, 0, &small_grid(), &probe(8), &BeamformConfig::default()).unwrap();
        assert!(cube.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cube_is_linear_in_channel_data() {
        let p = probe(8);
        let g = small_grid();
        let cfg = BeamformConfig::default();
        let a = random_acq(8, 200, 1);
        let b = random_acq(8, 200, 2);
        let mut ab = a.clone();
        ab.channel_data = &a.channel_data * 2.0 - &b.channel_data * 0.5;
        let ca = delayed_channel_cube(&a, 0, &g, &p, &cfg).unwrap();
        let cb = delayed_channel_cube(&b, 0, &g, &p, &cfg).unwrap();
        let cab = delayed_channel_cube(&ab, 0, &g, &p, &cfg).unwrap();
        let expected = &ca.values * 2.0 - &cb.values * 0.5;
        assert!((&cab.values - &expected).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn identical_rows_average_to_the_image() {
        let cube = synthetic_cube(5, 4, 3, |_, z, x| (z * 3 + x) as f64 - 2.0);
        let img = das(&cube, &WindowShape::Boxcar.into(), &BeamformConfig::default()).unwrap();
        for ((z, x), v) in img.data.indexed_iter() {
            assert!((v - ((z * 3 + x) as f64 - 2.0)).abs() < 1e-12);
        }
        let zero = synthetic_cube(5, 4, 3, |_, _, _| 0.0);
        let img = das(&zero, &WindowShape::default().into(), &BeamformConfig::default()).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn boxcar_das_is_mean_of_active_channels() {
        let p = probe(16);
        let g = ImageGrid::uniform(-1.2e-3, 0.3e-3, 8, 2e-3, 0.2e-3, 8).unwrap();
        let acq = random_acq(16, 300, 3);
        let cfg = BeamformConfig::default();
        let cube = delayed_channel_cube(&acq, 0, &g, &p, &cfg).unwrap();
        let img = das(&cube, &WindowShape::Boxcar.into(), &cfg).unwrap();
        for iz in 0..8 {
            for ix in 0..8 {
                let span = active_aperture(g.z()[iz], cfg.f_number, &p, g.x()[ix]);
                let mut sum = 0.0;
                let mut k = 0;
                for e in 0..16 {
                    if e >= span.first && e <= span.last {
                        sum += cube.values[(e, iz, ix)];
                        k += 1;
                    }
                }
                assert!((img.data[(iz, ix)] - sum / k as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fused_paths_match_cube_paths() {
        let p = probe(16);
        let g = small_grid();
        let acq = random_acq(16, 300, 4);
        for interpolation in [Interpolation::Linear, Interpolation::Nearest] {
            let cfg = BeamformConfig {
                interpolation,
                ..BeamformConfig::default()
            };
            for angle in 0..2 {
                let cube = delayed_channel_cube(&acq, angle, &g, &p, &cfg).unwrap();
                let src = ProfileSource::Shape(WindowShape::Hann);
                let a = das(&cube, &src, &cfg).unwrap();
                let b = das_direct(&acq, angle, &g, &p, &src, &cfg).unwrap();
                assert_eq!(a.data, b.data);
                let a = cf_das(&cube, &cfg).unwrap();
                let b = cf_das_direct(&acq, angle, &g, &p, &cfg).unwrap();
                assert!((&a.data - &b.data).iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn element_mapping_needs_matching_length() {
        let cube = synthetic_cube(5, 2, 2, |_, _, _| 1.0);
        let p = ApodizationProfile::new(vec![1.0; 4], Normalization::Raw);
        let src = ProfileSource::Profile(p, ProfileMapping::Element);
        assert!(matches!(
            das(&cube, &src, &BeamformConfig::default()),
            Err(Error::ProfileMismatch(_))
        ));
    }

    #[test]
    fn centered_profile_is_resampled_per_aperture() {
        // A 3-weight profile on a 5-element aperture: [0, .5, 1, .5, 0] after
        // resampling, then unit sum.
        let cube = synthetic_cube(5, 1, 1, |e, _, _| e as f64);
        let p = ApodizationProfile::new(vec![0.0, 1.0, 0.0], Normalization::Raw);
        let img = das(
            &cube,
            &ProfileSource::Profile(p, ProfileMapping::Centered),
            &BeamformConfig::default(),
        )
        .unwrap();
        let expected = (0.5 * 1.0 + 1.0 * 2.0 + 0.5 * 3.0) / 2.0;
        assert!((img.data[(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn coherence_factor_limits() {
        let same = synthetic_cube(6, 2, 2, |_, _, _| 0.7);
        assert!(coherence_factor_image(&same).iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let cancel = synthetic_cube(6, 2, 2, |e, _, _| if e % 2 == 0 { 1.0 } else { -1.0 });
        assert!(coherence_factor_image(&cancel).iter().all(|&v| v.abs() < 1e-12));
        let zero = synthetic_cube(6, 2, 2, |_, _, _| 0.0);
        assert!(coherence_factor_image(&zero).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coherence_factor_of_noise_is_one_over_n() {
        let n = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cube = synthetic_cube(n, 60, 60, |_, _, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let cf = coherence_factor_image(&cube);
        let m = cf.len() as f64;
        let mean = cf.sum() / m;
        let var = cf.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let se = (var / m).sqrt();
        assert!((mean - 1.0 / n as f64).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn compound_identities_and_mismatch() {
        let g = small_grid();
        let img = RfImage::new(Array2::from_shape_fn(g.shape(), |(z, x)| (z + 2 * x) as f64), g.clone()).unwrap();
        assert_eq!(compound(&[img.clone()]).unwrap(), img);
        let c = compound(&[img.clone(), img.clone(), img.clone()]).unwrap();
        assert!((&c.data - &img.data).iter().all(|v| v.abs() < 1e-12));
        let other = RfImage::new(
            Array2::zeros((2, 2)),
            ImageGrid::uniform(0.0, 1e-4, 2, 1e-3, 1e-4, 2).unwrap(),
        )
        .unwrap();
        assert!(matches!(compound(&[img, other]), Err(Error::GridMismatch(_))));
        assert!(compound(&[]).is_err());
    }

    #[test]
    fn crop_for_default_probe() {
        let p = probe(128);
        let g = ImageGrid::uniform(-19.05e-3, 0.1e-3, 382, 5e-3, 0.1e-3, 301).unwrap();
        let crop = central_crop_region(&g, &p, 1.75, 0.035).unwrap();
        assert_eq!(crop.aperture_elements, 67);
        // Centers 33..=94 fit: 62 elements, about (128 - 67) pitches wide.
        let x0 = g.x()[crop.cols.start];
        let x1 = g.x()[crop.cols.end - 1];
        let width = x1 - x0;
        assert!((width - 61.0 * 0.3e-3).abs() <= 0.31e-3, "{width}");
        assert_eq!(p.nearest_element(x0), 33);
        assert_eq!(p.nearest_element(x1), 94);
        assert_eq!(g.z()[crop.rows.end - 1], 0.035);
    }

    #[test]
    fn crop_limits() {
        // Odd array, grid on element centers, aperture spanning the whole array.
        let p = ProbeGeometry::linear(5, 1e-3).unwrap();
        let g = ImageGrid::uniform(-2e-3, 1e-3, 5, 1e-3, 1e-3, 4).unwrap();
        let crop = central_crop_region(&g, &p, 1.0, 4e-3).unwrap();
        assert_eq!(crop.cols, 2..3);
        let crop = central_crop_region(&g, &p, 1e9, 4e-3).unwrap();
        assert_eq!(crop.cols, 0..5);
        match central_crop_region(&g, &p, 0.5, 4e-3) {
            Err(Error::EmptyCrop { aperture_elements, .. }) => assert_eq!(aperture_elements, 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn observation_matrix_shape_and_rows() {
        let cube = synthetic_cube(4, 6, 5, |e, z, x| (e * 100 + z * 10 + x) as f64 + 1.0);
        let crop = CropRegion {
            cols: 1..4,
            rows: 0..5,
            aperture_elements: 1,
        };
        let x = build_observation_matrix(&cube, &crop).unwrap();
        assert_eq!(x.data().dim(), (4, 15));
        for e in 0..4 {
            let slice = cube.values.slice(s![e, 0..5, 1..4]);
            let flat: Vec<f64> = slice.iter().copied().collect();
            assert_eq!(x.data().row(e).to_vec(), flat);
        }
    }

    #[test]
    fn direct_observations_match_cube() {
        let p = probe(16);
        let g = ImageGrid::uniform(-0.6e-3, 0.1e-3, 13, 2e-3, 0.1e-3, 10).unwrap();
        let acq = random_acq(16, 400, 6);
        let cfg = BeamformConfig::default();
        let crop = central_crop_region(&g, &p, cfg.f_number, 2.9e-3).unwrap();
        let cube = delayed_channel_cube_full(&acq, 0, &g, &p, &cfg).unwrap();
        let a = build_observation_matrix(&cube, &crop).unwrap();
        let b = observation_matrix_direct(&acq, 0, &g, &p, &crop, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aperture_layout_rows_follow_each_pixel() {
        let p = probe(16);
        let g = ImageGrid::uniform(-0.6e-3, 0.1e-3, 13, 2e-3, 0.1e-3, 10).unwrap();
        let acq = random_acq(16, 400, 6);
        let cfg = BeamformConfig {
            observation_layout: ObservationLayout::Aperture,
            profile_mapping: ProfileMapping::Centered,
            ..BeamformConfig::default()
        };
        let crop = central_crop_region(&g, &p, cfg.f_number, 2.9e-3).unwrap();
        let half = (crop.aperture_elements - 1) / 2;
        let cube = delayed_channel_cube_full(&acq, 0, &g, &p, &cfg).unwrap();
        let x = observation_matrix_direct(&acq, 0, &g, &p, &crop, &cfg).unwrap();
        assert_eq!(x.n_rows(), crop.aperture_elements);
        let width = crop.cols.len();
        for k in 0..crop.aperture_elements {
            for (r, iz) in crop.rows.clone().enumerate() {
                for (c, ix) in crop.cols.clone().enumerate() {
                    let e = p.nearest_element(g.x()[ix]) - half + k;
                    assert_eq!(x.data()[(k, r * width + c)], cube.values[(e, iz, ix)]);
                }
            }
        }
    }

    #[test]
    fn aperture_layout_needs_centered_mapping() {
        let cfg = BeamformConfig {
            observation_layout: ObservationLayout::Aperture,
            profile_mapping: ProfileMapping::Element,
            ..BeamformConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(
            "aperture".parse::<ObservationLayout>().unwrap(),
            ObservationLayout::Aperture
        );
    }

    #[test]
    fn masked_observations_drop_silent_elements() {
        let p = probe(16);
        let g = ImageGrid::uniform(-0.1e-3, 0.1e-3, 3, 1e-3, 0.1e-3, 5).unwrap();
        let acq = random_acq(16, 400, 9);
        let cfg = BeamformConfig {
            observe_full_aperture: false,
            ..BeamformConfig::default()
        };
        let crop = central_crop_region(&g, &p, cfg.f_number, 1.4e-3).unwrap();
        let x = observation_matrix_direct(&acq, 0, &g, &p, &crop, &cfg).unwrap();
        assert!(x.n_rows() < 16);
        let z = g.z()[crop.rows.end - 1];
        let span = active_aperture(z, cfg.f_number, &p, 0.0);
        assert!(x
            .row_element()
            .iter()
            .all(|&e| e + 2 >= span.first && e <= span.last + 2));
    }

    #[test]
    fn window_parsing() {
        assert_eq!("ica".parse::<Window>().unwrap(), Window::Ica);
        assert_eq!("hann".parse::<Window>().unwrap(), Window::Fixed(WindowShape::Hann));
        assert!("foo".parse::<Window>().is_err());
        assert!(BeamformConfig {
            f_number: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn das_is_linear_in_scale(a in -10.0f64..10.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cube = synthetic_cube(7, 3, 3, |_, _, _| rng.gen_range(-1.0..1.0));
            let mut scaled = cube.clone();
            scaled.values *= a;
            let cfg = BeamformConfig::default();
            let src = ProfileSource::Shape(WindowShape::default());
            let x = das(&cube, &src, &cfg).unwrap();
            let y = das(&scaled, &src, &cfg).unwrap();
            for (p, q) in x.data.iter().zip(y.data.iter()) {
                prop_assert!((a * p - q).abs() < 1e-12);
            }
        }
    }
}
