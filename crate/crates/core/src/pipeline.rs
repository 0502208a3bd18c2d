//! End-to-end runs: simulated presets, beamforming by method and angle
//! subset, evaluation against ground truth, method comparison and the
//! noisy-channel sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::beamform::{cf_compound, das_compound, ica_beamform, BeamformConfig, ProfileSource, Window};
use crate::error::{Error, Result};
use crate::fastica::{IcaConfig, IcaResult};
use crate::metrics::{cnr, cyst_masks, fwhm_targets, to_bmode, CystMaskRadii, FwhmScale, FwhmSummary};
use crate::model::{BModeImage, ImageGrid, ProbeGeometry, RfImage};
use crate::native::Dataset;
use crate::report::{MetricRow, NoiseRow};
use crate::simulate::{
    add_channel_noise, make_cyst_phantom, make_points_in_speckle, resolution_phantom, synth_channel_data, Cyst,
    Phantom, PulseModel, Recording, SpeckleParams, DEFAULT_N_ELEMENTS, DEFAULT_PITCH, DEFAULT_SAMPLING_RATE,
    DEFAULT_SOUND_SPEED,
};
use crate::windows::{window_spectrum, WindowShape, WindowSpectrum};

/// Simulated phantom families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    /// Isolated point targets (resolution).
    Sr,
    /// Anechoic cysts in speckle (contrast).
    Sc,
    /// Bright point targets in speckle.
    Er,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sr" => Ok(Self::Sr),
            "sc" => Ok(Self::Sc),
            "er" => Ok(Self::Er),
            other => Err(Error::InvalidConfig(format!(
                "unknown phantom `{other}` (expected sr, sc or er)"
            ))),
        }
    }
}

impl std::fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sr => "sr",
            Self::Sc => "sc",
            Self::Er => "er",
        })
    }
}

/// Size and sampling of a simulated preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PresetOptions {
    pub n_elements: usize,
    pub pitch: f64,
    pub pulse: PulseModel,
    pub sound_speed: f64,
    pub sampling_rate: f64,
    pub n_angles: usize,
    pub max_angle_deg: f64,
    /// Image half-width and depth range, metres.
    pub x_half: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub dx: f64,
    pub dz: f64,
    /// Lateral resolution-cell size is `lambda * f_number`.
    pub f_number: f64,
}

impl Default for PresetOptions {
    fn default() -> Self {
        let pulse = PulseModel::default();
        let lambda = pulse.wavelength(DEFAULT_SOUND_SPEED);
        Self {
            n_elements: DEFAULT_N_ELEMENTS,
            pitch: DEFAULT_PITCH,
            pulse,
            sound_speed: DEFAULT_SOUND_SPEED,
            sampling_rate: DEFAULT_SAMPLING_RATE,
            n_angles: 75,
            max_angle_deg: 16.0,
            x_half: 8e-3,
            z_min: 8e-3,
            z_max: 32e-3,
            dx: 0.1e-3,
            dz: lambda / 8.0,
            f_number: 1.75,
        }
    }
}

impl PresetOptions {
    /// `n` angles evenly spread over `[-max, max]` (just 0 when `n = 1`).
    pub fn angles(&self) -> Vec<f64> {
        let m = self.max_angle_deg.to_radians();
        if self.n_angles <= 1 {
            return vec![0.0];
        }
        (0..self.n_angles)
            .map(|i| -m + 2.0 * m * i as f64 / (self.n_angles - 1) as f64)
            .collect()
    }

    pub fn grid(&self) -> Result<ImageGrid> {
        ImageGrid::spanning(-self.x_half, self.x_half, self.dx, self.z_min, self.z_max, self.dz)
    }

    fn speckle(&self) -> SpeckleParams {
        let margin = 1e-3;
        SpeckleParams::new(
            (-self.x_half - margin, self.x_half + margin),
            (self.z_min - margin, self.z_max + margin),
            &self.pulse,
            self.sound_speed,
            self.f_number,
        )
    }

    /// Phantom of the given family. Deterministic in `seed`.
    pub fn phantom(&self, kind: PhantomKind, seed: u64) -> Phantom {
        let span = self.z_max - self.z_min;
        match kind {
            PhantomKind::Sr => {
                let spacing = 5e-3;
                let z0 = self.z_min + 2e-3;
                let z1 = self.z_max - 2e-3;
                resolution_phantom(
                    self.x_half - 2e-3,
                    z0,
                    z0 + ((z1 - z0) / spacing).floor() * spacing,
                    spacing,
                )
            }
            PhantomKind::Sc => {
                let r = (span / 8.0).min(self.x_half / 2.0);
                let cysts = [
                    Cyst {
                        x: 0.0,
                        z: self.z_min + span / 3.0,
                        radius: r,
                    },
                    Cyst {
                        x: 0.0,
                        z: self.z_min + 2.0 * span / 3.0,
                        radius: r,
                    },
                ];
                make_cyst_phantom(&self.speckle(), &cysts, seed)
            }
            PhantomKind::Er => {
                let zc = self.z_min + span / 2.0;
                let points = [
                    (0.0, self.z_min + span / 4.0),
                    (0.0, zc),
                    (0.0, self.z_min + 3.0 * span / 4.0),
                    (-self.x_half / 2.0, zc),
                    (self.x_half / 2.0, zc),
                ];
                // Bright relative to the speckle (RMS sqrt(10) per cell).
                make_points_in_speckle(&self.speckle(), &points, 30.0, seed)
            }
        }
    }
}

/// Simulate a preset into a self-contained dataset.
pub fn simulate_preset(kind: PhantomKind, options: &PresetOptions, seed: u64) -> Result<Dataset> {
    let probe = ProbeGeometry::linear(options.n_elements, options.pitch)?;
    let phantom = options.phantom(kind, seed);
    let recording = Recording::covering(
        &phantom,
        &probe,
        &options.pulse,
        options.angles(),
        options.sampling_rate,
        options.sound_speed,
    );
    let sim = synth_channel_data(&phantom, &probe, &options.pulse, &recording)?;
    let mut provenance = BTreeMap::new();
    provenance.insert("source".into(), serde_json::json!("simulated"));
    provenance.insert("phantom".into(), serde_json::json!(kind.to_string()));
    provenance.insert("seed".into(), serde_json::json!(seed));
    provenance.insert("n_scatterers".into(), serde_json::json!(phantom.scatterers.len()));
    provenance.insert("dropped_scatterers".into(), serde_json::json!(sim.dropped.len()));
    provenance.insert("options".into(), serde_json::to_value(options)?);
    Ok(Dataset {
        name: kind.to_string(),
        probe,
        acquisition: sim.acquisition,
        grid: options.grid()?,
        targets: phantom.targets,
        provenance,
    })
}

/// `k` transmit indices spread symmetrically over `n` sorted angles.
/// A single angle is the one nearest 0.
pub fn symmetric_subset(angles: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = angles.len();
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!("cannot select {k} of {n} angles")));
    }
    if k == 1 {
        let mut best = 0;
        for (i, a) in angles.iter().enumerate() {
            if a.abs() < angles[best].abs() {
                best = i;
            }
        }
        return Ok(vec![best]);
    }
    Ok((0..k)
        .map(|i| ((i * (n - 1)) as f64 / (k - 1) as f64).round() as usize)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleSelection {
    All,
    /// Symmetric subset of this many angles.
    Count(usize),
    Indices(Vec<usize>),
}

impl AngleSelection {
    pub fn resolve(&self, angles: &[f64]) -> Result<Vec<usize>> {
        match self {
            AngleSelection::All => Ok((0..angles.len()).collect()),
            AngleSelection::Count(k) => symmetric_subset(angles, *k),
            AngleSelection::Indices(ix) => {
                if let Some(&bad) = ix.iter().find(|&&i| i >= angles.len()) {
                    return Err(Error::InvalidConfig(format!(
                        "angle index {bad} out of range ({} angles)",
                        angles.len()
                    )));
                }
                Ok(ix.clone())
            }
        }
    }
}

impl std::str::FromStr for AngleSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::All);
        }
        if let Some(list) = s.strip_prefix("idx:") {
            let ix = list
                .split(',')
                .map(|t| t.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::InvalidConfig(format!("bad angle index list `{list}`")))?;
            return Ok(Self::Indices(ix));
        }
        s.parse::<usize>().map(Self::Count).map_err(|_| {
            Error::InvalidConfig(format!(
                "bad angle selection `{s}` (use a count, `all` or `idx:i,j,..`)"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Das,
    Cf,
    Ica,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let base = s.trim().to_ascii_lowercase();
        let base = base.strip_suffix("+compound").unwrap_or(&base);
        match base {
            "das" => Ok(Self::Das),
            "cf" => Ok(Self::Cf),
            "ica" => Ok(Self::Ica),
            other => Err(Error::InvalidConfig(format!(
                "unknown method `{other}` (expected das, cf or ica)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Das => "das",
            Self::Cf => "cf",
            Self::Ica => "ica",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: Method,
    pub angles: AngleSelection,
    pub beamform: BeamformConfig,
    pub ica: IcaConfig,
    pub dynamic_range_db: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Das,
            angles: AngleSelection::Count(1),
            beamform: BeamformConfig::default(),
            ica: IcaConfig::default(),
            dynamic_range_db: crate::metrics::DEFAULT_DYNAMIC_RANGE_DB,
        }
    }
}

impl RunConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    /// Fixed window used by DAS; the ICA window makes no sense there.
    fn fixed_window(&self) -> Result<WindowShape> {
        match self.beamform.window {
            Window::Fixed(w) => Ok(w),
            Window::Ica => Err(Error::InvalidConfig(
                "window `ica` conflicts with method `das`; use method `ica` instead".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub rf: RfImage,
    pub bmode: BModeImage,
    pub estimates: Vec<IcaResult>,
    pub angle_indices: Vec<usize>,
}

impl RunOutput {
    /// False if any ICA estimate failed to converge; `None` without ICA.
    pub fn converged(&self) -> Option<bool> {
        if self.estimates.is_empty() {
            None
        } else {
            Some(self.estimates.iter().all(|e| e.converged))
        }
    }
}

/// Beamform `dataset` as configured and log-compress the result.
pub fn run(dataset: &Dataset, config: &RunConfig) -> Result<RunOutput> {
    let indices = config.angles.resolve(&dataset.acquisition.angles)?;
    let acq = dataset.acquisition.select_angles(&indices)?;
    let grid = &dataset.grid;
    let probe = &dataset.probe;
    let (rf, estimates) = match config.method {
        Method::Das => {
            let source = ProfileSource::Shape(config.fixed_window()?);
            (das_compound(&acq, grid, probe, &source, &config.beamform)?, Vec::new())
        }
        Method::Cf => (cf_compound(&acq, grid, probe, &config.beamform)?, Vec::new()),
        Method::Ica => {
            let out = ica_beamform(&acq, grid, probe, &config.ica, &config.beamform)?;
            (out.image, out.estimates)
        }
    };
    let bmode = to_bmode(&rf, config.dynamic_range_db)?;
    Ok(RunOutput {
        rf,
        bmode,
        estimates,
        angle_indices: indices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Search half-widths around each point target, metres.
    pub half_x: f64,
    pub half_z: f64,
    pub scale: FwhmScale,
    pub radii: CystMaskRadii,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            half_x: 1.5e-3,
            half_z: 1.0e-3,
            scale: FwhmScale::Linear,
            radii: CystMaskRadii::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fwhm: Option<FwhmSummary>,
    /// Mean CNR over the dataset's cysts.
    pub cnr_db: Option<f64>,
}

/// FWHM over point targets and CNR over cysts listed in the dataset that lie
/// inside the image.
pub fn evaluate(dataset: &Dataset, bmode: &BModeImage, options: &EvalOptions) -> Result<Evaluation> {
    let grid = &bmode.grid;
    let (x0, x1) = (grid.x()[0], grid.x()[grid.nx() - 1]);
    let (z0, z1) = (grid.z()[0], grid.z()[grid.nz() - 1]);
    let points: Vec<(f64, f64)> = dataset
        .targets
        .points
        .iter()
        .copied()
        .filter(|&(x, z)| {
            x - options.half_x >= x0 && x + options.half_x <= x1 && z - options.half_z >= z0 && z + options.half_z <= z1
        })
        .collect();
    let fwhm = if points.is_empty() {
        None
    } else {
        let image = match options.scale {
            FwhmScale::Linear => bmode.db.mapv(|v| 10f64.powf(v / 20.0)),
            FwhmScale::Db => bmode.db.clone(),
        };
        Some(fwhm_targets(
            &image,
            grid,
            &points,
            options.half_x,
            options.half_z,
            options.scale,
        )?)
    };
    let mut cnrs = Vec::new();
    for c in &dataset.targets.cysts {
        let reach = options.radii.outside_outer * c.radius;
        if c.x - reach < x0 || c.x + reach > x1 || c.z - reach < z0 || c.z + reach > z1 {
            continue;
        }
        let (inside, outside) = cyst_masks(grid, c.x, c.z, c.radius, options.radii)?;
        cnrs.push(cnr(bmode, &inside, &outside)?);
    }
    let cnr_db = (!cnrs.is_empty()).then(|| cnrs.iter().sum::<f64>() / cnrs.len() as f64);
    Ok(Evaluation { fwhm, cnr_db })
}

/// Evaluate every method at every angle count, in the order given.
pub fn compare(
    dataset: &Dataset,
    methods: &[Method],
    angle_counts: &[usize],
    base: &RunConfig,
    eval: &EvalOptions,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for &k in angle_counts {
        for &m in methods {
            let cfg = RunConfig {
                method: m,
                angles: AngleSelection::Count(k),
                ..base.clone()
            };
            let out = run(dataset, &cfg)?;
            let ev = evaluate(dataset, &out.bmode, eval)?;
            rows.push(MetricRow {
                dataset: dataset.name.clone(),
                method: m.to_string(),
                n_angles: out.angle_indices.len(),
                fwhm_axial_mm: ev.fwhm.as_ref().map(|f| f.axial_mm),
                fwhm_lateral_mm: ev.fwhm.as_ref().map(|f| f.lateral_mm),
                cnr_db: ev.cnr_db,
                seed: base.ica.seed,
                converged: out.converged(),
            });
        }
    }
    Ok(rows)
}

/// Noise sweep results: report rows plus the images behind them.
#[derive(Debug, Clone)]
pub struct NoiseSweep {
    pub rows: Vec<NoiseRow>,
}

/// For each method, compare the image from noisy channel data with the
/// clean image of the same method. RMSE is over B-mode dB values.
pub fn noise_sweep(
    dataset: &Dataset,
    channel_sets: &[Vec<usize>],
    snrs_db: &[f64],
    methods: &[Method],
    base: &RunConfig,
    noise_seed: u64,
) -> Result<NoiseSweep> {
    let mut rows = Vec::new();
    for &m in methods {
        let cfg = RunConfig {
            method: m,
            ..base.clone()
        };
        let clean = run(dataset, &cfg)?;
        for channels in channel_sets {
            for &snr in snrs_db {
                let mut noisy = dataset.clone();
                noisy.acquisition = add_channel_noise(&dataset.acquisition, channels, snr, noise_seed)?;
                let out = run(&noisy, &cfg)?;
                let converged = match (clean.converged(), out.converged()) {
                    (Some(a), Some(b)) => Some(a && b),
                    _ => None,
                };
                rows.push(NoiseRow {
                    dataset: dataset.name.clone(),
                    method: m.to_string(),
                    channels: channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
                    n_noisy: channels.len(),
                    snr_db: snr,
                    rmse_db: crate::metrics::rmse(&out.bmode.db, &clean.bmode.db)?,
                    seed: base.ica.seed,
                    noise_seed,
                    converged,
                });
            }
        }
    }
    Ok(NoiseSweep { rows })
}

/// `count` adjacent channels centered on `center` (zero-based).
pub fn centered_channels(center: usize, count: usize, n_elements: usize) -> Result<Vec<usize>> {
    let half = count / 2;
    if count == 0 || center < half || center + (count - 1 - half) >= n_elements {
        return Err(Error::InvalidConfig(format!(
            "{count} channels around {center} do not fit {n_elements} elements"
        )));
    }
    Ok((center - half..=center + (count - 1 - half)).collect())
}

/// The ICA window estimated from the transmit nearest 0° and its spectrum.
pub fn estimate_weights(dataset: &Dataset, config: &RunConfig, n_fft: usize) -> Result<(IcaResult, WindowSpectrum)> {
    let zero = dataset.acquisition.zero_angle_index();
    let (est, _) = crate::beamform::estimate_ica_profile(
        &dataset.acquisition,
        zero,
        &dataset.grid,
        &dataset.probe,
        &config.ica,
        &config.beamform,
    )?;
    let n_fft = n_fft.max((4 * est.w_aperture.len()).next_power_of_two());
    let spectrum = window_spectrum(&est.w_aperture, n_fft)?;
    Ok((est, spectrum))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_subsets() {
        let angles: Vec<f64> = (0..75).map(|i| -16.0 + 32.0 * i as f64 / 74.0).collect();
        assert_eq!(symmetric_subset(&angles, 1).unwrap(), vec![37]);
        assert_eq!(
            symmetric_subset(&angles, 11).unwrap(),
            vec![0, 7, 15, 22, 30, 37, 44, 52, 59, 67, 74]
        );
        assert_eq!(symmetric_subset(&angles, 75).unwrap(), (0..75).collect::<Vec<_>>());
        assert!(symmetric_subset(&angles, 76).is_err());
        let idx = symmetric_subset(&angles, 11).unwrap();
        for (a, b) in idx.iter().zip(idx.iter().rev()) {
            assert!((angles[*a] + angles[*b]).abs() < 1e-12);
        }
    }

    #[test]
    fn parsing() {
        assert_eq!("ica+compound".parse::<Method>().unwrap(), Method::Ica);
        assert!("mv".parse::<Method>().is_err());
        assert_eq!("11".parse::<AngleSelection>().unwrap(), AngleSelection::Count(11));
        assert_eq!("all".parse::<AngleSelection>().unwrap(), AngleSelection::All);
        assert_eq!(
            "idx:1,2".parse::<AngleSelection>().unwrap(),
            AngleSelection::Indices(vec![1, 2])
        );
        assert_eq!("Sc".parse::<PhantomKind>().unwrap(), PhantomKind::Sc);
    }

    #[test]
    fn channel_groups() {
        assert_eq!(centered_channels(63, 1, 128).unwrap(), vec![63]);
        assert_eq!(centered_channels(63, 3, 128).unwrap(), vec![62, 63, 64]);
        assert_eq!(centered_channels(63, 5, 128).unwrap(), vec![61, 62, 63, 64, 65]);
        assert!(centered_channels(0, 3, 128).is_err());
    }

    #[test]
    fn das_rejects_ica_window() {
        let mut cfg = RunConfig::default();
        cfg.beamform.window = Window::Ica;
        assert!(cfg.fixed_window().is_err());
    }

    #[test]
    fn preset_angles() {
        let o = PresetOptions {
            n_angles: 3,
            ..PresetOptions::default()
        };
        let a = o.angles();
        assert_eq!(a.len(), 3);
        assert_eq!(a[1], 0.0);
        assert!((a[2] - 16f64.to_radians()).abs() < 1e-15);
    }
}
