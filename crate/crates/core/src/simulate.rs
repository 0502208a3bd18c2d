//! Linear point-scatterer forward model for plane-wave transmits, phantom
//! builders and per-channel noise injection.
//!
//! Each echo is the pulse delayed by the two-way time of flight; there is no
//! attenuation, directivity or multiple scattering, so superposition is exact.

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::propagation_delay;
use crate::model::{PlaneWaveAcquisition, ProbeGeometry};

pub const DEFAULT_N_ELEMENTS: usize = 128;
pub const DEFAULT_PITCH: f64 = 0.3e-3;
pub const DEFAULT_CENTER_FREQUENCY: f64 = 5.208e6;
pub const DEFAULT_SOUND_SPEED: f64 = 1540.0;
pub const DEFAULT_SAMPLING_RATE: f64 = 4.0 * DEFAULT_CENTER_FREQUENCY;

/// Envelope level below which the pulse is truncated.
const PULSE_CUTOFF: f64 = 1e-6;

/// Gaussian-modulated sinusoid, peak at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseModel {
    pub center_frequency: f64,
    /// -6 dB bandwidth as a fraction of the center frequency.
    pub fractional_bandwidth: f64,
    pub amplitude: f64,
}

impl Default for PulseModel {
    fn default() -> Self {
        Self {
            center_frequency: DEFAULT_CENTER_FREQUENCY,
            fractional_bandwidth: 0.6,
            amplitude: 1.0,
        }
    }
}

impl PulseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.center_frequency > 0.0 && self.center_frequency.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "center frequency must be positive, got {}",
                self.center_frequency
            )));
        }
        if !(self.fractional_bandwidth > 0.0 && self.fractional_bandwidth < 2.0) {
            return Err(Error::InvalidConfig(format!(
                "fractional bandwidth must lie in (0, 2), got {}",
                self.fractional_bandwidth
            )));
        }
        if !self.amplitude.is_finite() {
            return Err(Error::InvalidConfig("pulse amplitude is not finite".into()));
        }
        Ok(())
    }

    /// Gaussian envelope rate `a` in `exp(-a t^2)`, chosen so the spectrum
    /// is 6 dB down at `f0 (1 +- bw / 2)`.
    pub fn envelope_rate(&self) -> f64 {
        let reference = 10f64.powf(-6.0 / 20.0);
        let x = std::f64::consts::PI * self.center_frequency * self.fractional_bandwidth;
        -(x * x) / (4.0 * reference.ln())
    }

    /// Half-length of the support outside which the envelope is negligible.
    pub fn half_support(&self) -> f64 {
        ((1.0 / PULSE_CUTOFF).ln() / self.envelope_rate()).sqrt()
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        let a = self.envelope_rate();
        self.amplitude * (-a * t * t).exp() * (2.0 * std::f64::consts::PI * self.center_frequency * t).cos()
    }

    pub fn wavelength(&self, sound_speed: f64) -> f64 {
        sound_speed / self.center_frequency
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub x: f64,
    pub z: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    PointGrid,
    Speckle,
    AnechoicCystInSpeckle,
    PointsInSpeckle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cyst {
    pub x: f64,
    pub z: f64,
    pub radius: f64,
}

impl Cyst {
    pub fn contains(&self, x: f64, z: f64) -> bool {
        (x - self.x).hypot(z - self.z) <= self.radius
    }
}

/// Ground truth kept alongside the scatterers for evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    /// Point targets `(x, z)`, metres.
    pub points: Vec<(f64, f64)>,
    pub cysts: Vec<Cyst>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub scatterers: Vec<Scatterer>,
    pub layout: Layout,
    pub targets: Targets,
}

impl Phantom {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.scatterers.iter().enumerate() {
            if !(s.z > 0.0) || !s.x.is_finite() || !s.z.is_finite() || !s.amplitude.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "scatterer {i} at ({}, {}) with amplitude {} is invalid",
                    s.x, s.z, s.amplitude
                )));
            }
        }
        Ok(())
    }

    pub fn single(x: f64, z: f64) -> Self {
        Self {
            scatterers: vec![Scatterer { x, z, amplitude: 1.0 }],
            layout: Layout::PointGrid,
            targets: Targets {
                points: vec![(x, z)],
                cysts: Vec::new(),
            },
        }
    }
}

/// Unit-amplitude point targets at every `(x, z)` of the cartesian product
/// plus any extra positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointGridParams {
    pub xs: Vec<f64>,
    pub zs: Vec<f64>,
    pub amplitude: f64,
}

pub fn make_point_grid(params: &PointGridParams) -> Phantom {
    let mut scatterers = Vec::new();
    let mut points = Vec::new();
    for &z in &params.zs {
        for &x in &params.xs {
            scatterers.push(Scatterer {
                x,
                z,
                amplitude: params.amplitude,
            });
            points.push((x, z));
        }
    }
    Phantom {
        scatterers,
        layout: Layout::PointGrid,
        targets: Targets {
            points,
            cysts: Vec::new(),
        },
    }
}

/// Resolution-style phantom: a vertical column of points on the axis and a
/// horizontal row at mid-depth.
pub fn resolution_phantom(x_half: f64, z_min: f64, z_max: f64, spacing: f64) -> Phantom {
    let mut points = Vec::new();
    let nz = ((z_max - z_min) / spacing).round() as usize;
    for k in 0..=nz {
        points.push((0.0, z_min + k as f64 * spacing));
    }
    let z_mid = z_min + (nz / 2) as f64 * spacing;
    let nx = (x_half / spacing).floor() as i64;
    for k in -nx..=nx {
        if k != 0 {
            points.push((k as f64 * spacing, z_mid));
        }
    }
    Phantom {
        scatterers: points
            .iter()
            .map(|&(x, z)| Scatterer { x, z, amplitude: 1.0 })
            .collect(),
        layout: Layout::PointGrid,
        targets: Targets {
            points,
            cysts: Vec::new(),
        },
    }
}

/// Random diffuse scatterers filling a rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeckleParams {
    pub x_range: (f64, f64),
    pub z_range: (f64, f64),
    /// Mean scatterers per resolution cell.
    pub per_cell: f64,
    /// Resolution cell area, m^2.
    pub cell_area: f64,
}

impl SpeckleParams {
    /// Cell of one wavelength axially by `lambda * F` laterally.
    pub fn new(x_range: (f64, f64), z_range: (f64, f64), pulse: &PulseModel, sound_speed: f64, f_number: f64) -> Self {
        let lambda = pulse.wavelength(sound_speed);
        Self {
            x_range,
            z_range,
            per_cell: 10.0,
            cell_area: lambda * lambda * f_number,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_range.1 - self.x_range.0) * (self.z_range.1 - self.z_range.0)
    }

    pub fn count(&self) -> usize {
        (self.area() / self.cell_area * self.per_cell).ceil() as usize
    }
}

/// Uniform positions, standard-normal amplitudes.
pub fn make_speckle(params: &SpeckleParams, seed: u64) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scatterers = (0..params.count())
        .map(|_| Scatterer {
            x: rng.gen_range(params.x_range.0..params.x_range.1),
            z: rng.gen_range(params.z_range.0..params.z_range.1),
            amplitude: StandardNormal.sample(&mut rng),
        })
        .collect();
    Phantom {
        scatterers,
        layout: Layout::Speckle,
        targets: Targets::default(),
    }
}

/// Speckle with every scatterer inside the cysts removed.
pub fn make_cyst_phantom(speckle: &SpeckleParams, cysts: &[Cyst], seed: u64) -> Phantom {
    let mut p = make_speckle(speckle, seed);
    p.scatterers.retain(|s| !cysts.iter().any(|c| c.contains(s.x, s.z)));
    p.layout = Layout::AnechoicCystInSpeckle;
    p.targets.cysts = cysts.to_vec();
    p
}

/// Speckle background with bright point targets of amplitude `amplitude`.
pub fn make_points_in_speckle(speckle: &SpeckleParams, points: &[(f64, f64)], amplitude: f64, seed: u64) -> Phantom {
    let mut p = make_speckle(speckle, seed);
    p.scatterers
        .extend(points.iter().map(|&(x, z)| Scatterer { x, z, amplitude }));
    p.layout = Layout::PointsInSpeckle;
    p.targets.points = points.to_vec();
    p
}

/// Recording parameters for [`synth_channel_data`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub angles: Vec<f64>,
    pub sampling_rate: f64,
    pub sound_speed: f64,
    pub start_time: f64,
    pub duration: f64,
}

impl Recording {
    /// Window from 0 until every echo of `phantom` has fully arrived.
    pub fn covering(
        phantom: &Phantom,
        probe: &ProbeGeometry,
        pulse: &PulseModel,
        angles: Vec<f64>,
        sampling_rate: f64,
        sound_speed: f64,
    ) -> Self {
        let mut max_tau: f64 = 0.0;
        for s in &phantom.scatterers {
            for &a in &angles {
                for &ex in [probe.element_x()[0], probe.element_x()[probe.n_elements() - 1]].iter() {
                    max_tau = max_tau.max(propagation_delay(s.x, s.z, a, ex, sound_speed));
                }
            }
        }
        Self {
            angles,
            sampling_rate,
            sound_speed,
            start_time: 0.0,
            duration: max_tau + 2.0 * pulse.half_support(),
        }
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.sampling_rate).ceil() as usize + 1
    }
}

/// Channel data plus the scatterers that did not fit the recording window.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub acquisition: PlaneWaveAcquisition,
    pub dropped: Vec<usize>,
}

/// `h_i(t) = sum_s a_s p(t - tau_s)` for every transmit and element.
pub fn synth_channel_data(
    phantom: &Phantom,
    probe: &ProbeGeometry,
    pulse: &PulseModel,
    recording: &Recording,
) -> Result<Simulation> {
    phantom.validate()?;
    probe.validate()?;
    pulse.validate()?;
    let ns = recording.n_samples();
    let n = probe.n_elements();
    let fs = recording.sampling_rate;
    let t0 = recording.start_time;
    let c = recording.sound_speed;
    let half = pulse.half_support();
    let t_end = t0 + (ns - 1) as f64 / fs;

    // Drop scatterers whose pulse would be cut by the window on any channel.
    let mut dropped = Vec::new();
    let mut kept = Vec::new();
    for (i, s) in phantom.scatterers.iter().enumerate() {
        let fits = recording.angles.iter().all(|&a| {
            probe.element_x().iter().all(|&ex| {
                let tau = propagation_delay(s.x, s.z, a, ex, c);
                tau - half >= t0 && tau + half <= t_end
            })
        });
        if fits {
            kept.push(*s);
        } else {
            log::warn!(
                "scatterer {i} at ({:.4e}, {:.4e}) m falls outside the recording window and is dropped",
                s.x,
                s.z
            );
            dropped.push(i);
        }
    }

    let a_rate = pulse.envelope_rate();
    let omega = 2.0 * std::f64::consts::PI * pulse.center_frequency;
    let dt = 1.0 / fs;
    let q = (-2.0 * a_rate * dt * dt).exp();
    let (rot_s, rot_c) = (omega * dt).sin_cos();
    let na = recording.angles.len();
    let mut data = Array3::<f64>::zeros((na, n, ns));
    data.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(recording.angles.par_iter())
        .for_each(|(mut per_angle, &angle)| {
            let (sin, cos) = angle.sin_cos();
            let tx: Vec<f64> = kept.iter().map(|s| (s.z * cos + s.x * sin) / c).collect();
            per_angle
                .axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(|(e, mut trace)| {
                    let ex = probe.element_x()[e];
                    let trace = trace.as_slice_mut().expect("contiguous trace");
                    for (s, &t_tx) in kept.iter().zip(&tx) {
                        let dx = s.x - ex;
                        let tau = t_tx + (dx * dx + s.z * s.z).sqrt() / c;
                        let lo = (((tau - half - t0) * fs).ceil().max(0.0)) as usize;
                        let hi = (((tau + half - t0) * fs).floor() as usize).min(ns - 1);
                        if lo > hi {
                            continue;
                        }
                        // Gaussian and carrier advanced by recurrence; exact up
                        // to rounding over the short pulse support.
                        let t = t0 + lo as f64 / fs - tau;
                        let amp = s.amplitude * pulse.amplitude;
                        let mut g = (-a_rate * t * t).exp();
                        let mut r = (-a_rate * (2.0 * t * dt + dt * dt)).exp();
                        let (mut sn, mut cs) = (omega * t).sin_cos();
                        for v in &mut trace[lo..=hi] {
                            *v += amp * g * cs;
                            g *= r;
                            r *= q;
                            (sn, cs) = (sn * rot_c + cs * rot_s, cs * rot_c - sn * rot_s);
                        }
                    }
                });
        });

    let acquisition = PlaneWaveAcquisition {
        angles: recording.angles.clone(),
        channel_data: data,
        sampling_rate: fs,
        sound_speed: c,
        start_time: t0,
    };
    acquisition.validate()?;
    Ok(Simulation { acquisition, dropped })
}

/// Add white Gaussian noise to the listed channels of every transmit. The
/// noise variance is the clean trace power divided by `10^(snr_db / 10)`.
/// `snr_db = +inf` leaves the data untouched.
pub fn add_channel_noise(
    acq: &PlaneWaveAcquisition,
    channels: &[usize],
    snr_db: f64,
    seed: u64,
) -> Result<PlaneWaveAcquisition> {
    let n = acq.n_elements();
    for &ch in channels {
        if ch >= n {
            return Err(Error::InvalidConfig(format!(
                "channel {ch} out of range ({n} elements)"
            )));
        }
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidConfig(format!("SNR {snr_db} dB is not usable")));
    }
    let mut out = acq.clone();
    if snr_db == f64::INFINITY {
        return Ok(out);
    }
    let ratio = 10f64.powf(snr_db / 10.0);
    for a in 0..acq.n_angles() {
        for &ch in channels {
            let mut trace = out.channel_data.slice_mut(ndarray::s![a, ch, ..]);
            let power = trace.iter().map(|v| v * v).sum::<f64>() / trace.len() as f64;
            if power == 0.0 {
                return Err(Error::ZeroPowerChannel(ch));
            }
            let normal = Normal::new(0.0, (power / ratio).sqrt()).expect("finite positive sigma");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((a * n + ch) as u64);
            trace.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamform::{delayed_channel_cube, BeamformConfig};
    use crate::model::{ImageGrid, RfImage};

    fn probe() -> ProbeGeometry {
        ProbeGeometry::linear(32, DEFAULT_PITCH).unwrap()
    }

    fn simulate(phantom: &Phantom, angles: Vec<f64>) -> Simulation {
        let p = probe();
        let pulse = PulseModel::default();
        let rec = Recording::covering(phantom, &p, &pulse, angles, DEFAULT_SAMPLING_RATE, DEFAULT_SOUND_SPEED);
        synth_channel_data(phantom, &p, &pulse, &rec).unwrap()
    }

    #[test]
    fn pulse_bandwidth_definition() {
        let pulse = PulseModel::default();
        // Spectrum of exp(-a t^2) cos(w0 t) near f0 is exp(-pi^2 (f - f0)^2 / a).
        let df = pulse.center_frequency * pulse.fractional_bandwidth / 2.0;
        let level = (-(std::f64::consts::PI * df).powi(2) / pulse.envelope_rate()).exp();
        assert!((20.0 * level.log10() + 6.0).abs() < 1e-9);
        assert_eq!(pulse.eval(0.0), 1.0);
        assert!(PulseModel {
            fractional_bandwidth: 2.0,
            ..pulse
        }
        .validate()
        .is_err());
    }

    #[test]
    fn echo_peaks_at_time_of_flight() {
        let ph = Phantom::single(1e-3, 15e-3);
        let sim = simulate(&ph, vec![0.0]);
        let acq = &sim.acquisition;
        let p = probe();
        for e in 0..p.n_elements() {
            let tau = propagation_delay(1e-3, 15e-3, 0.0, p.element_x()[e], DEFAULT_SOUND_SPEED);
            let trace = acq.trace(0, e);
            let env = crate::metrics::envelope(
                &RfImage::new(
                    trace.to_owned().insert_axis(Axis(1)),
                    ImageGrid::uniform(0.0, 1.0, 1, 1.0, 1.0, trace.len()).unwrap(),
                )
                .unwrap(),
            );
            let k = env
                .column(0)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let t = acq.start_time + k as f64 / acq.sampling_rate;
            assert!((t - tau).abs() <= 0.5 / acq.sampling_rate + 1e-15, "element {e}");
        }
    }

    #[test]
    fn traces_match_direct_pulse_evaluation() {
        let ph = Phantom {
            scatterers: vec![
                Scatterer {
                    x: -1e-3,
                    z: 12e-3,
                    amplitude: 0.7,
                },
                Scatterer {
                    x: 2e-3,
                    z: 14e-3,
                    amplitude: -1.3,
                },
            ],
            layout: Layout::PointGrid,
            targets: Targets::default(),
        };
        let sim = simulate(&ph, vec![0.1]);
        let acq = &sim.acquisition;
        let pulse = PulseModel::default();
        let half = pulse.half_support();
        let p = probe();
        for e in [0, 13, 31] {
            for (k, &v) in acq.trace(0, e).iter().enumerate() {
                let t = acq.start_time + k as f64 / acq.sampling_rate;
                let expected: f64 = ph
                    .scatterers
                    .iter()
                    .map(|s| {
                        let dt = t - propagation_delay(s.x, s.z, 0.1, p.element_x()[e], DEFAULT_SOUND_SPEED);
                        if dt.abs() <= half {
                            s.amplitude * pulse.eval(dt)
                        } else {
                            0.0
                        }
                    })
                    .sum();
                assert!(
                    (v - expected).abs() < 1e-12,
                    "element {e} sample {k}: {v} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn empty_phantom_is_silent() {
        let ph = Phantom {
            scatterers: Vec::new(),
            layout: Layout::Speckle,
            targets: Targets::default(),
        };
        let p = probe();
        let rec = Recording {
            angles: vec![0.0],
            sampling_rate: DEFAULT_SAMPLING_RATE,
            sound_speed: DEFAULT_SOUND_SPEED,
            start_time: 0.0,
            duration: 1e-5,
        };
        let sim = synth_channel_data(&ph, &p, &PulseModel::default(), &rec).unwrap();
        assert!(sim.acquisition.channel_data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn superposition() {
        let a = Phantom::single(-2e-3, 12e-3);
        let b = Phantom::single(3e-3, 18e-3);
        let mut ab = a.clone();
        ab.scatterers.extend(b.scatterers.iter().copied());
        let p = probe();
        let pulse = PulseModel::default();
        let rec = Recording::covering(
            &ab,
            &p,
            &pulse,
            vec![-0.1, 0.0, 0.2],
            DEFAULT_SAMPLING_RATE,
            DEFAULT_SOUND_SPEED,
        );
        let sa = synth_channel_data(&a, &p, &pulse, &rec).unwrap();
        let sb = synth_channel_data(&b, &p, &pulse, &rec).unwrap();
        let sab = synth_channel_data(&ab, &p, &pulse, &rec).unwrap();
        let sum = &sa.acquisition.channel_data + &sb.acquisition.channel_data;
        assert!((&sab.acquisition.channel_data - &sum).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn out_of_window_scatterer_is_dropped() {
        let ph = Phantom {
            scatterers: vec![
                Scatterer {
                    x: 0.0,
                    z: 10e-3,
                    amplitude: 1.0,
                },
                Scatterer {
                    x: 0.0,
                    z: 80e-3,
                    amplitude: 1.0,
                },
            ],
            layout: Layout::PointGrid,
            targets: Targets::default(),
        };
        let rec = Recording {
            angles: vec![0.0],
            sampling_rate: DEFAULT_SAMPLING_RATE,
            sound_speed: DEFAULT_SOUND_SPEED,
            start_time: 0.0,
            duration: 30e-6,
        };
        let sim = synth_channel_data(&ph, &probe(), &PulseModel::default(), &rec).unwrap();
        assert_eq!(sim.dropped, vec![1]);
    }

    #[test]
    fn cube_column_peaks_at_scatterer_depth() {
        let ph = Phantom::single(0.0, 0.02);
        let sim = simulate(&ph, vec![0.0]);
        let grid = ImageGrid::uniform(-1.5e-3, 0.1e-3, 31, 18e-3, 0.02e-3, 201).unwrap();
        let cfg = BeamformConfig::default();
        let cube = crate::beamform::delayed_channel_cube_full(&sim.acquisition, 0, &grid, &probe(), &cfg).unwrap();
        let ix = grid.nearest_col(0.0);
        let iz_true = grid.nearest_row(0.02);
        for e in 0..probe().n_elements() {
            let col = cube.values.slice(ndarray::s![e, .., ix]);
            let iz = col.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert!(iz.abs_diff(iz_true) <= 1, "element {e}: row {iz} vs {iz_true}");
        }
        let _ = delayed_channel_cube(&sim.acquisition, 0, &grid, &probe(), &cfg).unwrap();
    }

    fn speckle_params() -> SpeckleParams {
        SpeckleParams::new(
            (-5e-3, 5e-3),
            (10e-3, 20e-3),
            &PulseModel::default(),
            DEFAULT_SOUND_SPEED,
            1.75,
        )
    }

    #[test]
    fn cysts_are_empty_and_seeded() {
        let cyst = Cyst {
            x: 0.0,
            z: 15e-3,
            radius: 2e-3,
        };
        let a = make_cyst_phantom(&speckle_params(), &[cyst], 3);
        let b = make_cyst_phantom(&speckle_params(), &[cyst], 3);
        assert_eq!(a, b);
        assert!(a
            .scatterers
            .iter()
            .all(|s| (s.x - cyst.x).hypot(s.z - cyst.z) > cyst.radius));
        assert_ne!(a, make_cyst_phantom(&speckle_params(), &[cyst], 4));
    }

    #[test]
    fn speckle_density_per_resolution_cell() {
        let params = speckle_params();
        let p = make_speckle(&params, 1);
        let lambda = PulseModel::default().wavelength(DEFAULT_SOUND_SPEED);
        // Count in a window of 10 x 10 cells in the middle of the region.
        let (w, h) = (10.0 * lambda * 1.75, 10.0 * lambda);
        let inside = p
            .scatterers
            .iter()
            .filter(|s| s.x.abs() <= w / 2.0 && (s.z - 15e-3).abs() <= h / 2.0)
            .count();
        let per_cell = inside as f64 / 100.0;
        assert!(per_cell >= 9.0, "{per_cell}");
        assert!(p.scatterers.len() as f64 / (params.area() / params.cell_area) >= 10.0);
    }

    fn long_trace_acq() -> PlaneWaveAcquisition {
        let ns = 200_000;
        let data = Array3::from_shape_fn((1, 4, ns), |(_, e, k)| ((k as f64) * 0.1 + e as f64).sin());
        PlaneWaveAcquisition {
            angles: vec![0.0],
            channel_data: data,
            sampling_rate: 1.0,
            sound_speed: 1540.0,
            start_time: 0.0,
        }
    }

    #[test]
    fn achieved_snr_matches_request() {
        let acq = long_trace_acq();
        for snr in [-10.0, -20.0, -40.0] {
            let noisy = add_channel_noise(&acq, &[2], snr, 7).unwrap();
            let clean = acq.trace(0, 2);
            let dirty = noisy.trace(0, 2);
            let ps = clean.iter().map(|v| v * v).sum::<f64>();
            let pn = clean
                .iter()
                .zip(dirty.iter())
                .map(|(a, b)| (b - a).powi(2))
                .sum::<f64>();
            let achieved = 10.0 * (ps / pn).log10();
            assert!((achieved - snr).abs() < 0.5, "{achieved} vs {snr}");
            for e in [0, 1, 3] {
                assert_eq!(noisy.trace(0, e), acq.trace(0, e));
            }
            assert_eq!(noisy.channel_data.dim(), acq.channel_data.dim());
            assert_eq!(noisy.sampling_rate, acq.sampling_rate);
        }
    }

    #[test]
    fn infinite_snr_is_identity_and_zero_power_fails() {
        let acq = long_trace_acq();
        assert_eq!(add_channel_noise(&acq, &[0, 1], f64::INFINITY, 1).unwrap(), acq);
        let mut silent = acq.clone();
        silent.channel_data.slice_mut(ndarray::s![.., 1, ..]).fill(0.0);
        assert!(matches!(
            add_channel_noise(&silent, &[1], -10.0, 1),
            Err(Error::ZeroPowerChannel(1))
        ));
        assert!(add_channel_noise(&acq, &[4], -10.0, 1).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let acq = long_trace_acq();
        let a = add_channel_noise(&acq, &[1, 2], -20.0, 9).unwrap();
        let b = add_channel_noise(&acq, &[1, 2], -20.0, 9).unwrap();
        let c = add_channel_noise(&acq, &[1, 2], -20.0, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
