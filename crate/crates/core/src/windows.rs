//! Parametric apodization windows and their spectral descriptors.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ApodizationProfile, Normalization};

/// Parametric receive window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "taper", rename_all = "snake_case")]
pub enum WindowShape {
    Boxcar,
    Hann,
    /// Tapered cosine; the fraction of the window inside the two tapers.
    Tukey(f64),
}

impl Default for WindowShape {
    fn default() -> Self {
        WindowShape::Tukey(0.25)
    }
}

impl WindowShape {
    pub fn weights(&self, length: usize) -> Result<Vec<f64>> {
        match *self {
            WindowShape::Boxcar => tukey_weights(length, 0.0),
            WindowShape::Hann => tukey_weights(length, 1.0),
            WindowShape::Tukey(t) => tukey_weights(length, t),
        }
    }

    pub fn profile(&self, length: usize) -> Result<ApodizationProfile> {
        Ok(ApodizationProfile::new(self.weights(length)?, Normalization::Peak))
    }
}

impl std::fmt::Display for WindowShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WindowShape::Boxcar => write!(f, "boxcar"),
            WindowShape::Hann => write!(f, "hann"),
            WindowShape::Tukey(t) => write!(f, "tukey:{t}"),
        }
    }
}

impl std::str::FromStr for WindowShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "boxcar" | "rect" | "rectangular" => Ok(WindowShape::Boxcar),
            "hann" | "hanning" => Ok(WindowShape::Hann),
            _ => {
                let taper = s
                    .strip_prefix("tukey:")
                    .or_else(|| s.strip_prefix("tukey"))
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown window `{s}`")))?;
                let taper: f64 = if taper.is_empty() {
                    0.25
                } else {
                    taper
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad Tukey taper `{taper}`")))?
                };
                check_taper(taper)?;
                Ok(WindowShape::Tukey(taper))
            }
        }
    }
}

fn check_taper(taper: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&taper) {
        return Err(Error::InvalidConfig(format!(
            "Tukey taper must lie in [0, 1], got {taper}"
        )));
    }
    Ok(())
}

/// Tukey (tapered cosine) window. `taper = 0` is a boxcar, `taper = 1` a Hann
/// window. Scaled so the peak is exactly 1.
pub fn tukey(length: usize, taper: f64) -> Result<ApodizationProfile> {
    Ok(ApodizationProfile::new(
        tukey_weights(length, taper)?,
        Normalization::Peak,
    ))
}

fn tukey_weights(length: usize, taper: f64) -> Result<Vec<f64>> {
    check_taper(taper)?;
    if length == 0 {
        return Err(Error::InvalidConfig("window length must be at least 1".into()));
    }
    if length == 1 {
        return Ok(vec![1.0]);
    }
    let span = (length - 1) as f64;
    let mut w: Vec<f64> = (0..length)
        .map(|n| {
            // Evaluate on the nearer half so the window is exactly symmetric.
            let u = n.min(length - 1 - n) as f64 / span;
            if taper == 0.0 || u >= taper / 2.0 {
                1.0
            } else {
                0.5 * (1.0 - (2.0 * PI * u / taper).cos())
            }
        })
        .collect();
    // Even-length tapered windows have no sample at the crest; a two-sample
    // taper has no interior at all and degenerates to a boxcar.
    let peak = w.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(vec![1.0; length]);
    }
    if peak > 0.0 && peak != 1.0 {
        w.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(w)
}

/// Magnitude spectrum of a window together with its scalar descriptors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowSpectrum {
    /// Normalized frequency of each bin, cycles per element, in `[-0.5, 0.5)`.
    pub frequency: Vec<f64>,
    /// Magnitude in dB relative to the spectral peak, same order as `frequency`.
    pub magnitude_db: Vec<f64>,
    /// Two-sided main-lobe width at -3 dB, cycles per element.
    pub main_lobe_width: f64,
    /// Highest side lobe relative to the main-lobe peak, dB (negative).
    pub side_lobe_db: f64,
    /// Fraction of spectral energy outside the main lobe.
    pub leakage: f64,
}

/// Zero-padded FFT of `profile` and its main-lobe, side-lobe and leakage
/// descriptors. The main lobe extends from the spectral peak to the first
/// local minimum on each side.
pub fn window_spectrum(profile: &ApodizationProfile, n_fft: usize) -> Result<WindowSpectrum> {
    let len = profile.len();
    if len == 0 {
        return Err(Error::InvalidConfig("empty window".into()));
    }
    if n_fft < 4 * len {
        return Err(Error::InvalidConfig(format!(
            "n_fft = {n_fft} is below 4 x window length ({len})"
        )));
    }
    let mut buf: Vec<Complex64> = (0..n_fft)
        .map(|i| Complex64::new(if i < len { profile.weights[i] } else { 0.0 }, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    let mag: Vec<f64> = buf.iter().map(|c| c.norm()).collect();
    let power: Vec<f64> = mag.iter().map(|m| m * m).collect();

    let (peak_bin, peak) = mag
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, &m)| if m > acc.1 { (i, m) } else { acc });
    if !(peak > 0.0) {
        return Err(Error::InvalidConfig("window has an all-zero spectrum".into()));
    }

    let at = |k: isize| mag[k.rem_euclid(n_fft as isize) as usize];
    let half = (n_fft / 2) as isize;
    let p = peak_bin as isize;

    // First local minimum walking away from the peak in each direction.
    let mut right = 1isize;
    while right < half && at(p + right + 1) <= at(p + right) {
        right += 1;
    }
    let mut left = 1isize;
    while left < half && at(p - left - 1) <= at(p - left) {
        left += 1;
    }

    // -3 dB crossings, linearly interpolated between bins.
    let threshold = peak * 10f64.powf(-3.0 / 20.0);
    let crossing = |dir: isize, limit: isize| -> f64 {
        let mut k = 0isize;
        while k < limit && at(p + dir * (k + 1)) >= threshold {
            k += 1;
        }
        if k >= limit {
            return limit as f64;
        }
        let (a, b) = (at(p + dir * k), at(p + dir * (k + 1)));
        k as f64 + (a - threshold) / (a - b)
    };
    let main_lobe_width = (crossing(1, right) + crossing(-1, left)) / n_fft as f64;

    let mut side = 0.0f64;
    let mut side_energy = 0.0;
    let total: f64 = power.iter().sum();
    for k in 0..n_fft as isize {
        let offset = (k - p).rem_euclid(n_fft as isize);
        let inside = offset <= right || offset >= n_fft as isize - left;
        if !inside {
            let m = mag[k as usize];
            side = side.max(m);
            side_energy += m * m;
        }
    }
    // Residue at exact spectral nulls is rounding noise, not a side lobe.
    let side_lobe_db = if side > 1e-12 * peak {
        20.0 * (side / peak).log10()
    } else {
        f64::NEG_INFINITY
    };

    // Reorder bins to ascending frequency.
    let mut frequency = Vec::with_capacity(n_fft);
    let mut magnitude_db = Vec::with_capacity(n_fft);
    for i in 0..n_fft {
        let k = (i + n_fft - n_fft / 2) % n_fft;
        frequency.push((i as f64 - (n_fft / 2) as f64) / n_fft as f64);
        magnitude_db.push(20.0 * (mag[k] / peak).max(1e-300).log10());
    }

    Ok(WindowSpectrum {
        frequency,
        magnitude_db,
        main_lobe_width,
        side_lobe_db,
        leakage: side_energy / total,
    })
}
