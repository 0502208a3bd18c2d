//! Envelope detection, log compression and the two image-quality indexes:
//! full width at half maximum of point targets and contrast-to-noise ratio of
//! cysts.

use std::ops::Range;

use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BModeImage, ImageGrid, RfImage};

pub const DEFAULT_DYNAMIC_RANGE_DB: f64 = 60.0;

/// Magnitude of the analytic signal of every axial column.
pub fn envelope(rf: &RfImage) -> Array2<f64> {
    let (nz, nx) = rf.data.dim();
    let mut out = Array2::<f64>::zeros((nz, nx));
    if nz == 0 {
        return out;
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(nz);
    let inv = planner.plan_fft_inverse(nz);
    let columns: Vec<Vec<f64>> = (0..nx)
        .into_par_iter()
        .map(|ix| {
            let mut buf: Vec<Complex<f64>> = rf.data.column(ix).iter().map(|&v| Complex::new(v, 0.0)).collect();
            fwd.process(&mut buf);
            // One-sided spectrum: keep DC (and Nyquist), double positive bins.
            let half = nz / 2;
            for (k, c) in buf.iter_mut().enumerate() {
                let h = if k == 0 || (nz % 2 == 0 && k == half) {
                    1.0
                } else if k <= (nz - 1) / 2 {
                    2.0
                } else {
                    0.0
                };
                *c *= h;
            }
            inv.process(&mut buf);
            let scale = 1.0 / nz as f64;
            buf.iter().map(|c| c.norm() * scale).collect()
        })
        .collect();
    for (ix, col) in columns.into_iter().enumerate() {
        out.column_mut(ix).assign(&ArrayView1::from(&col));
    }
    out
}

/// `20 log10(env / max)` clipped to `[-dynamic_range_db, 0]`.
pub fn bmode(env: &Array2<f64>, grid: &ImageGrid, dynamic_range_db: f64) -> Result<BModeImage> {
    if env.dim() != grid.shape() {
        return Err(Error::GridMismatch(format!(
            "envelope shape {:?} vs grid {:?}",
            env.dim(),
            grid.shape()
        )));
    }
    if !(dynamic_range_db > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "dynamic range must be positive, got {dynamic_range_db}"
        )));
    }
    let max = env.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::ZeroEnvelope);
    }
    let db = env.mapv(|v| {
        if v <= 0.0 {
            -dynamic_range_db
        } else {
            (20.0 * (v / max).log10()).clamp(-dynamic_range_db, 0.0)
        }
    });
    Ok(BModeImage {
        db,
        grid: grid.clone(),
        dynamic_range_db,
    })
}

/// Envelope then B-mode in one step.
pub fn to_bmode(rf: &RfImage, dynamic_range_db: f64) -> Result<BModeImage> {
    bmode(&envelope(rf), &rf.grid, dynamic_range_db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileAxis {
    Axial,
    Lateral,
}

/// Scale of the image a width is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FwhmScale {
    /// Linear envelope; threshold at half the peak.
    #[default]
    Linear,
    /// dB image; threshold 20 log10(2) below the peak.
    Db,
}

/// Rectangle of pixels searched for a peak.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhood {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl Neighborhood {
    /// Pixels within `half_x` laterally and `half_z` axially of `(x, z)`.
    pub fn around(grid: &ImageGrid, x: f64, z: f64, half_x: f64, half_z: f64) -> Self {
        let range = |coords: &[f64], c: f64, h: f64| {
            let lo = coords.iter().take_while(|&&v| v < c - h).count();
            let hi = coords.iter().take_while(|&&v| v <= c + h).count();
            lo..hi.max(lo)
        };
        Self {
            rows: range(grid.z(), z, half_z),
            cols: range(grid.x(), x, half_x),
        }
    }
}

/// Width (in samples of `spacing`) at which `values` first falls below
/// `threshold` on both sides of `peak`, with linear interpolation between
/// the straddling samples.
pub fn width_at(values: &[f64], peak: usize, threshold: f64, spacing: f64) -> Result<f64> {
    if peak >= values.len() {
        return Err(Error::NoPeak);
    }
    let crossing = |step: isize, side: &'static str| -> Result<f64> {
        let mut i = peak as isize;
        loop {
            let j = i + step;
            if j < 0 || j as usize >= values.len() {
                return Err(Error::HalfMaxNotCrossed(side));
            }
            let (a, b) = (values[i as usize], values[j as usize]);
            if b < threshold {
                let frac = (a - threshold) / (a - b);
                return Ok(i as f64 + step as f64 * frac);
            }
            i = j;
        }
    };
    let left = crossing(-1, "left")?;
    let right = crossing(1, "right")?;
    Ok((right - left) * spacing)
}

/// Full width at half maximum of a 1-D profile around its maximum.
pub fn fwhm_1d(values: &[f64], spacing: f64, scale: FwhmScale) -> Result<f64> {
    let peak = argmax(values.iter().copied()).ok_or(Error::NoPeak)?;
    let threshold = half_level(values[peak], scale)?;
    width_at(values, peak, threshold, spacing)
}

fn half_level(peak: f64, scale: FwhmScale) -> Result<f64> {
    match scale {
        FwhmScale::Linear if peak > 0.0 => Ok(0.5 * peak),
        FwhmScale::Linear => Err(Error::NoPeak),
        FwhmScale::Db if peak.is_finite() => Ok(peak - 20.0 * 2f64.log10()),
        FwhmScale::Db => Err(Error::NoPeak),
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if v.is_finite() && best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// FWHM in millimetres of the brightest pixel in `hood`, measured along
/// `axis` through that pixel and restricted to the neighborhood.
pub fn fwhm(
    image: &Array2<f64>,
    grid: &ImageGrid,
    hood: &Neighborhood,
    axis: ProfileAxis,
    scale: FwhmScale,
) -> Result<f64> {
    if image.dim() != grid.shape() {
        return Err(Error::GridMismatch("image and grid shapes differ".into()));
    }
    let (nz, nx) = image.dim();
    if hood.rows.is_empty() || hood.cols.is_empty() || hood.rows.end > nz || hood.cols.end > nx {
        return Err(Error::NoPeak);
    }
    let mut best: Option<((usize, usize), f64)> = None;
    for iz in hood.rows.clone() {
        for ix in hood.cols.clone() {
            let v = image[(iz, ix)];
            if v.is_finite() && best.map_or(true, |(_, b)| v > b) {
                best = Some(((iz, ix), v));
            }
        }
    }
    let ((pz, px), peak) = best.ok_or(Error::NoPeak)?;
    let threshold = half_level(peak, scale)?;
    let (profile, at, spacing): (Vec<f64>, usize, f64) = match axis {
        ProfileAxis::Axial => (
            hood.rows.clone().map(|iz| image[(iz, px)]).collect(),
            pz - hood.rows.start,
            grid.dz(),
        ),
        ProfileAxis::Lateral => (
            hood.cols.clone().map(|ix| image[(pz, ix)]).collect(),
            px - hood.cols.start,
            grid.dx(),
        ),
    };
    Ok(width_at(&profile, at, threshold, spacing)? * 1e3)
}

/// Axial and lateral FWHM of each target and their averages, in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FwhmSummary {
    pub axial_mm: f64,
    pub lateral_mm: f64,
    pub per_target: Vec<(f64, f64)>,
}

/// Average FWHM over point targets at `targets` (x, z in metres). Each
/// target is searched within `half_x` / `half_z` of its nominal position.
pub fn fwhm_targets(
    image: &Array2<f64>,
    grid: &ImageGrid,
    targets: &[(f64, f64)],
    half_x: f64,
    half_z: f64,
    scale: FwhmScale,
) -> Result<FwhmSummary> {
    if targets.is_empty() {
        return Err(Error::InvalidConfig("no point targets to measure".into()));
    }
    let per_target = targets
        .iter()
        .map(|&(x, z)| {
            let hood = Neighborhood::around(grid, x, z, half_x, half_z);
            Ok((
                fwhm(image, grid, &hood, ProfileAxis::Axial, scale)?,
                fwhm(image, grid, &hood, ProfileAxis::Lateral, scale)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_target.len() as f64;
    Ok(FwhmSummary {
        axial_mm: per_target.iter().map(|p| p.0).sum::<f64>() / n,
        lateral_mm: per_target.iter().map(|p| p.1).sum::<f64>() / n,
        per_target,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRole {
    Inside,
    Outside,
}

impl MaskRole {
    fn name(self) -> &'static str {
        match self {
            MaskRole::Inside => "inside",
            MaskRole::Outside => "outside",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub mask: Array2<bool>,
    pub role: MaskRole,
}

impl RegionMask {
    pub fn new(mask: Array2<bool>, role: MaskRole) -> Result<Self> {
        if !mask.iter().any(|&b| b) {
            return Err(Error::EmptyMask(role.name()));
        }
        Ok(Self { mask, role })
    }

    /// Pixels whose distance to `(cx, cz)` lies in `[r_min, r_max]`.
    pub fn annulus(grid: &ImageGrid, cx: f64, cz: f64, r_min: f64, r_max: f64, role: MaskRole) -> Result<Self> {
        let mask = Array2::from_shape_fn(grid.shape(), |(iz, ix)| {
            let d = (grid.x()[ix] - cx).hypot(grid.z()[iz] - cz);
            d >= r_min && d <= r_max
        });
        Self::new(mask, role)
    }

    pub fn disc(grid: &ImageGrid, cx: f64, cz: f64, r: f64, role: MaskRole) -> Result<Self> {
        Self::annulus(grid, cx, cz, 0.0, r, role)
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Fractions of the cyst radius bounding the inside disc and outside ring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CystMaskRadii {
    pub inside: f64,
    pub outside_inner: f64,
    pub outside_outer: f64,
}

impl Default for CystMaskRadii {
    fn default() -> Self {
        Self {
            inside: 0.8,
            outside_inner: 1.2,
            outside_outer: 1.8,
        }
    }
}

/// Inside disc and surrounding ring for a cyst of radius `r` at `(cx, cz)`.
pub fn cyst_masks(
    grid: &ImageGrid,
    cx: f64,
    cz: f64,
    r: f64,
    radii: CystMaskRadii,
) -> Result<(RegionMask, RegionMask)> {
    Ok((
        RegionMask::disc(grid, cx, cz, radii.inside * r, MaskRole::Inside)?,
        RegionMask::annulus(
            grid,
            cx,
            cz,
            radii.outside_inner * r,
            radii.outside_outer * r,
            MaskRole::Outside,
        )?,
    ))
}

/// `20 log10(|mu_in - mu_out| / sqrt((var_in + var_out) / 2))` on dB values,
/// with population variances.
pub fn cnr_values(inside: &[f64], outside: &[f64]) -> Result<f64> {
    if inside.is_empty() {
        return Err(Error::EmptyMask("inside"));
    }
    if outside.is_empty() {
        return Err(Error::EmptyMask("outside"));
    }
    let (mi, vi) = mean_var(inside);
    let (mo, vo) = mean_var(outside);
    let value = 20.0 * ((mi - mo).abs() / ((vi + vo) / 2.0).sqrt()).log10();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::UndefinedCnr)
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

/// CNR of a B-mode image between two disjoint regions.
pub fn cnr(image: &BModeImage, inside: &RegionMask, outside: &RegionMask) -> Result<f64> {
    for m in [inside, outside] {
        if m.mask.dim() != image.db.dim() {
            return Err(Error::GridMismatch(format!(
                "{} mask shape {:?} vs image {:?}",
                m.role.name(),
                m.mask.dim(),
                image.db.dim()
            )));
        }
    }
    if inside.mask.iter().zip(outside.mask.iter()).any(|(&a, &b)| a && b) {
        return Err(Error::InvalidConfig("inside and outside masks overlap".into()));
    }
    let pick = |m: &RegionMask| -> Vec<f64> {
        image
            .db
            .iter()
            .zip(m.mask.iter())
            .filter_map(|(&v, &b)| b.then_some(v))
            .collect()
    };
    cnr_values(&pick(inside), &pick(outside))
}

/// Root-mean-square difference of two equally shaped images.
pub fn rmse(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::GridMismatch(format!("shapes {:?} and {:?}", a.dim(), b.dim())));
    }
    let n = a.len() as f64;
    Ok(((a - b).mapv(|d| d * d).sum() / n).sqrt())
}

/// Mean of each row of `image` (depth profile), handy for inspecting
/// depth-dependent brightness.
pub fn mean_depth_profile(image: &Array2<f64>) -> Vec<f64> {
    image.mean_axis(Axis(1)).map(|m| m.to_vec()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(nz: usize, nx: usize, d: f64) -> ImageGrid {
        ImageGrid::uniform(0.0, d, nx, 1e-3, d, nz).unwrap()
    }

    #[test]
    fn envelope_of_windowed_tone() {
        let nz = 1024;
        let g = grid(nz, 1, 1e-5);
        let f = 0.05; // cycles per sample
        let data = Array2::from_shape_fn((nz, 1), |(i, _)| {
            let w = if (100..924).contains(&i) { 1.0 } else { 0.0 };
            3.0 * w * (2.0 * std::f64::consts::PI * f * i as f64).cos()
        });
        let env = envelope(&RfImage::new(data, g).unwrap());
        for i in 200..824 {
            assert!((env[(i, 0)] - 3.0).abs() < 0.02 * 3.0, "{i}: {}", env[(i, 0)]);
        }
        assert!(env.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_image_has_zero_envelope() {
        let g = grid(16, 3, 1e-4);
        let env = envelope(&RfImage::new(Array2::zeros((16, 3)), g.clone()).unwrap());
        assert!(env.iter().all(|&v| v == 0.0));
        assert!(matches!(bmode(&env, &g, 60.0), Err(Error::ZeroEnvelope)));
    }

    #[test]
    fn bmode_levels() {
        let g = grid(1, 3, 1e-4);
        let env = Array2::from_shape_vec((1, 3), vec![10.0, 1.0, 1e-6]).unwrap();
        let b = bmode(&env, &g, 60.0).unwrap();
        assert_eq!(b.db[(0, 0)], 0.0);
        assert!((b.db[(0, 1)] + 20.0).abs() < 1e-12);
        assert_eq!(b.db[(0, 2)], -60.0);
    }

    fn gaussian(n: usize, center: f64, sigma: f64, spacing: f64) -> Vec<f64> {
        (0..n)
            .map(|i| (-(i as f64 * spacing - center).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect()
    }

    #[test]
    fn gaussian_fwhm() {
        let sigma = 0.2e-3;
        let spacing = 0.01e-3;
        let v = gaussian(200, 1e-3, sigma, spacing);
        let w = fwhm_1d(&v, spacing, FwhmScale::Linear).unwrap();
        let expected = 2.0 * (2.0 * 2f64.ln()).sqrt() * sigma;
        assert!((w / expected - 1.0).abs() < 0.01, "{w} vs {expected}");
        assert!((expected * 1e3 - 0.471).abs() < 5e-4);
    }

    #[test]
    fn triangle_fwhm() {
        // Base 2 mm sampled every 0.1 mm, apex at 1 mm.
        let v: Vec<f64> = (0..=20).map(|i| 1.0 - ((i as f64 - 10.0) / 10.0).abs()).collect();
        let w = fwhm_1d(&v, 0.1e-3, FwhmScale::Linear).unwrap();
        assert!((w - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn fwhm_on_db_matches_linear_for_envelope() {
        let v = gaussian(200, 1e-3, 0.2e-3, 0.01e-3);
        let db: Vec<f64> = v.iter().map(|x| 20.0 * x.log10()).collect();
        let a = fwhm_1d(&v, 0.01e-3, FwhmScale::Linear).unwrap();
        let b = fwhm_1d(&db, 0.01e-3, FwhmScale::Db).unwrap();
        // Same threshold level; only the interpolation scale differs.
        assert!((a - b).abs() < 0.01e-3);
    }

    #[test]
    fn fwhm_failures() {
        assert!(matches!(fwhm_1d(&[], 1.0, FwhmScale::Linear), Err(Error::NoPeak)));
        assert!(matches!(
            fwhm_1d(&[1.0, 0.9, 0.1], 1.0, FwhmScale::Linear),
            Err(Error::HalfMaxNotCrossed("left"))
        ));
        assert!(matches!(
            fwhm_1d(&[0.1, 0.9, 1.0], 1.0, FwhmScale::Linear),
            Err(Error::HalfMaxNotCrossed("right"))
        ));
        assert!(matches!(
            fwhm_1d(&[0.0, 0.0], 1.0, FwhmScale::Linear),
            Err(Error::NoPeak)
        ));
    }

    #[test]
    fn image_fwhm_both_axes() {
        let g = ImageGrid::uniform(-2e-3, 0.05e-3, 81, 10e-3, 0.02e-3, 101).unwrap();
        let (sx, sz) = (0.3e-3, 0.1e-3);
        let img = Array2::from_shape_fn(g.shape(), |(iz, ix)| {
            let x = g.x()[ix];
            let z = g.z()[iz] - 11e-3;
            (-(x * x) / (2.0 * sx * sx) - z * z / (2.0 * sz * sz)).exp()
        });
        let k = 2.0 * (2.0 * 2f64.ln()).sqrt();
        let s = fwhm_targets(&img, &g, &[(0.0, 11e-3)], 1.5e-3, 0.8e-3, FwhmScale::Linear).unwrap();
        assert!((s.lateral_mm / (k * sx * 1e3) - 1.0).abs() < 0.01);
        assert!((s.axial_mm / (k * sz * 1e3) - 1.0).abs() < 0.01);
    }

    /// Dense brute-force width: resample at 100x and count samples above half.
    fn brute_force_width(v: &[f64], spacing: f64) -> f64 {
        let peak = v.iter().copied().fold(f64::MIN, f64::max);
        let dense = 100;
        let mut above = 0usize;
        for k in 0..(v.len() - 1) * dense {
            let pos = k as f64 / dense as f64;
            let i = pos.floor() as usize;
            let f = pos - i as f64;
            if v[i] * (1.0 - f) + v[i + 1] * f >= 0.5 * peak {
                above += 1;
            }
        }
        above as f64 * spacing / dense as f64
    }

    #[test]
    fn fwhm_agrees_with_dense_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spacing = 0.1e-3;
        for _ in 0..50 {
            let sigma = rng.gen_range(0.15e-3..0.8e-3);
            let center = rng.gen_range(2.0e-3..4.0e-3);
            let v = gaussian(61, center, sigma, spacing);
            let a = fwhm_1d(&v, spacing, FwhmScale::Linear).unwrap();
            let b = brute_force_width(&v, spacing);
            assert!((a - b).abs() <= 0.5 * spacing, "{a} vs {b}");
        }
    }

    #[test]
    fn cnr_arithmetic() {
        let inside = [-1.0, 1.0];
        let outside = [0.0, 2.0];
        assert!(cnr_values(&inside, &outside).unwrap().abs() < 1e-12);
        // |0 - 10| / sqrt((4 + 0) / 2) -> 20 log10(10 / sqrt 2)
        let v = cnr_values(&[-2.0, 2.0], &[10.0, 10.0]).unwrap();
        assert!((v - 20.0 * (10.0 / 2f64.sqrt()).log10()).abs() < 1e-9);
        assert!(matches!(cnr_values(&[1.0, 1.0], &[1.0]), Err(Error::UndefinedCnr)));
        assert!(matches!(cnr_values(&[], &[1.0]), Err(Error::EmptyMask("inside"))));
    }

    #[test]
    fn cyst_masks_are_disjoint_and_nonempty() {
        let g = ImageGrid::uniform(-5e-3, 0.1e-3, 101, 10e-3, 0.1e-3, 101).unwrap();
        let (inside, outside) = cyst_masks(&g, 0.0, 15e-3, 2e-3, CystMaskRadii::default()).unwrap();
        assert!(inside.count() > 0 && outside.count() > 0);
        assert!(inside.mask.iter().zip(outside.mask.iter()).all(|(a, b)| !(a & b)));
        assert!(RegionMask::disc(&g, 1.0, 1.0, 1e-3, MaskRole::Inside).is_err());
    }

    #[test]
    fn rmse_basic() {
        let a = Array2::from_elem((2, 2), 1.0);
        let b = Array2::from_elem((2, 2), 3.0);
        assert_eq!(rmse(&a, &b).unwrap(), 2.0);
        assert!(rmse(&a, &Array2::zeros((1, 2))).is_err());
    }

    proptest! {
        #[test]
        fn fwhm_scale_invariant(sigma in 0.1e-3f64..0.5e-3, k in 1e-3f64..1e3) {
            let v = gaussian(300, 1.5e-3, sigma, 0.01e-3);
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            let a = fwhm_1d(&v, 0.01e-3, FwhmScale::Linear).unwrap();
            let b = fwhm_1d(&scaled, 0.01e-3, FwhmScale::Linear).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn cnr_gain_invariant(seed in 0u64..500, shift in -30.0f64..30.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inside: Vec<f64> = (0..50).map(|_| rng.gen_range(-60.0..-30.0)).collect();
            let outside: Vec<f64> = (0..80).map(|_| rng.gen_range(-30.0..0.0)).collect();
            let a = cnr_values(&inside, &outside).unwrap();
            let si: Vec<f64> = inside.iter().map(|v| v + shift).collect();
            let so: Vec<f64> = outside.iter().map(|v| v + shift).collect();
            let b = cnr_values(&si, &so).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
