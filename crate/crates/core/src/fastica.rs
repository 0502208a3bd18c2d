//! One-unit FastICA with a negentropy contrast.
//!
//! Observations are centered and whitened with all eigen-directions kept,
//! then a single unit vector `w` is iterated to the fixed point of
//! `w <- E{z g(w'z)} - E{g'(w'z)} w`, renormalized after every step. The
//! separating vector mapped back through the whitener is the apodization
//! window over the observation rows.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ApodizationProfile, Normalization};

/// Largest covariance condition number accepted by [`whiten`].
pub const MAX_CONDITION: f64 = 1e12;

/// Columns per partial sum. Fixed so reductions are independent of the
/// number of worker threads.
const REDUCTION_CHUNK: usize = 4096;

/// Stacked observations: one row per aperture channel, one column per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    data: Array2<f64>,
    row_element: Vec<usize>,
}

impl ObservationMatrix {
    /// `row_element[i]` is the element (or aperture position) feeding row `i`.
    pub fn new(data: Array2<f64>, row_element: Vec<usize>) -> Result<Self> {
        let (n, m) = data.dim();
        if row_element.len() != n {
            return Err(Error::InvalidObservations(format!(
                "{} row labels for {n} rows",
                row_element.len()
            )));
        }
        if n < 2 {
            return Err(Error::InvalidObservations(format!("need at least 2 rows, got {n}")));
        }
        if m < n {
            return Err(Error::InvalidObservations(format!(
                "need at least as many samples as rows, got {m} samples for {n} rows"
            )));
        }
        for (i, row) in data.outer_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidObservations(format!("row {i} has non-finite values")));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidObservations(format!(
                    "row {i} (element {}) is identically zero",
                    row_element[i]
                )));
            }
        }
        Ok(Self { data, row_element })
    }

    /// Rows labelled `0..n`.
    pub fn from_rows(data: Array2<f64>) -> Result<Self> {
        let n = data.nrows();
        Self::new(data, (0..n).collect())
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn row_element(&self) -> &[usize] {
        &self.row_element
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }
}

/// Affine map from centered observations to white data and back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningModel {
    pub mean: Array1<f64>,
    pub whitener: Array2<f64>,
    pub dewhitener: Array2<f64>,
    /// Covariance eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
}

/// Subtract each row's sample mean. Returns the centered rows and the means.
pub fn center(x: &ObservationMatrix) -> (Array2<f64>, Array1<f64>) {
    center_rows(x.data.view())
}

fn center_rows(x: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let m = x.ncols() as f64;
    let means: Array1<f64> = x.outer_iter().map(|row| row.sum() / m).collect();
    let mut centered = x.to_owned();
    for (mut row, &mu) in centered.outer_iter_mut().zip(means.iter()) {
        row.mapv_inplace(|v| v - mu);
    }
    (centered, means)
}

/// Population covariance `X X' / m` of rows that are already centered.
pub fn covariance(centered: &Array2<f64>) -> Array2<f64> {
    let m = centered.ncols() as f64;
    centered.dot(&centered.t()) / m
}

/// Symmetric (ZCA) whitening of centered rows keeping every eigen-direction.
///
/// Fails with [`Error::RankDeficient`] when the covariance condition number
/// exceeds [`MAX_CONDITION`] or an eigenvalue is not positive.
pub fn whiten(centered: &Array2<f64>) -> Result<(Array2<f64>, WhiteningModel)> {
    let n = centered.nrows();
    let cov = covariance(centered);
    let eig = SymmetricEigen::new(DMatrix::from_fn(n, n, |i, j| cov[(i, j)]));

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let (lo, hi) = (eigenvalues[0], eigenvalues[n - 1]);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::RankDeficient {
            index: 0,
            eigenvalue: lo,
            condition,
            limit: MAX_CONDITION,
        });
    }

    let mut whitener = Array2::<f64>::zeros((n, n));
    let mut dewhitener = Array2::<f64>::zeros((n, n));
    for &k in &order {
        let lambda = eig.eigenvalues[k];
        let v = eig.eigenvectors.column(k);
        let (inv_sqrt, sqrt) = (1.0 / lambda.sqrt(), lambda.sqrt());
        for i in 0..n {
            for j in 0..n {
                let outer = v[i] * v[j];
                whitener[(i, j)] += inv_sqrt * outer;
                dewhitener[(i, j)] += sqrt * outer;
            }
        }
    }
    let z = whitener.dot(centered);
    let mean = centered.mean_axis(Axis(1)).unwrap_or_else(|| Array1::zeros(n));
    Ok((
        z,
        WhiteningModel {
            mean,
            whitener,
            dewhitener,
            eigenvalues,
        },
    ))
}

/// Center then whiten; the returned model carries the original row means.
pub fn center_and_whiten(x: &ObservationMatrix) -> Result<(Array2<f64>, WhiteningModel)> {
    let (centered, means) = center(x);
    let (z, mut model) = whiten(&centered)?;
    model.mean = means;
    Ok((z, model))
}

/// Nonquadratic function whose derivatives drive the fixed-point update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Contrast {
    /// `f(u) = log cosh(a1 u) / a1`, `1 <= a1 <= 2`.
    LogCosh { a1: f64 },
    /// `f(u) = -exp(-u^2 / 2)`.
    Gauss,
}

impl Default for Contrast {
    fn default() -> Self {
        Contrast::LogCosh { a1: 1.0 }
    }
}

impl Contrast {
    /// `(g(u), g'(u))`, the first and second derivatives of the contrast.
    #[inline]
    pub fn eval(&self, u: f64) -> (f64, f64) {
        match *self {
            Contrast::LogCosh { a1 } => {
                let t = (a1 * u).tanh();
                (t, a1 * (1.0 - t * t))
            }
            Contrast::Gauss => {
                let e = (-0.5 * u * u).exp();
                (u * e, (1.0 - u * u) * e)
            }
        }
    }
}

impl std::fmt::Display for Contrast {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Contrast::LogCosh { a1 } => write!(f, "logcosh:{a1}"),
            Contrast::Gauss => write!(f, "gauss"),
        }
    }
}

impl std::str::FromStr for Contrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "gauss" || s == "exp" {
            return Ok(Contrast::Gauss);
        }
        let rest = s
            .strip_prefix("logcosh")
            .ok_or_else(|| Error::InvalidConfig(format!("unknown contrast `{s}`")))?;
        let a1 = match rest.strip_prefix(':') {
            Some(v) => v
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad logcosh parameter `{v}`")))?,
            None if rest.is_empty() => 1.0,
            None => return Err(Error::InvalidConfig(format!("unknown contrast `{s}`"))),
        };
        Ok(Contrast::LogCosh { a1 })
    }
}

/// `(g(u), g'(u))` for the configured contrast.
pub fn contrast_g(u: f64, config: &IcaConfig) -> (f64, f64) {
    config.contrast.eval(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcaConfig {
    pub max_iterations: usize,
    pub epsilon: f64,
    pub contrast: Contrast,
    pub seed: u64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            epsilon: 1e-6,
            contrast: Contrast::default(),
            seed: 0,
        }
    }
}

impl IcaConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Contrast::LogCosh { a1 } = self.contrast {
            if !(1.0..=2.0).contains(&a1) {
                return Err(Error::InvalidConfig(format!(
                    "logcosh parameter a1 must lie in [1, 2], got {a1}"
                )));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome of the fixed-point iteration in whitened space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEstimate {
    pub w: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// `|<w_new, w>|` after every iteration.
    pub convergence_trace: Vec<f64>,
    /// `||w||` after every normalization step.
    pub norm_trace: Vec<f64>,
}

/// Run one-unit FastICA on whitened rows `z` (channels x samples).
///
/// Never fails on non-convergence: the result carries `converged = false`.
pub fn fastica_one_unit(z: &Array2<f64>, config: &IcaConfig) -> Result<UnitEstimate> {
    config.validate()?;
    let (n, m) = z.dim();
    if n == 0 || m == 0 {
        return Err(Error::InvalidObservations("empty whitened data".into()));
    }
    // Sample-major copy so every projection walks contiguous memory.
    let samples = z.t().as_standard_layout().into_owned();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut w);

    let mut trace = Vec::new();
    let mut norms = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..config.max_iterations {
        iterations += 1;
        let (mut w_new, mean_dg) = fixed_point_terms(&samples, &w, config.contrast);
        for (a, &b) in w_new.iter_mut().zip(&w) {
            *a -= mean_dg * b;
        }
        if normalize(&mut w_new) == 0.0 {
            break;
        }
        norms.push(norm(&w_new));
        let dot = w_new.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>().abs();
        trace.push(dot);
        w = w_new;
        if 1.0 - dot < config.epsilon {
            converged = true;
            break;
        }
    }

    Ok(UnitEstimate {
        w,
        iterations_used: iterations,
        converged,
        convergence_trace: trace,
        norm_trace: norms,
    })
}

/// `(E{z g(w'z)}, E{g'(w'z)})` with an ordered chunked reduction.
fn fixed_point_terms(samples: &Array2<f64>, w: &[f64], contrast: Contrast) -> (Vec<f64>, f64) {
    let (m, n) = samples.dim();
    let n_chunks = m.div_ceil(REDUCTION_CHUNK);
    let partials: Vec<(Vec<f64>, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCTION_CHUNK;
            let hi = (lo + REDUCTION_CHUNK).min(m);
            let mut acc = vec![0.0; n];
            let mut dg = 0.0;
            for j in lo..hi {
                let row = samples.row(j);
                let row = row.as_slice().expect("standard layout");
                let y: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
                let (g, gp) = contrast.eval(y);
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v * g;
                }
                dg += gp;
            }
            (acc, dg)
        })
        .collect();
    let mut sum = vec![0.0; n];
    let mut dg = 0.0;
    for (acc, d) in partials {
        for (s, a) in sum.iter_mut().zip(acc) {
            *s += a;
        }
        dg += d;
    }
    let inv = 1.0 / m as f64;
    sum.iter_mut().for_each(|v| *v *= inv);
    (sum, dg * inv)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Full estimate: the separating vector and the provenance of how it was found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcaResult {
    /// Unit separating vector in whitened coordinates.
    pub w_whitened: Vec<f64>,
    /// Separating row `w' K` in observation-row order, canonicalized. This is
    /// the apodization window.
    pub w_aperture: ApodizationProfile,
    /// The matching mixing column `K^-1 w`, canonicalized, for inspection.
    pub mixing_aperture: ApodizationProfile,
    pub row_element: Vec<usize>,
    pub iterations_used: usize,
    pub converged: bool,
    pub convergence_trace: Vec<f64>,
    pub seed: u64,
    pub contrast: Contrast,
}

/// Center, whiten and run one-unit FastICA on `x`, returning the separating
/// vector as a canonical apodization profile over the rows of `x`.
pub fn estimate_apodization(x: &ObservationMatrix, config: &IcaConfig) -> Result<IcaResult> {
    config.validate()?;
    let (z, model) = center_and_whiten(x)?;
    let unit = fastica_one_unit(&z, config)?;
    let w = Array1::from(unit.w.clone());
    let separating = model.whitener.t().dot(&w);
    let mixing = model.dewhitener.dot(&w);
    Ok(IcaResult {
        w_whitened: unit.w,
        w_aperture: ApodizationProfile::new(separating.to_vec(), Normalization::Raw).canonicalize()?,
        mixing_aperture: ApodizationProfile::new(mixing.to_vec(), Normalization::Raw).canonicalize()?,
        row_element: x.row_element.clone(),
        iterations_used: unit.iterations_used,
        converged: unit.converged,
        convergence_trace: unit.convergence_trace,
        seed: config.seed,
        contrast: config.contrast,
    })
}
