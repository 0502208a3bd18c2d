//! Closed-form per-pixel geometry: plane-wave delay law, F-number dynamic
//! aperture and the equal-delay (source ambiguity) locus.

use serde::{Deserialize, Serialize};

use crate::model::ProbeGeometry;

/// Transmit distance from the plane-wave origin to `(x, z)` for steering
/// angle `angle` (radians). The wavefront passes the array origin at t = 0.
#[inline]
pub fn transmit_distance(x: f64, z: f64, angle: f64) -> f64 {
    z * angle.cos() + x * angle.sin()
}

/// Receive distance from `(x, z)` back to the element at lateral position `element_x`.
#[inline]
pub fn receive_distance(x: f64, z: f64, element_x: f64) -> f64 {
    let dx = x - element_x;
    (dx * dx + z * z).sqrt()
}

/// Two-way time of flight (seconds) for transmit `angle` to pixel `(x, z)`
/// and back to the element at `element_x`.
#[inline]
pub fn propagation_delay(x: f64, z: f64, angle: f64, element_x: f64, sound_speed: f64) -> f64 {
    (transmit_distance(x, z, angle) + receive_distance(x, z, element_x)) / sound_speed
}

/// Inclusive element range taking part in the reconstruction of one pixel.
///
/// `center` and `nominal_len` describe the unclamped symmetric aperture; at
/// the lateral edges of the array `first..=last` is the part of it that
/// physically exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ApertureSpan {
    pub first: usize,
    pub last: usize,
    pub center: usize,
    pub nominal_len: usize,
}

impl ApertureSpan {
    /// Span covering every element of an `n`-element array.
    pub fn full(n: usize) -> Self {
        Self {
            first: 0,
            last: n - 1,
            center: (n - 1) / 2,
            nominal_len: n,
        }
    }

    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, element: usize) -> bool {
        (self.first..=self.last).contains(&element)
    }

    /// Position of `element` inside the nominal (unclamped) aperture,
    /// `0..nominal_len`.
    pub fn nominal_position(&self, element: usize) -> usize {
        let half = (self.nominal_len - 1) / 2;
        element + half - self.center
    }

    /// True when the nominal aperture fits in the array without clamping.
    pub fn is_complete(&self) -> bool {
        self.len() == self.nominal_len
    }
}

/// Number of elements in an aperture of physical length `length`: rounded
/// up, then forced odd so the aperture is symmetric about its center element.
pub fn aperture_element_count(length: f64, pitch: f64) -> usize {
    // Guard against exact ratios landing one ulp above an integer.
    let raw = (length / pitch - 1e-9).ceil().max(1.0) as usize;
    if raw % 2 == 0 {
        raw + 1
    } else {
        raw
    }
}

/// Aperture for a pixel at lateral position `pixel_x` and depth `z` under a
/// fixed F-number (`F = z / l`). Centered on the nearest element and clamped
/// to the physical array.
pub fn active_aperture(z: f64, f_number: f64, probe: &ProbeGeometry, pixel_x: f64) -> ApertureSpan {
    debug_assert!(z > 0.0 && f_number > 0.0);
    let count = aperture_element_count(z / f_number, probe.pitch());
    span_around(probe.nearest_element(pixel_x), count, probe.n_elements())
}

pub(crate) fn span_around(center: usize, count: usize, n: usize) -> ApertureSpan {
    let half = (count - 1) / 2;
    ApertureSpan {
        first: center.saturating_sub(half),
        last: (center + half).min(n - 1),
        center,
        nominal_len: count,
    }
}

/// A point sharing its normal-incidence echo time with a reference scatterer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbiguityPoint {
    pub x: f64,
    pub z: f64,
    /// False when the locus falls at or above the transducer (`z <= 0`).
    pub physical: bool,
}

/// Depth `z2` at lateral position `x2` of the scatterer whose echo reaches the
/// element at `element_x` at the same time as that of a scatterer at
/// `(element_x, z1)`, for a 0° transmit: `z2 = z1 - (x2 - x_i)^2 / (4 z1)`.
///
/// The locus is a parabola in `x2` (it is sometimes described as an ellipse).
pub fn ambiguity_locus(z1: f64, element_x: f64, x2: f64) -> AmbiguityPoint {
    let d = x2 - element_x;
    let z2 = z1 - d * d / (4.0 * z1);
    AmbiguityPoint {
        x: x2,
        z: z2,
        physical: z2 > 0.0,
    }
}
