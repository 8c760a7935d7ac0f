//! Geometry and steering-vector math for a uniform linear array with
//! arbitrary (typically super-half-wavelength) element spacing.
//!
//! Conventions used throughout the crate:
//! * element 0 sits at the node position, element m is displaced by
//!   `m * spacing` along the heading direction;
//! * arrival angles are measured from the array normal, counter-clockwise
//!   positive, in `[-pi/2, pi/2]`;
//! * a signal arriving at angle `theta` travels `spacing * sin(theta)`
//!   farther to reach element 1 than element 0.

use nalgebra::{Point2, Vector2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::error::{Error, Result};
use crate::geom::wrap_pi;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Uniform linear array description.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ArrayConfig {
    /// Number of antennas (2 on the target laptop platform).
    pub antenna_count: usize,
    /// Element spacing in meters.
    pub spacing: f64,
    /// Carrier frequency in Hz.
    pub carrier_frequency: f64,
    /// Spacing between adjacent subcarriers in Hz.
    pub subcarrier_spacing: f64,
    /// Number of subcarriers reported per frame.
    pub subcarrier_count: usize,
}

impl ArrayConfig {
    pub fn new(
        antenna_count: usize,
        spacing: f64,
        carrier_frequency: f64,
        subcarrier_spacing: f64,
        subcarrier_count: usize,
    ) -> Result<Self> {
        if antenna_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "antenna_count must be >= 2, got {antenna_count}"
            )));
        }
        if spacing <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing}"
            )));
        }
        if carrier_frequency <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "carrier_frequency must be positive, got {carrier_frequency}"
            )));
        }
        if subcarrier_spacing <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "subcarrier_spacing must be positive, got {subcarrier_spacing}"
            )));
        }
        if subcarrier_count < 19 {
            return Err(Error::InvalidArgument(format!(
                "subcarrier_count must cover the smoothing window (19), got {subcarrier_count}"
            )));
        }
        Ok(Self {
            antenna_count,
            spacing,
            carrier_frequency,
            subcarrier_spacing,
            subcarrier_count,
        })
    }

    /// Laptop platform: two antennas 26 cm apart, 2.4 GHz band, 20 MHz
    /// channel (312.5 kHz subcarrier spacing, 56 subcarriers).
    pub fn laptop() -> Self {
        Self {
            antenna_count: 2,
            spacing: 0.26,
            carrier_frequency: 2.4e9,
            subcarrier_spacing: 312.5e3,
            subcarrier_count: 56,
        }
    }

    /// Same platform but with an exact wavelength, convenient in tests.
    pub fn with_wavelength(wavelength: f64, spacing: f64) -> Result<Self> {
        Self::new(2, spacing, SPEED_OF_LIGHT / wavelength, 312.5e3, 56)
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }
}

/// Position and array orientation of one network node in the global frame.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct NodePose {
    /// Position of antenna element 0, meters.
    pub position: Point2<f64>,
    /// Orientation of the array axis (element 0 -> element 1), radians,
    /// normalized to `[-pi, pi)`.
    pub array_heading: f64,
}

impl NodePose {
    pub fn new(position: Point2<f64>, array_heading: f64) -> Self {
        Self {
            position,
            array_heading: wrap_pi(array_heading),
        }
    }

    /// Unit vector along the array axis.
    pub fn axis(&self) -> Vector2<f64> {
        Vector2::new(self.array_heading.cos(), self.array_heading.sin())
    }

    /// Global positions of all antenna elements.
    pub fn antenna_positions(&self, config: &ArrayConfig) -> Vec<Point2<f64>> {
        let axis = self.axis();
        (0..config.antenna_count)
            .map(|m| self.position + axis * (m as f64 * config.spacing))
            .collect()
    }

    /// Array phase center (element midpoint). Angles referenced here converge
    /// to the exact path-difference model as O(d^3 / R^2), so this is the
    /// point arrival angles and beam lines are anchored to.
    pub fn phase_center(&self, config: &ArrayConfig) -> Point2<f64> {
        self.position + self.axis() * (config.spacing * (config.antenna_count - 1) as f64 / 2.0)
    }

    /// Arrival angle the array observes for a source at `target`: the angle
    /// from the array normal whose sine equals the (negated) projection of
    /// the source direction onto the array axis. Sources on either side of
    /// the axis fold onto the same value, which is exactly the front-back
    /// ambiguity of a linear array.
    pub fn observed_aoa(&self, target: &Point2<f64>, config: &ArrayConfig) -> f64 {
        let v = (target - self.phase_center(config)).normalize();
        (-v.dot(&self.axis())).clamp(-1.0, 1.0).asin()
    }

    /// Global bearing of the front-side beam for a local arrival angle.
    pub fn beam_bearing(&self, local_aoa: f64) -> f64 {
        wrap_pi(self.array_heading + local_aoa + FRAC_PI_2)
    }

    /// Global bearing of the back-side (axis-mirrored) beam for the same
    /// local arrival angle.
    pub fn mirror_beam_bearing(&self, local_aoa: f64) -> f64 {
        wrap_pi(self.array_heading - local_aoa + FRAC_PI_2 + PI)
    }

    /// Global bearing from the node to a point.
    pub fn bearing_to(&self, target: &Point2<f64>) -> f64 {
        let v = target - self.position;
        v.y.atan2(v.x)
    }
}

/// A single spectrum peak: arrival angle, power, and the time-of-flight at
/// which the peak occurs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AoaPeak {
    /// Radians from the array normal, in `[-pi/2, pi/2]`.
    pub angle: f64,
    /// Pseudo-spectrum magnitude (dimensionless, positive).
    pub power: f64,
    /// Time of flight in seconds.
    pub tof: f64,
}

/// Complex exponential of the phase shift accumulated over an extra path
/// length `delta_l`: `exp(-j 2 pi delta_l / lambda)`.
pub fn phase_shift_distance(delta_l: f64, wavelength: f64) -> Result<Complex64> {
    if wavelength <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "wavelength must be positive, got {wavelength}"
        )));
    }
    Ok(Complex64::from_polar(1.0, -TAU * delta_l / wavelength))
}

/// Phase shift between consecutive elements for a far-field arrival at
/// `theta`, i.e. over the path difference `spacing * sin(theta)`.
pub fn phase_shift_aoa(theta: f64, config: &ArrayConfig) -> Complex64 {
    phase_shift_distance(config.spacing * theta.sin(), config.wavelength())
        .expect("validated config has positive wavelength")
}

/// Far-field steering vector: element m carries the m-th power of the
/// inter-element phase shift.
pub fn steering_vector_farfield(theta: f64, config: &ArrayConfig) -> Vec<Complex64> {
    let phi = phase_shift_aoa(theta, config);
    let mut v = Vec::with_capacity(config.antenna_count);
    let mut cur = Complex64::new(1.0, 0.0);
    for _ in 0..config.antenna_count {
        v.push(cur);
        cur *= phi;
    }
    v
}

/// Near-field steering vector from exact per-element path differences. Each
/// arrival angle corresponds to a hyperbola rather than a straight line, so
/// close sources need this model instead of the far-field approximation.
pub fn steering_vector_nearfield(
    source: &Point2<f64>,
    pose: &NodePose,
    config: &ArrayConfig,
) -> Result<Vec<Complex64>> {
    let elements = pose.antenna_positions(config);
    let lambda = config.wavelength();
    let d0 = (source - elements[0]).norm();
    elements
        .iter()
        .map(|e| {
            let d = (source - e).norm();
            if d < 1e-9 {
                return Err(Error::DegenerateGeometry(format!(
                    "source coincides with antenna element at ({}, {})",
                    e.x, e.y
                )));
            }
            phase_shift_distance(d - d0, lambda)
        })
        .collect()
}

/// All arrival angles in `[-pi/2, pi/2]` that produce the same inter-element
/// phase shift as `theta`: solutions of `sin(t) = sin(theta) + k lambda / d`.
/// Contains only `theta` itself when spacing <= lambda/2 (away from the
/// endpoint angles); sorted ascending.
pub fn grating_lobe_family(theta: f64, config: &ArrayConfig) -> Vec<f64> {
    let ratio = config.wavelength() / config.spacing;
    let s0 = theta.sin();
    let k_min = ((-1.0 - s0) / ratio).ceil() as i64;
    let k_max = ((1.0 - s0) / ratio).floor() as i64;
    let mut family: Vec<f64> = (k_min..=k_max)
        .map(|k| (s0 + k as f64 * ratio).clamp(-1.0, 1.0).asin())
        .collect();
    family.sort_by(|a, b| a.total_cmp(b));
    family.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    family
}
