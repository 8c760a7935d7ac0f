//! Small 2-D geometry helpers shared across the crate: angle wrapping,
//! axis-aligned bounds, and rigid (rotation + translation) alignment.

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Wrap an angle to `[-pi, pi)`.
pub fn wrap_pi(angle: f64) -> f64 {
    let mut a = (angle + PI).rem_euclid(2.0 * PI) - PI;
    if a >= PI {
        a -= 2.0 * PI;
    }
    a
}

/// Absolute angular difference between two undirected lines, in `[0, pi/2]`.
pub fn line_angle_diff(a: f64, b: f64) -> f64 {
    let d = wrap_pi(a - b).abs();
    d.min(PI - d)
}

/// Absolute angular difference between two directions, in `[0, pi]`.
pub fn direction_diff(a: f64, b: f64) -> f64 {
    wrap_pi(a - b).abs()
}

/// Circular mean of two directions (shortest-arc midpoint).
pub fn circular_mean(a: f64, b: f64) -> f64 {
    let v = Vector2::new(a.cos() + b.cos(), a.sin() + b.sin());
    if v.norm() < 1e-12 {
        // Antipodal pair: midpoint is ill-defined, pick a's side.
        return wrap_pi(a + PI / 2.0);
    }
    v.y.atan2(v.x)
}

/// Axis-aligned rectangle used for simulation space bounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Rect {
    pub min: Point2<f64>,
    pub max: Point2<f64>,
}

impl Rect {
    pub fn new(min: Point2<f64>, max: Point2<f64>) -> Result<Self> {
        if !(max.x > min.x && max.y > min.y) {
            return Err(Error::InvalidArgument(format!(
                "degenerate bounds: min ({}, {}), max ({}, {})",
                min.x, min.y, max.x, max.y
            )));
        }
        Ok(Self { min, max })
    }

    /// Rectangle `[0, width] x [0, height]`.
    pub fn from_size(width: f64, height: f64) -> Result<Self> {
        Self::new(Point2::new(0.0, 0.0), Point2::new(width, height))
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn diagonal(&self) -> f64 {
        (self.width().powi(2) + self.height().powi(2)).sqrt()
    }

    /// Containment test with an outward margin (in meters).
    pub fn contains_with_margin(&self, p: &Point2<f64>, margin: f64) -> bool {
        p.x >= self.min.x - margin
            && p.x <= self.max.x + margin
            && p.y >= self.min.y - margin
            && p.y <= self.max.y + margin
    }

    pub fn contains(&self, p: &Point2<f64>) -> bool {
        self.contains_with_margin(p, 0.0)
    }
}

/// Rigid transform (proper rotation + translation, no scale) fitted between
/// two point sets. Scale stays untouched: in this system the scale is an
/// estimated quantity, not a gauge freedom.
#[derive(Debug, Clone, Copy)]
pub struct RigidAlignment {
    pub rotation: f64,
    pub translation: Vector2<f64>,
}

impl RigidAlignment {
    /// Least-squares fit mapping `source` onto `target` (Kabsch, det = +1).
    pub fn fit(source: &[Point2<f64>], target: &[Point2<f64>]) -> Result<Self> {
        if source.len() != target.len() || source.is_empty() {
            return Err(Error::InvalidArgument(
                "alignment needs equal-length non-empty point sets".into(),
            ));
        }
        let n = source.len() as f64;
        let cs: Vector2<f64> = source.iter().map(|p| p.coords).sum::<Vector2<f64>>() / n;
        let ct: Vector2<f64> = target.iter().map(|p| p.coords).sum::<Vector2<f64>>() / n;
        let mut dot = 0.0;
        let mut cross = 0.0;
        for (s, t) in source.iter().zip(target) {
            let a = s.coords - cs;
            let b = t.coords - ct;
            dot += a.dot(&b);
            cross += a.x * b.y - a.y * b.x;
        }
        let rotation = cross.atan2(dot);
        let (sin, cos) = rotation.sin_cos();
        let rotated_cs = Vector2::new(cos * cs.x - sin * cs.y, sin * cs.x + cos * cs.y);
        Ok(Self {
            rotation,
            translation: ct - rotated_cs,
        })
    }

    pub fn apply(&self, p: &Point2<f64>) -> Point2<f64> {
        let (sin, cos) = self.rotation.sin_cos();
        Point2::new(
            cos * p.x - sin * p.y + self.translation.x,
            sin * p.x + cos * p.y + self.translation.y,
        )
    }
}

/// Mean per-point error between `estimate` and `truth` after the optimal
/// rigid alignment.
pub fn aligned_mean_error(estimate: &[Point2<f64>], truth: &[Point2<f64>]) -> Result<f64> {
    let align = RigidAlignment::fit(estimate, truth)?;
    let sum: f64 = estimate
        .iter()
        .zip(truth)
        .map(|(e, t)| (align.apply(e) - t).norm())
        .sum();
    Ok(sum / estimate.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn wrap_pi_stays_in_range() {
        for k in -20..20 {
            let a = wrap_pi(0.3 + k as f64 * PI);
            assert!((-PI..PI).contains(&a), "wrapped {a}");
        }
        assert_relative_eq!(wrap_pi(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_relative_eq!(wrap_pi(-PI), -PI, epsilon = 1e-12);
    }

    #[test]
    fn line_diff_folds_at_half_pi() {
        assert_relative_eq!(line_angle_diff(0.0, PI), 0.0, epsilon = 1e-12);
        assert_relative_eq!(line_angle_diff(0.1, PI + 0.1), 0.0, epsilon = 1e-12);
        assert_relative_eq!(line_angle_diff(0.0, PI / 2.0), PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rigid_alignment_recovers_transform() {
        let src = vec![
            Point2::new(0.0, 0.0),
            Point2::new(2.0, 0.0),
            Point2::new(1.0, 3.0),
            Point2::new(-1.0, 1.0),
        ];
        let truth: Vec<_> = src
            .iter()
            .map(|p| {
                let (s, c) = 0.7f64.sin_cos();
                Point2::new(c * p.x - s * p.y + 5.0, s * p.x + c * p.y - 2.0)
            })
            .collect();
        let err = aligned_mean_error(&src, &truth).unwrap();
        assert!(err < 1e-12, "alignment residual {err}");
    }

    #[test]
    fn degenerate_rect_rejected() {
        assert!(Rect::from_size(0.0, 10.0).is_err());
        assert!(Rect::new(Point2::new(1.0, 1.0), Point2::new(1.0, 5.0)).is_err());
    }
}
