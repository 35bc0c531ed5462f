//! Implant centerline geometry.
//!
//! An implant axis is modelled as a 3D line parameterised by slice depth:
//! `x = s1·z + b1`, `y = s2·z + b2`. The line is fitted to per-slice implant
//! positions by two independent least-squares regressions (x against z and
//! y against z), and the combined slope `tau = |s1| + |s2|` drives the
//! slope-aware loss weighting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Implant position on one axial slice. `x`/`y` are continuous pixel
/// coordinates, `z` is the (continuous) slice index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterPoint3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CenterPoint3D {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Least-squares 3D line through a set of [`CenterPoint3D`]s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterlineFit {
    /// dx/dz
    pub s1: f64,
    /// dy/dz
    pub s2: f64,
    /// x at z = 0
    pub b1: f64,
    /// y at z = 0
    pub b2: f64,
    /// |s1| + |s2|
    pub tau: f64,
}

impl CenterlineFit {
    /// Builds a fit from explicit slopes and intercepts; `tau` is derived.
    pub fn from_line(s1: f64, s2: f64, b1: f64, b2: f64) -> Result<Self> {
        let fit = Self {
            s1,
            s2,
            b1,
            b2,
            tau: combined_slope(s1, s2),
        };
        fit.validate()?;
        Ok(fit)
    }

    fn validate(&self) -> Result<()> {
        let all = [self.s1, self.s2, self.b1, self.b2, self.tau];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("centerline fit {self:?}")));
        }
        Ok(())
    }

    /// Point of the line at depth `z`.
    pub fn at(&self, z: f64) -> (f64, f64) {
        (self.s1 * z + self.b1, self.s2 * z + self.b2)
    }
}

/// `|s1| + |s2|`.
pub fn combined_slope(s1: f64, s2: f64) -> f64 {
    s1.abs() + s2.abs()
}

/// Fits the implant centerline to per-slice positions.
///
/// Slopes are the closed-form simple-regression slopes of x on z and y on z;
/// intercepts are `mean(x) - s1·mean(z)` (and likewise for y). Sums are
/// accumulated about the means, which is algebraically identical to the raw
/// `n·Σxz − Σx·Σz` form but loses far less precision for large z.
pub fn fit_centerline(points: &[CenterPoint3D]) -> Result<CenterlineFit> {
    if points.len() < 2 {
        return Err(Error::DegenerateGeometry(format!(
            "need at least two points to fit a centerline, got {}",
            points.len()
        )));
    }
    if let Some(p) = points.iter().find(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("centerline point {p:?}")));
    }

    let n = points.len() as f64;
    let (sx, sy, sz) = points.iter().fold((0.0, 0.0, 0.0), |(sx, sy, sz), p| {
        (sx + p.x, sy + p.y, sz + p.z)
    });
    let (mx, my, mz) = (sx / n, sy / n, sz / n);

    let (mut szz, mut sxz, mut syz) = (0.0, 0.0, 0.0);
    for p in points {
        let dz = p.z - mz;
        szz += dz * dz;
        sxz += (p.x - mx) * dz;
        syz += (p.y - my) * dz;
    }
    // Any spread in z gives szz > 0; exact zero means every z is identical.
    if szz == 0.0 {
        return Err(Error::DegenerateGeometry(
            "all centerline points share the same slice index".into(),
        ));
    }

    let s1 = sxz / szz;
    let s2 = syz / szz;
    CenterlineFit::from_line(s1, s2, mx - s1 * mz, my - s2 * mz)
}

/// Evaluates the fitted line at root depth `z_root` ("crown to root" projection).
pub fn project_to_root(fit: &CenterlineFit, z_root: f64) -> Result<(f64, f64)> {
    fit.validate()?;
    if !z_root.is_finite() {
        return Err(Error::NonFinite(format!("root depth {z_root}")));
    }
    Ok(fit.at(z_root))
}

/// Sum of squared distances from the points to the fitted line, measured
/// in the axial plane at each point's depth.
pub fn fit_residual(fit: &CenterlineFit, points: &[CenterPoint3D]) -> f64 {
    points
        .iter()
        .map(|p| {
            let (x, y) = fit.at(p.z);
            (p.x - x).powi(2) + (p.y - y).powi(2)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64, f64)]) -> Vec<CenterPoint3D> {
        v.iter().map(|&(x, y, z)| CenterPoint3D::new(x, y, z)).collect()
    }

    #[test]
    fn vertical_line_has_zero_slope() {
        let fit = fit_centerline(&pts(&[(0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, 0.0, 2.0)])).unwrap();
        assert_eq!((fit.s1, fit.s2, fit.tau), (0.0, 0.0, 0.0));
    }

    #[test]
    fn two_point_slope() {
        let fit = fit_centerline(&pts(&[(0.0, 0.0, 0.0), (1.0, 0.0, 1.0)])).unwrap();
        assert_eq!((fit.s1, fit.s2, fit.tau), (1.0, 0.0, 1.0));
    }

    #[test]
    fn exact_line_slopes_and_projection() {
        let p: Vec<_> = (0..5)
            .map(|z| {
                let z = z as f64;
                CenterPoint3D::new(0.5 * z + 1.0, -0.25 * z + 2.0, z)
            })
            .collect();
        let fit = fit_centerline(&p).unwrap();
        assert!((fit.s1 - 0.5).abs() < 1e-12);
        assert!((fit.s2 + 0.25).abs() < 1e-12);
        assert!((fit.tau - 0.75).abs() < 1e-12);
        let (x, y) = project_to_root(&fit, 8.0).unwrap();
        assert!((x - 5.0).abs() < 1e-12 && y.abs() < 1e-12);
    }

    #[test]
    fn identical_depths_are_degenerate() {
        let err = fit_centerline(&pts(&[(0.0, 0.0, 3.0), (5.0, 1.0, 3.0), (2.0, 2.0, 3.0)]))
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateGeometry(_)));
        assert!(matches!(
            fit_centerline(&pts(&[(0.0, 0.0, 0.0)])),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn non_finite_points_rejected() {
        let err = fit_centerline(&pts(&[(f64::NAN, 0.0, 0.0), (0.0, 0.0, 1.0)])).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn project_constant_line() {
        let fit = CenterlineFit::from_line(0.0, 0.0, 5.0, 7.0).unwrap();
        assert_eq!(project_to_root(&fit, 100.0).unwrap(), (5.0, 7.0));
        let fit = CenterlineFit::from_line(1.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(project_to_root(&fit, 10.0).unwrap(), (10.0, 0.0));
    }
}
