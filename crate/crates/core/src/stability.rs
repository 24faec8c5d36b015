//! The θ-scheme stability function and the regions and disks built on it.
//!
//! For the linearized block, a perturbation along an eigenvector of the
//! Jacobian with eigenvalue `z` is multiplied by
//! `R_θ(z) = (1 + (1 − θ)z) / (1 − θz)` per step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::ComplexScalar;
use crate::par::{map_indexed, Exec};

pub use crate::numerics::theta_resolvent;

/// Relative size below which a denominator counts as a pole.
const POLE_EPS: f64 = 1e-14;

pub const DEFAULT_FP_TOL: f64 = 1e-10;
pub const DEFAULT_FP_MAX_ITER: usize = 100;
pub const DEFAULT_NEWTON_MAX_ITER: usize = 25;
pub const DEFAULT_DISK_SAMPLES: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("theta must lie in [0, 1], got {0}")]
    InvalidTheta(f64),
    #[error("solver tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("pole of the stability function at z = {0}")]
    Pole(ComplexScalar),
    #[error("pole of the inverse stability function at z = {0}")]
    InversePole(ComplexScalar),
    #[error("disk B({center}, {radius}) contains the pole {pole} of R_θ")]
    PoleInDisk { center: f64, radius: f64, pole: f64 },
    #[error("grid needs at least 2 points per axis, got {0}")]
    GridTooSmall(usize),
}

/// θ plus the tolerances of the implicit solves that use it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaScheme {
    pub theta: f64,
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    pub newton_max_iter: usize,
}

impl ThetaScheme {
    pub fn new(theta: f64) -> Result<Self, StabilityError> {
        Self {
            theta,
            fp_tol: DEFAULT_FP_TOL,
            fp_max_iter: DEFAULT_FP_MAX_ITER,
            newton_max_iter: DEFAULT_NEWTON_MAX_ITER,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self, StabilityError> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(StabilityError::InvalidTheta(self.theta));
        }
        if !(self.fp_tol > 0.0) {
            return Err(StabilityError::InvalidTolerance(self.fp_tol));
        }
        Ok(self)
    }

    pub fn explicit() -> Self {
        Self::new(0.0).expect("theta 0 is valid")
    }
}

/// `R_θ(z) = (1 + (1 − θ)z) / (1 − θz)`.
pub fn stab_value(theta: f64, z: ComplexScalar) -> Result<ComplexScalar, StabilityError> {
    let num = 1.0 + (1.0 - theta) * z;
    let den = 1.0 - theta * z;
    if den.norm() <= POLE_EPS * (1.0 + (theta * z).norm()) {
        return Err(StabilityError::Pole(z));
    }
    Ok(num / den)
}

/// `R_θ⁻¹(w) = (1 − w) / (θ(1 − w) − 1)`.
pub fn stab_inverse(theta: f64, w: ComplexScalar) -> Result<ComplexScalar, StabilityError> {
    let u = 1.0 - w;
    let den = theta * u - 1.0;
    if den.norm() <= POLE_EPS * (1.0 + (theta * u).norm()) {
        return Err(StabilityError::InversePole(w));
    }
    Ok(u / den)
}

/// Real-axis `R_θ⁻¹`.
pub fn stab_inverse_real(theta: f64, w: f64) -> Result<f64, StabilityError> {
    stab_inverse(theta, ComplexScalar::new(w, 0.0)).map(|z| z.re)
}

/// Real-axis `R_θ`.
pub fn stab_value_real(theta: f64, z: f64) -> Result<f64, StabilityError> {
    stab_value(theta, ComplexScalar::new(z, 0.0)).map(|w| w.re)
}

/// Membership of a point in the stability region `{z : |R_θ(z)| < 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Inside,
    Outside,
    /// `z` is the pole of `R_θ`; counted as outside.
    Pole,
}

impl Region {
    pub fn is_inside(self) -> bool {
        self == Region::Inside
    }
}

pub fn in_region(theta: f64, z: ComplexScalar) -> Region {
    match stab_value(theta, z) {
        Ok(w) if w.norm() < 1.0 => Region::Inside,
        Ok(_) => Region::Outside,
        Err(_) => Region::Pole,
    }
}

/// `|R_θ|` and region membership on a uniform `n x n` grid.
///
/// Row `i` has imaginary part `im.0 + i·Δ`, column `j` real part
/// `re.0 + j·Δ`; cells are row-major. Pole cells carry an infinite
/// magnitude and are flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrid {
    pub theta: f64,
    pub re: (f64, f64),
    pub im: (f64, f64),
    pub n: usize,
    pub magnitude: Vec<f64>,
    pub inside: Vec<bool>,
    pub pole: Vec<bool>,
}

impl RegionGrid {
    pub fn point(&self, i: usize, j: usize) -> ComplexScalar {
        ComplexScalar::new(
            lerp(self.re, j, self.n),
            lerp(self.im, i, self.n),
        )
    }
}

#[inline]
pub(crate) fn lerp(range: (f64, f64), k: usize, n: usize) -> f64 {
    range.0 + (range.1 - range.0) * k as f64 / (n - 1) as f64
}

pub fn region_grid(
    theta: f64,
    re: (f64, f64),
    im: (f64, f64),
    n: usize,
) -> Result<RegionGrid, StabilityError> {
    region_grid_with(theta, re, im, n, Exec::default())
}

pub fn region_grid_with(
    theta: f64,
    re: (f64, f64),
    im: (f64, f64),
    n: usize,
    exec: Exec,
) -> Result<RegionGrid, StabilityError> {
    if n < 2 {
        return Err(StabilityError::GridTooSmall(n));
    }
    let rows = map_indexed(exec, n, |i| {
        let y = lerp(im, i, n);
        (0..n)
            .map(|j| {
                let z = ComplexScalar::new(lerp(re, j, n), y);
                match stab_value(theta, z) {
                    Ok(w) => (w.norm(), w.norm() < 1.0, false),
                    Err(_) => (f64::INFINITY, false, true),
                }
            })
            .collect::<Vec<_>>()
    });
    let mut grid = RegionGrid {
        theta,
        re,
        im,
        n,
        magnitude: Vec::with_capacity(n * n),
        inside: Vec::with_capacity(n * n),
        pole: Vec::with_capacity(n * n),
    };
    for (m, inside, pole) in rows.into_iter().flatten() {
        grid.magnitude.push(m);
        grid.inside.push(inside);
        grid.pole.push(pole);
    }
    Ok(grid)
}

/// Eigenvalue disk `B(c, r)` on the real axis, described both by its
/// geometry and by the stability-function values `ĉ = R_θ(c)` and
/// `L = R_θ(c + r)` (when `r > 0`) that define it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityDisk {
    pub center: f64,
    pub radius: f64,
    pub c_hat: f64,
    pub lipschitz: f64,
}

impl StabilityDisk {
    /// `c = R_θ⁻¹(ĉ)`, `r = max(0, R_θ⁻¹(L) − c)`.
    pub fn from_targets(theta: f64, c_hat: f64, lipschitz: f64) -> Result<Self, StabilityError> {
        let center = stab_inverse_real(theta, c_hat)?;
        let right = stab_inverse_real(theta, lipschitz)?;
        Ok(Self {
            center,
            radius: (right - center).max(0.0),
            c_hat,
            lipschitz,
        })
    }

    /// The marked point `R_θ⁻¹(L)`; equals `c + r` unless the clamp is active.
    pub fn lipschitz_point(&self, theta: f64) -> Result<f64, StabilityError> {
        stab_inverse_real(theta, self.lipschitz)
    }

    pub fn contains(&self, z: ComplexScalar, slack: f64) -> bool {
        (z - self.center).norm() <= self.radius + slack
    }

    /// Distance from `z` to the closed disk (0 inside).
    pub fn distance(&self, z: ComplexScalar) -> f64 {
        ((z - self.center).norm() - self.radius).max(0.0)
    }

    /// Whether the center lies right of `R_θ⁻¹(0)`, the condition under
    /// which `sup |R_θ|` over the disk is attained at `c + r`.
    pub fn sup_identity_applies(&self, theta: f64) -> bool {
        sup_identity_applies(theta, self.center)
    }

    /// `max(ĉ, L)`.
    pub fn predicted_sup(&self) -> f64 {
        self.c_hat.max(self.lipschitz)
    }
}

pub fn sup_identity_applies(theta: f64, center: f64) -> bool {
    match stab_inverse_real(theta, 0.0) {
        Ok(origin) => center > origin,
        // θ = 1: R_θ⁻¹(0) is at −∞
        Err(_) => true,
    }
}

/// Sampled supremum of `|R_θ|` over a disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskSup {
    pub value: f64,
    pub argmax: ComplexScalar,
}

/// Maximizes `|R_θ|` over `samples` equally spaced boundary points of the
/// disk (angle 0, the rightmost point, is always sampled). Without a pole
/// inside, the maximum modulus over the closed disk lies on its boundary.
pub fn disk_sup(
    theta: f64,
    disk: &StabilityDisk,
    samples: usize,
) -> Result<DiskSup, StabilityError> {
    if theta > 0.0 {
        let pole = 1.0 / theta;
        if (pole - disk.center).abs() <= disk.radius {
            return Err(StabilityError::PoleInDisk {
                center: disk.center,
                radius: disk.radius,
                pole,
            });
        }
    }
    let c = ComplexScalar::new(disk.center, 0.0);
    if disk.radius == 0.0 {
        let value = stab_value(theta, c)?.norm();
        return Ok(DiskSup { value, argmax: c });
    }
    let samples = samples.max(1);
    let mut best = DiskSup {
        value: f64::NEG_INFINITY,
        argmax: c,
    };
    for k in 0..samples {
        let phi = std::f64::consts::TAU * k as f64 / samples as f64;
        let z = c + ComplexScalar::from_polar(disk.radius, phi);
        let v = stab_value(theta, z)?.norm();
        if v > best.value {
            best = DiskSup { value: v, argmax: z };
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> ComplexScalar {
        ComplexScalar::new(re, im)
    }

    #[test]
    fn value_examples() {
        assert_eq!(stab_value(0.5, c(0.0, 0.0)).unwrap(), c(1.0, 0.0));
        assert_eq!(stab_value(0.0, c(-1.0, 0.0)).unwrap(), c(0.0, 0.0));
        assert_eq!(stab_value(1.0, c(-1.0, 0.0)).unwrap(), c(0.5, 0.0));
        assert!(matches!(stab_value(0.5, c(2.0, 0.0)), Err(StabilityError::Pole(_))));
    }

    #[test]
    fn inverse_examples() {
        for theta in [0.0, 0.3, 0.5, 1.0] {
            assert_eq!(stab_inverse(theta, c(1.0, 0.0)).unwrap(), c(0.0, 0.0));
        }
        let z = c(0.7, -2.0);
        assert!((stab_inverse(0.0, z).unwrap() - (z - 1.0)).norm() < 1e-15);
        assert_eq!(stab_inverse(0.5, c(0.0, 0.0)).unwrap(), c(-2.0, 0.0));
        // pole at w = 1 − 1/θ
        assert!(matches!(
            stab_inverse(0.5, c(-1.0, 0.0)),
            Err(StabilityError::InversePole(_))
        ));
        assert!(stab_inverse(1.0, c(0.0, 0.0)).is_err());
    }

    #[test]
    fn region_examples() {
        assert_eq!(in_region(0.0, c(-1.0, 0.0)), Region::Inside);
        assert_eq!(in_region(0.5, c(0.1, 0.0)), Region::Outside);
        assert_eq!(in_region(0.5, c(-0.1, 0.0)), Region::Inside);
        assert_eq!(in_region(1.0, c(3.0, 0.0)), Region::Inside);
        assert_eq!(in_region(1.0, c(1.0, 0.0)), Region::Pole);
    }

    #[test]
    fn theta_scheme_validation() {
        assert!(ThetaScheme::new(1.5).is_err());
        assert!(ThetaScheme::new(-0.1).is_err());
        let s = ThetaScheme::new(0.25).unwrap();
        assert_eq!(s.fp_max_iter, 100);
        assert!(ThetaScheme { fp_tol: 0.0, ..s }.validated().is_err());
    }

    #[test]
    fn grid_shapes_match_analytic_regions() {
        let n = 101;
        for (theta, oracle) in [
            (0.0, Box::new(|z: ComplexScalar| (z + 1.0).norm() < 1.0) as Box<dyn Fn(_) -> bool>),
            (0.5, Box::new(|z: ComplexScalar| z.re < 0.0)),
            (1.0, Box::new(|z: ComplexScalar| (z - 1.0).norm() > 1.0)),
        ] {
            let g = region_grid(theta, (-5.0, 5.0), (-5.0, 5.0), n).unwrap();
            let mut bad = 0;
            for i in 0..n {
                for j in 0..n {
                    if g.inside[i * n + j] != oracle(g.point(i, j)) {
                        bad += 1;
                    }
                }
            }
            assert!(bad as f64 <= 0.005 * (n * n) as f64, "theta={theta}: {bad}");
        }
        assert!(region_grid(0.0, (0.0, 1.0), (0.0, 1.0), 1).is_err());
    }

    #[test]
    fn disk_examples() {
        // degenerate disk
        let d = StabilityDisk::from_targets(0.5, 0.6, 0.3).unwrap();
        assert_eq!(d.radius, 0.0);
        let s = disk_sup(0.5, &d, 64).unwrap();
        assert!((s.value - 0.6).abs() < 1e-12);
        // θ=0, c=−0.5, r=0.3 gives sup |1 + z| = 0.8 at z = −0.2
        let d = StabilityDisk {
            center: -0.5,
            radius: 0.3,
            c_hat: 0.5,
            lipschitz: 0.8,
        };
        let s = disk_sup(0.0, &d, 4096).unwrap();
        assert!((s.value - 0.8).abs() < 1e-12);
        assert!((s.argmax - c(-0.2, 0.0)).norm() < 1e-12);
        let bad = StabilityDisk {
            center: 1.5,
            radius: 1.0,
            c_hat: 1.0,
            lipschitz: 1.0,
        };
        assert!(matches!(disk_sup(0.5, &bad, 16), Err(StabilityError::PoleInDisk { .. })));
    }

    proptest! {
        #[test]
        fn round_trip(theta in 0.0f64..=1.0, re in -10.0f64..10.0, im in -10.0f64..10.0) {
            let z = c(re, im);
            if let Ok(w) = stab_value(theta, z) {
                if let Ok(back) = stab_inverse(theta, w) {
                    prop_assert!((back - z).norm() < 1e-10 * (1.0 + z.norm()));
                }
            }
        }

        #[test]
        fn trapezoid_is_neutral_on_imaginary_axis(y in -1e3f64..1e3) {
            let w = stab_value(0.5, c(0.0, y)).unwrap();
            prop_assert!((w.norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn backward_scheme_contains_left_half_plane(re in -50.0f64..-1e-9, im in -50.0f64..50.0) {
            prop_assert!(in_region(1.0, c(re, im)).is_inside());
        }

        #[test]
        fn disk_sup_equals_max_of_targets(
            theta in 0.0f64..=1.0,
            c_hat in 0.02f64..3.0,
            lip in 0.02f64..6.0,
        ) {
            let d = StabilityDisk::from_targets(theta, c_hat, lip).unwrap();
            prop_assume!(d.sup_identity_applies(theta));
            let s = disk_sup(theta, &d, DEFAULT_DISK_SAMPLES).unwrap();
            prop_assert!((s.value - d.predicted_sup()).abs() < 1e-6 * d.predicted_sup().max(1.0));
        }
    }
}
