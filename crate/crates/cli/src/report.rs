//! Eigenvalue audits, disk summaries and adjoint-walk tables.

use dissipative::field::FieldSnapshot;
use dissipative::numerics::{eigenvalues, ComplexScalar, DenseMatrix};
use dissipative::par::{map_indexed, Exec};
use dissipative::stability::{
    disk_sup, stab_inverse_real, stab_value, StabilityDisk, StabilityError, DEFAULT_DISK_SAMPLES,
};
use dissipative::train::{adjoint_walks, mean_max_distance, AdjointWalk};
use serde::Serialize;

use crate::io::{coordinate_columns, fmt_f64, Meta, Table};

const EIGEN_TOL: f64 = 1e-13;

/// Spectrum of `D F` at one point, checked against the field's disk.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPoint {
    pub point: Vec<f64>,
    /// `None` when the eigen-solver failed at this point.
    pub eigenvalues: Option<Vec<ComplexScalar>>,
    /// `|R_θ(λ_i)|`, infinite at a pole.
    pub gain: Vec<f64>,
    /// Distance from `λ_i` to `B(c, r)`, zero inside.
    pub disk_distance: Vec<f64>,
    pub in_region: Vec<bool>,
}

impl EigenPoint {
    pub fn ok(&self) -> bool {
        self.eigenvalues.is_some() && self.in_region.iter().all(|b| *b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenReport {
    pub theta: f64,
    pub disk: StabilityDisk,
    pub points: Vec<EigenPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenSummary {
    #[serde(flatten)]
    pub meta: Meta,
    pub theta: f64,
    pub c: f64,
    pub r: f64,
    pub c_hat: f64,
    pub lipschitz: f64,
    pub n_points: usize,
    pub dissipative: bool,
    pub max_gain: Option<f64>,
    pub max_disk_distance: Option<f64>,
    pub offenders: Vec<usize>,
    pub eigen_failures: Vec<usize>,
}

pub fn eigen_report(snap: &FieldSnapshot, points: &DenseMatrix) -> EigenReport {
    let loc = snap.localization();
    let theta = snap.theta();
    let disk = StabilityDisk {
        center: loc.c,
        radius: loc.r,
        c_hat: loc.c_hat,
        lipschitz: loc.lipschitz,
    };
    let pts = map_indexed(Exec::default(), points.rows(), |p| {
        let x = points.row(p).to_vec();
        match eigenvalues(&snap.jacobian(&x), EIGEN_TOL) {
            Ok(dec) => {
                let gain: Vec<f64> = dec
                    .values
                    .iter()
                    .map(|l| stab_value(theta, *l).map_or(f64::INFINITY, |w| w.norm()))
                    .collect();
                EigenPoint {
                    point: x,
                    in_region: gain.iter().map(|g| *g < 1.0).collect(),
                    disk_distance: dec.values.iter().map(|l| disk.distance(*l)).collect(),
                    gain,
                    eigenvalues: Some(dec.values),
                }
            }
            Err(e) => {
                log::warn!("point {p}: eigen-solver failed: {e}");
                EigenPoint {
                    point: x,
                    eigenvalues: None,
                    gain: Vec::new(),
                    disk_distance: Vec::new(),
                    in_region: Vec::new(),
                }
            }
        }
    });
    EigenReport {
        theta,
        disk,
        points: pts,
    }
}

impl EigenReport {
    /// Every eigenvalue at every point lies in the stability region. Vacuously
    /// true for no points.
    pub fn dissipative(&self) -> bool {
        self.points.iter().all(EigenPoint::ok)
    }

    pub fn offenders(&self) -> Vec<usize> {
        (0..self.points.len()).filter(|&p| !self.points[p].ok()).collect()
    }

    pub fn summary(&self, meta: &Meta) -> EigenSummary {
        let fold = |f: fn(&EigenPoint) -> &[f64]| {
            self.points
                .iter()
                .flat_map(|p| f(p).iter().copied())
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        };
        EigenSummary {
            meta: meta.clone(),
            theta: self.theta,
            c: self.disk.center,
            r: self.disk.radius,
            c_hat: self.disk.c_hat,
            lipschitz: self.disk.lipschitz,
            n_points: self.points.len(),
            dissipative: self.dissipative(),
            max_gain: fold(|p| &p.gain),
            max_disk_distance: fold(|p| &p.disk_distance),
            offenders: self.offenders(),
            eigen_failures: (0..self.points.len())
                .filter(|&p| self.points[p].eigenvalues.is_none())
                .collect(),
        }
    }

    /// One row per point: coordinates, then per eigenvalue its real and
    /// imaginary part, `|R_θ(λ)|`, distance to the disk and region flag.
    pub fn to_table(&self, meta: &Meta, dim: usize) -> Table {
        let mut columns = vec!["point".to_string()];
        columns.extend(coordinate_columns(dim));
        for k in 0..dim {
            for name in ["re", "im", "abs_R", "disk_distance", "in_region"] {
                columns.push(format!("{name}_{k}"));
            }
        }
        columns.push("status".into());
        let mut t = Table::new(meta, columns);
        for (p, e) in self.points.iter().enumerate() {
            let mut row = vec![p.to_string()];
            row.extend(e.point.iter().map(|v| fmt_f64(*v)));
            match &e.eigenvalues {
                Some(vals) => {
                    for k in 0..dim {
                        row.push(fmt_f64(vals[k].re));
                        row.push(fmt_f64(vals[k].im));
                        row.push(fmt_f64(e.gain[k]));
                        row.push(fmt_f64(e.disk_distance[k]));
                        row.push(u8::from(e.in_region[k]).to_string());
                    }
                    row.push(if e.ok() { "ok" } else { "outside" }.into());
                }
                None => {
                    row.extend(std::iter::repeat(String::new()).take(5 * dim));
                    row.push("eigen_failed".into());
                }
            }
            t.push(row);
        }
        t
    }
}

/// The disk defined by `(ĉ, L)` and its sampled supremum of `|R_θ|`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiskSidecar {
    #[serde(flatten)]
    pub meta: Meta,
    pub theta: f64,
    pub c_hat: f64,
    pub lipschitz: f64,
    pub c: f64,
    pub r: f64,
    /// `R_θ⁻¹(ĉ)`.
    pub center_point: f64,
    /// `R_θ⁻¹(L)`.
    pub lipschitz_point: f64,
    pub predicted_sup: f64,
    pub disk_sup: Option<f64>,
    pub disk_sup_argmax: Option<[f64; 2]>,
    pub sup_identity_applies: bool,
    pub samples: usize,
    pub note: Option<String>,
}

pub fn disk_sidecar(meta: &Meta, theta: f64, c_hat: f64, lipschitz: f64) -> Result<DiskSidecar, StabilityError> {
    let disk = StabilityDisk::from_targets(theta, c_hat, lipschitz)?;
    let lipschitz_point = stab_inverse_real(theta, lipschitz)?;
    let (sup, argmax, note) = match disk_sup(theta, &disk, DEFAULT_DISK_SAMPLES) {
        Ok(s) => (Some(s.value), Some([s.argmax.re, s.argmax.im]), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    Ok(DiskSidecar {
        meta: meta.clone(),
        theta,
        c_hat,
        lipschitz,
        c: disk.center,
        r: disk.radius,
        center_point: disk.center,
        lipschitz_point,
        predicted_sup: disk.predicted_sup(),
        disk_sup: sup,
        disk_sup_argmax: argmax,
        sup_identity_applies: disk.sup_identity_applies(theta),
        samples: DEFAULT_DISK_SAMPLES,
        note,
    })
}

/// Adjoint walks from every row of `points` plus their table.
pub struct AdjointExport {
    pub walks: Vec<AdjointWalk>,
    pub mean_max_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjointSummary {
    #[serde(flatten)]
    pub meta: Meta,
    pub alpha: f64,
    pub steps: usize,
    pub n_points: usize,
    pub degenerate: Vec<usize>,
    pub truncated: Vec<usize>,
    /// Mean over walks of the largest distance to the nearest input point.
    pub mean_max_distance: f64,
}

pub fn adjoint_export(
    snap: &FieldSnapshot,
    points: &DenseMatrix,
    alpha: f64,
    steps: usize,
    eps_scale: f64,
    seed: u64,
) -> AdjointExport {
    let walks = adjoint_walks(snap, points, alpha, steps, eps_scale, seed);
    let mean_max_distance = mean_max_distance(&walks, points);
    AdjointExport {
        walks,
        mean_max_distance,
    }
}

impl AdjointExport {
    /// Rows `point, step, x0.., degenerate, truncated`; step 0 is `x + αn`.
    pub fn to_table(&self, meta: &Meta, dim: usize) -> Table {
        let mut columns = vec!["point".to_string(), "step".into()];
        columns.extend(coordinate_columns(dim));
        columns.push("degenerate".into());
        columns.push("truncated".into());
        let mut t = Table::new(meta, columns);
        for w in &self.walks {
            for (j, s) in w.states.iter().enumerate() {
                let mut row = vec![w.point.to_string(), j.to_string()];
                row.extend(s.iter().map(|v| fmt_f64(*v)));
                row.push(u8::from(w.normal.is_none()).to_string());
                row.push(u8::from(w.truncated).to_string());
                t.push(row);
            }
        }
        t
    }

    pub fn summary(&self, meta: &Meta, alpha: f64, steps: usize) -> AdjointSummary {
        AdjointSummary {
            meta: meta.clone(),
            alpha,
            steps,
            n_points: self.walks.len(),
            degenerate: self.walks.iter().filter(|w| w.normal.is_none()).map(|w| w.point).collect(),
            truncated: self.walks.iter().filter(|w| w.truncated).map(|w| w.point).collect(),
            mean_max_distance: self.mean_max_distance,
        }
    }
}
