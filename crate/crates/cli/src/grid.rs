use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use dissipative::numerics::ComplexScalar;
use dissipative::par::{map_indexed, Exec};
use dissipative::stability::{region_grid, StabilityError};
use dissipative::field::FieldSnapshot;
use serde::Serialize;

use crate::error::CliError;
use crate::io::{fmt_f64, Meta, Table};

/// Default plotting window `[−5, 5]²`.
pub const DEFAULT_BOUNDS: Bounds = Bounds {
    xmin: -5.0,
    xmax: 5.0,
    ymin: -5.0,
    ymax: 5.0,
};
pub const DEFAULT_RESOLUTION: usize = 401;

/// Axis-aligned rectangle, parsed from `xmin,xmax,ymin,ymax`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bounds {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Bounds {
    /// Coordinate of grid index `k` out of `n` along `[lo, hi]`.
    pub fn lerp(lo: f64, hi: f64, k: usize, n: usize) -> f64 {
        lo + (hi - lo) * k as f64 / (n - 1) as f64
    }

    pub fn x(&self, j: usize, n: usize) -> f64 {
        Self::lerp(self.xmin, self.xmax, j, n)
    }

    pub fn y(&self, i: usize, n: usize) -> f64 {
        Self::lerp(self.ymin, self.ymax, i, n)
    }
}

impl FromStr for Bounds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}")))
            .collect::<Result<_, _>>()?;
        let [xmin, xmax, ymin, ymax] = v[..] else {
            return Err(format!("expected xmin,xmax,ymin,ymax, got {} values", v.len()));
        };
        if !(xmin < xmax && ymin < ymax) || v.iter().any(|x| !x.is_finite()) {
            return Err("bounds need finite xmin < xmax and ymin < ymax".into());
        }
        Ok(Self {
            xmin,
            xmax,
            ymin,
            ymax,
        })
    }
}

impl fmt::Display for Bounds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.xmin, self.xmax, self.ymin, self.ymax)
    }
}

/// Named scalar channels sampled on a uniform `resolution²` grid. Cell
/// `(i, j)` sits at `(x_j, y_i)` and is stored at index `i·resolution + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridExport {
    pub bounds: Bounds,
    pub resolution: usize,
    pub channels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl GridExport {
    pub fn new(
        bounds: Bounds,
        resolution: usize,
        channels: Vec<String>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self, CliError> {
        if resolution < 2 {
            return Err(CliError::Usage(format!("resolution must be at least 2, got {resolution}")));
        }
        let unique: HashSet<&String> = channels.iter().collect();
        if unique.len() != channels.len() || channels.len() != values.len() {
            return Err(CliError::Usage("grid channel names must be unique, one per channel".into()));
        }
        if values.iter().any(|v| v.len() != resolution * resolution) {
            return Err(CliError::Usage("grid channel length must equal resolution²".into()));
        }
        Ok(Self {
            bounds,
            resolution,
            channels,
            values,
        })
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        let k = self.channels.iter().position(|c| c == name)?;
        Some(&self.values[k])
    }

    /// Columns `i, j, x, y` followed by the channels.
    pub fn to_table(&self, meta: &Meta) -> Table {
        let n = self.resolution;
        let mut columns: Vec<String> = ["i", "j", "x", "y"].iter().map(|s| s.to_string()).collect();
        columns.extend(self.channels.iter().cloned());
        let mut t = Table::new(meta, columns);
        t.comments.push(format!("bounds: {}", self.bounds));
        t.comments.push(format!("resolution: {n}"));
        for i in 0..n {
            for j in 0..n {
                let mut row = vec![
                    i.to_string(),
                    j.to_string(),
                    fmt_f64(self.bounds.x(j, n)),
                    fmt_f64(self.bounds.y(i, n)),
                ];
                row.extend(self.values.iter().map(|ch| fmt_f64(ch[i * n + j])));
                t.push(row);
            }
        }
        t
    }
}

/// `F_x`, `F_y` and `‖F‖²` of a planar field.
pub fn field_grid(snap: &FieldSnapshot, bounds: Bounds, resolution: usize) -> Result<GridExport, CliError> {
    if snap.dim() != 2 {
        return Err(CliError::Usage(format!(
            "grid export is 2D-only, model has dimension {}",
            snap.dim()
        )));
    }
    let n = resolution.max(2);
    let rows = map_indexed(Exec::default(), n, |i| {
        let y = bounds.y(i, n);
        (0..n).map(|j| snap.eval(&[bounds.x(j, n), y])).collect::<Vec<_>>()
    });
    let mut fx = Vec::with_capacity(n * n);
    let mut fy = Vec::with_capacity(n * n);
    let mut sq = Vec::with_capacity(n * n);
    for f in rows.into_iter().flatten() {
        fx.push(f[0]);
        fy.push(f[1]);
        sq.push(f[0] * f[0] + f[1] * f[1]);
    }
    GridExport::new(
        bounds,
        resolution,
        vec!["Fx".into(), "Fy".into(), "norm_sq".into()],
        vec![fx, fy, sq],
    )
}

/// `|R_θ|`, region membership and pole flags on the complex plane
/// (`x` real part, `y` imaginary part).
pub fn stability_grid(theta: f64, bounds: Bounds, resolution: usize) -> Result<GridExport, CliError> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(CliError::Stability(StabilityError::InvalidTheta(theta)));
    }
    let g = region_grid(theta, (bounds.xmin, bounds.xmax), (bounds.ymin, bounds.ymax), resolution)?;
    let flag = |b: &bool| if *b { 1.0 } else { 0.0 };
    GridExport::new(
        bounds,
        resolution,
        vec!["abs_R".into(), "in_region".into(), "pole".into()],
        vec![
            g.magnitude,
            g.inside.iter().map(flag).collect(),
            g.pole.iter().map(flag).collect(),
        ],
    )
}

/// Complex point of a stability grid cell.
pub fn grid_point(g: &GridExport, i: usize, j: usize) -> ComplexScalar {
    ComplexScalar::new(g.bounds.x(j, g.resolution), g.bounds.y(i, g.resolution))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_parse() {
        let b: Bounds = "-5,5,-4.5,4".parse().unwrap();
        assert_eq!((b.xmin, b.xmax, b.ymin, b.ymax), (-5.0, 5.0, -4.5, 4.0));
        assert!("1,0,0,1".parse::<Bounds>().is_err());
        assert!("0,1,0".parse::<Bounds>().is_err());
        assert_eq!(b.to_string().parse::<Bounds>().unwrap(), b);
    }

    #[test]
    fn grid_invariants_enforced() {
        let b = DEFAULT_BOUNDS;
        assert!(GridExport::new(b, 2, vec!["a".into(), "a".into()], vec![vec![0.0; 4]; 2]).is_err());
        assert!(GridExport::new(b, 2, vec!["a".into()], vec![vec![0.0; 3]]).is_err());
        assert!(GridExport::new(b, 2, vec!["a".into()], vec![vec![0.0; 4]]).is_ok());
    }

    #[test]
    fn explicit_region_is_unit_disk_at_minus_one() {
        let g = stability_grid(0.0, DEFAULT_BOUNDS, 101).unwrap();
        let inside = g.channel("in_region").unwrap();
        for i in 0..101 {
            for j in 0..101 {
                let z = grid_point(&g, i, j);
                let d = (z + 1.0).norm();
                if (d - 1.0).abs() > 1e-9 {
                    assert_eq!(inside[i * 101 + j] == 1.0, d < 1.0);
                }
            }
        }
    }

    #[test]
    fn table_layout() {
        let g = GridExport::new(DEFAULT_BOUNDS, 2, vec!["v".into()], vec![vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let t = g.to_table(&Meta::new("t", None));
        assert_eq!(t.columns, vec!["i", "j", "x", "y", "v"]);
        assert_eq!(t.rows[1][..3], ["0".to_string(), "1".into(), fmt_f64(5.0)]);
        assert_eq!(t.rows[2][4], fmt_f64(3.0));
    }
}
