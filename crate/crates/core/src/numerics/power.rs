use serde::{Deserialize, Serialize};

use super::{dot, norm, DenseMatrix, NumericsError, SolveMethod, SolveReport};

/// Left/right singular-vector estimates carried between power iterations.
///
/// Kept per weight matrix so each training step can warm start from the
/// previous step's vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerIterate {
    /// Left vector, length = rows.
    pub u: Vec<f64>,
    /// Right vector, length = cols.
    pub v: Vec<f64>,
}

impl PowerIterate {
    /// Deterministic start that is generically not orthogonal to the top
    /// singular vector.
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut v: Vec<f64> = (0..cols)
            .map(|i| 1.0 + 0.37 * ((i * 7 + 3) % 11) as f64 - 0.05 * (i % 3) as f64)
            .collect();
        let nv = norm(&v);
        if nv > 0.0 {
            v.iter_mut().for_each(|x| *x /= nv);
        }
        let mut u = vec![0.0; rows];
        if rows > 0 {
            u[0] = 1.0;
        }
        Self { u, v }
    }

    /// One step: `u ← Mv/‖Mv‖`, `v ← Mᵀu/‖Mᵀu‖`. Returns `‖Mv‖` for the
    /// incoming `v`, which is nondecreasing across steps.
    pub fn step(&mut self, m: &DenseMatrix) -> f64 {
        let mv = m.matvec(&self.v);
        let sigma = norm(&mv);
        if sigma == 0.0 {
            return 0.0;
        }
        self.u = mv.into_iter().map(|x| x / sigma).collect();
        let mtu = m.tmatvec(&self.u);
        let nz = norm(&mtu);
        if nz > 0.0 {
            self.v = mtu.into_iter().map(|x| x / nz).collect();
        }
        sigma
    }

    /// Bilinear estimate `uᵀ M v` of the largest singular value.
    pub fn sigma(&self, m: &DenseMatrix) -> f64 {
        dot(&self.u, &m.matvec(&self.v))
    }

    /// `‖Mv − σ u‖ / σ` with `σ = uᵀMv`; zero at an exact singular pair.
    pub fn residual(&self, m: &DenseMatrix) -> f64 {
        let mv = m.matvec(&self.v);
        let sigma = dot(&self.u, &mv);
        if sigma == 0.0 {
            return if m.max_abs() == 0.0 { 0.0 } else { f64::INFINITY };
        }
        let r: Vec<f64> = mv.iter().zip(&self.u).map(|(a, b)| a - sigma * b).collect();
        norm(&r) / sigma.abs()
    }
}

/// Largest singular value by power iteration from a fresh start.
pub fn spectral_norm(
    m: &DenseMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, SolveReport), NumericsError> {
    let mut state = PowerIterate::new(m.rows(), m.cols());
    spectral_norm_warm(m, &mut state, tol, max_iter)
}

/// Power iteration continuing from `state`; stops once the singular-pair
/// residual drops below `tol`. Running out of iterations is reported in the
/// returned [`SolveReport`], with the best estimate so far.
pub fn spectral_norm_warm(
    m: &DenseMatrix,
    state: &mut PowerIterate,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, SolveReport), NumericsError> {
    if m.is_empty() {
        return Err(NumericsError::Empty);
    }
    if state.u.len() != m.rows() || state.v.len() != m.cols() {
        *state = PowerIterate::new(m.rows(), m.cols());
    }
    if m.max_abs() == 0.0 {
        return Ok((0.0, report(0, 0.0, true)));
    }
    // an already converged state is left untouched
    let mut residual = state.residual(m);
    if residual <= tol {
        return Ok((state.sigma(m), report(0, residual, true)));
    }
    let mut sigma = 0.0;
    for it in 1..=max_iter {
        sigma = state.step(m).max(sigma);
        residual = state.residual(m);
        if residual <= tol {
            return Ok((state.sigma(m).max(sigma), report(it, residual, true)));
        }
    }
    Ok((sigma, report(max_iter, residual, false)))
}

fn report(iterations: usize, residual: f64, converged: bool) -> SolveReport {
    SolveReport {
        iterations,
        residual,
        converged,
        method: SolveMethod::PowerIteration,
    }
}
