//! The implicit residual block `y = x + F((1 − θ)x + θy)`.
//!
//! Forward steps solve for `y` given `x`; adjoint steps solve the same
//! relation for `x` given `y`. Both are per-point `d`-dimensional root
//! problems `G(u) = 0` with `z = (1 − θ)x + θy`:
//!
//! | step    | unknown | `G(u)`             | `∂G/∂u`          |
//! |---------|---------|--------------------|------------------|
//! | forward | `y`     | `y − x − F(z)`     | `I − θJ(z)`      |
//! | adjoint | `x`     | `x − y + F(z)`     | `I + (1 − θ)J(z)`|
//!
//! A step is explicit when the unknown's weight in `z` is zero. Otherwise
//! fixed-point iteration is used when it provably contracts, with Newton
//! as the fallback.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{stack_rows, FieldError, FieldSnapshot, TapeField};
use crate::numerics::{
    norm, theta_resolvent, DenseMatrix, Lu, NodeId, NumericsError, SolveMethod, SolveReport,
    Tape,
};
use crate::par::{map_indexed, Exec};

/// Step halvings tried in the Newton line search.
const MAX_HALVINGS: usize = 30;

/// Newton steps are capped at this multiple of the current residual. Where
/// `∂G/∂u` is nearly singular a full step can land on a distant root of a
/// non-injective map; the cap keeps the solve on the root nearest the start.
const NEWTON_STEP_RATIO: f64 = 10.0;

/// Steps shorter than this fraction of `1 + ‖known‖` are never capped, so
/// the final iterations keep Newton's quadratic convergence.
const NEWTON_STEP_FLOOR: f64 = 1e-3;

/// Newton gives up after this many consecutive steps that each keep more
/// than `NEWTON_STALL_RATIO` of the residual. Such solves sit at a fold of
/// the map with no nearby root.
const NEWTON_STALL_STEPS: usize = 4;
const NEWTON_STALL_RATIO: f64 = 0.9;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite input at point {point}")]
    NonFinite { point: usize },
    #[error("step {step}: solver stopped at residual {residual:e} after {iterations} iterations")]
    StepFailed {
        step: usize,
        residual: f64,
        iterations: usize,
    },
    #[error("perturbation direction must have unit norm, got {0}")]
    NotUnit(f64),
    #[error("I - θJ is singular at the solved point")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Adjoint,
}

impl Direction {
    /// Weight of the unknown inside `z`.
    fn unknown_weight(self, theta: f64) -> f64 {
        match self {
            Direction::Forward => theta,
            Direction::Adjoint => 1.0 - theta,
        }
    }

    /// Sign `s` in `u = base − s·F(z)`.
    fn sign(self) -> f64 {
        match self {
            Direction::Forward => -1.0,
            Direction::Adjoint => 1.0,
        }
    }
}

/// Recorded states of a forward evolution or an adjoint walk.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<usize>,
    pub states: Vec<DenseMatrix>,
    pub direction: Direction,
    /// Set when an adjoint walk stopped early; holds the step that failed.
    pub truncated_at: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &DenseMatrix {
        self.states.last().expect("trajectories hold at least one state")
    }
}

struct PointSolve {
    value: Vec<f64>,
    report: SolveReport,
}

/// `z = (1 − θ)x + θy`.
fn mix(theta: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(y)
        .map(|(a, b)| (1.0 - theta) * a + theta * b)
        .collect()
}

/// Solves one point. `known` is `x` (forward) or `y` (adjoint).
fn solve_point(f: &FieldSnapshot, known: &[f64], dir: Direction) -> PointSolve {
    let scheme = f.scheme();
    let theta = scheme.theta;
    let w = dir.unknown_weight(theta);
    let s = dir.sign();
    let z_of = |u: &[f64]| match dir {
        Direction::Forward => mix(theta, known, u),
        Direction::Adjoint => mix(theta, u, known),
    };
    // u ↦ known − s·F(z(u))
    let image = |u: &[f64]| -> Vec<f64> {
        let fz = f.eval(&z_of(u));
        known.iter().zip(fz).map(|(k, v)| k - s * v).collect()
    };
    let residual_of = |u: &[f64]| -> f64 {
        let g = image(u);
        let diff: Vec<f64> = u.iter().zip(&g).map(|(a, b)| a - b).collect();
        norm(&diff)
    };

    // start from the explicit step, exact when w = 0
    let start = {
        let fz = f.eval(known);
        known.iter().zip(fz).map(|(k, v)| k - s * v).collect::<Vec<_>>()
    };
    if w == 0.0 {
        return PointSolve {
            value: start,
            report: SolveReport::direct(),
        };
    }

    let loc = f.localization();
    let contraction = w * (loc.c.abs() + loc.r);
    let mut best = start.clone();
    let mut best_res = residual_of(&best);
    let mut iterations = 0;
    if contraction < 1.0 {
        let mut u = start;
        for it in 1..=scheme.fp_max_iter {
            let next = image(&u);
            let step: Vec<f64> = next.iter().zip(&u).map(|(a, b)| a - b).collect();
            // ‖G(u)‖ at the previous iterate
            let res = norm(&step);
            iterations = it;
            if res < best_res {
                best_res = res;
                best = u.clone();
            }
            u = next;
            if res <= scheme.fp_tol {
                let final_res = residual_of(&u);
                if final_res <= best_res {
                    best = u;
                    best_res = final_res;
                }
                return PointSolve {
                    value: best,
                    report: SolveReport {
                        iterations,
                        residual: best_res,
                        converged: best_res <= scheme.fp_tol,
                        method: SolveMethod::FixedPoint,
                    },
                };
            }
        }
        let res = residual_of(&u);
        if res < best_res {
            best_res = res;
            best = u;
        }
    }

    // Newton on G(u) = u − known + s·F(z(u)), ∂G/∂u = I + s·w·J(z)
    let d = known.len();
    let mut u = best;
    let mut res = best_res;
    let mut newton_iters = 0;
    let mut stalled = 0;
    for _ in 0..scheme.newton_max_iter {
        if res <= scheme.fp_tol {
            break;
        }
        newton_iters += 1;
        let (fz, j) = f.eval_with_jacobian(&z_of(&u));
        let g: Vec<f64> = (0..d).map(|i| u[i] - known[i] + s * fz[i]).collect();
        let mut a = j.scale(s * w);
        for i in 0..d {
            a.set(i, i, a.get(i, i) + 1.0);
        }
        let Ok(lu) = Lu::factor(&a) else { break };
        let delta = lu.solve(&g);
        let cap = (NEWTON_STEP_RATIO * res).max(NEWTON_STEP_FLOOR * (1.0 + norm(known)));
        let mut t = (cap / norm(&delta)).min(1.0);
        let mut improved = false;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = u.iter().zip(&delta).map(|(a, b)| a - t * b).collect();
            let cres = residual_of(&cand);
            if cres < res {
                stalled = if cres > NEWTON_STALL_RATIO * res { stalled + 1 } else { 0 };
                u = cand;
                res = cres;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved || stalled >= NEWTON_STALL_STEPS {
            break;
        }
    }
    PointSolve {
        value: u,
        report: SolveReport {
            iterations: iterations + newton_iters,
            residual: res,
            converged: res <= scheme.fp_tol,
            method: if newton_iters > 0 {
                SolveMethod::Newton
            } else {
                SolveMethod::FixedPoint
            },
        },
    }
}

fn solve_batch(
    f: &FieldSnapshot,
    known: &DenseMatrix,
    dir: Direction,
    exec: Exec,
) -> Result<(DenseMatrix, SolveReport), LayerError> {
    f.check_dim(known.cols())?;
    if let Some(point) = (0..known.rows()).find(|&p| known.row(p).iter().any(|v| !v.is_finite())) {
        return Err(LayerError::NonFinite { point });
    }
    let solved = map_indexed(exec, known.rows(), |p| solve_point(f, known.row(p), dir));
    let report = solved
        .iter()
        .map(|s| s.report)
        .reduce(SolveReport::merge)
        .unwrap_or_else(SolveReport::direct);
    let rows = solved.into_iter().map(|s| s.value).collect();
    Ok((stack_rows(f.dim(), rows), report))
}

/// One forward step on every row of `x`. Non-convergence is reported in the
/// returned [`SolveReport`] together with the best iterate, not as an error.
pub fn forward(f: &FieldSnapshot, x: &DenseMatrix) -> Result<(DenseMatrix, SolveReport), LayerError> {
    forward_with(f, x, Exec::default())
}

pub fn forward_with(
    f: &FieldSnapshot,
    x: &DenseMatrix,
    exec: Exec,
) -> Result<(DenseMatrix, SolveReport), LayerError> {
    solve_batch(f, x, Direction::Forward, exec)
}

/// One adjoint step: `x` with `x = y − F((1 − θ)x + θy)` for every row of `y`.
pub fn adjoint_step(
    f: &FieldSnapshot,
    y: &DenseMatrix,
) -> Result<(DenseMatrix, SolveReport), LayerError> {
    adjoint_step_with(f, y, Exec::default())
}

pub fn adjoint_step_with(
    f: &FieldSnapshot,
    y: &DenseMatrix,
    exec: Exec,
) -> Result<(DenseMatrix, SolveReport), LayerError> {
    solve_batch(f, y, Direction::Adjoint, exec)
}

/// Forward step for a single point.
pub fn forward_point(f: &FieldSnapshot, x: &[f64]) -> (Vec<f64>, SolveReport) {
    let s = solve_point(f, x, Direction::Forward);
    (s.value, s.report)
}

/// Adjoint step for a single point.
pub fn adjoint_point(f: &FieldSnapshot, y: &[f64]) -> (Vec<f64>, SolveReport) {
    let s = solve_point(f, y, Direction::Adjoint);
    (s.value, s.report)
}

/// Forward step recorded on `tape`, differentiable in `x` and the field
/// parameters.
///
/// The solve itself runs off-tape. The tape then holds `x + F(z*)` with
/// `y*` frozen inside `z*`, followed by an implicit-adjoint node that
/// applies `(I − θJ)⁻ᵀ` on the way back; together these give the exact
/// derivative of the converged solution.
pub fn forward_tape(
    tf: &TapeField,
    tape: &mut Tape,
    f: &FieldSnapshot,
    x: NodeId,
) -> Result<(NodeId, SolveReport), LayerError> {
    let xv = tape.value(x).clone();
    let (y, report) = forward(f, &xv)?;
    let theta = f.theta();
    let fx = tf.eval(tape, x)?;
    if theta == 0.0 {
        let out = tape.add(x, fx);
        return Ok((out, report));
    }
    let ystar = tape.constant(y.clone());
    let xs = tape.scale(x, 1.0 - theta);
    let ys = tape.scale(ystar, theta);
    let z = tape.add(xs, ys);
    let fz = tf.eval(tape, z)?;
    let rebuilt = tape.add(x, fz);
    let jacobians: Vec<DenseMatrix> = (0..y.rows())
        .map(|p| f.jacobian(&mix(theta, xv.row(p), y.row(p))))
        .collect();
    let out = tape.implicit_adjoint(rebuilt, &jacobians, theta)?;
    Ok((out, report))
}

/// `‖R_θ(J) dx‖` with `J` the Jacobian at the solved `z`: the linearized
/// growth of a perturbation `dx` through one step.
pub fn perturbation_gain(f: &FieldSnapshot, x: &[f64], dx: &[f64]) -> Result<f64, LayerError> {
    f.check_dim(x.len())?;
    f.check_dim(dx.len())?;
    let n = norm(dx);
    if (n - 1.0).abs() > 1e-9 {
        return Err(LayerError::NotUnit(n));
    }
    let (y, _) = forward_point(f, x);
    let j = f.jacobian(&mix(f.theta(), x, &y));
    let m = theta_resolvent(&j, f.theta()).map_err(|_| LayerError::Singular)?;
    Ok(norm(&m.matvec(dx)))
}

/// Repeated forward steps. Records `t = 0`, every multiple of
/// `record_every`, and `t = steps`. A step whose solve does not converge is
/// an error carrying the step index.
pub fn evolve(
    f: &FieldSnapshot,
    x0: &DenseMatrix,
    steps: usize,
    record_every: usize,
) -> Result<Trajectory, LayerError> {
    evolve_with(f, x0, steps, record_every, Exec::default())
}

pub fn evolve_with(
    f: &FieldSnapshot,
    x0: &DenseMatrix,
    steps: usize,
    record_every: usize,
    exec: Exec,
) -> Result<Trajectory, LayerError> {
    f.check_dim(x0.cols())?;
    let every = record_every.max(1);
    let mut times = vec![0];
    let mut states = vec![x0.clone()];
    let mut x = x0.clone();
    for t in 1..=steps {
        let (y, rep) = forward_with(f, &x, exec)?;
        if !rep.converged {
            return Err(LayerError::StepFailed {
                step: t,
                residual: rep.residual,
                iterations: rep.iterations,
            });
        }
        x = y;
        if t % every == 0 || t == steps {
            times.push(t);
            states.push(x.clone());
        }
    }
    Ok(Trajectory {
        times,
        states,
        direction: Direction::Forward,
        truncated_at: None,
    })
}

/// `x0` followed by `steps` adjoint steps. If a step fails to converge for
/// any row the walk stops there and `truncated_at` names the step.
pub fn adjoint_trajectory(
    f: &FieldSnapshot,
    x0: &DenseMatrix,
    steps: usize,
) -> Result<Trajectory, LayerError> {
    adjoint_trajectory_with(f, x0, steps, Exec::default())
}

pub fn adjoint_trajectory_with(
    f: &FieldSnapshot,
    x0: &DenseMatrix,
    steps: usize,
    exec: Exec,
) -> Result<Trajectory, LayerError> {
    f.check_dim(x0.cols())?;
    let mut times = vec![0];
    let mut states = vec![x0.clone()];
    let mut truncated_at = None;
    for j in 1..=steps {
        let (x, rep) = adjoint_step_with(f, states.last().unwrap(), exec)?;
        if !rep.converged {
            truncated_at = Some(j);
            break;
        }
        times.push(j);
        states.push(x);
    }
    Ok(Trajectory {
        times,
        states,
        direction: Direction::Adjoint,
        truncated_at,
    })
}

/// Adjoint walk for one point: `x0, x_1, …`, stopping before the first
/// step that does not converge. The flag reports whether it stopped early.
pub fn adjoint_path(f: &FieldSnapshot, x0: &[f64], steps: usize) -> (Vec<Vec<f64>>, bool) {
    let mut path = vec![x0.to_vec()];
    for _ in 0..steps {
        let (x, rep) = adjoint_point(f, path.last().unwrap());
        if !rep.converged {
            return (path, true);
        }
        path.push(x);
    }
    (path, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::field::{LocalizationParams, LocalizedField, MlpField};
    use crate::numerics::{eigenvalues_with_vectors, finite_difference_gradient, lu_solve};
    use crate::stability::{stab_value_real, ThetaScheme};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(seed: u64, theta: f64, loc: LocalizationParams) -> LocalizedField {
        let base = MlpField::random(2, &[8, 8], Activation::Tanh, 1.5, 0.5, seed).unwrap();
        LocalizedField::new(base, loc, ThetaScheme::new(theta).unwrap()).unwrap()
    }

    fn ranged() -> LocalizationParams {
        LocalizationParams::ranged((0.05, 0.95), (1.0, 5.0)).unwrap()
    }

    /// `F(x) = c·x + r·A x / ‖A‖` with a single linear layer.
    fn linear(a: &DenseMatrix, theta: f64, loc: LocalizationParams) -> LocalizedField {
        let base = MlpField::new(vec![(a.clone(), vec![0.0; 2])], Activation::Identity).unwrap();
        LocalizedField::new(base, loc, ThetaScheme::new(theta).unwrap()).unwrap()
    }

    fn cloud(seed: u64, n: usize, half: f64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(n, 2, |_, _| rng.gen_range(-half..half))
    }

    #[test]
    fn zero_field_is_identity_dynamics() {
        for theta in [0.0, 0.5, 1.0] {
            let s = field(1, theta, ranged()).snapshot().unwrap().with_localization(0.0, 0.0);
            let x = cloud(2, 10, 3.0);
            assert_eq!(forward(&s, &x).unwrap().0, x);
            assert_eq!(adjoint_step(&s, &x).unwrap().0, x);
            let tr = adjoint_trajectory(&s, &x, 3).unwrap();
            assert!(tr.states.iter().all(|st| *st == x));
        }
    }

    #[test]
    fn explicit_step_is_one_evaluation() {
        let s = field(3, 0.0, ranged()).snapshot().unwrap();
        let x = cloud(4, 20, 4.0);
        let (y, rep) = forward(&s, &x).unwrap();
        assert_eq!(rep.method, SolveMethod::Direct);
        let fx = s.eval_batch(&x).unwrap();
        assert_eq!(y, x.add(&fx));
    }

    #[test]
    fn implicit_linear_matches_closed_form() {
        let a = DenseMatrix::from_rows(&[[0.2, -0.5], [0.4, 0.1]]).unwrap();
        // L range pushes |c| + r past 1 so Newton is exercised too
        for loc in [
            LocalizationParams::dissipative(),
            LocalizationParams::ranged((0.3, 0.3), (4.0, 4.0)).unwrap(),
        ] {
            let f = linear(&a, 1.0, loc);
            let s = f.snapshot().unwrap();
            let m = s.jacobian(&[0.0, 0.0]);
            let lhs = DenseMatrix::identity(2).sub(&m);
            let x = cloud(5, 30, 4.0);
            let (y, rep) = forward(&s, &x).unwrap();
            assert!(rep.converged);
            for p in 0..x.rows() {
                let expect = lu_solve(&lhs, x.row(p)).unwrap();
                for k in 0..2 {
                    assert!((y.get(p, k) - expect[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn explicit_adjoint_linear_closed_form() {
        let a = DenseMatrix::from_rows(&[[0.2, -0.5], [0.4, 0.1]]).unwrap();
        let f = linear(&a, 0.0, ranged());
        let s = f.snapshot().unwrap();
        let ia = DenseMatrix::identity(2).add(&s.jacobian(&[0.0, 0.0]));
        let y = cloud(6, 20, 3.0);
        let tr = adjoint_trajectory(&s, &y, 3).unwrap();
        assert_eq!(tr.truncated_at, None);
        for p in 0..y.rows() {
            let mut expect = y.row(p).to_vec();
            for j in 1..=3 {
                expect = lu_solve(&ia, &expect).unwrap();
                for k in 0..2 {
                    assert!((tr.states[j].get(p, k) - expect[k]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn residual_contract_and_round_trip() {
        for (seed, theta) in [(1, 0.0), (2, 0.25), (3, 0.5), (4, 0.75), (5, 1.0)] {
            let s = field(seed, theta, ranged()).snapshot().unwrap();
            let tol = s.scheme().fp_tol;
            let x = cloud(seed + 10, 200, 4.0);
            let (y, frep) = forward(&s, &x).unwrap();
            let (back, arep) = adjoint_step(&s, &y).unwrap();
            assert!(frep.converged && arep.converged, "{frep:?} {arep:?}");
            for p in 0..x.rows() {
                let z = mix(theta, x.row(p), y.row(p));
                let fz = s.eval(&z);
                let r: Vec<f64> = (0..2).map(|k| y.get(p, k) - x.get(p, k) - fz[k]).collect();
                assert!(norm(&r) <= tol);
                let d: Vec<f64> = (0..2).map(|k| back.get(p, k) - x.get(p, k)).collect();
                assert!(norm(&d) <= 10.0 * tol, "theta {theta}: {}", norm(&d));
            }
        }
    }

    #[test]
    fn gain_identities() {
        let s = field(7, 0.5, ranged()).snapshot().unwrap();
        let zero = s.with_localization(0.0, 0.0);
        assert!((perturbation_gain(&zero, &[1.0, 2.0], &[0.6, 0.8]).unwrap() - 1.0).abs() < 1e-15);
        let lam = -0.7;
        let scaled = s.with_localization(lam, 0.0);
        let expect = stab_value_real(0.5, lam).unwrap().abs();
        let g = perturbation_gain(&scaled, &[0.3, -1.0], &[0.0, 1.0]).unwrap();
        assert!((g - expect).abs() < 1e-12);
        assert!(matches!(
            perturbation_gain(&s, &[0.0, 0.0], &[1.0, 1.0]),
            Err(LayerError::NotUnit(_))
        ));
    }

    #[test]
    fn gain_along_real_eigenvector() {
        let mut checked = 0;
        for seed in 0..20 {
            let theta = 0.25 * (seed % 5) as f64;
            let s = field(seed, theta, ranged()).snapshot().unwrap();
            let x = [0.5 * seed as f64 - 4.0, 1.0];
            let (y, _) = forward_point(&s, &x);
            let j = s.jacobian(&mix(theta, &x, &y));
            let eig = eigenvalues_with_vectors(&j, 1e-14).unwrap();
            for (lam, v) in eig.values.iter().zip(eig.vectors.unwrap()) {
                if lam.im.abs() > 1e-12 {
                    continue;
                }
                let mut dir: Vec<f64> = v.iter().map(|z| z.re).collect();
                let n = norm(&dir);
                if n < 1e-6 {
                    dir = v.iter().map(|z| z.im).collect();
                }
                let n = norm(&dir);
                dir.iter_mut().for_each(|e| *e /= n);
                let g = perturbation_gain(&s, &x, &dir).unwrap();
                let expect = stab_value_real(theta, lam.re).unwrap().abs();
                assert!((g - expect).abs() < 1e-6, "{g} vs {expect}");
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn evolve_records_requested_times() {
        let s = field(8, 0.5, LocalizationParams::dissipative()).snapshot().unwrap();
        let x = cloud(9, 5, 2.0);
        let tr = evolve(&s, &x, 0, 5).unwrap();
        assert_eq!(tr.times, vec![0]);
        assert_eq!(tr.states, vec![x.clone()]);
        let tr = evolve(&s, &x, 12, 5).unwrap();
        assert_eq!(tr.times, vec![0, 5, 10, 12]);
        let single = adjoint_trajectory(&s, &x, 1).unwrap();
        assert_eq!(single.states[1], adjoint_step(&s, &x).unwrap().0);
    }

    #[test]
    fn dissipative_clouds_contract() {
        let mut f = field(10, 1.0, LocalizationParams::dissipative());
        f.localization.gamma_c = 0.4;
        f.localization.gamma_l = -0.3;
        let s = f.snapshot().unwrap();
        let bound = f.lipschitz_bound().unwrap().value;
        let x = cloud(11, 100, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let delta = 1e-4;
        let xb = DenseMatrix::from_fn(100, 2, |i, j| x.get(i, j) + delta * rng.gen_range(-1.0..1.0));
        let a = evolve(&s, &x, 5, 1).unwrap();
        let b = evolve(&s, &xb, 5, 1).unwrap();
        for p in 0..100 {
            let gap0 = norm(&[x.get(p, 0) - xb.get(p, 0), x.get(p, 1) - xb.get(p, 1)]);
            for (t, (sa, sb)) in a.states.iter().zip(&b.states).enumerate() {
                let gap = norm(&[sa.get(p, 0) - sb.get(p, 0), sa.get(p, 1) - sb.get(p, 1)]);
                assert!(gap <= (bound + 5e-2).powi(t as i32) * gap0 + 1e-12);
            }
        }
    }

    #[test]
    fn strategies_agree() {
        let s = field(13, 0.5, ranged()).snapshot().unwrap();
        let x = cloud(14, 64, 4.0);
        assert_eq!(
            forward_with(&s, &x, Exec::Sequential).unwrap().0,
            forward_with(&s, &x, Exec::Parallel).unwrap().0
        );
        assert_eq!(
            adjoint_step_with(&s, &x, Exec::Sequential).unwrap().0,
            adjoint_step_with(&s, &x, Exec::Parallel).unwrap().0
        );
    }

    #[test]
    fn non_finite_input_rejected() {
        let s = field(15, 0.5, ranged()).snapshot().unwrap();
        let mut x = cloud(16, 4, 1.0);
        x.set(2, 1, f64::NAN);
        assert!(matches!(forward(&s, &x), Err(LayerError::NonFinite { point: 2 })));
    }

    fn forward_loss(f: &LocalizedField, x: &DenseMatrix) -> (f64, Vec<f64>, DenseMatrix) {
        let s = f.snapshot().unwrap();
        let mut tape = Tape::new();
        let tf = f.record(&mut tape).unwrap();
        let xn = tape.var(x.clone());
        let (y, rep) = forward_tape(&tf, &mut tape, &s, xn).unwrap();
        assert!(rep.converged);
        let l = tape.sum_sq(y);
        let g = tape.backward(l).unwrap();
        (tape.scalar(l), g.flatten(&tf.params()), g.get(xn))
    }

    #[test]
    fn forward_gradient_matches_fd() {
        for (seed, theta) in [(20, 0.0), (21, 0.25), (22, 0.5), (23, 1.0)] {
            let f = field(seed, theta, ranged());
            let x = cloud(seed, 3, 2.0);
            let (_, gp, gx) = forward_loss(&f, &x);
            let value = |g: &LocalizedField, x: &DenseMatrix| {
                let (y, _) = forward(&g.snapshot().unwrap(), x).unwrap();
                y.frobenius_sq()
            };
            let p0 = f.params();
            let fd = finite_difference_gradient(
                |p| {
                    let mut g = f.clone();
                    g.set_params(p).unwrap();
                    value(&g, &x)
                },
                &p0,
                1e-6,
            );
            let scale = fd.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            for (a, b) in gp.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-4 * scale, "theta {theta}: {a} vs {b}");
            }
            let fdx = finite_difference_gradient(
                |v| value(&f, &DenseMatrix::new(3, 2, v.to_vec()).unwrap()),
                x.as_slice(),
                1e-6,
            );
            for (a, b) in gx.as_slice().iter().zip(&fdx) {
                assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
            }
        }
    }
}
