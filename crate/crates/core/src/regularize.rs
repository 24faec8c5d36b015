//! The four manifold regularizers.
//!
//! - `r_f`: mean `‖F(x)‖²` on the data, so the field vanishes there.
//! - `r_lambda`: mean `‖R_θ(D F(x))‖_F²`, an upper bound on the summed
//!   squared gains of the eigenmodes.
//! - `r_n`: mean `‖F(x + αn) + αn‖²` with `n` the unit gradient of
//!   `‖F‖²` near `x`; rewards a single step that undoes an offset normal
//!   to the data.
//! - `r_adj`: the same target for every point of an adjoint walk started
//!   at `x + αn`.
//!
//! Each term has a plain evaluator returning a number and a `*_node`
//! builder that records it on a [`Tape`] for differentiation. Random
//! draws come from per-point ChaCha substreams of one seed, so results do
//! not depend on how points are scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{stack_rows, FieldError, FieldSnapshot, LocalizedField, TapeField};
use crate::layer::{adjoint_path, LayerError};
use crate::numerics::{
    hutchinson_frobenius_sq, norm, theta_resolvent, DenseMatrix, Lu, NodeId, NumericsError,
    Tape,
};
use crate::par::{map_indexed, Exec};

/// Largest dimension for the exact, differentiable `r_lambda`.
pub const EXACT_LAMBDA_MAX_DIM: usize = 8;

/// Gradient norms below this make the normal direction degenerate.
pub const DEGENERATE_NORMAL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RegError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("I - θJ is singular at point {point}")]
    Singular { point: usize },
    #[error("exact r_lambda supports d <= {EXACT_LAMBDA_MAX_DIM}, got {0}")]
    DimensionTooLarge(usize),
    #[error("invalid regularizer weights: {0}")]
    InvalidWeights(String),
}

/// Term weights and sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    pub w_f: f64,
    pub w_lambda: f64,
    pub w_n: f64,
    pub w_adj: f64,
    /// Offsets `α` are drawn from `(0, alpha_max]`.
    pub alpha_max: f64,
    /// Standard deviation of the jitter `ε` used to pick `n`.
    pub eps_scale: f64,
    pub adjoint_steps: usize,
    /// Rademacher probes for the Hutchinson estimate.
    pub probes: usize,
    /// Scale `n` to unit length (otherwise the raw gradient is used).
    pub normalize_normal: bool,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self {
            w_f: 1.0,
            w_lambda: 0.01,
            w_n: 1.0,
            w_adj: 1.0,
            alpha_max: 0.5,
            eps_scale: 1e-2,
            adjoint_steps: 1,
            probes: 16,
            normalize_normal: true,
        }
    }
}

impl RegWeights {
    pub fn validate(&self) -> Result<(), RegError> {
        for (name, w) in [
            ("w_f", self.w_f),
            ("w_lambda", self.w_lambda),
            ("w_n", self.w_n),
            ("w_adj", self.w_adj),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(RegError::InvalidWeights(format!(
                    "{name} must be finite and nonnegative, got {w}"
                )));
            }
        }
        for (name, v) in [("alpha_max", self.alpha_max), ("eps_scale", self.eps_scale)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(RegError::InvalidWeights(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-point generator: substream `point` of `seed`.
pub fn point_rng(seed: u64, point: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(point as u64);
    rng
}

/// `∇‖F(x + ε)‖² = 2 D F(x + ε)ᵀ F(x + ε)` with `ε ~ N(0, eps_scale² I)`,
/// unit-normalized when `normalize` is set. `None` when the gradient norm
/// is below [`DEGENERATE_NORMAL`].
pub fn normal_direction<R: Rng + ?Sized>(
    f: &FieldSnapshot,
    x: &[f64],
    eps_scale: f64,
    normalize: bool,
    rng: &mut R,
) -> Option<Vec<f64>> {
    let xe: Vec<f64> = x
        .iter()
        .map(|v| v + eps_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let (fv, j) = f.eval_with_jacobian(&xe);
    let g: Vec<f64> = j.tmatvec(&fv).into_iter().map(|v| 2.0 * v).collect();
    let n = norm(&g);
    if !(n >= DEGENERATE_NORMAL) {
        return None;
    }
    Some(if normalize {
        g.into_iter().map(|v| v / n).collect()
    } else {
        g
    })
}

/// Offsets `α` and directions `n` drawn for every row of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbations {
    pub alpha: Vec<f64>,
    /// `None` marks a degenerate direction; that point is not moved.
    pub normals: Vec<Option<Vec<f64>>>,
}

impl Perturbations {
    pub fn degenerate_count(&self) -> usize {
        self.normals.iter().filter(|n| n.is_none()).count()
    }

    /// Rows `x + αn` (or `x` where `n` is degenerate).
    pub fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(x.rows(), x.cols(), |p, k| match &self.normals[p] {
            Some(n) => x.get(p, k) + self.alpha[p] * n[k],
            None => x.get(p, k),
        })
    }
}

/// Draws `α ∈ (0, alpha_max]` and `n` for each row of `x` from substream
/// `p` of `seed`.
pub fn draw_perturbations(
    f: &FieldSnapshot,
    x: &DenseMatrix,
    weights: &RegWeights,
    seed: u64,
    exec: Exec,
) -> Perturbations {
    let draws = map_indexed(exec, x.rows(), |p| {
        let mut rng = point_rng(seed, p);
        // gen() is in [0, 1), so 1 − u is in (0, 1]
        let alpha = weights.alpha_max * (1.0 - rng.gen::<f64>());
        let n = normal_direction(f, x.row(p), weights.eps_scale, weights.normalize_normal, &mut rng);
        (alpha, n)
    });
    let (alpha, normals) = draws.into_iter().unzip();
    Perturbations { alpha, normals }
}

/// Mean of `‖F(x_p)‖²` over rows.
pub fn r_f(f: &FieldSnapshot, x: &DenseMatrix) -> Result<f64, RegError> {
    let fx = f.eval_batch(x)?;
    Ok(fx.frobenius_sq() / x.rows().max(1) as f64)
}

pub fn r_f_node(tf: &TapeField, tape: &mut Tape, x: NodeId) -> Result<NodeId, RegError> {
    let n = tape.value(x).rows().max(1);
    let fx = tf.eval(tape, x)?;
    let s = tape.sum_sq(fx);
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// Exact mean of `‖R_θ(D F(x_p))‖_F²` over rows.
pub fn r_lambda(f: &FieldSnapshot, x: &DenseMatrix) -> Result<f64, RegError> {
    f.check_dim(x.cols())?;
    let mut total = 0.0;
    for p in 0..x.rows() {
        let m = theta_resolvent(&f.jacobian(x.row(p)), f.theta())
            .map_err(|_| RegError::Singular { point: p })?;
        total += m.frobenius_sq();
    }
    Ok(total / x.rows().max(1) as f64)
}

/// Hutchinson estimate of [`r_lambda`] with `probes` Rademacher probes per
/// point, each applying `v ↦ (I − θJ)⁻¹(I + (1 − θ)J)v`.
pub fn r_lambda_hutchinson(
    f: &FieldSnapshot,
    x: &DenseMatrix,
    probes: usize,
    seed: u64,
) -> Result<f64, RegError> {
    f.check_dim(x.cols())?;
    let theta = f.theta();
    let d = f.dim();
    let mut total = 0.0;
    for p in 0..x.rows() {
        let j = f.jacobian(x.row(p));
        let a = DenseMatrix::identity(d).sub(&j.scale(theta));
        let lu = Lu::factor(&a).map_err(|_| RegError::Singular { point: p })?;
        let apply = |v: &[f64]| {
            let jv = j.matvec(v);
            let rhs: Vec<f64> = v.iter().zip(jv).map(|(a, b)| a + (1.0 - theta) * b).collect();
            lu.solve(&rhs)
        };
        total += hutchinson_frobenius_sq(apply, d, probes, &mut point_rng(seed, p));
    }
    Ok(total / x.rows().max(1) as f64)
}

/// Differentiable exact `r_lambda`.
pub fn r_lambda_node(
    tf: &TapeField,
    tape: &mut Tape,
    x: NodeId,
    theta: f64,
) -> Result<NodeId, RegError> {
    if tf.dim() > EXACT_LAMBDA_MAX_DIM {
        return Err(RegError::DimensionTooLarge(tf.dim()));
    }
    let cols = tf.jacobian_columns(tape, x)?;
    let per_point = tape.resolvent_frob_sq(&cols, theta).map_err(|e| match e {
        NumericsError::SingularRow { row } => RegError::Singular { point: row },
        other => other.into(),
    })?;
    Ok(tape.mean(per_point))
}

/// Mean over rows of `‖F(x + αn) + αn‖²`; rows with a degenerate `n`
/// contribute `‖F(x)‖²`.
pub fn r_n(f: &FieldSnapshot, x: &DenseMatrix, pert: &Perturbations) -> Result<f64, RegError> {
    let moved = pert.apply(x);
    let fm = f.eval_batch(&moved)?;
    let target = fm.add(&moved).sub(x);
    Ok(target.frobenius_sq() / x.rows().max(1) as f64)
}

pub fn r_n_node(
    tf: &TapeField,
    tape: &mut Tape,
    x: &DenseMatrix,
    pert: &Perturbations,
) -> Result<NodeId, RegError> {
    let moved = pert.apply(x);
    let offsets = moved.sub(x);
    residual_mean(tf, tape, moved, offsets, x.rows())
}

/// `Σ_p Σ_i ‖F(q_i) + o_i‖² / n` on constant sample rows `q` with offsets `o`.
fn residual_mean(
    tf: &TapeField,
    tape: &mut Tape,
    points: DenseMatrix,
    offsets: DenseMatrix,
    n: usize,
) -> Result<NodeId, RegError> {
    let q = tape.constant(points);
    let o = tape.constant(offsets);
    let fq = tf.eval(tape, q)?;
    let t = tape.add(fq, o);
    let s = tape.sum_sq(t);
    Ok(tape.scale(s, 1.0 / n.max(1) as f64))
}

/// Adjoint walks from `x + αn`, flattened into sample rows and their
/// offsets `x_j − x`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSamples {
    pub points: DenseMatrix,
    pub offsets: DenseMatrix,
    /// Row `p` of the batch owns sample rows `ranges[p].0 .. ranges[p].1`.
    pub ranges: Vec<(usize, usize)>,
    /// Number of walks that stopped before `steps`.
    pub truncated: usize,
}

pub fn adjoint_samples(
    f: &FieldSnapshot,
    x: &DenseMatrix,
    pert: &Perturbations,
    steps: usize,
    exec: Exec,
) -> AdjointSamples {
    let starts = pert.apply(x);
    let walks = map_indexed(exec, x.rows(), |p| adjoint_path(f, starts.row(p), steps));
    let d = x.cols();
    let mut rows = Vec::new();
    let mut offs = Vec::new();
    let mut ranges = Vec::with_capacity(x.rows());
    let mut truncated = 0;
    for (p, (path, cut)) in walks.into_iter().enumerate() {
        truncated += cut as usize;
        let begin = rows.len();
        for q in path {
            offs.push(q.iter().zip(x.row(p)).map(|(a, b)| a - b).collect());
            rows.push(q);
        }
        ranges.push((begin, rows.len()));
    }
    AdjointSamples {
        points: stack_rows(d, rows),
        offsets: stack_rows(d, offs),
        ranges,
        truncated,
    }
}

/// `r_adj` value and the number of truncated walks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointValue {
    pub value: f64,
    pub truncated: usize,
}

/// Mean over rows of `Σ_j ‖F(x_j) + x_j − x‖²` along the adjoint walk
/// `x_0 = x + αn, x_1, …`. Walks that fail to converge are cut at their
/// last converged point.
pub fn r_adj(
    f: &FieldSnapshot,
    x: &DenseMatrix,
    pert: &Perturbations,
    steps: usize,
) -> Result<AdjointValue, RegError> {
    let s = adjoint_samples(f, x, pert, steps, Exec::default());
    let fq = f.eval_batch(&s.points)?;
    let value = fq.add(&s.offsets).frobenius_sq() / x.rows().max(1) as f64;
    Ok(AdjointValue {
        value,
        truncated: s.truncated,
    })
}

/// Differentiable `r_adj`; the walk points are constants on the tape.
pub fn r_adj_node(
    tf: &TapeField,
    tape: &mut Tape,
    samples: &AdjointSamples,
    n: usize,
) -> Result<NodeId, RegError> {
    residual_mean(tf, tape, samples.points.clone(), samples.offsets.clone(), n)
}

/// Value of `build`'s output node and its gradient with respect to
/// [`LocalizedField::params`].
pub fn value_and_grad<B>(f: &LocalizedField, build: B) -> Result<(f64, Vec<f64>), RegError>
where
    B: FnOnce(&TapeField, &mut Tape, &FieldSnapshot) -> Result<NodeId, RegError>,
{
    let snap = f.snapshot()?;
    let mut tape = Tape::new();
    let tf = f.record(&mut tape)?;
    let out = build(&tf, &mut tape, &snap)?;
    let grads = tape.backward(out)?;
    Ok((tape.scalar(out), grads.flatten(&tf.params())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::field::{LocalizationParams, MlpField};
    use crate::numerics::{eigenvalues, finite_difference_gradient};
    use crate::stability::{stab_value, ThetaScheme};

    fn field(seed: u64, theta: f64) -> LocalizedField {
        let base = MlpField::random(2, &[8, 8], Activation::Tanh, 1.5, 0.5, seed).unwrap();
        let loc = LocalizationParams::ranged((0.05, 0.95), (1.0, 5.0)).unwrap();
        let mut f = LocalizedField::new(base, loc, ThetaScheme::new(theta).unwrap()).unwrap();
        f.localization.gamma_c = 0.3 - 0.1 * seed as f64;
        f.localization.gamma_l = -0.5 + 0.2 * seed as f64;
        f
    }

    fn cloud(seed: u64, n: usize) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(n, 2, |_, _| rng.gen_range(-3.0..3.0))
    }

    /// `F(x) = c·x + r·A x` with `A` normalized and no bias.
    fn linear(a: &DenseMatrix, theta: f64, loc: LocalizationParams) -> FieldSnapshot {
        let base = MlpField::new(vec![(a.clone(), vec![0.0; 2])], Activation::Identity).unwrap();
        LocalizedField::new(base, loc, ThetaScheme::new(theta).unwrap())
            .unwrap()
            .snapshot()
            .unwrap()
    }

    fn check_grad(f: &LocalizedField, value: impl Fn(&LocalizedField) -> f64, grad: &[f64]) {
        let p0 = f.params();
        let fd = finite_difference_gradient(
            |p| {
                let mut g = f.clone();
                g.set_params(p).unwrap();
                value(&g)
            },
            &p0,
            1e-6,
        );
        let scale = fd.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        for (a, b) in grad.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_field_terms_vanish() {
        let s = field(1, 0.5).snapshot().unwrap().with_localization(0.0, 0.0);
        let x = cloud(2, 10);
        let w = RegWeights::default();
        assert_eq!(r_f(&s, &x).unwrap(), 0.0);
        let pert = draw_perturbations(&s, &x, &w, 3, Exec::Sequential);
        assert_eq!(pert.degenerate_count(), 10);
        assert_eq!(r_n(&s, &x, &pert).unwrap(), 0.0);
        assert_eq!(r_adj(&s, &x, &pert, 3).unwrap().value, 0.0);
        // J = 0: R_θ(0) = I
        assert!((r_lambda(&s, &x).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_field_value() {
        // single point with F = (1, −1): c·x with x = (1, −1)/c
        let s = field(1, 0.0).snapshot().unwrap();
        let c = s.localization().c;
        let s = s.with_localization(c, 0.0);
        let x = DenseMatrix::row_vector(&[1.0 / c, -1.0 / c]);
        assert!((r_f(&s, &x).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_for_minus_identity_at_half() {
        let s = field(1, 0.5).snapshot().unwrap().with_localization(-1.0, 0.0);
        let x = cloud(4, 7);
        assert!((r_lambda(&s, &x).unwrap() - 2.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn identity_like_normal() {
        let s = field(1, 0.0).snapshot().unwrap().with_localization(1.0, 0.0);
        let x = [1.5, -0.5];
        let mut a = point_rng(9, 0);
        let mut b = point_rng(9, 0);
        let n = normal_direction(&s, &x, 1e-2, true, &mut a).unwrap();
        let eps: Vec<f64> = (0..2).map(|_| 1e-2 * b.sample::<f64, _>(StandardNormal)).collect();
        let xe = [x[0] + eps[0], x[1] + eps[1]];
        let m = norm(&xe);
        assert!((n[0] - xe[0] / m).abs() < 1e-14 && (n[1] - xe[1] / m).abs() < 1e-14);
        assert!((norm(&n) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn perfect_attractor_has_zero_rn() {
        // F = −x: one explicit step lands on the origin, and the target for
        // x = 0 is exactly that
        let s = field(1, 0.0).snapshot().unwrap().with_localization(-1.0, 0.0);
        let x = DenseMatrix::zeros(5, 2);
        let pert = draw_perturbations(&s, &x, &RegWeights::default(), 4, Exec::Sequential);
        assert!(r_n(&s, &x, &pert).unwrap() < 1e-28);
    }

    #[test]
    fn zero_steps_of_adjoint_equal_rn() {
        let f = field(2, 0.25);
        let s = f.snapshot().unwrap();
        let x = cloud(5, 20);
        let w = RegWeights::default();
        let pert = draw_perturbations(&s, &x, &w, 77, Exec::Parallel);
        let a = r_adj(&s, &x, &pert, 0).unwrap().value;
        let b = r_n(&s, &x, &pert).unwrap();
        assert_eq!(a, b);
        assert_eq!(pert, draw_perturbations(&s, &x, &w, 77, Exec::Sequential));
    }

    #[test]
    fn bound_chain_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let theta = rng.gen_range(0.0..1.0);
            let j = DenseMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let m = theta_resolvent(&j, theta).unwrap();
            let lhs: f64 = eigenvalues(&j, 1e-14)
                .unwrap()
                .values
                .iter()
                .map(|z| stab_value(theta, *z).unwrap().norm_sqr())
                .sum();
            assert!(lhs <= m.frobenius_sq() + 1e-8);
        }
    }

    #[test]
    fn contractive_linear_configuration_is_stationary() {
        // zero field on the data point 0, contractive Jacobian
        let a = DenseMatrix::from_rows(&[[0.5, 0.1], [-0.1, 0.5]]).unwrap();
        let s = linear(&a, 1.0, LocalizationParams::dissipative());
        let x = DenseMatrix::zeros(3, 2);
        assert_eq!(r_f(&s, &x).unwrap(), 0.0);
        let l = r_lambda(&s, &x).unwrap();
        assert!(l >= 0.0 && l < 2.0);
        let pert = draw_perturbations(&s, &x, &RegWeights::default(), 1, Exec::Sequential);
        assert!(r_n(&s, &x, &pert).unwrap() >= 0.0);
    }

    #[test]
    fn hutchinson_tracks_exact() {
        let f = field(3, 0.5);
        let s = f.snapshot().unwrap();
        let x = cloud(7, 4);
        let exact = r_lambda(&s, &x).unwrap();
        let est = r_lambda_hutchinson(&s, &x, 20_000, 8).unwrap();
        assert!((est - exact).abs() < 0.05 * exact, "{est} vs {exact}");
    }

    #[test]
    fn node_values_match_plain() {
        let f = field(4, 0.5);
        let s = f.snapshot().unwrap();
        let x = cloud(8, 12);
        let w = RegWeights {
            adjoint_steps: 2,
            ..RegWeights::default()
        };
        let pert = draw_perturbations(&s, &x, &w, 5, Exec::default());
        let samples = adjoint_samples(&s, &x, &pert, 2, Exec::default());
        let mut tape = Tape::new();
        let tf = f.record(&mut tape).unwrap();
        let xn = tape.constant(x.clone());
        let rf = r_f_node(&tf, &mut tape, xn).unwrap();
        let rl = r_lambda_node(&tf, &mut tape, xn, 0.5).unwrap();
        let rn = r_n_node(&tf, &mut tape, &x, &pert).unwrap();
        let ra = r_adj_node(&tf, &mut tape, &samples, 12).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
        assert!(close(tape.scalar(rf), r_f(&s, &x).unwrap()));
        assert!(close(tape.scalar(rl), r_lambda(&s, &x).unwrap()));
        assert!(close(tape.scalar(rn), r_n(&s, &x, &pert).unwrap()));
        assert!(close(tape.scalar(ra), r_adj(&s, &x, &pert, 2).unwrap().value));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, theta) in [(1, 0.0), (2, 0.25), (3, 0.5), (4, 1.0)] {
            let f = field(seed, theta);
            let x = cloud(seed + 20, 6);
            let w = RegWeights {
                adjoint_steps: 2,
                ..RegWeights::default()
            };
            let snap = f.snapshot().unwrap();
            let pert = draw_perturbations(&snap, &x, &w, seed, Exec::default());
            let samples = adjoint_samples(&snap, &x, &pert, 2, Exec::default());

            let (_, g) = value_and_grad(&f, |tf, tape, _| {
                let xn = tape.constant(x.clone());
                r_f_node(tf, tape, xn)
            })
            .unwrap();
            check_grad(&f, |g| r_f(&g.snapshot().unwrap(), &x).unwrap(), &g);

            let (_, g) = value_and_grad(&f, |tf, tape, _| {
                let xn = tape.constant(x.clone());
                r_lambda_node(tf, tape, xn, theta)
            })
            .unwrap();
            check_grad(&f, |g| r_lambda(&g.snapshot().unwrap(), &x).unwrap(), &g);

            // α, n and the walk are held fixed, as in training
            let (_, g) = value_and_grad(&f, |tf, tape, _| r_n_node(tf, tape, &x, &pert)).unwrap();
            check_grad(&f, |g| r_n(&g.snapshot().unwrap(), &x, &pert).unwrap(), &g);

            let (_, g) =
                value_and_grad(&f, |tf, tape, _| r_adj_node(tf, tape, &samples, 6)).unwrap();
            check_grad(
                &f,
                |g| {
                    let s = g.snapshot().unwrap();
                    let fq = s.eval_batch(&samples.points).unwrap();
                    fq.add(&samples.offsets).frobenius_sq() / 6.0
                },
                &g,
            );
        }
    }

    #[test]
    fn weights_validation() {
        assert!(RegWeights::default().validate().is_ok());
        let bad = RegWeights {
            w_n: -1.0,
            ..RegWeights::default()
        };
        assert!(bad.validate().is_err());
        let bad = RegWeights {
            alpha_max: 0.0,
            ..RegWeights::default()
        };
        assert!(bad.validate().is_err());
    }
}
