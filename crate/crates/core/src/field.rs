//! The learnable vector field `F(x) = c·x + r·F̃(x)`.
//!
//! `F̃` is an MLP whose weight matrices are divided by their spectral norms
//! (times the activation's derivative bound) in every forward pass, so
//! `Lip(F̃) ≤ 1` for any parameter values. The scalars `c` and `r` come from
//! the localization parameters through the inverse stability function,
//! which pins every Jacobian eigenvalue of `F` inside the disk `B(c, r)`.
//!
//! There are two ways to evaluate a field. [`FieldSnapshot`] freezes the
//! normalized weights and `(c, r)` and evaluates points directly; it is
//! what the solvers use. [`TapeField`] records the same computation on a
//! [`Tape`] so losses can be differentiated with respect to every
//! parameter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::Activation;
use crate::numerics::{
    dot, spectral_norm_warm, DenseMatrix, NodeId, NumericsError, PowerIterate, SolveReport,
    Tape,
};
use crate::par::{map_indexed, Exec};
use crate::stability::{
    disk_sup, stab_inverse_real, StabilityDisk, StabilityError, ThetaScheme,
    DEFAULT_DISK_SAMPLES,
};

/// Spectral-norm estimates below this are not divided out.
pub const NORMALIZATION_FLOOR: f64 = 1e-8;

/// Power-iteration budget for a converged refresh.
const REFRESH_MAX_ITER: usize = 5000;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("field dimension must be at least 1")]
    ZeroDimension,
    #[error("field needs at least one layer")]
    NoLayers,
    #[error("layer {layer}: {detail}")]
    LayerShape { layer: usize, detail: String },
    #[error("input has dimension {got}, field expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("range bound {name} must be positive and finite, got {value}")]
    InvalidRange { name: &'static str, value: f64 },
    #[error("parameter vector has length {got}, field has {expected} parameters")]
    ParamLength { expected: usize, got: usize },
    #[error("localization target {name} = {value} is outside the domain of R_θ⁻¹ at θ = {theta}")]
    Domain {
        name: &'static str,
        value: f64,
        theta: f64,
    },
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One affine map `x ↦ Wx + b` with its power-iteration state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out x in`.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub power: PowerIterate,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    /// Bilinear spectral-norm estimate `uᵀWv` from the stored state.
    pub fn sigma(&self) -> f64 {
        self.power.sigma(&self.weight)
    }
}

/// Composition of affine maps with the activation applied after every
/// hidden layer. The last layer is linear so the field can take any sign
/// and magnitude before the `r` scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpField {
    dim: usize,
    activation: Activation,
    layers: Vec<DenseLayer>,
}

impl MlpField {
    /// Builds the field from `(weight, bias)` pairs and runs the power
    /// iteration to convergence so the normalized view is accurate.
    pub fn new(
        layers: Vec<(DenseMatrix, Vec<f64>)>,
        activation: Activation,
    ) -> Result<Self, FieldError> {
        let first = layers.first().ok_or(FieldError::NoLayers)?;
        let dim = first.0.cols();
        if dim == 0 {
            return Err(FieldError::ZeroDimension);
        }
        let mut prev = dim;
        for (i, (w, b)) in layers.iter().enumerate() {
            if w.cols() != prev {
                return Err(FieldError::LayerShape {
                    layer: i,
                    detail: format!("takes {} inputs but receives {prev}", w.cols()),
                });
            }
            if b.len() != w.rows() {
                return Err(FieldError::LayerShape {
                    layer: i,
                    detail: format!("bias has {} entries for {} outputs", b.len(), w.rows()),
                });
            }
            if !w.is_finite() || b.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFinite.into());
            }
            prev = w.rows();
        }
        if prev != dim {
            return Err(FieldError::LayerShape {
                layer: layers.len() - 1,
                detail: format!("outputs {prev} values, field dimension is {dim}"),
            });
        }
        let layers = layers
            .into_iter()
            .map(|(weight, bias)| {
                let power = PowerIterate::new(weight.rows(), weight.cols());
                DenseLayer {
                    weight,
                    bias,
                    power,
                }
            })
            .collect();
        let mut field = Self {
            dim,
            activation,
            layers,
        };
        field.refresh_spectral_converged(1e-12)?;
        Ok(field)
    }

    /// Gaussian weights with variance `scale² / fan_in` and Gaussian biases
    /// with standard deviation `bias_scale`.
    pub fn random(
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        scale: f64,
        bias_scale: f64,
        seed: u64,
    ) -> Result<Self, FieldError> {
        if dim == 0 || hidden.contains(&0) {
            return Err(FieldError::ZeroDimension);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let k = scale / (fan_in as f64).sqrt();
                let weight = DenseMatrix::from_fn(fan_out, fan_in, |_, _| k * std.sample(&mut rng));
                let bias = (0..fan_out).map(|_| bias_scale * std.sample(&mut rng)).collect();
                (weight, bias)
            })
            .collect();
        Self::new(layers, activation)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Hidden widths, input and output excluded.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(DenseLayer::outputs)
            .collect()
    }

    /// Activation applied after layer `i`.
    pub fn layer_activation(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            Activation::Identity
        } else {
            self.activation
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Weights (row-major) then bias, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), FieldError> {
        if params.len() != self.param_count() {
            return Err(FieldError::ParamLength {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut rest = params;
        for l in &mut self.layers {
            let n = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&rest[..n]);
            rest = &rest[n..];
            let m = l.bias.len();
            l.bias.copy_from_slice(&rest[..m]);
            rest = &rest[m..];
        }
        Ok(())
    }

    /// `iters` warm-started power-iteration steps per layer.
    pub fn refresh_spectral(&mut self, iters: usize) {
        for l in &mut self.layers {
            for _ in 0..iters {
                l.power.step(&l.weight);
            }
        }
    }

    /// Power iteration per layer until the singular-pair residual is below
    /// `tol`. Returns the merged report; non-convergence is flagged, not an
    /// error.
    pub fn refresh_spectral_converged(&mut self, tol: f64) -> Result<SolveReport, FieldError> {
        let mut merged: Option<SolveReport> = None;
        for l in &mut self.layers {
            let (_, rep) = spectral_norm_warm(&l.weight, &mut l.power, tol, REFRESH_MAX_ITER)?;
            merged = Some(match merged {
                Some(m) => m.merge(rep),
                None => rep,
            });
        }
        Ok(merged.expect("at least one layer"))
    }

    fn divisor(&self, i: usize) -> f64 {
        let l = &self.layers[i];
        let bound = self.layer_activation(i).derivative_bound();
        let s = l.sigma();
        if s < NORMALIZATION_FLOOR {
            bound
        } else {
            bound * s
        }
    }

    /// Normalized weights `W / (|σ|·uᵀWv)` using the stored power state.
    pub fn normalized_weights(&self) -> Vec<DenseMatrix> {
        (0..self.layers.len())
            .map(|i| self.layers[i].weight.scale(1.0 / self.divisor(i)))
            .collect()
    }

    /// Refreshes the power state to `tol` and returns the normalized view.
    pub fn normalize_weights(&mut self, tol: f64) -> Result<Vec<DenseMatrix>, FieldError> {
        self.refresh_spectral_converged(tol)?;
        Ok(self.normalized_weights())
    }
}

/// How `(ĉ, L)` depend on the learnable scalars `γ_c, γ_L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LocalizationMode {
    /// `ĉ = ĉ₁ + S(γ_c)(ĉ₂ − ĉ₁)`, `L = L₁ + S(γ_L)(L₂ − L₁)`.
    Ranged {
        c_hat_1: f64,
        c_hat_2: f64,
        l_1: f64,
        l_2: f64,
    },
    /// `ĉ = 1 − S(γ_c)`, `L = 1 − S(γ_L)`; both stay in `(0, 1)`.
    Dissipative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationParams {
    pub mode: LocalizationMode,
    pub gamma_c: f64,
    pub gamma_l: f64,
}

/// Evaluated localization: `F = c·x + r·F̃`, with `ĉ = R_θ(c)` and `L` the
/// target for `R_θ(c + r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub c: f64,
    pub r: f64,
    pub c_hat: f64,
    pub lipschitz: f64,
}

impl LocalizationParams {
    pub fn ranged(c_hat: (f64, f64), lipschitz: (f64, f64)) -> Result<Self, FieldError> {
        let p = Self {
            mode: LocalizationMode::Ranged {
                c_hat_1: c_hat.0,
                c_hat_2: c_hat.1,
                l_1: lipschitz.0,
                l_2: lipschitz.1,
            },
            gamma_c: 0.0,
            gamma_l: 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dissipative() -> Self {
        Self {
            mode: LocalizationMode::Dissipative,
            gamma_c: 0.0,
            gamma_l: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if let LocalizationMode::Ranged {
            c_hat_1,
            c_hat_2,
            l_1,
            l_2,
        } = self.mode
        {
            for (name, value) in [
                ("c_hat_1", c_hat_1),
                ("c_hat_2", c_hat_2),
                ("l_1", l_1),
                ("l_2", l_2),
            ] {
                if !(value.is_finite() && value > 0.0) {
                    return Err(FieldError::InvalidRange { name, value });
                }
            }
        }
        if !self.gamma_c.is_finite() || !self.gamma_l.is_finite() {
            return Err(NumericsError::NonFinite.into());
        }
        Ok(())
    }

    pub fn is_dissipative(&self) -> bool {
        self.mode == LocalizationMode::Dissipative
    }

    /// `(ĉ, L)` for the current `γ_c, γ_L`.
    pub fn targets(&self) -> (f64, f64) {
        use crate::activation::sigmoid;
        match self.mode {
            LocalizationMode::Ranged {
                c_hat_1,
                c_hat_2,
                l_1,
                l_2,
            } => (
                c_hat_1 + sigmoid(self.gamma_c) * (c_hat_2 - c_hat_1),
                l_1 + sigmoid(self.gamma_l) * (l_2 - l_1),
            ),
            // 1 − S(γ) = S(−γ) without cancellation
            LocalizationMode::Dissipative => (sigmoid(-self.gamma_c), sigmoid(-self.gamma_l)),
        }
    }

    /// `c = R_θ⁻¹(ĉ)`, `r = max(0, R_θ⁻¹(L) − c)`.
    pub fn evaluate(&self, theta: f64) -> Result<Localization, FieldError> {
        let (c_hat, lipschitz) = self.targets();
        for (name, value) in [("c_hat", c_hat), ("L", lipschitz)] {
            if theta == 1.0 && value <= 0.0 {
                return Err(FieldError::Domain { name, value, theta });
            }
        }
        let c = stab_inverse_real(theta, c_hat).map_err(|_| FieldError::Domain {
            name: "c_hat",
            value: c_hat,
            theta,
        })?;
        let right = stab_inverse_real(theta, lipschitz).map_err(|_| FieldError::Domain {
            name: "L",
            value: lipschitz,
            theta,
        })?;
        Ok(Localization {
            c,
            r: (right - c).max(0.0),
            c_hat,
            lipschitz,
        })
    }
}

/// Free-function form of [`LocalizationParams::evaluate`].
pub fn localization(p: &LocalizationParams, theta: f64) -> Result<Localization, FieldError> {
    p.evaluate(theta)
}

/// Bound on `sup |R_θ(λ)|` over the eigenvalue disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzBound {
    pub value: f64,
    /// False when the closed-form `max(ĉ, L)` does not apply and `value`
    /// is a sampled estimate.
    pub exact: bool,
}

/// The full field `F(x) = c·x + r·F̃(x)` tied to a θ-scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizedField {
    pub base: MlpField,
    pub localization: LocalizationParams,
    pub scheme: ThetaScheme,
}

impl LocalizedField {
    pub fn new(
        base: MlpField,
        localization: LocalizationParams,
        scheme: ThetaScheme,
    ) -> Result<Self, FieldError> {
        localization.validate()?;
        let scheme = scheme.validated()?;
        let f = Self {
            base,
            localization,
            scheme,
        };
        f.localize()?;
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn theta(&self) -> f64 {
        self.scheme.theta
    }

    pub fn localize(&self) -> Result<Localization, FieldError> {
        self.localization.evaluate(self.scheme.theta)
    }

    /// Network parameters followed by `γ_c, γ_L`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.base.params();
        p.push(self.localization.gamma_c);
        p.push(self.localization.gamma_l);
        p
    }

    pub fn param_count(&self) -> usize {
        self.base.param_count() + 2
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), FieldError> {
        let n = self.param_count();
        if params.len() != n {
            return Err(FieldError::ParamLength {
                expected: n,
                got: params.len(),
            });
        }
        self.base.set_params(&params[..n - 2])?;
        self.localization.gamma_c = params[n - 2];
        self.localization.gamma_l = params[n - 1];
        Ok(())
    }

    /// Frozen view for direct evaluation.
    pub fn snapshot(&self) -> Result<FieldSnapshot, FieldError> {
        let loc = self.localize()?;
        let weights = self.base.normalized_weights();
        let layers = self
            .base
            .layers()
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (l, w))| SnapshotLayer {
                weight: w,
                bias: l.bias.clone(),
                activation: self.base.layer_activation(i),
            })
            .collect();
        Ok(FieldSnapshot {
            dim: self.dim(),
            layers,
            loc,
            scheme: self.scheme,
        })
    }

    /// `F` on every row of `x`.
    pub fn eval(&self, x: &DenseMatrix) -> Result<DenseMatrix, FieldError> {
        self.snapshot()?.eval_batch(x)
    }

    pub fn jacobian(&self, x: &[f64]) -> Result<DenseMatrix, FieldError> {
        let s = self.snapshot()?;
        s.check_dim(x.len())?;
        Ok(s.jacobian(x))
    }

    /// `max(ĉ, L)` when `c > R_θ⁻¹(0)`; otherwise a sampled supremum over
    /// the disk boundary, flagged as inexact.
    pub fn lipschitz_bound(&self) -> Result<LipschitzBound, FieldError> {
        lipschitz_bound(&self.localize()?, self.scheme.theta)
    }

    /// Records the parameters on `tape` as differentiable leaves.
    pub fn record(&self, tape: &mut Tape) -> Result<TapeField, FieldError> {
        TapeField::record(self, tape)
    }
}

pub fn lipschitz_bound(loc: &Localization, theta: f64) -> Result<LipschitzBound, FieldError> {
    let disk = StabilityDisk {
        center: loc.c,
        radius: loc.r,
        c_hat: loc.c_hat,
        lipschitz: loc.lipschitz,
    };
    if loc.r == 0.0 {
        return Ok(LipschitzBound {
            value: loc.c_hat,
            exact: true,
        });
    }
    if disk.sup_identity_applies(theta) {
        return Ok(LipschitzBound {
            value: disk.predicted_sup(),
            exact: true,
        });
    }
    let sup = disk_sup(theta, &disk, DEFAULT_DISK_SAMPLES)?;
    Ok(LipschitzBound {
        value: sup.value,
        exact: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
struct SnapshotLayer {
    weight: DenseMatrix,
    bias: Vec<f64>,
    activation: Activation,
}

/// Normalized weights and `(c, r)` frozen from one parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSnapshot {
    dim: usize,
    layers: Vec<SnapshotLayer>,
    loc: Localization,
    scheme: ThetaScheme,
}

impl FieldSnapshot {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scheme(&self) -> &ThetaScheme {
        &self.scheme
    }

    pub fn theta(&self) -> f64 {
        self.scheme.theta
    }

    pub fn localization(&self) -> &Localization {
        &self.loc
    }

    /// Test double: same network, `(c, r)` replaced.
    pub fn with_localization(&self, c: f64, r: f64) -> Self {
        let mut s = self.clone();
        s.loc.c = c;
        s.loc.r = r;
        s
    }

    pub fn check_dim(&self, got: usize) -> Result<(), FieldError> {
        if got == self.dim {
            Ok(())
        } else {
            Err(FieldError::Dimension {
                expected: self.dim,
                got,
            })
        }
    }

    /// `F̃(x)`.
    pub fn base_eval(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in &self.layers {
            let mut h = l.weight.matvec(&a);
            for (v, b) in h.iter_mut().zip(&l.bias) {
                *v = l.activation.apply(*v + b);
            }
            a = h;
        }
        a
    }

    /// `F̃(x)` and its Jacobian, propagating all `d` tangent directions
    /// through the layers at once.
    pub fn base_eval_with_jacobian(&self, x: &[f64]) -> (Vec<f64>, DenseMatrix) {
        let mut a = x.to_vec();
        let mut tangent = DenseMatrix::identity(self.dim);
        for l in &self.layers {
            let mut h = l.weight.matvec(&a);
            let mut t = l.weight.matmul(&tangent);
            for (i, (v, b)) in h.iter_mut().zip(&l.bias).enumerate() {
                let pre = *v + b;
                *v = l.activation.apply(pre);
                let s = l.activation.derivative(pre);
                if s != 1.0 {
                    t.row_mut(i).iter_mut().for_each(|e| *e *= s);
                }
            }
            a = h;
            tangent = t;
        }
        (a, tangent)
    }

    /// Directional derivative `D F̃(x)·dir`.
    pub fn base_jvp(&self, x: &[f64], dir: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut t = dir.to_vec();
        for l in &self.layers {
            let mut h = l.weight.matvec(&a);
            let mut u = l.weight.matvec(&t);
            for ((v, w), b) in h.iter_mut().zip(u.iter_mut()).zip(&l.bias) {
                let pre = *v + b;
                *v = l.activation.apply(pre);
                *w *= l.activation.derivative(pre);
            }
            a = h;
            t = u;
        }
        t
    }

    pub fn base_jacobian(&self, x: &[f64]) -> DenseMatrix {
        self.base_eval_with_jacobian(x).1
    }

    /// `F(x) = c·x + r·F̃(x)`.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let Localization { c, r, .. } = self.loc;
        if r == 0.0 {
            return x.iter().map(|v| c * v).collect();
        }
        let f = self.base_eval(x);
        x.iter().zip(f).map(|(xi, fi)| c * xi + r * fi).collect()
    }

    /// `F(x)` and `D F(x) = c·I + r·D F̃(x)`.
    pub fn eval_with_jacobian(&self, x: &[f64]) -> (Vec<f64>, DenseMatrix) {
        let Localization { c, r, .. } = self.loc;
        let (f, jb) = self.base_eval_with_jacobian(x);
        let value = x.iter().zip(&f).map(|(xi, fi)| c * xi + r * fi).collect();
        let mut j = jb.scale(r);
        for i in 0..self.dim {
            j.set(i, i, j.get(i, i) + c);
        }
        (value, j)
    }

    pub fn jacobian(&self, x: &[f64]) -> DenseMatrix {
        self.eval_with_jacobian(x).1
    }

    pub fn eval_batch(&self, x: &DenseMatrix) -> Result<DenseMatrix, FieldError> {
        self.eval_batch_with(x, Exec::default())
    }

    pub fn eval_batch_with(&self, x: &DenseMatrix, exec: Exec) -> Result<DenseMatrix, FieldError> {
        self.check_dim(x.cols())?;
        let rows = map_indexed(exec, x.rows(), |p| self.eval(x.row(p)));
        Ok(stack_rows(self.dim, rows))
    }
}

/// Builds an `n x d` matrix from row vectors.
pub(crate) fn stack_rows(d: usize, rows: Vec<Vec<f64>>) -> DenseMatrix {
    let n = rows.len();
    let mut data = Vec::with_capacity(n * d);
    for r in rows {
        debug_assert_eq!(r.len(), d);
        data.extend(r);
    }
    DenseMatrix::from_raw(n, d, data)
}

/// Parameter leaves and derived nodes of a field recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeField {
    dim: usize,
    weights: Vec<NodeId>,
    biases: Vec<NodeId>,
    /// Transposed normalized weights, `in x out`.
    normalized_t: Vec<NodeId>,
    activations: Vec<Activation>,
    gamma_c: NodeId,
    gamma_l: NodeId,
    c: NodeId,
    r: NodeId,
}

impl TapeField {
    fn record(field: &LocalizedField, tape: &mut Tape) -> Result<Self, FieldError> {
        let theta = field.theta();
        // the localization is checked here so the tape never sees a pole
        field.localize()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut normalized_t = Vec::new();
        let mut activations = Vec::new();
        for (i, l) in field.base.layers().iter().enumerate() {
            let act = field.base.layer_activation(i);
            let w = tape.var(l.weight.clone());
            let b = tape.var(DenseMatrix::row_vector(&l.bias));
            let wt = tape.transpose(w);
            let bound = act.derivative_bound();
            let wn_t = if l.sigma() < NORMALIZATION_FLOOR {
                tape.scale(wt, 1.0 / bound)
            } else {
                // σ = uᵀWv with u, v held fixed
                let u = tape.constant(DenseMatrix::row_vector(&l.power.u));
                let v = tape.constant(DenseMatrix::column_vector(&l.power.v));
                let uw = tape.matmul(u, w);
                let sigma = tape.matmul(uw, v);
                let denom = tape.scale(sigma, bound);
                tape.div(wt, denom)
            };
            weights.push(w);
            biases.push(b);
            normalized_t.push(wn_t);
            activations.push(act);
        }
        let gamma_c = tape.var(DenseMatrix::scalar(field.localization.gamma_c));
        let gamma_l = tape.var(DenseMatrix::scalar(field.localization.gamma_l));
        let (c_hat, l_hat) = match field.localization.mode {
            LocalizationMode::Ranged {
                c_hat_1,
                c_hat_2,
                l_1,
                l_2,
            } => {
                let sc = tape.act(gamma_c, Activation::Sigmoid);
                let sl = tape.act(gamma_l, Activation::Sigmoid);
                let a = tape.scale(sc, c_hat_2 - c_hat_1);
                let b = tape.scale(sl, l_2 - l_1);
                (tape.offset(a, c_hat_1), tape.offset(b, l_1))
            }
            LocalizationMode::Dissipative => {
                let nc = tape.scale(gamma_c, -1.0);
                let nl = tape.scale(gamma_l, -1.0);
                (
                    tape.act(nc, Activation::Sigmoid),
                    tape.act(nl, Activation::Sigmoid),
                )
            }
        };
        let c = inverse_on_tape(tape, c_hat, theta);
        let right = inverse_on_tape(tape, l_hat, theta);
        let gap = tape.sub(right, c);
        let r = tape.act(gap, Activation::Relu);
        Ok(Self {
            dim: field.dim(),
            weights,
            biases,
            normalized_t,
            activations,
            gamma_c,
            gamma_l,
            c,
            r,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Leaves in the order of [`LocalizedField::params`].
    pub fn params(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(2 * self.weights.len() + 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(*w);
            out.push(*b);
        }
        out.push(self.gamma_c);
        out.push(self.gamma_l);
        out
    }

    /// The 1x1 node holding `c`.
    pub fn c(&self) -> NodeId {
        self.c
    }

    /// The 1x1 node holding `r`.
    pub fn r(&self) -> NodeId {
        self.r
    }

    fn check(&self, tape: &Tape, x: NodeId) -> Result<(), FieldError> {
        let got = tape.value(x).cols();
        if got != self.dim {
            return Err(FieldError::Dimension {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }

    /// `F̃` on the rows of `x`; also returns the hidden pre-activations.
    fn base_forward(&self, tape: &mut Tape, x: NodeId) -> (NodeId, Vec<NodeId>) {
        let mut a = x;
        let mut pre = Vec::new();
        for i in 0..self.weights.len() {
            let h = tape.matmul(a, self.normalized_t[i]);
            let h = tape.add(h, self.biases[i]);
            a = if self.activations[i] == Activation::Identity {
                h
            } else {
                pre.push(h);
                tape.act(h, self.activations[i])
            };
        }
        (a, pre)
    }

    /// `F̃` on the rows of the `N x d` node `x`.
    pub fn base_eval(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, FieldError> {
        self.check(tape, x)?;
        Ok(self.base_forward(tape, x).0)
    }

    /// `F = c·x + r·F̃` on the rows of the `N x d` node `x`.
    pub fn eval(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, FieldError> {
        self.check(tape, x)?;
        let (f, _) = self.base_forward(tape, x);
        Ok(self.combine(tape, x, f))
    }

    fn combine(&self, tape: &mut Tape, x: NodeId, base: NodeId) -> NodeId {
        let cx = tape.mul(self.c, x);
        let rf = tape.mul(self.r, base);
        tape.add(cx, rf)
    }

    /// Columns of `D F` at every row of `x`: entry `k` is an `N x d` node
    /// whose row `p` is `D F(x_p) e_k`. Built by forward tangent passes, so
    /// the result is differentiable with respect to the parameters.
    pub fn jacobian_columns(&self, tape: &mut Tape, x: NodeId) -> Result<Vec<NodeId>, FieldError> {
        self.check(tape, x)?;
        let n = tape.value(x).rows();
        let (_, pre) = self.base_forward(tape, x);
        let slopes: Vec<NodeId> = pre
            .iter()
            .zip(&self.activations)
            .map(|(h, act)| tape.act_deriv(*h, *act))
            .collect();
        let mut cols = Vec::with_capacity(self.dim);
        for k in 0..self.dim {
            let mut t = tape.row(self.normalized_t[0], k);
            let mut s = 0;
            for i in 0..self.weights.len() {
                if i > 0 {
                    t = tape.matmul(t, self.normalized_t[i]);
                }
                if self.activations[i] != Activation::Identity {
                    t = tape.mul(t, slopes[s]);
                    s += 1;
                }
            }
            if tape.value(t).rows() != n {
                // no hidden layer: the tangent is the same for every row
                let zeros = tape.constant(DenseMatrix::zeros(n, self.dim));
                t = tape.add(zeros, t);
            }
            let mut e = vec![0.0; self.dim];
            e[k] = 1.0;
            let e = tape.constant(DenseMatrix::row_vector(&e));
            cols.push(self.combine(tape, e, t));
        }
        Ok(cols)
    }
}

/// `R_θ⁻¹(w) = (1 − w) / (θ(1 − w) − 1)` on a 1x1 node.
fn inverse_on_tape(tape: &mut Tape, w: NodeId, theta: f64) -> NodeId {
    let neg = tape.scale(w, -1.0);
    let u = tape.offset(neg, 1.0);
    let tu = tape.scale(u, theta);
    let den = tape.offset(tu, -1.0);
    tape.div(u, den)
}

/// `‖W̃‖` for every normalized layer, by a fresh converged power iteration.
pub fn normalized_spectral_norms(field: &MlpField, tol: f64) -> Result<Vec<f64>, FieldError> {
    field
        .normalized_weights()
        .iter()
        .map(|w| {
            crate::numerics::spectral_norm(w, tol, REFRESH_MAX_ITER)
                .map(|(s, _)| s)
                .map_err(FieldError::from)
        })
        .collect()
}

/// `‖F(a) − F(b)‖ / ‖a − b‖`, for Lipschitz spot checks.
pub fn difference_quotient(s: &FieldSnapshot, a: &[f64], b: &[f64]) -> f64 {
    let fa = s.eval(a);
    let fb = s.eval(b);
    let num: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| x - y).collect();
    let den: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    dot(&num, &num).sqrt() / dot(&den, &den).sqrt()
}
