//! Datasets, experiment configs, the training loop and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::Activation;
use crate::field::{FieldError, FieldSnapshot, LocalizationParams, LocalizedField, MlpField};
use crate::layer::{adjoint_path, evolve, LayerError};
use crate::numerics::{norm, DenseMatrix, NodeId, Tape};
use crate::par::{map_indexed, Exec};
use crate::regularize::{
    adjoint_samples, draw_perturbations, normal_direction, point_rng, r_adj_node, r_f_node,
    r_lambda_node, r_n_node, RegError, RegWeights,
};
use crate::stability::{StabilityError, ThetaScheme};

/// Checkpoint format written by this version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Full-batch training up to this many points; minibatches above.
pub const FULL_BATCH_LIMIT: usize = 2000;

pub const DEFAULT_MINIBATCH: usize = 256;

/// Names accepted by [`TrainConfig::preset`].
pub const PRESETS: [&str; 5] = [
    "scurve-1step",
    "scurve-3step",
    "circle-L1",
    "circle-L5",
    "scurve-dissipative",
];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("term {term}: {source}")]
    Term {
        term: &'static str,
        #[source]
        source: RegError,
    },
    #[error("loss became non-finite at epoch {epoch} ({losses})")]
    Diverged { epoch: usize, losses: String },
    #[error("epoch {epoch}: dissipative field has Lipschitz bound {bound} >= 1")]
    NotDissipative { epoch: usize, bound: f64 },
    #[error("point cloud: {0}")]
    Data(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt checkpoint: {source}")]
    Corrupt {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: checkpoint format version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    Version { path: PathBuf, found: u64 },
    #[error("{path}: checkpoint field is invalid: {source}")]
    Invalid {
        path: PathBuf,
        #[source]
        source: FieldError,
    },
}

/// Points in `R^d`, one per row, with an optional scalar label each (the
/// curve parameter or angle for generated data).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: DenseMatrix,
    pub labels: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: DenseMatrix) -> Result<Self, TrainError> {
        if points.cols() == 0 {
            return Err(TrainError::Data("points need at least one coordinate".into()));
        }
        if !points.is_finite() {
            return Err(TrainError::Data("non-finite coordinate".into()));
        }
        Ok(Self {
            points,
            labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }
}

/// Point on the s-curve at parameter `t ∈ [−3π/2, 3π/2]`, before scaling.
pub fn scurve_point(t: f64) -> [f64; 2] {
    let s = if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    };
    [t.sin(), s * (t.cos() - 1.0)]
}

/// The s-curve is scaled by this so it spans `[−2, 2] x [−4, 4]`.
pub const SCURVE_SCALE: f64 = 2.0;

/// `n` points on the scaled s-curve with uniform parameters, plus
/// isotropic Gaussian noise. Labels hold the parameters `t`.
pub fn make_scurve(n: usize, noise: f64, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 1.5 * std::f64::consts::PI;
    let mut ts = Vec::with_capacity(n);
    let points = DenseMatrix::from_fn(n, 2, |_, k| {
        if k == 0 {
            ts.push(rng.gen_range(-half..=half));
        }
        let t = *ts.last().unwrap();
        let e: f64 = rng.sample(StandardNormal);
        SCURVE_SCALE * scurve_point(t)[k] + noise * e
    });
    PointCloud {
        points,
        labels: Some(ts),
    }
}

/// `n` points at evenly spaced angles `φ₀ + 2πk/n` on a circle, with a
/// seeded phase `φ₀`, plus noise. Labels hold the angles.
pub fn make_circle(n: usize, radius: f64, noise: f64, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let angles: Vec<f64> = (0..n)
        .map(|k| phase + std::f64::consts::TAU * k as f64 / n as f64)
        .collect();
    let points = DenseMatrix::from_fn(n, 2, |i, k| {
        let e: f64 = rng.sample(StandardNormal);
        let a = angles[i];
        radius * if k == 0 { a.cos() } else { a.sin() } + noise * e
    });
    PointCloud {
        points,
        labels: Some(angles),
    }
}

/// `n` points uniform on the box `[lo, hi]^d`.
pub fn uniform_cloud(n: usize, d: usize, lo: f64, hi: f64, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::from_fn(n, d, |_, _| rng.gen_range(lo..hi))
}

/// Distance from `x` to the nearest row of `data`.
pub fn nearest_distance(x: &[f64], data: &DenseMatrix) -> f64 {
    (0..data.rows())
        .map(|q| {
            data.row(q)
                .iter()
                .zip(x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Mean over rows of `cloud` of the distance to the nearest data point.
pub fn mean_nearest_distance(cloud: &DenseMatrix, data: &DenseMatrix) -> f64 {
    mean_nearest_distance_with(cloud, data, Exec::default())
}

pub fn mean_nearest_distance_with(cloud: &DenseMatrix, data: &DenseMatrix, exec: Exec) -> f64 {
    if cloud.rows() == 0 {
        return 0.0;
    }
    let d = map_indexed(exec, cloud.rows(), |p| nearest_distance(cloud.row(p), data));
    d.iter().sum::<f64>() / d.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Scurve,
    Circle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Ranged,
    Dissipative,
}

/// Everything needed to reproduce a training run. Serialized as a flat
/// TOML table; see the README for the key reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub name: String,
    // data
    pub dataset: Dataset,
    pub n_points: usize,
    pub noise: f64,
    pub radius: f64,
    pub data_seed: u64,
    // scheme
    pub theta: f64,
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    pub newton_max_iter: usize,
    // architecture
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init_scale: f64,
    pub bias_scale: f64,
    // localization
    pub mode: ModeName,
    pub c_hat_1: f64,
    pub c_hat_2: f64,
    pub l_1: f64,
    pub l_2: f64,
    /// Starting values of the learnable localization parameters.
    pub gamma_c_init: f64,
    pub gamma_l_init: f64,
    // regularizers
    pub w_f: f64,
    pub w_lambda: f64,
    pub w_n: f64,
    pub w_adj: f64,
    pub alpha_max: f64,
    pub eps_scale: f64,
    pub adjoint_steps: usize,
    pub probes: usize,
    pub normalize_normal: bool,
    // optimizer
    pub learning_rate: f64,
    /// Ratio of the last epoch's step size to `learning_rate`; the step size
    /// decays geometrically in between. 1 keeps it constant.
    pub final_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// 0 selects full batch up to [`FULL_BATCH_LIMIT`] points.
    pub batch_size: usize,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = RegWeights::default();
        Self {
            name: "custom".into(),
            dataset: Dataset::Scurve,
            n_points: 500,
            noise: 0.0,
            radius: 3.0,
            data_seed: 7,
            theta: 0.0,
            fp_tol: crate::stability::DEFAULT_FP_TOL,
            fp_max_iter: crate::stability::DEFAULT_FP_MAX_ITER,
            newton_max_iter: crate::stability::DEFAULT_NEWTON_MAX_ITER,
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            init_scale: 1.0,
            bias_scale: 1.0,
            mode: ModeName::Ranged,
            c_hat_1: 0.05,
            c_hat_2: 0.95,
            l_1: 1.0,
            l_2: 5.0,
            gamma_c_init: 0.0,
            gamma_l_init: 0.0,
            w_f: w.w_f,
            w_lambda: w.w_lambda,
            w_n: w.w_n,
            w_adj: w.w_adj,
            alpha_max: w.alpha_max,
            eps_scale: w.eps_scale,
            adjoint_steps: w.adjoint_steps,
            probes: w.probes,
            normalize_normal: w.normalize_normal,
            learning_rate: 1e-3,
            final_lr_ratio: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 3000,
            batch_size: 0,
            power_iters: 1,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Shipped experiment configs.
    pub fn preset(name: &str) -> Result<Self, TrainError> {
        let base = Self {
            name: name.to_string(),
            ..Self::default()
        };
        // the s-curve fits need the larger step to leave the initial plateau
        let scurve = Self {
            learning_rate: 1e-2,
            final_lr_ratio: 0.1,
            epochs: 4000,
            ..base.clone()
        };
        let cfg = match name {
            // single-step walks stop at the fold of the map, so the far
            // field only tightens with a longer run
            "scurve-1step" => Self {
                adjoint_steps: 1,
                epochs: 8000,
                ..scurve
            },
            // with three steps the full adjoint weight feeds back through
            // ever longer walks and training diverges
            "scurve-3step" => Self {
                adjoint_steps: 3,
                w_adj: 0.05,
                ..scurve
            },
            "circle-L1" | "circle-L5" => {
                let l = if name == "circle-L1" { 1.0 } else { 5.0 };
                Self {
                    dataset: Dataset::Circle,
                    n_points: 200,
                    l_1: l,
                    l_2: l,
                    ..base
                }
            }
            "scurve-dissipative" => Self {
                mode: ModeName::Dissipative,
                theta: 1.0,
                // equal ĉ and L would start at r = 0, where F̃ gets no gradient
                gamma_c_init: 1.0,
                gamma_l_init: -1.0,
                ..scurve
            },
            other => return Err(TrainError::UnknownPreset(other.to_string())),
        };
        Ok(cfg)
    }

    pub fn from_toml_str(s: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes as a flat table")
    }

    pub fn scheme(&self) -> Result<ThetaScheme, TrainError> {
        Ok(ThetaScheme {
            theta: self.theta,
            fp_tol: self.fp_tol,
            fp_max_iter: self.fp_max_iter,
            newton_max_iter: self.newton_max_iter,
        }
        .validated()?)
    }

    pub fn weights(&self) -> RegWeights {
        RegWeights {
            w_f: self.w_f,
            w_lambda: self.w_lambda,
            w_n: self.w_n,
            w_adj: self.w_adj,
            alpha_max: self.alpha_max,
            eps_scale: self.eps_scale,
            adjoint_steps: self.adjoint_steps,
            probes: self.probes,
            normalize_normal: self.normalize_normal,
        }
    }

    pub fn localization(&self) -> Result<LocalizationParams, TrainError> {
        Ok(match self.mode {
            ModeName::Ranged => {
                LocalizationParams::ranged((self.c_hat_1, self.c_hat_2), (self.l_1, self.l_2))?
            }
            ModeName::Dissipative => LocalizationParams::dissipative(),
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.scheme()?;
        self.localization()?;
        self.weights()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.n_points == 0 {
            return bad("n_points must be at least 1".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return bad(format!("final_lr_ratio must lie in (0, 1], got {}", self.final_lr_ratio));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(self.radius > 0.0) {
            return bad(format!("radius must be positive, got {}", self.radius));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise must be nonnegative, got {}", self.noise));
        }
        if !(self.gamma_c_init.is_finite() && self.gamma_l_init.is_finite()) {
            return bad("gamma_c_init and gamma_l_init must be finite".into());
        }
        if !(self.init_scale > 0.0 && self.bias_scale >= 0.0) {
            return bad("init_scale must be positive and bias_scale nonnegative".into());
        }
        Ok(())
    }

    /// Adam step size used at `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.final_lr_ratio == 1.0 || self.epochs < 2 {
            return self.learning_rate;
        }
        let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.learning_rate * self.final_lr_ratio.powf(t)
    }

    /// The builtin dataset named by `dataset`.
    pub fn make_data(&self) -> PointCloud {
        match self.dataset {
            Dataset::Scurve => make_scurve(self.n_points, self.noise, self.data_seed),
            Dataset::Circle => make_circle(self.n_points, self.radius, self.noise, self.data_seed),
        }
    }

    /// Freshly initialized field for this config.
    pub fn init_field(&self, dim: usize) -> Result<LocalizedField, TrainError> {
        self.validate()?;
        let base = MlpField::random(
            dim,
            &self.hidden,
            self.activation,
            self.init_scale,
            self.bias_scale,
            self.seed,
        )?;
        let mut loc = self.localization()?;
        loc.gamma_c = self.gamma_c_init;
        loc.gamma_l = self.gamma_l_init;
        Ok(LocalizedField::new(base, loc, self.scheme()?)?)
    }

    fn batch_len(&self, n: usize) -> usize {
        match self.batch_size {
            0 if n <= FULL_BATCH_LIMIT => n,
            0 => DEFAULT_MINIBATCH,
            b => b.min(n),
        }
    }
}

/// Unweighted regularizer values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub r_f: f64,
    pub r_lambda: f64,
    pub r_n: f64,
    pub r_adj: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.r_f, self.r_lambda, self.r_n, self.r_adj, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Tape nodes of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossNodes {
    /// Parameter leaves in [`LocalizedField::params`] order.
    pub params: Vec<NodeId>,
    pub total: NodeId,
    pub r_f: NodeId,
    pub r_lambda: NodeId,
    pub r_n: NodeId,
    pub r_adj: NodeId,
}

fn term<T>(name: &'static str, r: Result<T, RegError>) -> Result<T, TrainError> {
    r.map_err(|source| TrainError::Term { term: name, source })
}

/// Records `w_F·r_f + w_λ·r_lambda + w_n·r_n + w_adj·r_adj` on `tape`.
/// `r_n` and `r_adj` share one draw of `α, n` from `seed`.
pub fn total_loss_nodes(
    field: &LocalizedField,
    snap: &FieldSnapshot,
    tape: &mut Tape,
    x: &DenseMatrix,
    weights: &RegWeights,
    seed: u64,
    exec: Exec,
) -> Result<LossNodes, TrainError> {
    let tf = field.record(tape)?;
    let xn = tape.constant(x.clone());
    let r_f = term("r_f", r_f_node(&tf, tape, xn))?;
    let r_lambda = term("r_lambda", r_lambda_node(&tf, tape, xn, snap.theta()))?;
    let pert = draw_perturbations(snap, x, weights, seed, exec);
    let r_n = term("r_n", r_n_node(&tf, tape, x, &pert))?;
    let samples = adjoint_samples(snap, x, &pert, weights.adjoint_steps, exec);
    let r_adj = term("r_adj", r_adj_node(&tf, tape, &samples, x.rows()))?;
    let parts = [
        (r_f, weights.w_f),
        (r_lambda, weights.w_lambda),
        (r_n, weights.w_n),
        (r_adj, weights.w_adj),
    ];
    let mut total = tape.scale(parts[0].0, parts[0].1);
    for (node, w) in &parts[1..] {
        let s = tape.scale(*node, *w);
        total = tape.add(total, s);
    }
    Ok(LossNodes {
        params: tf.params(),
        total,
        r_f,
        r_lambda,
        r_n,
        r_adj,
    })
}

/// Loss breakdown and gradient with respect to [`LocalizedField::params`].
pub fn total_loss(
    field: &LocalizedField,
    x: &DenseMatrix,
    weights: &RegWeights,
    seed: u64,
) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
    let snap = field.snapshot()?;
    let mut tape = Tape::new();
    let nodes = total_loss_nodes(field, &snap, &mut tape, x, weights, seed, Exec::default())?;
    let grads = tape
        .backward(nodes.total)
        .map_err(|e| TrainError::Term {
            term: "total",
            source: e.into(),
        })?;
    let breakdown = LossBreakdown {
        r_f: tape.scalar(nodes.r_f),
        r_lambda: tape.scalar(nodes.r_lambda),
        r_n: tape.scalar(nodes.r_n),
        r_adj: tape.scalar(nodes.r_adj),
        total: tape.scalar(nodes.total),
    };
    Ok((breakdown, grads.flatten(&nodes.params)))
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub r_f: f64,
    pub r_lambda: f64,
    pub r_n: f64,
    pub r_adj: f64,
    pub total: f64,
    pub lipschitz_bound: f64,
}

/// Trained field with its config and per-epoch history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub field: LocalizedField,
    pub history: Vec<HistoryRow>,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, field: LocalizedField, history: Vec<HistoryRow>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config,
            field,
            history,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self, CheckpointError> {
        let corrupt = |source| CheckpointError::Corrupt {
            path: path.to_path_buf(),
            source,
        };
        let value: serde_json::Value = serde_json::from_str(text).map_err(corrupt)?;
        let found = value.get("format_version").and_then(|v| v.as_u64());
        match found {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => {
                return Err(CheckpointError::Version {
                    path: path.to_path_buf(),
                    found: v,
                })
            }
            None => {
                return Err(corrupt(serde::de::Error::missing_field("format_version")));
            }
        }
        let ckpt: Self = serde_json::from_value(value).map_err(corrupt)?;
        // re-run the constructor checks on the loaded field
        LocalizedField::new(
            ckpt.field.base.clone(),
            ckpt.field.localization,
            ckpt.field.scheme,
        )
        .map_err(|source| CheckpointError::Invalid {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_json()).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_json(&text, path)
}

/// Options for [`train_with`] that do not belong in the config.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub exec: Exec,
    /// Log a progress line every this many epochs (0 disables).
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            exec: Exec::default(),
            log_every: 250,
        }
    }
}

/// Trains a fresh field on `data` and returns its checkpoint.
pub fn train(cfg: &TrainConfig, data: &PointCloud) -> Result<Checkpoint, TrainError> {
    train_with(cfg, data, TrainOptions::default())
}

pub fn train_with(
    cfg: &TrainConfig,
    data: &PointCloud,
    opts: TrainOptions,
) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Data("training data is empty".into()));
    }
    let mut field = cfg.init_field(data.dim())?;
    let weights = cfg.weights();
    let mut params = field.params();
    let mut adam = Adam::new(
        params.len(),
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = data.len();
    let batch = cfg.batch_len(n);
    let dissipative = field.localization.is_dissipative();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        adam.learning_rate = cfg.learning_rate_at(epoch);
        field.base.refresh_spectral(cfg.power_iters);
        let step_seed = rng.next_u64();
        let x = if batch == n {
            data.points.clone()
        } else {
            let rows: Vec<Vec<f64>> = (0..batch)
                .map(|_| data.points.row(rng.gen_range(0..n)).to_vec())
                .collect();
            crate::field::stack_rows(data.dim(), rows)
        };
        let snap = field.snapshot()?;
        let mut tape = Tape::new();
        let nodes =
            total_loss_nodes(&field, &snap, &mut tape, &x, &weights, step_seed, opts.exec)?;
        let losses = LossBreakdown {
            r_f: tape.scalar(nodes.r_f),
            r_lambda: tape.scalar(nodes.r_lambda),
            r_n: tape.scalar(nodes.r_n),
            r_adj: tape.scalar(nodes.r_adj),
            total: tape.scalar(nodes.total),
        };
        let bound = field.lipschitz_bound()?.value;
        if dissipative && !(bound < 1.0) {
            return Err(TrainError::NotDissipative { epoch, bound });
        }
        if !losses.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                losses: format!("{losses:?}"),
            });
        }
        history.push(HistoryRow {
            epoch,
            r_f: losses.r_f,
            r_lambda: losses.r_lambda,
            r_n: losses.r_n,
            r_adj: losses.r_adj,
            total: losses.total,
            lipschitz_bound: bound,
        });
        if opts.log_every > 0 && epoch % opts.log_every == 0 {
            log::info!(
                "epoch {epoch}: total {:.4e} r_f {:.4e} r_lambda {:.4e} r_n {:.4e} r_adj {:.4e} bound {bound:.4}",
                losses.total,
                losses.r_f,
                losses.r_lambda,
                losses.r_n,
                losses.r_adj
            );
        }

        let grads = tape.backward(nodes.total).map_err(|e| TrainError::Term {
            term: "total",
            source: e.into(),
        })?;
        let g = grads.flatten(&nodes.params);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Diverged {
                epoch,
                losses: "non-finite gradient".into(),
            });
        }
        adam.step(&mut params, &g);
        field.set_params(&params)?;
    }

    let rep = field.base.refresh_spectral_converged(1e-12)?;
    if !rep.converged {
        log::warn!(
            "final spectral refresh stopped at residual {:.3e}",
            rep.residual
        );
    }
    if dissipative {
        let bound = field.lipschitz_bound()?.value;
        if !(bound < 1.0) {
            return Err(TrainError::NotDissipative {
                epoch: cfg.epochs,
                bound,
            });
        }
    }
    Ok(Checkpoint::new(cfg.clone(), field, history))
}

/// Mean nearest-data distance of `cloud` after each recorded step of
/// [`evolve`].
pub fn attraction_profile(
    snap: &FieldSnapshot,
    cloud: &DenseMatrix,
    data: &DenseMatrix,
    steps: usize,
    every: usize,
) -> Result<Vec<(usize, f64)>, TrainError> {
    let tr = evolve(snap, cloud, steps, every)?;
    Ok(tr
        .times
        .iter()
        .zip(&tr.states)
        .map(|(t, s)| (*t, mean_nearest_distance(s, data)))
        .collect())
}

/// Adjoint walk of one data point: `x + αn, x_1, …, x_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointWalk {
    pub point: usize,
    /// `None` when the normal direction was degenerate.
    pub normal: Option<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub truncated: bool,
}

/// Adjoint walks from `x + αn` for every row of `data`, with a fixed `α`
/// and `n` drawn from substream `p` of `seed`.
pub fn adjoint_walks(
    snap: &FieldSnapshot,
    data: &DenseMatrix,
    alpha: f64,
    steps: usize,
    eps_scale: f64,
    seed: u64,
) -> Vec<AdjointWalk> {
    map_indexed(Exec::default(), data.rows(), |p| {
        let x = data.row(p);
        let mut rng = point_rng(seed, p);
        let normal = normal_direction(snap, x, eps_scale, true, &mut rng);
        let start: Vec<f64> = match &normal {
            Some(n) => x.iter().zip(n).map(|(a, b)| a + alpha * b).collect(),
            None => x.to_vec(),
        };
        let (states, truncated) = adjoint_path(snap, &start, steps);
        AdjointWalk {
            point: p,
            normal,
            states,
            truncated,
        }
    })
}

/// Mean over walks of the largest nearest-data distance along the walk.
pub fn mean_max_distance(walks: &[AdjointWalk], data: &DenseMatrix) -> f64 {
    if walks.is_empty() {
        return 0.0;
    }
    let per: Vec<f64> = map_indexed(Exec::default(), walks.len(), |i| {
        walks[i]
            .states
            .iter()
            .map(|s| nearest_distance(s, data))
            .fold(0.0, f64::max)
    });
    per.iter().sum::<f64>() / per.len() as f64
}

/// Mean of `‖F(x)‖` over the rows of `x`.
pub fn mean_field_norm(snap: &FieldSnapshot, x: &DenseMatrix) -> f64 {
    if x.rows() == 0 {
        return 0.0;
    }
    (0..x.rows()).map(|p| norm(&snap.eval(x.row(p)))).sum::<f64>() / x.rows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_gradient;

    fn tiny(name: &str) -> TrainConfig {
        TrainConfig {
            n_points: 24,
            hidden: vec![6],
            epochs: 5,
            ..TrainConfig::preset(name).unwrap()
        }
    }

    #[test]
    fn scurve_is_on_the_curve_and_seeded() {
        let a = make_scurve(200, 0.0, 3);
        let ts = a.labels.as_ref().unwrap();
        for (p, t) in ts.iter().enumerate() {
            let q = scurve_point(*t);
            for k in 0..2 {
                assert!((a.points.get(p, k) - SCURVE_SCALE * q[k]).abs() < 1e-12);
                assert!(a.points.get(p, k).abs() <= 4.0 + 1e-12);
            }
        }
        assert_eq!(a, make_scurve(200, 0.0, 3));
        assert_ne!(a, make_scurve(200, 0.0, 4));
        let one = make_scurve(1, 0.0, 9);
        assert_eq!(one, make_scurve(1, 0.0, 9));
    }

    #[test]
    fn circle_points_on_radius_and_evenly_spaced() {
        let c = make_circle(100, 3.0, 0.0, 5);
        for p in 0..100 {
            assert!((norm(c.points.row(p)) - 3.0).abs() < 1e-12);
        }
        let four = make_circle(4, 1.0, 0.0, 2);
        let a = four.labels.unwrap();
        for k in 1..4 {
            assert!((a[k] - a[k - 1] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        }
        assert_eq!(make_circle(10, 2.0, 0.1, 8), make_circle(10, 2.0, 0.1, 8));
    }

    #[test]
    fn presets_parse_and_round_trip_through_toml() {
        for name in PRESETS {
            let cfg = TrainConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let text = cfg.to_toml_string();
            assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
        }
        assert!(matches!(
            TrainConfig::preset("nope"),
            Err(TrainError::UnknownPreset(_))
        ));
        assert!(TrainConfig::from_toml_str("bogus_key = 1").is_err());
        assert!(TrainConfig::from_toml_str("theta = 2.0").is_err());
        let partial = TrainConfig::from_toml_str("epochs = 7\nhidden = [4, 4]").unwrap();
        assert_eq!(partial.epochs, 7);
        assert_eq!(partial.theta, 0.0);
    }

    #[test]
    fn loss_terms_combine_linearly() {
        let cfg = tiny("scurve-1step");
        let data = cfg.make_data();
        let f = cfg.init_field(2).unwrap();
        let zero = RegWeights {
            w_f: 0.0,
            w_lambda: 0.0,
            w_n: 0.0,
            w_adj: 0.0,
            ..cfg.weights()
        };
        let (b, g) = total_loss(&f, &data.points, &zero, 3).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
        let only_f = RegWeights { w_f: 1.0, ..zero };
        let (b, _) = total_loss(&f, &data.points, &only_f, 3).unwrap();
        assert_eq!(b.total, b.r_f);
        let r = crate::regularize::r_f(&f.snapshot().unwrap(), &data.points).unwrap();
        assert!((b.r_f - r).abs() <= 1e-12 * r);

        let w = cfg.weights();
        let (b, g) = total_loss(&f, &data.points, &w, 3).unwrap();
        let expect = w.w_f * b.r_f + w.w_lambda * b.r_lambda + w.w_n * b.r_n + w.w_adj * b.r_adj;
        assert!((b.total - expect).abs() <= 1e-12 * expect);
        let mut sum = vec![0.0; g.len()];
        for single in [
            RegWeights { w_f: w.w_f, ..zero },
            RegWeights {
                w_lambda: w.w_lambda,
                ..zero
            },
            RegWeights { w_n: w.w_n, ..zero },
            RegWeights {
                w_adj: w.w_adj,
                ..zero
            },
        ] {
            let (_, gi) = total_loss(&f, &data.points, &single, 3).unwrap();
            sum.iter_mut().zip(gi).for_each(|(s, v)| *s += v);
        }
        for (a, b) in g.iter().zip(&sum) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
        // and the total against finite differences, with draws held fixed
        let p0 = f.params();
        let snap = f.snapshot().unwrap();
        let pert = draw_perturbations(&snap, &data.points, &w, 3, Exec::default());
        let samples = adjoint_samples(&snap, &data.points, &pert, w.adjoint_steps, Exec::default());
        let fd = finite_difference_gradient(
            |p| {
                let mut h = f.clone();
                h.set_params(p).unwrap();
                let s = h.snapshot().unwrap();
                let rf = crate::regularize::r_f(&s, &data.points).unwrap();
                let rl = crate::regularize::r_lambda(&s, &data.points).unwrap();
                let rn = crate::regularize::r_n(&s, &data.points, &pert).unwrap();
                let ra = s
                    .eval_batch(&samples.points)
                    .unwrap()
                    .add(&samples.offsets)
                    .frobenius_sq()
                    / data.len() as f64;
                w.w_f * rf + w.w_lambda * rl + w.w_n * rn + w.w_adj * ra
            },
            &p0,
            1e-6,
        );
        let scale = fd.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * scale);
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny("scurve-1step")
        };
        let data = cfg.make_data();
        let ck = train(&cfg, &data).unwrap();
        assert!(ck.history.is_empty());
        assert_eq!(ck.field, cfg.init_field(2).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_dissipative_bound_holds() {
        let cfg = tiny("scurve-dissipative");
        let data = cfg.make_data();
        let a = train(&cfg, &data).unwrap();
        let b = train_with(
            &cfg,
            &data,
            TrainOptions {
                exec: Exec::Sequential,
                log_every: 0,
            },
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 5);
        assert!(a.history.iter().all(|h| h.lipschitz_bound < 1.0));
    }

    #[test]
    fn minibatches_when_large() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.batch_len(2000), 2000);
        assert_eq!(cfg.batch_len(2001), DEFAULT_MINIBATCH);
        let cfg = TrainConfig {
            batch_size: 10,
            ..cfg
        };
        assert_eq!(cfg.batch_len(5), 5);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let cfg = tiny("circle-L5");
        let data = cfg.make_data();
        let ck = train(&cfg, &data).unwrap();
        let dir = std::env::temp_dir().join(format!("dissipative-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.json");
        let p2 = dir.join("b.json");
        save_checkpoint(&ck, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded, ck);
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let x = uniform_cloud(100, 2, -5.0, 5.0, 1);
        assert_eq!(
            ck.field.eval(&x).unwrap(),
            loaded.field.eval(&x).unwrap()
        );

        let text = fs::read_to_string(&p1).unwrap();
        fs::write(&p2, &text[..text.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&p2),
            Err(CheckpointError::Corrupt { .. })
        ));
        fs::write(&p2, text.replacen("\"format_version\": 1", "\"format_version\": 99", 1)).unwrap();
        assert!(matches!(
            load_checkpoint(&p2),
            Err(CheckpointError::Version { found: 99, .. })
        ));
        assert!(matches!(
            load_checkpoint(&dir.join("missing.json")),
            Err(CheckpointError::Io { .. })
        ));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut adam = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[2.0, -3.0]);
        // first step has magnitude lr per coordinate
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn nearest_distance_metric() {
        let data = DenseMatrix::from_rows(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        let cloud = DenseMatrix::from_rows(&[[0.0, 1.0], [3.0, 5.0], [6.0, 8.0]]).unwrap();
        assert!((mean_nearest_distance(&cloud, &data) - (1.0 + 1.0 + 5.0) / 3.0).abs() < 1e-15);
    }
}
