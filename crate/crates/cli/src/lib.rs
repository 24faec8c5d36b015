//! Command-line front end: training, evolution, and CSV/JSON/SVG exports of
//! vector fields, stability regions, eigenvalue audits and adjoint walks.

pub mod error;
pub mod grid;
pub mod io;
pub mod report;
pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dissipative::field::FieldSnapshot;
use dissipative::layer::evolve;
use dissipative::numerics::DenseMatrix;
use dissipative::train::{
    load_checkpoint, mean_nearest_distance, save_checkpoint, uniform_cloud, Checkpoint,
    PointCloud, TrainConfig,
};
use serde::Serialize;

pub use error::CliError;
use grid::{Bounds, DEFAULT_BOUNDS, DEFAULT_RESOLUTION};
use io::{fmt_f64, write_json, write_text, Meta, PointFile, Table};

#[derive(Debug, Parser)]
#[command(name = "dissipative", version, about = "Dissipative residual layers: training and figure data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a field and write its checkpoint and loss history.
    Train(TrainArgs),
    /// Push a point cloud through repeated forward steps.
    Evolve(EvolveArgs),
    /// Sample a planar field on a grid.
    Field(FieldArgs),
    /// Sample |R_θ| and the stability region on a complex grid.
    Stability(StabilityArgs),
    /// Check Jacobian eigenvalues against the stability region.
    Eigencheck(EigencheckArgs),
    /// Export adjoint walks started from x + αn.
    Adjoint(AdjointArgs),
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["config", "preset"]))]
pub struct TrainArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Shipped config name (scurve-1step, scurve-3step, circle-L1, circle-L5, scurve-dissipative).
    #[arg(long)]
    pub preset: Option<String>,
    /// Point CSV, or `builtin` for the dataset named in the config.
    #[arg(long, default_value = "builtin")]
    pub data: String,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV path [default: <out>.history.csv].
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Override the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvolveArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Start from the points in this CSV.
    #[arg(long, conflicts_with = "random")]
    pub points: Option<PathBuf>,
    /// Start from this many uniform random points inside --bounds.
    #[arg(long)]
    pub random: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_BOUNDS, allow_hyphen_values = true)]
    pub bounds: Bounds,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub every: usize,
    /// Reference cloud for the distance metric: a CSV or `builtin` (the
    /// model's training data).
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also write one SVG scatter plot per recorded time.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct FieldArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BOUNDS, allow_hyphen_values = true)]
    pub bounds: Bounds,
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Quiver and shaded |F|² rendering.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    #[arg(long)]
    pub theta: f64,
    #[arg(long, default_value_t = DEFAULT_BOUNDS, allow_hyphen_values = true)]
    pub bounds: Bounds,
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    pub resolution: usize,
    /// ĉ of the eigenvalue disk; requires --lipschitz.
    #[arg(long, requires = "lipschitz")]
    pub c_hat: Option<f64>,
    /// L of the eigenvalue disk; requires --c-hat.
    #[arg(long, requires = "c_hat")]
    pub lipschitz: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Disk sidecar path [default: <out>.disk.json].
    #[arg(long)]
    pub disk_out: Option<PathBuf>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EigencheckArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Point CSV, or `builtin` for the model's training data.
    #[arg(long)]
    pub points: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AdjointArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Point CSV, or `builtin` for the model's training data.
    #[arg(long, default_value = "builtin")]
    pub points: String,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub steps: usize,
    /// Scale of the jitter used to find normal directions [default: the model's].
    #[arg(long)]
    pub eps_scale: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs one parsed command. `argv` is echoed into export headers.
pub fn run(cli: &Cli, argv: &[String]) -> Result<(), CliError> {
    let command = argv.join(" ");
    match &cli.command {
        Command::Train(a) => cmd_train(a, &command),
        Command::Evolve(a) => cmd_evolve(a, &command),
        Command::Field(a) => cmd_field(a, &command),
        Command::Stability(a) => cmd_stability(a, &command),
        Command::Eigencheck(a) => cmd_eigencheck(a, &command),
        Command::Adjoint(a) => cmd_adjoint(a, &command),
    }
}

fn read_points(path: &Path) -> Result<DenseMatrix, CliError> {
    Ok(PointFile::read(path)?.points)
}

/// `builtin` resolves to the model's own training data.
fn points_or_builtin(spec: &str, cfg: &TrainConfig) -> Result<DenseMatrix, CliError> {
    if spec == "builtin" {
        Ok(cfg.make_data().points)
    } else {
        read_points(Path::new(spec))
    }
}

fn load_model(path: &Path) -> Result<(Checkpoint, FieldSnapshot), CliError> {
    let ck = load_checkpoint(path)?;
    let snap = ck.field.snapshot()?;
    Ok((ck, snap))
}

fn check_dim(snap: &FieldSnapshot, pts: &DenseMatrix, what: &str) -> Result<(), CliError> {
    if pts.rows() > 0 && pts.cols() != snap.dim() {
        return Err(CliError::Usage(format!(
            "{what} have dimension {}, model has dimension {}",
            pts.cols(),
            snap.dim()
        )));
    }
    Ok(())
}

pub fn history_table(meta: &Meta, ck: &Checkpoint) -> Table {
    let columns = ["epoch", "r_f", "r_lambda", "r_n", "r_adj", "total", "lipschitz_bound"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut t = Table::new(meta, columns);
    for h in &ck.history {
        t.push(vec![
            h.epoch.to_string(),
            fmt_f64(h.r_f),
            fmt_f64(h.r_lambda),
            fmt_f64(h.r_n),
            fmt_f64(h.r_adj),
            fmt_f64(h.total),
            fmt_f64(h.lipschitz_bound),
        ]);
    }
    t
}

pub fn cmd_train(a: &TrainArgs, command: &str) -> Result<(), CliError> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            TrainConfig::from_toml_str(&text)?
        }
        (None, Some(name)) => TrainConfig::preset(name)?,
        (None, None) => return Err(CliError::Usage("one of --config or --preset is required".into())),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data = if a.data == "builtin" {
        cfg.make_data()
    } else {
        PointCloud::new(read_points(Path::new(&a.data))?)?
    };
    log::info!("training '{}' on {} points for {} epochs", cfg.name, data.len(), cfg.epochs);
    let ck = dissipative::train::train(&cfg, &data)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    save_checkpoint(&ck, &a.out)?;
    let history = a.history.clone().unwrap_or_else(|| a.out.with_extension("history.csv"));
    history_table(&Meta::new(command, Some(cfg.seed)), &ck).write(&history)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvolveSummary {
    #[serde(flatten)]
    meta: Meta,
    steps: usize,
    every: usize,
    n_points: usize,
    times: Vec<usize>,
    files: Vec<String>,
    mean_distance: Option<Vec<f64>>,
}

pub fn cmd_evolve(a: &EvolveArgs, command: &str) -> Result<(), CliError> {
    let (ck, snap) = load_model(&a.model)?;
    let (start, seed) = match (&a.points, a.random) {
        (Some(p), _) => (read_points(p)?, None),
        (None, Some(n)) => {
            if snap.dim() != 2 {
                return Err(CliError::Usage("--random samples the plane; model is not 2D".into()));
            }
            let mut cloud = uniform_cloud(n, 2, 0.0, 1.0, a.seed);
            let b = a.bounds;
            for p in 0..n {
                let row = cloud.row_mut(p);
                row[0] = b.xmin + (b.xmax - b.xmin) * row[0];
                row[1] = b.ymin + (b.ymax - b.ymin) * row[1];
            }
            (cloud, Some(a.seed))
        }
        (None, None) => return Err(CliError::Usage("one of --points or --random is required".into())),
    };
    check_dim(&snap, &start, "points")?;
    let reference = a
        .reference
        .as_deref()
        .map(|r| points_or_builtin(r, &ck.config))
        .transpose()?;
    if let Some(r) = &reference {
        check_dim(&snap, r, "reference points")?;
    }
    let traj = if start.rows() == 0 {
        dissipative::layer::Trajectory {
            times: vec![0],
            states: vec![start.clone()],
            direction: dissipative::layer::Direction::Forward,
            truncated_at: None,
        }
    } else {
        evolve(&snap, &start, a.steps, a.every)?
    };
    let meta = Meta::new(command, seed);
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    let mut files = Vec::new();
    for (t, state) in traj.times.iter().zip(&traj.states) {
        let name = format!("t_{t:04}.csv");
        let mut pf = PointFile::new(&meta, state.clone());
        pf.comments.push(format!("t: {t}"));
        pf.write(&a.out_dir.join(&name))?;
        if a.svg && state.cols() == 2 {
            let s = svg::points_svg(a.bounds, state, reference.as_ref());
            write_text(&a.out_dir.join(format!("t_{t:04}.svg")), &s)?;
        }
        files.push(name);
    }
    let mean_distance = reference.as_ref().map(|r| {
        traj.states
            .iter()
            .map(|s| mean_nearest_distance(s, r))
            .collect()
    });
    let summary = EvolveSummary {
        meta,
        steps: a.steps,
        every: a.every,
        n_points: start.rows(),
        times: traj.times.clone(),
        files,
        mean_distance,
    };
    write_json(&a.out_dir.join("summary.json"), &summary)
}

pub fn cmd_field(a: &FieldArgs, command: &str) -> Result<(), CliError> {
    let (ck, snap) = load_model(&a.model)?;
    let g = grid::field_grid(&snap, a.bounds, a.resolution)?;
    g.to_table(&Meta::new(command, None)).write(&a.out)?;
    if let Some(path) = &a.svg {
        let data = ck.config.make_data().points;
        let data = (data.cols() == 2).then_some(data);
        write_text(path, &svg::field_svg(&g, data.as_ref()))?;
    }
    Ok(())
}

pub fn cmd_stability(a: &StabilityArgs, command: &str) -> Result<(), CliError> {
    let g = grid::stability_grid(a.theta, a.bounds, a.resolution)?;
    let meta = Meta::new(command, None);
    g.to_table(&meta).write(&a.out)?;
    let mut overlay = None;
    if let (Some(c_hat), Some(l)) = (a.c_hat, a.lipschitz) {
        let side = report::disk_sidecar(&meta, a.theta, c_hat, l)?;
        overlay = Some((side.c, side.r, side.center_point, side.lipschitz_point));
        let path = a.disk_out.clone().unwrap_or_else(|| a.out.with_extension("disk.json"));
        write_json(&path, &side)?;
    }
    if let Some(path) = &a.svg {
        write_text(path, &svg::stability_svg(&g, overlay))?;
    }
    Ok(())
}

pub fn cmd_eigencheck(a: &EigencheckArgs, command: &str) -> Result<(), CliError> {
    let (ck, snap) = load_model(&a.model)?;
    let points = points_or_builtin(&a.points, &ck.config)?;
    check_dim(&snap, &points, "points")?;
    let rep = report::eigen_report(&snap, &points);
    let meta = Meta::new(command, None);
    rep.to_table(&meta, snap.dim()).write(&a.out)?;
    let summary = rep.summary(&meta);
    write_json(&a.out.with_extension("summary.json"), &summary)?;
    println!(
        "dissipative: {} ({} points, {} offenders)",
        if summary.dissipative { "yes" } else { "no" },
        summary.n_points,
        summary.offenders.len()
    );
    Ok(())
}

pub fn cmd_adjoint(a: &AdjointArgs, command: &str) -> Result<(), CliError> {
    if a.steps < 1 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    if !(a.alpha > 0.0 && a.alpha.is_finite()) {
        return Err(CliError::Usage(format!("--alpha must be positive, got {}", a.alpha)));
    }
    let (ck, snap) = load_model(&a.model)?;
    let points = points_or_builtin(&a.points, &ck.config)?;
    check_dim(&snap, &points, "points")?;
    let eps = a.eps_scale.unwrap_or(ck.config.eps_scale);
    let ex = report::adjoint_export(&snap, &points, a.alpha, a.steps, eps, a.seed);
    let meta = Meta::new(command, Some(a.seed));
    ex.to_table(&meta, snap.dim()).write(&a.out)?;
    let summary = ex.summary(&meta, a.alpha, a.steps);
    if !summary.degenerate.is_empty() {
        log::warn!("{} points had a degenerate normal direction", summary.degenerate.len());
    }
    write_json(&a.out.with_extension("json"), &summary)
}
