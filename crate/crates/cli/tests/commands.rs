use std::fs;
use std::path::Path;
use std::process::Command;

use dissipative::numerics::DenseMatrix;
use dissipative::train::{save_checkpoint, train, TrainConfig};
use dissipative_cli::grid::{field_grid, DEFAULT_BOUNDS};
use dissipative_cli::io::{Meta, PointFile};
use dissipative_cli::report::{adjoint_export, disk_sidecar, eigen_report};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dissipative"))
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A tiny trained checkpoint, fast enough for integration tests.
fn small_model(dir: &Path, preset: &str) -> std::path::PathBuf {
    let mut cfg = TrainConfig::preset(preset).unwrap();
    cfg.epochs = 3;
    cfg.n_points = 40;
    cfg.hidden = vec![8, 8];
    let data = cfg.make_data();
    let ck = train(&cfg, &data).unwrap();
    let path = dir.join(format!("{preset}.json"));
    save_checkpoint(&ck, &path).unwrap();
    path
}

#[test]
fn train_writes_checkpoint_and_reproducible_history() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.toml");
    let mut c = TrainConfig::preset("scurve-1step").unwrap();
    c.n_points = 30;
    c.hidden = vec![6];
    c.epochs = 4;
    fs::write(&cfg, c.to_toml_string()).unwrap();
    let mut histories = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}/model.json"));
        let hist = dir.path().join(format!("hist{run}.csv"));
        run_ok(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--history",
            hist.to_str().unwrap(),
        ]);
        assert!(out.exists());
        histories.push(fs::read_to_string(&hist).unwrap());
    }
    let h = &histories[0];
    assert!(h.contains("epoch,r_f,r_lambda,r_n,r_adj,total,lipschitz_bound\n"));
    assert!(h.contains("# seed: 1\n"));
    assert_eq!(h.lines().filter(|l| !l.starts_with('#')).count(), 5);
    // identical apart from the echoed output paths
    let strip = |s: &str| s.lines().filter(|l| !l.starts_with("# command")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&histories[0]), strip(&histories[1]));
}

#[test]
fn missing_data_file_is_usage_error_naming_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = bin()
        .args([
            "train",
            "--preset",
            "scurve-1step",
            "--data",
            missing.to_str().unwrap(),
            "--out",
            dir.path().join("m.json").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
}

#[test]
fn unknown_preset_and_bad_theta_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let out = bin()
        .args(["train", "--preset", "nope", "--out", dir.path().join("m.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["stability", "--theta", "1.5", "--out", dir.path().join("g.csv").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("bad.json");
    fs::write(&model, "{\"format_version\": 1, \"config\"").unwrap();
    let out = bin()
        .args([
            "field",
            "--model",
            model.to_str().unwrap(),
            "--out",
            dir.path().join("f.csv").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evolve_zero_steps_reproduces_input() {
    let dir = TempDir::new().unwrap();
    let model = small_model(dir.path(), "scurve-1step");
    let pts = dir.path().join("pts.csv");
    let cloud = DenseMatrix::from_rows(&[[0.5, -1.25], [3.0, 2.0], [-0.1, 0.3]]).unwrap();
    PointFile::new(&Meta::new("setup", None), cloud.clone()).write(&pts).unwrap();
    let out = dir.path().join("ev");
    run_ok(&[
        "evolve",
        "--model",
        model.to_str().unwrap(),
        "--points",
        pts.to_str().unwrap(),
        "--steps",
        "0",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    let files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 2, "{files:?}");
    let back = PointFile::read(&out.join("t_0000.csv")).unwrap();
    assert_eq!(back.points, cloud);
}

#[test]
fn evolve_random_cloud_records_times_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let model = small_model(dir.path(), "scurve-1step");
    let run = |name: &str| {
        let out = dir.path().join(name);
        run_ok(&[
            "evolve",
            "--model",
            model.to_str().unwrap(),
            "--random",
            "25",
            "--bounds=-4,4,-4,4",
            "--seed",
            "5",
            "--steps",
            "20",
            "--every",
            "5",
            "--reference",
            "builtin",
            "--out-dir",
            out.to_str().unwrap(),
            "--svg",
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for t in [0, 5, 10, 15, 20] {
        let name = format!("t_{t:04}.csv");
        let pa = PointFile::read(&a.join(&name)).unwrap();
        let pb = PointFile::read(&b.join(&name)).unwrap();
        assert_eq!(pa.points, pb.points);
        assert_eq!(pa.points.rows(), 25);
        assert!(a.join(format!("t_{t:04}.svg")).exists());
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["times"], serde_json::json!([0, 5, 10, 15, 20]));
    assert_eq!(summary["mean_distance"].as_array().unwrap().len(), 5);
    assert_eq!(summary["seed"], 5);
}

#[test]
fn field_grid_channels_and_zero_double() {
    let dir = TempDir::new().unwrap();
    let model = small_model(dir.path(), "scurve-1step");
    let out = dir.path().join("field.csv");
    let svg = dir.path().join("field.svg");
    run_ok(&[
        "field",
        "--model",
        model.to_str().unwrap(),
        "--resolution",
        "11",
        "--out",
        out.to_str().unwrap(),
        "--svg",
        svg.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("i,j,x,y,Fx,Fy,norm_sq\n"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 121);
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let ck = dissipative::train::load_checkpoint(&model).unwrap();
    let zero = ck.field.snapshot().unwrap().with_localization(0.0, 0.0);
    let g = field_grid(&zero, DEFAULT_BOUNDS, 9).unwrap();
    assert!(g.values.iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn stability_masks_and_disk_sidecar() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("stab.csv");
    run_ok(&[
        "stability",
        "--theta",
        "1",
        "--resolution",
        "41",
        "--c-hat",
        "0.5",
        "--lipschitz",
        "0.9",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let (x, y): (f64, f64) = (rec[2].parse().unwrap(), rec[3].parse().unwrap());
        let d = ((x - 1.0).powi(2) + y * y).sqrt();
        if (d - 1.0).abs() > 1e-9 && rec[6].parse::<f64>().unwrap() == 0.0 {
            assert_eq!(rec[5].parse::<f64>().unwrap() == 1.0, d > 1.0, "at ({x}, {y})");
        }
    }
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("stab.disk.json")).unwrap()).unwrap();
    let sup = side["disk_sup"].as_f64().unwrap();
    assert!((sup - 0.9).abs() < 1e-6, "sup {sup}");
    assert!((side["lipschitz_point"].as_f64().unwrap() - (1.0 - 1.0 / 0.9)).abs() < 1e-14);
}

#[test]
fn disk_sidecar_library_matches_max_of_targets() {
    let meta = Meta::new("t", None);
    for (theta, c_hat, l) in [(0.0, 0.3, 0.8), (0.5, 0.2, 3.0), (0.25, 0.9, 1.5)] {
        let s = disk_sidecar(&meta, theta, c_hat, l).unwrap();
        assert!((s.disk_sup.unwrap() - c_hat.max(l)).abs() < 1e-6);
    }
}

#[test]
fn eigencheck_verdicts() {
    let dir = TempDir::new().unwrap();
    let model = small_model(dir.path(), "scurve-dissipative");
    let out = dir.path().join("eig.csv");
    let stdout = run_ok(&[
        "eigencheck",
        "--model",
        model.to_str().unwrap(),
        "--points",
        "builtin",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.starts_with("dissipative: yes"), "{stdout}");

    // c = 4, r = 0: every eigenvalue is 4 and |R_0(4)| = 5
    let ck = dissipative::train::load_checkpoint(&small_model(dir.path(), "circle-L5")).unwrap();
    let snap = ck.field.snapshot().unwrap();
    let bad = snap.with_localization(4.0, 0.0);
    let pts = DenseMatrix::from_rows(&[[0.0, 1.0], [2.0, -1.0]]).unwrap();
    let rep = eigen_report(&bad, &pts);
    assert!(!rep.dissipative());
    assert_eq!(rep.offenders(), vec![0, 1]);

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "x0,x1\n").unwrap();
    let out = dir.path().join("eig_empty.csv");
    run_ok(&[
        "eigencheck",
        "--model",
        model.to_str().unwrap(),
        "--points",
        empty.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1);
}

#[test]
fn adjoint_rows_and_zero_double() {
    let dir = TempDir::new().unwrap();
    let model = small_model(dir.path(), "scurve-1step");
    let out = dir.path().join("adj.csv");
    run_ok(&[
        "adjoint",
        "--model",
        model.to_str().unwrap(),
        "--alpha",
        "0.3",
        "--steps",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("point,step,x0,x1,degenerate,truncated\n"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 40);
    assert!(dir.path().join("adj.json").exists());

    let ck = dissipative::train::load_checkpoint(&model).unwrap();
    let zero = ck.field.snapshot().unwrap().with_localization(0.0, 0.0);
    let pts = DenseMatrix::from_rows(&[[1.0, 2.0], [-0.5, 0.25]]).unwrap();
    let ex = adjoint_export(&zero, &pts, 0.4, 3, 1e-2, 0);
    for (w, p) in ex.walks.iter().zip(0..) {
        assert!(w.normal.is_none());
        assert_eq!(w.states.len(), 4);
        assert!(w.states.iter().all(|s| s == pts.row(p)));
    }
}

#[test]
fn adjoint_rejects_zero_steps() {
    let dir = TempDir::new().unwrap();
    let model = small_model(dir.path(), "scurve-1step");
    let out = bin()
        .args([
            "adjoint",
            "--model",
            model.to_str().unwrap(),
            "--alpha",
            "0.3",
            "--steps",
            "0",
            "--out",
            dir.path().join("a.csv").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
