//! Trains a shipped preset and reports the attraction metrics.
//!
//! `cargo run --release --example desk_run -- scurve-1step 2000`

use std::time::Instant;

use dissipative::train::{attraction_profile, train, uniform_cloud, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "scurve-1step".into());
    let mut cfg = TrainConfig::preset(&name)?;
    if let Some(e) = args.next() {
        cfg.epochs = e.parse()?;
    }
    // remaining arguments are `key = value` overrides
    for kv in args {
        let mut table: toml::Table = cfg.to_toml_string().parse()?;
        table.extend(kv.parse::<toml::Table>()?);
        cfg = TrainConfig::from_toml_str(&table.to_string())?;
    }
    let data = cfg.make_data();
    let start = Instant::now();
    let ck = train(&cfg, &data)?;
    let secs = start.elapsed().as_secs_f64();
    let first = ck.history.first().map(|h| h.r_f).unwrap_or(f64::NAN);
    let last = ck.history.last().map(|h| h.r_f).unwrap_or(f64::NAN);
    println!("{name}: {} epochs in {secs:.1}s, r_f {first:.4e} -> {last:.4e}", cfg.epochs);
    let stride = (ck.history.len() / 10).max(1);
    for h in ck.history.iter().step_by(stride).chain(ck.history.last()) {
        println!(
            "{:5} f {:.3e} lam {:.3e} n {:.3e} adj {:.3e} tot {:.3e} lip {:.2}",
            h.epoch, h.r_f, h.r_lambda, h.r_n, h.r_adj, h.total, h.lipschitz_bound
        );
    }
    if let Ok(path) = std::env::var("DESK_OUT") {
        dissipative::train::save_checkpoint(&ck, std::path::Path::new(&path))?;
    }
    let snap = ck.field.snapshot()?;
    println!("localization {:?}", snap.localization());
    let cloud = uniform_cloud(500, 2, -4.0, 4.0, 99);
    for (t, m) in attraction_profile(&snap, &cloud, &data.points, 20, 5)? {
        println!("t={t:2} mean distance {m:.4}");
    }
    Ok(())
}
