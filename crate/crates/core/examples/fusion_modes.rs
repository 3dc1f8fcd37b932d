// Every fusion mode on the demo scenario at one latency.
//
// `cargo run --release --example fusion_modes -- 300`

use std::path::Path;

use featureflow::cli::{score_run, ExperimentConfig};
use featureflow::fusion::{run_mode, FusionMode};
use featureflow::metrics::IouMode;

pub fn run_at(latency_ms: f64) -> featureflow::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/demo.toml");
    let (cfg, _) = ExperimentConfig::load(&path)?;
    let scenario = cfg.scenario();
    let theta = cfg.estimator()?;
    println!(
        "{:<20} {:>10} {:>10} {:>5} {:>5}",
        "mode", "bev@0.5", "AB", "SCC", "CCC"
    );
    for mode in FusionMode::ALL {
        let run = run_mode(mode, &scenario, &cfg.link(latency_ms), &theta, &cfg.pipeline())?;
        let row = score_run(&run, latency_ms, &cfg.eval)?;
        println!(
            "{:<20} {:>10.4} {:>10.1} {:>5} {:>5}",
            mode.name(),
            row.map_for(IouMode::Bev, 0.5).unwrap_or(f64::NAN),
            row.ab_bytes,
            row.storage_counter,
            row.compute_counter
        );
    }
    Ok(())
}

pub fn run_example() -> featureflow::Result<()> {
    run_at(300.0)
}

#[allow(dead_code)]
fn main() -> featureflow::Result<()> {
    let latency = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300.0);
    run_at(latency)
}
