// Self-supervised training of the derivative estimator on roadside frames.

use std::path::Path;

use featureflow::cli::{train_flow, ExperimentConfig};

pub fn run_example() -> featureflow::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/demo.toml");
    let (cfg, _) = ExperimentConfig::load(&path)?;
    let file = train_flow(&cfg)?;
    let summary = file.training.expect("training summary");
    for (epoch, loss) in summary.log.epoch_mean_loss.iter().enumerate() {
        println!("epoch {epoch:2}  mean loss {loss:.6}");
    }
    println!(
        "held-out loss {:.6} -> {:.6} over {} pairs",
        summary.initial_heldout_loss, summary.final_heldout_loss, summary.heldout_pairs
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> featureflow::Result<()> {
    run_example()
}
