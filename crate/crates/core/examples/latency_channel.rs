// Which roadside frame reaches the vehicle, and when.

use featureflow::channel::{average_bytes, pair_jitter, transmit, LatencyLink};

pub fn run_example() -> featureflow::Result<()> {
    for latency_ms in [0.0, 150.0, 300.0] {
        let link = LatencyLink {
            latency_ms,
            seed: 4,
            ..Default::default()
        };
        link.validate()?;
        let row: Vec<String> = (0..6)
            .map(|n| {
                format!(
                    "{}->{} ({:+.1} ms)",
                    n,
                    link.delivered_frame_index(n),
                    pair_jitter(&link, n)
                )
            })
            .collect();
        println!("{latency_ms:5} ms: {}", row.join("  "));
    }
    let link = LatencyLink::default();
    let sizes: Vec<usize> = [120usize, 96, 150]
        .iter()
        .map(|&len| transmit(&link, vec![0; len], 38, 0).ab_bytes)
        .collect();
    println!(
        "payload bytes without headers {sizes:?}, average {}",
        average_bytes(&sizes)
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> featureflow::Result<()> {
    run_example()
}
