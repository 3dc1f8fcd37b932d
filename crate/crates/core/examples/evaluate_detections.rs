// Score a handful of detections with 11-point AP.

use featureflow::geometry::Box3D;
use featureflow::metrics::{average_precision, evaluate_run, EvalConfig, EvalFrame, IouMode};

pub fn run_example() -> featureflow::Result<()> {
    let car = |x: f64, y: f64| Box3D::new([x, y, -0.95], [1.8, 4.5, 1.5], 0.0, 0);
    let frames = vec![
        EvalFrame {
            ground_truth: vec![car(10.0, 0.0), car(25.0, 4.0)],
            predictions: vec![
                car(10.2, 0.1).with_confidence(0.9),
                car(40.0, -3.0).with_confidence(0.8),
            ],
        },
        EvalFrame {
            ground_truth: vec![car(12.0, 0.0)],
            predictions: vec![car(12.0, 0.4).with_confidence(0.6), car(25.5, 4.0).with_confidence(0.3)],
        },
    ];
    let result = evaluate_run(&frames, &EvalConfig::default(), &[320, 352])?;
    for m in &result.map {
        println!("mAP {:>3} @ {:.1}: {:.4}", m.mode.name(), m.threshold, m.map);
    }
    println!("average bytes: {}", result.ab_mean);
    println!(
        "[FP, TP] with 2 ground truths: {:.4}",
        average_precision(&[false, true], 2)
    );
    assert!(result.map_for(IouMode::Bev, 0.5).is_some());
    Ok(())
}

#[allow(dead_code)]
fn main() -> featureflow::Result<()> {
    run_example()
}
