// Build a feature flow from two roadside frames and extrapolate it one period.

use featureflow::featurizer::{rasterize, FeatureGrid, GridConfig, RASTER_CHANNELS};
use featureflow::flow::{estimate_derivative, predict, EstimatorParams, FeatureFlow};
use featureflow::geometry::{Box3D, Pose2};
use featureflow::scene::{Actor, Scenario, SensorRole, SensorSpec, Trajectory};

pub fn relative_l2(a: &FeatureGrid, b: &FeatureGrid) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum();
    diff.sqrt() / b.l2_norm()
}

/// Mean relative L2 error of the stale and the extrapolated raster against
/// the next frame, for a lone car at constant velocity.
pub fn prediction_errors(cell: f64, speed: f64, yaw: f64) -> featureflow::Result<(f64, f64)> {
    let sensor = |id| SensorSpec {
        id,
        pose: Pose2::identity(),
        range: 60.0,
        points_per_actor: 2000,
        clutter_points: 0,
        dropout: 0.0,
    };
    let car = Box3D::new([20.0, 0.0, -0.95], [1.8, 4.5, 1.5], yaw, 0);
    let scenario = Scenario {
        actors: vec![Actor::new(car, (speed * yaw.cos(), speed * yaw.sin()), 0.0)],
        infra: sensor(1),
        vehicle: sensor(2),
        vehicle_trajectory: Trajectory::stationary(Pose2::identity()),
        frame_period_ms: 100.0,
        num_frames: 10,
        seed: 11,
        ground_z: -1.7,
        max_speed: 30.0,
    };
    let grid = GridConfig {
        x_range: (0.0, 40.0),
        y_range: (-10.0, 10.0),
        z_range: (-3.0, 1.0),
        cell,
        channels: RASTER_CHANNELS,
    };
    let frame = |i: usize| -> featureflow::Result<FeatureGrid> {
        let t = scenario.frame_time_us(i) as f64 * 1e-6;
        rasterize(&scenario.sample_frame(SensorRole::Infrastructure, t)?.0, &grid)
    };
    let frames = (0..scenario.num_frames)
        .map(frame)
        .collect::<featureflow::Result<Vec<_>>>()?;
    let fd = EstimatorParams::fd_init(RASTER_CHANNELS);
    let (mut stale, mut predicted) = (0.0, 0.0);
    for i in 1..frames.len() - 1 {
        let deriv = estimate_derivative(&fd, &frames[i - 1], &frames[i], 0.1)?;
        let flow = FeatureFlow::new(frames[i].clone(), deriv, scenario.frame_time_us(i))?;
        stale += relative_l2(&frames[i], &frames[i + 1]);
        predicted += relative_l2(&predict(&flow, scenario.frame_time_us(i + 1))?, &frames[i + 1]);
    }
    let n = (frames.len() - 2) as f64;
    Ok((stale / n, predicted / n))
}

pub fn run_example() -> featureflow::Result<()> {
    println!("mean relative L2 to the next frame, 0.8 m cells");
    for speed in [0.5, 1.0, 2.0] {
        for yaw in [0.0, 0.5] {
            let (stale, predicted) = prediction_errors(0.8, speed, yaw)?;
            println!("{speed:3} m/s heading {yaw:3}: stale {stale:.4}  predicted {predicted:.4}");
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> featureflow::Result<()> {
    run_example()
}
