// Seeded traffic seen by the roadside lidar, binned into a BEV pseudo-image.

use featureflow::featurizer::{rasterize, GridConfig, CH_OCCUPANCY, RASTER_CHANNELS};
use featureflow::geometry::Pose2;
use featureflow::scene::{Scenario, SensorRole, SensorSpec, TrafficSpec, Trajectory};

pub fn demo_scenario(seed: u64) -> Scenario {
    let sensor = |id, range, points_per_actor| SensorSpec {
        id,
        pose: Pose2::identity(),
        range,
        points_per_actor,
        clutter_points: 100,
        dropout: 0.05,
    };
    Scenario {
        actors: TrafficSpec::default().generate(seed, -1.7),
        infra: sensor(1, 60.0, 400),
        vehicle: sensor(2, 25.0, 150),
        vehicle_trajectory: Trajectory::straight(Pose2::new(-5.0, -2.0, 0.0), 4.0, 2.0),
        frame_period_ms: 100.0,
        num_frames: 20,
        seed,
        ground_z: -1.7,
        max_speed: 30.0,
    }
}

pub fn run_example() -> featureflow::Result<()> {
    let scenario = demo_scenario(3);
    let grid = GridConfig {
        x_range: (0.0, 51.2),
        y_range: (-25.6, 25.6),
        z_range: (-3.0, 1.0),
        cell: 0.4,
        channels: RASTER_CHANNELS,
    };
    for frame in [0, 5, 10] {
        let t = scenario.frame_time_us(frame) as f64 * 1e-6;
        let (cloud, boxes) = scenario.sample_frame(SensorRole::Infrastructure, t)?;
        let f = rasterize(&cloud, &grid)?;
        let occupied = f.channel(CH_OCCUPANCY).iter().filter(|&&v| v > 0.0).count();
        println!(
            "frame {frame:2}: {:5} points, {:2} actors in range, {occupied} of {} cells occupied",
            cloud.len(),
            boxes.len(),
            grid.height() * grid.width()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> featureflow::Result<()> {
    run_example()
}
