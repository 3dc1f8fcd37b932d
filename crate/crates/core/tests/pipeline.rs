mod common;

use common::*;
use featureflow::cli::{run_records, score_run, simulate, ExperimentConfig};
use featureflow::codec::{transmission_cost, TransmissionForm};
use featureflow::featurizer::rasterize;
use featureflow::fusion::{detect, run_mode, FusionMode};
use featureflow::metrics::IouMode;
use featureflow::scene::SensorRole;

fn small() -> ExperimentConfig {
    ExperimentConfig::parse(&small_config_text()).unwrap()
}

#[test]
fn early_and_late_bytes_follow_the_cost_formulas() {
    let cfg = small();
    let scenario = cfg.scenario();
    let theta = cfg.estimator().unwrap();
    let link = cfg.link(300.0);
    let early = run_mode(FusionMode::EarlyFusion, &scenario, &link, &theta, &cfg.pipeline()).unwrap();
    let late = run_mode(FusionMode::LateFusion, &scenario, &link, &theta, &cfg.pipeline()).unwrap();
    for (e, l) in early.frames.iter().zip(&late.frames) {
        let cloud = scenario
            .sample_frame(SensorRole::Infrastructure, e.t_infra_us as f64 * 1e-6)
            .unwrap()
            .0;
        assert_eq!(
            e.ab_bytes,
            transmission_cost(TransmissionForm::Early {
                num_points: cloud.len()
            })
        );
        let dets = detect(&rasterize(&cloud, &cfg.grid.infra.grid()).unwrap(), &cfg.detector);
        assert_eq!(
            l.ab_bytes,
            transmission_cost(TransmissionForm::Late {
                num_detections: dets.len()
            })
        );
    }
}

#[test]
fn middle_modes_agree_without_latency() {
    let mut cfg = small();
    cfg.channel.jitter = false;
    let scenario = cfg.scenario();
    let theta = cfg.estimator().unwrap();
    let link = cfg.link(0.0);
    let runs: Vec<_> = [
        FusionMode::MiddleNoPrediction,
        FusionMode::MiddleFlowInfra,
        FusionMode::MiddleFlowVehicle,
    ]
    .into_iter()
    .map(|m| run_mode(m, &scenario, &link, &theta, &cfg.pipeline()).unwrap())
    .collect();
    for r in &runs[1..] {
        for (a, b) in runs[0].frames.iter().zip(&r.frames) {
            assert_eq!(a.detections, b.detections, "{:?} frame {}", r.mode, a.frame);
        }
    }
}

#[test]
fn counters_for_vehicle_side_estimation() {
    let cfg = small();
    let scenario = cfg.scenario();
    let theta = cfg.estimator().unwrap();
    let link = cfg.link(300.0);
    let infra = run_mode(FusionMode::MiddleFlowInfra, &scenario, &link, &theta, &cfg.pipeline()).unwrap();
    let vehicle = run_mode(FusionMode::MiddleFlowVehicle, &scenario, &link, &theta, &cfg.pipeline()).unwrap();
    assert_eq!((infra.storage_counter, infra.compute_counter), (1, 0));
    assert_eq!(vehicle.storage_counter, scenario.num_frames);
    assert_eq!(vehicle.compute_counter, scenario.num_frames);
}

#[test]
fn sweep_has_one_row_per_cell_and_bounded_scores() {
    let cfg = small();
    let rows = simulate(&cfg, &cfg.estimator().unwrap()).unwrap();
    assert_eq!(rows.len(), cfg.modes.len() * cfg.channel.latencies_ms.len());
    for mode in &cfg.modes {
        for &latency in &cfg.channel.latencies_ms {
            let row = rows
                .iter()
                .find(|r| r.mode == *mode && r.latency_ms == latency)
                .unwrap();
            assert_eq!(row.map.len(), 4);
            assert!(row.map.iter().all(|m| (0.0..=1.0).contains(&m.map)));
            assert!(row.ab_bytes >= 0.0);
        }
    }
}

#[test]
fn interchange_records_score_like_the_run() {
    let cfg = small();
    let scenario = cfg.scenario();
    let theta = cfg.estimator().unwrap();
    let run = run_mode(
        FusionMode::MiddleFlowInfra,
        &scenario,
        &cfg.link(200.0),
        &theta,
        &cfg.pipeline(),
    )
    .unwrap();
    let (preds, gts) = run_records(&run);
    let dir = tempfile::tempdir().unwrap();
    let (p, g) = (dir.path().join("pred.jsonl"), dir.path().join("gt.jsonl"));
    featureflow::cli::write_frames(&p, &preds).unwrap();
    featureflow::cli::write_frames(&g, &gts).unwrap();
    assert_eq!(featureflow::cli::read_frames(&p).unwrap(), preds);
    let cfg_path = dir.path().join("cfg.toml");
    std::fs::write(&cfg_path, small_config_text()).unwrap();
    let scored = featureflow::cli::cmd_eval(&p, &g, &cfg_path).unwrap();
    let row = score_run(&run, 200.0, &cfg.eval).unwrap();
    assert_eq!(scored.map_for(IouMode::Bev, 0.5), row.map_for(IouMode::Bev, 0.5));
    assert_eq!(scored.map_for(IouMode::ThreeD, 0.7), row.map_for(IouMode::ThreeD, 0.7));
}
