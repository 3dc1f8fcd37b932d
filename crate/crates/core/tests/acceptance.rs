//! One line per acceptance criterion; exits non-zero if any fails.

mod common;

use std::time::Instant;

use common::*;
use featureflow::cli::{cmd_simulate, train_flow, Report};
use featureflow::codec::{
    apply_mask, decode_packet, dequantize, encode_packet, quantize, transmission_cost, BitMask, PacketOptions,
    Quantizer, TransmissionForm,
};
use featureflow::featurizer::{FeatureGrid, GridConfig};
use featureflow::flow::{EstimatorParams, FeatureFlow, PreparedPair};
use featureflow::fusion::{run_mode, FusionMode};
use featureflow::geometry::{bev_iou, Box3D, Pose2};
use featureflow::metrics::{average_precision, evaluate_run, EvalConfig, EvalFrame, IouMode, Roi};
use rand::Rng;
use rayon::prelude::*;

type Outcome = (bool, String);

fn grid(c: usize, h: usize, w: usize) -> GridConfig {
    GridConfig {
        x_range: (0.0, w as f64),
        y_range: (0.0, h as f64),
        z_range: (-3.0, 1.0),
        cell: 1.0,
        channels: c,
    }
}

fn random_feature(r: &mut rand_chacha::ChaCha8Rng, c: usize, h: usize, w: usize, scale: f32) -> FeatureGrid {
    FeatureGrid::from_data(
        grid(c, h, w),
        (0..c * h * w).map(|_| r.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn transmission_costs() -> Outcome {
    let got = [
        transmission_cost(TransmissionForm::Early { num_points: 100_000 }),
        transmission_cost(TransmissionForm::Late { num_detections: 10 }),
        transmission_cost(TransmissionForm::MiddleFeature { dims: (24, 36, 36) }),
        transmission_cost(TransmissionForm::MiddleFlow {
            dims: (12, 36, 36),
            bits: None,
        }),
        transmission_cost(TransmissionForm::AttentionMask { hm: 36, wm: 36 }),
    ];
    let want = [1_600_000, 320, 124_416, 124_416, 162];
    (got == want, format!("{got:?} (expected {want:?})"))
}

fn quantized_packet_size() -> Outcome {
    let mut r = rng(2);
    let flow = FeatureFlow::new(
        random_feature(&mut r, 12, 36, 36, 1.0),
        random_feature(&mut r, 12, 36, 36, 1.0),
        0,
    )
    .unwrap();
    let opts = PacketOptions {
        bits: Some(6),
        mask: None,
        include_derivative: true,
    };
    let ab = encode_packet(&flow, &Pose2::identity(), &opts).unwrap().ab_bytes;
    let rounded = 1.2e5 * 6.0 / 32.0;
    let off = (ab as f64 / rounded - 1.0).abs();
    (
        ab == 23_336 && off <= 0.04,
        format!("{ab} B, {:.2}% from (1.2e5)*b/32", off * 100.0),
    )
}

fn quantization_properties() -> Outcome {
    let results: Vec<(u8, bool, String)> = (2u8..=16)
        .into_par_iter()
        .map(|bits| {
            let mut r = rng(100 + bits as u64);
            let values: Vec<f32> = (0..100_000).map(|_| r.gen_range(-50.0f32..50.0)).collect();
            let alpha = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let q = Quantizer::for_alpha(alpha, bits).unwrap();
            let half = q.scale as f64 / 2.0;
            let mut worst = 0.0f64;
            let mut idempotent = true;
            for &x in &values {
                worst = worst.max((q.quantize_value(x) - x as f64).abs());
                let c = q.code(x);
                idempotent &= q.code(q.value(c)) == c;
            }
            // packet round trip, with and without a mask
            let g = grid(4, 16, 16);
            let base = FeatureGrid::from_data(g, values[..1024].to_vec()).unwrap();
            let deriv = FeatureGrid::from_data(g, values[1024..2048].to_vec()).unwrap();
            let flow = FeatureFlow::new(base.clone(), deriv.clone(), 99).unwrap();
            let mut mask = BitMask::zeros(4, 4);
            for k in 0..16 {
                mask.set(k / 4, k % 4, r.gen_bool(0.5));
            }
            let mut exact = true;
            for m in [None, Some(mask.clone())] {
                let opts = PacketOptions {
                    bits: Some(bits),
                    mask: m.clone(),
                    include_derivative: true,
                };
                let back = decode_packet(&encode_packet(&flow, &Pose2::identity(), &opts).unwrap().bytes)
                    .unwrap()
                    .into_flow(g)
                    .unwrap();
                let ref_base = dequantize(&quantize(&base, bits).unwrap()).unwrap();
                let mut ref_deriv =
                    FeatureGrid::from_data(g, dequantize(&quantize(&deriv, bits).unwrap()).unwrap()).unwrap();
                if let Some(m) = &m {
                    ref_deriv = apply_mask(&ref_deriv, m).unwrap();
                }
                exact &= back.base.data() == &ref_base[..] && back.deriv.data() == ref_deriv.data();
            }
            let ok = worst <= half && idempotent && exact;
            (
                bits,
                ok,
                format!("b={bits}: max err {worst:.3e} <= {half:.3e}, idempotent {idempotent}, round trip {exact}"),
            )
        })
        .collect();
    let failed: Vec<&String> = results.iter().filter(|r| !r.1).map(|r| &r.2).collect();
    if failed.is_empty() {
        (
            true,
            "bound, idempotence and packet round trip hold for b = 2..16 over 1e5 values each".into(),
        )
    } else {
        (false, format!("{failed:?}"))
    }
}

fn random_boxes(r: &mut rand_chacha::ChaCha8Rng, n: usize, confidences: Option<&[f64]>) -> Vec<Box3D> {
    (0..n)
        .map(|_| {
            let class = r.gen_range(0..2);
            let b = random_box(r, 2.5, class);
            match confidences {
                Some(c) => b.with_confidence(c[r.gen_range(0..c.len())]),
                None => b,
            }
        })
        .collect()
}

fn ap_oracle() -> Outcome {
    let hand = average_precision(&[false, true], 2);
    let cfg = EvalConfig {
        roi: Roi {
            x_min: -100.0,
            y_min: -100.0,
            x_max: 100.0,
            y_max: 100.0,
        },
        ..EvalConfig::default()
    };
    let confidences = [0.2, 0.4, 0.5, 0.6, 0.8, 0.9];
    let mut mismatches = 0;
    for case in 0..500u64 {
        let mut r = rng(10_000 + case);
        let n_frames = r.gen_range(1..=3);
        let frames: Vec<EvalFrame> = (0..n_frames)
            .map(|_| {
                let n_pred = r.gen_range(0..=4);
                let n_gt = r.gen_range(0..=4);
                EvalFrame {
                    predictions: random_boxes(&mut r, n_pred, Some(&confidences)),
                    ground_truth: random_boxes(&mut r, n_gt, None),
                }
            })
            .collect();
        let got = evaluate_run(&frames, &cfg, &[]).unwrap();
        for mode in [IouMode::Bev, IouMode::ThreeD] {
            for t in [0.5, 0.7] {
                let want = brute_force_map(&frames, |a, b| mode.iou(a, b).unwrap(), t);
                if got.map_for(mode, t) != Some(want) {
                    mismatches += 1;
                }
            }
        }
    }
    let ok = mismatches == 0 && hand == 3.0 / 11.0;
    (
        ok,
        format!("{mismatches} mismatches over 500 instances x 4 settings; [FP, TP] with 2 GT = {hand:.6}"),
    )
}

fn rotated_iou_oracle() -> Outcome {
    let worst = (0..1000u64)
        .map(|i| {
            let mut r = rng(50_000 + i);
            let a = random_box(&mut r, 2.0, 0);
            let b = random_box(&mut r, 2.0, 0);
            (bev_iou(&a, &b).unwrap() - monte_carlo_bev_iou(&a, &b, 1_000_000, i)).abs()
        })
        .fold(0.0f64, f64::max);
    let a = Box3D::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0);
    let square = bev_iou(
        &a,
        &Box3D {
            yaw: std::f64::consts::FRAC_PI_4,
            ..a
        },
    )
    .unwrap();
    let ok = worst <= 0.005 && (square - std::f64::consts::FRAC_1_SQRT_2).abs() <= 0.001;
    (
        ok,
        format!("max |exact - sampled| {worst:.4} over 1000 pairs; 45 deg square {square:.4}"),
    )
}

fn gradient_check() -> Outcome {
    let mut worst = 0.0f64;
    for draw in 0..100u64 {
        let mut r = rng(70_000 + draw);
        let c = r.gen_range(1..=4);
        let pair = PreparedPair {
            prev: random_feature(&mut r, c, 4, 4, 2.0),
            curr: random_feature(&mut r, c, 4, 4, 2.0),
            future: random_feature(&mut r, c, 4, 4, 2.0),
            dt: 0.1,
            horizon: 0.1 * r.gen_range(1..=2) as f64,
        };
        let mut theta = EstimatorParams::zeros(c);
        for i in 0..theta.num_params() {
            theta.set_flat(i, r.gen_range(-0.5..0.5));
        }
        let (_, grad) = pair.loss_and_gradient(&theta).unwrap();
        for _ in 0..5 {
            let i = r.gen_range(0..theta.num_params());
            let h = 1e-4;
            let mut plus = theta.clone();
            plus.set_flat(i, theta.get_flat(i) + h);
            let mut minus = theta.clone();
            minus.set_flat(i, theta.get_flat(i) - h);
            let numeric = (pair.loss(&plus).unwrap() - pair.loss(&minus).unwrap()) / (2.0 * h);
            let analytic = grad.get_flat(i);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    (
        worst <= 1e-4,
        format!("max relative error {worst:.2e} over 100 draws x 5 coordinates"),
    )
}

fn bev50(report: &Report, mode: FusionMode, latency: f64) -> f64 {
    report
        .row(mode, latency)
        .and_then(|r| r.map_for(IouMode::Bev, 0.5))
        .unwrap_or(f64::NAN)
}

fn prediction_benefit(report: &Report) -> Outcome {
    let latencies = &report.config.channel.latencies_ms;
    let none: Vec<f64> = latencies
        .iter()
        .map(|&l| bev50(report, FusionMode::MiddleNoPrediction, l))
        .collect();
    let gaps: Vec<f64> = [200.0, 300.0]
        .iter()
        .map(|&l| bev50(report, FusionMode::MiddleFlowInfra, l) - bev50(report, FusionMode::MiddleNoPrediction, l))
        .collect();
    let monotone = none.windows(2).all(|w| w[1] <= w[0]);
    let ok = monotone && gaps.iter().all(|&g| g > 0.0);
    let series: Vec<String> = none.iter().map(|v| format!("{v:.3}")).collect();
    (
        ok,
        format!(
            "gap at 200/300 ms {:+.3}/{:+.3}; no-prediction over 0..500 ms [{}]",
            gaps[0],
            gaps[1],
            series.join(", ")
        ),
    )
}

fn zero_latency_identity() -> Outcome {
    let mut cfg = demo_config();
    cfg.channel.jitter = false;
    let scenario = cfg.scenario();
    let theta = cfg.estimator().unwrap();
    let link = cfg.link(0.0);
    let run = |m| run_mode(m, &scenario, &link, &theta, &cfg.pipeline()).unwrap();
    let (a, b) = (run(FusionMode::MiddleFlowInfra), run(FusionMode::MiddleNoPrediction));
    let differing = a
        .frames
        .iter()
        .zip(&b.frames)
        .filter(|(x, y)| x.detections != y.detections)
        .count();
    let boxes: usize = a.frames.iter().map(|f| f.detections.len()).sum();
    (
        differing == 0 && boxes > 0,
        format!(
            "{differing} of {} frames differ ({boxes} boxes compared)",
            a.frames.len()
        ),
    )
}

fn infra_vs_vehicle(report: &Report) -> Outcome {
    let n = report.config.scenario.num_frames;
    let (infra, vehicle) = (
        report.row(FusionMode::MiddleFlowInfra, 300.0).unwrap(),
        report.row(FusionMode::MiddleFlowVehicle, 300.0).unwrap(),
    );
    let (mi, mv) = (
        bev50(report, FusionMode::MiddleFlowInfra, 300.0),
        bev50(report, FusionMode::MiddleFlowVehicle, 300.0),
    );
    let ok = mi >= mv && infra.storage_counter == 1 && vehicle.storage_counter == n;
    (
        ok,
        format!(
            "mAP {mi:.3} vs {mv:.3}; storage {} vs {} (N = {n}); compute {} vs {}",
            infra.storage_counter, vehicle.storage_counter, infra.compute_counter, vehicle.compute_counter
        ),
    )
}

fn training_signal() -> Outcome {
    let cfg = demo_config();
    let s = train_flow(&cfg).unwrap().training.unwrap();
    let ok = s.final_heldout_loss < s.initial_heldout_loss;
    (
        ok,
        format!(
            "held-out loss {:.6} -> {:.6} ({} held-out pairs, init {:?})",
            s.initial_heldout_loss, s.final_heldout_loss, s.heldout_pairs, cfg.flow.init
        ),
    )
}

fn determinism() -> (Outcome, Report) {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let report = cmd_simulate(&demo_path(), &a).unwrap();
    cmd_simulate(&demo_path(), &b).unwrap();
    let same = ["report.csv", "report.json"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    (
        (same, format!("report.csv and report.json byte-identical: {same}")),
        report,
    )
}

fn main() {
    let mut all = true;
    let mut check = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let (ok, detail) = f();
        all &= pass_line(
            id,
            name,
            ok,
            &format!("{detail} [{:.1} s]", start.elapsed().as_secs_f64()),
        );
    };
    check(1, "transmission cost", &mut transmission_costs);
    check(2, "quantized flow packet size", &mut quantized_packet_size);
    check(3, "quantization properties", &mut quantization_properties);
    check(4, "AP oracle", &mut ap_oracle);
    check(5, "rotated IoU oracle", &mut rotated_iou_oracle);
    check(6, "gradient check", &mut gradient_check);
    let start = Instant::now();
    let ((same, detail), report) = determinism();
    let sweep_time = start.elapsed().as_secs_f64();
    check(7, "prediction benefit", &mut || prediction_benefit(&report));
    check(8, "zero-latency identity", &mut zero_latency_identity);
    check(9, "infrastructure vs vehicle side", &mut || infra_vs_vehicle(&report));
    check(10, "self-supervised training", &mut training_signal);
    check(11, "determinism", &mut || {
        (same, format!("{detail}, two sweeps in {sweep_time:.1} s"))
    });
    if !all {
        std::process::exit(1);
    }
}
