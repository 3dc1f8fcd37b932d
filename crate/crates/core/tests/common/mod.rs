//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use featureflow::featurizer::FeatureGrid;
use featureflow::flow::EstimatorParams;
use featureflow::geometry::Box3D;
use featureflow::metrics::EvalFrame;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn inside(b: &Box3D, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.cx, y - b.cy);
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= 0.5 * b.l && v.abs() <= 0.5 * b.w
}

/// BEV IoU estimated by sampling points uniformly inside `a` and counting
/// those that also fall in `b`.
pub fn monte_carlo_bev_iou(a: &Box3D, b: &Box3D, samples: usize, seed: u64) -> f64 {
    let chunks = 64;
    let per = samples / chunks;
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut r = rng(seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
            let (s, c) = a.yaw.sin_cos();
            (0..per)
                .filter(|_| {
                    let u = (r.gen::<f64>() - 0.5) * a.l;
                    let v = (r.gen::<f64>() - 0.5) * a.w;
                    inside(b, a.cx + c * u - s * v, a.cy + s * u + c * v)
                })
                .count()
        })
        .sum();
    let area_a = a.w * a.l;
    let inter = hits as f64 / (per * chunks) as f64 * area_a;
    inter / (area_a + b.w * b.l - inter)
}

pub fn random_box(r: &mut ChaCha8Rng, spread: f64, class_id: u32) -> Box3D {
    Box3D::new(
        [
            r.gen_range(-spread..spread),
            r.gen_range(-spread..spread),
            r.gen_range(-0.5..0.5),
        ],
        [r.gen_range(0.5..4.0), r.gen_range(0.5..4.0), r.gen_range(0.5..2.0)],
        r.gen_range(-3.2..3.2),
        class_id,
    )
}

/// mAP over classes present in `frames`, rebuilt from the full PR curve.
pub fn brute_force_map(frames: &[EvalFrame], iou: impl Fn(&Box3D, &Box3D) -> f64, threshold: f64) -> f64 {
    let mut classes: Vec<u32> = frames
        .iter()
        .flat_map(|f| f.predictions.iter().chain(&f.ground_truth))
        .map(|b| b.class_id)
        .collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &class in &classes {
        // (confidence, frame, index, is true positive)
        let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
        let mut num_gt = 0;
        for (fi, f) in frames.iter().enumerate() {
            let gts: Vec<&Box3D> = f.ground_truth.iter().filter(|b| b.class_id == class).collect();
            num_gt += gts.len();
            let mut preds: Vec<(usize, &Box3D)> = f
                .predictions
                .iter()
                .enumerate()
                .filter(|(_, b)| b.class_id == class)
                .collect();
            preds.sort_by(|x, y| y.1.confidence.partial_cmp(&x.1.confidence).unwrap().then(x.0.cmp(&y.0)));
            let mut used = vec![false; gts.len()];
            for (pi, p) in preds {
                let scores: Vec<f64> = gts.iter().map(|g| iou(p, g)).collect();
                let best =
                    (0..gts.len())
                        .filter(|&j| !used[j] && scores[j] >= threshold)
                        .fold(None::<usize>, |acc, j| match acc {
                            Some(k) if scores[k] >= scores[j] => Some(k),
                            _ => Some(j),
                        });
                if let Some(j) = best {
                    used[j] = true;
                }
                ranked.push((p.confidence, fi, pi, best.is_some()));
            }
        }
        ranked.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        // precision and recall at every cutoff
        let curve: Vec<(usize, f64)> = (1..=ranked.len())
            .map(|k| {
                let tp = ranked[..k].iter().filter(|r| r.3).count();
                (tp, tp as f64 / k as f64)
            })
            .collect();
        let mut ap = 0.0;
        if num_gt > 0 {
            for i in 0..=10 {
                let reached = curve.iter().filter(|(tp, _)| 10 * tp >= i * num_gt);
                ap += reached.map(|&(_, p)| p).fold(0.0, f64::max);
            }
            ap /= 11.0;
        }
        total += ap;
    }
    total / classes.len() as f64
}

/// `(W · [prev; curr] + b) / dt` evaluated cell by cell with explicit indices.
pub fn matmul_derivative(theta: &EstimatorParams, prev: &FeatureGrid, curr: &FeatureGrid, dt: f64) -> Vec<f32> {
    let (c_n, h_n, w_n) = curr.dims();
    let mut out = vec![0.0f32; c_n * h_n * w_n];
    for h in 0..h_n {
        for w in 0..w_n {
            for c in 0..c_n {
                let mut acc = theta.bias[c];
                for j in 0..2 * c_n {
                    let x = if j < c_n {
                        prev.get(j, h, w)
                    } else {
                        curr.get(j - c_n, h, w)
                    };
                    acc += theta.weights[c * 2 * c_n + j] * x as f64;
                }
                out[(c * h_n + h) * w_n + w] = (acc / dt) as f32;
            }
        }
    }
    out
}

pub fn pass_line(id: usize, name: &str, ok: bool, detail: &str) -> bool {
    println!(
        "criterion {id:2} {:4} {name}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

pub fn demo_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/demo.toml")
}

pub fn demo_config() -> featureflow::cli::ExperimentConfig {
    featureflow::cli::ExperimentConfig::load(&demo_path()).unwrap().0
}

/// The demo config cut down to a few frames and two latencies.
pub fn small_config_text() -> String {
    let mut cfg = demo_config();
    cfg.scenario.num_frames = 12;
    cfg.channel.latencies_ms = vec![0.0, 300.0];
    cfg.flow.epochs = 2;
    toml::to_string(&cfg).unwrap()
}
