//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when any fails. Criteria run one at a time so the timing
//! checks see an idle machine.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use pdv_core::attn::{grid_self_attention, grid_self_attention_forward, AttnConfig};
use pdv_core::centroid::{build_hierarchy, centroids_propagate};
use pdv_core::config::PdvConfig;
use pdv_core::geometry::{add, norm, norm_sq, rotate_z, sub, Box3d, Vec3};
use pdv_core::gradsuite;
use pdv_core::heads::losses::{smooth_l1_derivative, smooth_l1_scalar};
use pdv_core::heads::{bce_with_logits, confidence_target_from_iou, focal_loss, iou_3d, nms, FocalParams};
use pdv_core::kde::{kde_self_likelihood, KdeConfig, KernelKind};
use pdv_core::nn::ParamStore;
use pdv_core::pcio::{crop_to_range, scan_with_pattern, write_kitti_bin, PointCloud, RangeSpec, ScanPattern};
use pdv_core::pipeline::{boxes_to_jsonl, synthesize_layers};
use pdv_core::roipool::{grid_voxel_point_counts, BoxProposal, GridPointSet, OffsetFrame, PoolingContext};
use pdv_core::voxel::{voxelize, BallQueryIndex, ConvMapSpec, VoxelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn pdv(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_pdv")).args(args).env_remove("PDV_CONFIG").output().expect("spawn pdv");
    assert!(out.status.success(), "pdv {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn car(center: Vec3, yaw: f64) -> Box3d {
    Box3d::new(center, [3.9, 1.6, 1.56], yaw).unwrap()
}

// ---------------------------------------------------------------- 1

fn centroid_hierarchy() -> Outcome {
    let start = Instant::now();
    let convs = vec![ConvMapSpec::with_stride(2); 3];
    let mut worst = 0.0f64;
    let mut count_errors = 0;
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let n = 10f64.powf(r.gen_range(3.0..5.0)).round() as usize;
        let cell = [r.gen_range(0.03..0.2), r.gen_range(0.03..0.2), r.gen_range(0.05..0.3)];
        let dims = [r.gen_range(64..256), r.gen_range(64..256), r.gen_range(16..48)];
        let origin = [r.gen_range(-50.0..50.0), r.gen_range(-50.0..50.0), r.gen_range(-5.0..0.0)];
        let base = VoxelSpec::new(origin, cell, dims).unwrap();
        let extent: Vec3 = [0, 1, 2].map(|a| cell[a] * dims[a] as f64);
        // Half uniform, half packed into a few blobs so voxels hold many points.
        let blobs: Vec<Vec3> =
            (0..8).map(|_| [0, 1, 2].map(|a| origin[a] + r.gen_range(0.2..0.8) * extent[a])).collect();
        let pos: Vec<Vec3> = (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    [0, 1, 2].map(|a| origin[a] + r.gen_range(0.0..extent[a]))
                } else {
                    let b = blobs[i % blobs.len()];
                    [0, 1, 2].map(|a| b[a] + r.gen_range(-0.05..0.05) * extent[a])
                }
            })
            .collect();
        let cloud = PointCloud::from_parts(pos, vec![], 0).unwrap();
        let (layers, _, _) = build_hierarchy(&cloud, &base, &convs).unwrap();
        let mut spec = base;
        for (k, conv) in convs.iter().enumerate() {
            spec = spec.downsampled(conv);
            let direct = voxelize(&cloud, &spec, k + 2).unwrap().layer;
            let prop = &layers[k + 1];
            if prop.coords() != direct.coords() || prop.counts() != direct.counts() {
                count_errors += 1;
                continue;
            }
            for (a, b) in prop.centroids().iter().zip(direct.centroids()) {
                worst = worst.max(norm(sub(*a, *b)));
            }
        }
    }
    let t = start.elapsed();
    (
        count_errors == 0 && worst <= 1e-9 && t < Duration::from_secs(60),
        format!("100 clouds, count mismatches {count_errors}, max centroid gap {worst:.2e} m, {t:.2?}"),
    )
}

// ---------------------------------------------------------------- 2

fn exhaustive(centers: &[Vec3], q: Vec3, r: f64) -> Vec<(f64, usize)> {
    let mut v: Vec<(f64, usize)> =
        centers.iter().enumerate().map(|(i, &c)| (norm_sq(sub(c, q)), i)).filter(|&(d2, _)| d2 <= r * r).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    v
}

fn ball_query_oracle() -> Outcome {
    let start = Instant::now();
    let mut mismatches = 0;
    let mut queries = 0;
    for batch in 0..100u64 {
        let mut r = rng(1000 + batch);
        let n = r.gen_range(50..4000);
        let lattice = batch % 4 == 0;
        let centers: Vec<Vec3> = (0..n)
            .map(|_| {
                if lattice {
                    [0; 3].map(|_| r.gen_range(-8..8) as f64 * 0.5)
                } else {
                    [0; 3].map(|_| r.gen_range(-10.0..10.0))
                }
            })
            .collect();
        let radius = if lattice { 1.0 } else { r.gen_range(0.2..3.0) };
        let max_n = r.gen_range(1..64);
        let index = BallQueryIndex::new(&centers, radius).unwrap();
        for _ in 0..64 {
            let q = if lattice {
                [0; 3].map(|_| r.gen_range(-8..8) as f64 * 0.5)
            } else {
                [0; 3].map(|_| r.gen_range(-11.0..11.0))
            };
            queries += 1;
            let want = exhaustive(&centers, q, radius);
            let mut got_set: Vec<usize> = index.query_all(q, radius).into_iter().map(|x| x.1).collect();
            let mut want_set: Vec<usize> = want.iter().map(|x| x.1).collect();
            got_set.sort_unstable();
            want_set.sort_unstable();
            let truncated: Vec<usize> = want.iter().take(max_n).map(|x| x.1).collect();
            if got_set != want_set || index.query(q, radius, max_n) != truncated {
                mismatches += 1;
            }
        }
    }
    let t = start.elapsed();
    (
        mismatches == 0 && t < Duration::from_secs(30),
        format!("{queries} queries in 100 batches, {mismatches} mismatches, {t:.2?}"),
    )
}

// ---------------------------------------------------------------- 3

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Double loop over the product of 1D kernels with a double-double accumulator.
fn kde_oracle(pts: &[Vec3], sigma: f64) -> Vec<f64> {
    let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    pts.iter()
        .map(|t| {
            let (mut hi, mut lo) = (0.0, 0.0);
            for c in pts {
                let w: f64 = (0..3).map(|d| phi((t[d] - c[d]) / sigma)).product();
                let (s, e) = two_sum(hi, w);
                let (h2, l2) = two_sum(s, e + lo);
                hi = h2;
                lo = l2;
            }
            (hi + lo) / (pts.len() as f64 * sigma.powi(3))
        })
        .collect()
}

fn kde_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let mut worst_scale = 0.0f64;
    for k in 0..1000u64 {
        let mut r = rng(2000 + k);
        let n = r.gen_range(1..=32);
        let c: Vec3 = [0; 3].map(|_| r.gen_range(-40.0..40.0));
        let spread = r.gen_range(0.3..2.4);
        let pts: Vec<Vec3> = (0..n).map(|_| [0, 1, 2].map(|a| c[a] + r.gen_range(-spread..spread))).collect();
        let sigma = r.gen_range(0.1..0.6);
        let cfg = KdeConfig { bandwidth: sigma, kernel: KernelKind::Gaussian };
        let got = kde_self_likelihood(&pts, &cfg).unwrap();
        for (g, w) in got.iter().zip(kde_oracle(&pts, sigma)) {
            worst = worst.max(rel(*g, w));
        }
        let s = r.gen_range(0.1..10.0);
        let scaled: Vec<Vec3> = pts.iter().map(|p| p.map(|v| v * s)).collect();
        let cfg_s = KdeConfig { bandwidth: sigma * s, ..cfg };
        for (g, h) in got.iter().zip(kde_self_likelihood(&scaled, &cfg_s).unwrap()) {
            worst_scale = worst_scale.max(rel(g / s.powi(3), h));
        }
    }
    (
        worst <= 1e-12 && worst_scale <= 1e-9,
        format!("1000 neighborhoods, max rel error {worst:.2e}, scaling law max rel {worst_scale:.2e}"),
    )
}

// ---------------------------------------------------------------- 4

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..10 {
        for (name, report) in gradsuite::run_all(seed) {
            checked += 1;
            worst = worst.max(report.max_rel_error);
            if !report.passed {
                failed.push(format!("{name}@{seed}"));
            }
        }
    }
    let t = start.elapsed();
    (
        failed.is_empty() && checked == 10 * gradsuite::BLOCKS.len() && t < Duration::from_secs(120),
        format!(
            "{} blocks x 10 seeds, worst rel error {worst:.2e}, failures [{}], {t:.2?}",
            gradsuite::BLOCKS.len(),
            failed.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 5

fn random_grid(r: &mut ChaCha8Rng, d: usize) -> (GridPointSet, Box3d) {
    let b = car([r.gen_range(5.0..40.0), r.gen_range(-20.0..20.0), -0.9], r.gen_range(-3.1..3.1));
    let positions = pdv_core::roipool::sample_grid_points(&b, 6);
    let n = positions.len();
    let empty: Vec<bool> = (0..n).map(|_| r.gen_bool(0.35)).collect();
    let features = Array2::from_shape_fn((n, d), |(i, _)| if empty[i] { 0.0 } else { r.gen_range(0.0..2.0) });
    let counts = (0..n).map(|i| if empty[i] { 0 } else { r.gen_range(0..40) }).collect();
    (GridPointSet { grid_size: 6, positions, features, counts, empty }, b)
}

fn attention_contracts() -> Outcome {
    let cfg = AttnConfig::default();
    let d = cfg.encoder.d_model;
    let mut residual_ok = true;
    let mut empty_ok = true;
    let mut row_sum = 0.0f64;
    let mut perm_gap = 0.0f64;
    for seed in 0..5u64 {
        let mut r = rng(5000 + seed);
        let mut params = ParamStore::new(seed);
        cfg.init(&mut params).unwrap();
        let (grid, b) = random_grid(&mut r, d);

        let (out, cache) = grid_self_attention_forward(&grid, &b, &cfg, &params).unwrap();
        for (i, e) in grid.empty.iter().enumerate() {
            if *e && out.features.row(i).iter().zip(grid.features.row(i)).any(|(a, c)| a.to_bits() != c.to_bits()) {
                empty_ok = false;
            }
        }
        for w in cache.attention_weights().unwrap() {
            for row in w.rows() {
                row_sum = row_sum.max((row.sum() - 1.0).abs());
            }
        }

        let mut zeroed = params.clone();
        zeroed.zero_prefix(&format!("{}.", cfg.encoder.prefix));
        let same = grid_self_attention(&grid, &b, &cfg, &zeroed).unwrap();
        residual_ok &= same.features.iter().zip(&grid.features).all(|(a, c)| a.to_bits() == c.to_bits());

        let n = grid.len();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let permuted = GridPointSet {
            grid_size: 6,
            positions: perm.iter().map(|&i| grid.positions[i]).collect(),
            features: grid.features.select(Axis(0), &perm),
            counts: perm.iter().map(|&i| grid.counts[i]).collect(),
            empty: perm.iter().map(|&i| grid.empty[i]).collect(),
        };
        let p_out = grid_self_attention(&permuted, &b, &cfg, &params).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for k in 0..d {
                perm_gap = perm_gap.max((p_out.features[[new, k]] - out.features[[old, k]]).abs());
            }
        }
    }
    (
        residual_ok && empty_ok && row_sum <= 1e-12 && perm_gap <= 1e-12,
        format!(
            "zeroed-layer identity {residual_ok}, empty rows bitwise {empty_ok}, row-sum gap {row_sum:.1e}, permutation gap {perm_gap:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn pooling_scene() -> (PointCloud, Vec<Box3d>, PdvConfig) {
    let mut r = rng(6000);
    let cars: Vec<Box3d> = (0..12)
        .map(|_| car([r.gen_range(6.0..40.0), r.gen_range(-15.0..15.0), -0.9], r.gen_range(-3.1..3.1)))
        .collect();
    let mut cloud = scan_with_pattern(&ScanPattern::new(64, 0.004), &cars, 1);
    for _ in 0..20_000 {
        cloud.push([r.gen_range(0.0..50.0), r.gen_range(-25.0..25.0), r.gen_range(-2.0..0.5)], &[r.gen()]).unwrap();
    }
    let proposals = cars
        .iter()
        .map(|c| {
            car(add(c.center, [r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3), 0.0]), c.yaw + r.gen_range(-0.2..0.2))
        })
        .collect();
    (cloud, proposals, PdvConfig::default())
}

fn max_gap(a: &GridPointSet, b: &GridPointSet) -> f64 {
    if a.empty != b.empty {
        return f64::INFINITY;
    }
    (&a.features - &b.features).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn pooling_equivariance() -> Outcome {
    let (cloud, proposals, mut cfg) = pooling_scene();
    let layers = synthesize_layers(&cloud, &cfg).unwrap();
    let points = cloud.positions();
    let mut params = ParamStore::new(6);
    let mut rigid_gap = 0.0f64;
    let mut shift_gap = 0.0f64;
    let mut counts_ok = true;
    let moves = [(0.7, [3.0, -2.0, 0.5]), (-2.4, [-40.0, 15.0, -1.0]), (std::f64::consts::PI, [0.0, 0.0, 0.0])];

    // Offsets in the box frame: the full rigid motion must leave features unchanged.
    cfg.pool.offset_frame = OffsetFrame::Box;
    let ctx = PoolingContext::new(&cfg.pool, &layers).unwrap();
    ctx.init_params(&mut params);
    for &(yaw, t) in &moves {
        let moved_layers: Vec<_> = layers.iter().map(|l| l.transformed(yaw, t)).collect();
        let moved_cloud = cloud.transformed(yaw, t);
        let ctx_m = PoolingContext::new(&cfg.pool, &moved_layers).unwrap();
        for b in &proposals {
            let bm = Box3d::new(add(rotate_z(b.center, yaw), t), b.extents, b.yaw + yaw).unwrap();
            let g = ctx.pool_box(b, &params, points).unwrap();
            let gm = ctx_m.pool_box(&bm, &params, moved_cloud.positions()).unwrap();
            rigid_gap = rigid_gap.max(max_gap(&g, &gm));
            let total = |grid: &GridPointSet| grid.counts.iter().map(|&c| c as usize).sum::<usize>();
            counts_ok &= total(&g) == b.count_points(points);
            counts_ok &= total(&gm) == bm.count_points(moved_cloud.positions());
        }
    }

    // Default world-frame offsets: translations must leave features unchanged.
    cfg.pool.offset_frame = OffsetFrame::World;
    let ctx = PoolingContext::new(&cfg.pool, &layers).unwrap();
    for &(_, t) in &moves {
        let moved_layers: Vec<_> = layers.iter().map(|l| l.transformed(0.0, t)).collect();
        let ctx_m = PoolingContext::new(&cfg.pool, &moved_layers).unwrap();
        for b in &proposals {
            let bm = Box3d::new(add(b.center, t), b.extents, b.yaw).unwrap();
            let g = ctx.pool_box(b, &params, &[]).unwrap();
            let gm = ctx_m.pool_box(&bm, &params, &[]).unwrap();
            shift_gap = shift_gap.max(max_gap(&g, &gm));
        }
    }
    let in_box: usize = proposals
        .iter()
        .map(|b| grid_voxel_point_counts(b, 6, points).iter().map(|&c| c as usize).sum::<usize>())
        .sum();
    (
        rigid_gap <= 1e-9 && shift_gap <= 1e-9 && counts_ok,
        format!(
            "rigid motion (box-frame offsets) max gap {rigid_gap:.2e}, translation (world-frame offsets) max gap {shift_gap:.2e}, counts conserved {counts_ok} over {in_box} in-box points"
        ),
    )
}

// ---------------------------------------------------------------- 7

fn nms_reference(boxes: &[Box3d], scores: &[f64], thr: f64) -> Vec<usize> {
    let n = boxes.len();
    let iou: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| iou_3d(&boxes[i], &boxes[j])).collect()).collect();
    let mut alive = vec![true; n];
    let mut kept = Vec::new();
    while let Some(b) = (0..n).filter(|&i| alive[i]).fold(None, |best: Option<usize>, i| match best {
        Some(j) if scores[j] >= scores[i] => Some(j),
        _ => Some(i),
    }) {
        kept.push(b);
        alive[b] = false;
        for j in 0..n {
            if alive[j] && iou[b][j] > thr {
                alive[j] = false;
            }
        }
    }
    kept
}

fn random_box(r: &mut ChaCha8Rng, spread: f64, yaw: bool) -> Box3d {
    Box3d::new(
        [0; 3].map(|_| r.gen_range(-spread..spread)),
        [0; 3].map(|_| r.gen_range(0.5..4.0)),
        if yaw { r.gen_range(-3.2..3.2) } else { 0.0 },
    )
    .unwrap()
}

fn iou_nms_oracles() -> Outcome {
    let mut r = rng(7000);
    let mut aligned = 0.0f64;
    for _ in 0..10_000 {
        let a = random_box(&mut r, 2.0, false);
        let b = random_box(&mut r, 2.0, false);
        let inter: f64 = (0..3)
            .map(|k| {
                let lo = (a.center[k] - 0.5 * a.extents[k]).max(b.center[k] - 0.5 * b.extents[k]);
                let hi = (a.center[k] + 0.5 * a.extents[k]).min(b.center[k] + 0.5 * b.extents[k]);
                (hi - lo).max(0.0)
            })
            .product();
        let want = inter / (a.volume() + b.volume() - inter);
        aligned = aligned.max((iou_3d(&a, &b) - want).abs());
    }
    let mut rotated = 0.0f64;
    for k in 0..20 {
        let a = random_box(&mut r, 0.8, true);
        let b = random_box(&mut r, 0.8, true);
        let mut mc = rng(7100 + k);
        let samples = 1_000_000;
        let hits = (0..samples)
            .filter(|_| {
                let local = [0, 1, 2].map(|d| (mc.gen::<f64>() - 0.5) * a.extents[d]);
                b.contains(a.to_world(local))
            })
            .count();
        let inter = a.volume() * hits as f64 / samples as f64;
        rotated = rotated.max((iou_3d(&a, &b) - inter / (a.volume() + b.volume() - inter)).abs());
    }
    let mut nms_bad = 0;
    for set in 0..200 {
        let n = r.gen_range(1..80);
        let boxes: Vec<Box3d> = (0..n).map(|_| random_box(&mut r, 8.0, true)).collect();
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..12) as f64 / 12.0).collect();
        let thr = [0.0, 0.1, 0.25, 0.5, 0.7][set % 5];
        if nms(&boxes, &scores, thr) != nms_reference(&boxes, &scores, thr) {
            nms_bad += 1;
        }
    }
    (
        aligned <= 1e-9 && rotated <= 2e-3 && nms_bad == 0,
        format!("axis-aligned max gap {aligned:.2e}, rotated vs Monte Carlo max gap {rotated:.2e}, NMS mismatches {nms_bad}/200"),
    )
}

// ---------------------------------------------------------------- 8

fn loss_degeneracies() -> Outcome {
    let mut r = rng(8000);
    let z = Array2::from_shape_fn((200, 3), |_| r.gen_range(-40.0..40.0));
    let y = Array2::from_shape_fn((200, 3), |_| if r.gen_bool(0.2) { 1.0 } else { 0.0 });
    let (f, gf) = focal_loss(&z, &y, FocalParams { alpha: 1.0, gamma: 0.0 }).unwrap();
    let (b, gb) = bce_with_logits(&z, &y).unwrap();
    let focal_gap = gf.iter().zip(&gb).fold((f - b).abs(), |m, (p, q)| m.max((p - q).abs()));

    let clamps = confidence_target_from_iou(0.25) == 0.0
        && confidence_target_from_iou(0.75) == 1.0
        && confidence_target_from_iou(0.1) == 0.0
        && confidence_target_from_iou(0.9) == 1.0
        && confidence_target_from_iou(0.25 + 1e-9) > 0.0
        && confidence_target_from_iou(0.75 - 1e-9) < 1.0;

    // Both branches meet with value 1/2 and slope ±1 at |x| = 1; the
    // implementation must agree with that on either side of the knot.
    let mut c1 = 0.5 * 1.0f64.powi(2) == 1.0 - 0.5;
    for sign in [-1.0, 1.0] {
        c1 &= smooth_l1_scalar(sign) == 0.5 && smooth_l1_derivative(sign) == sign;
        for h in [1e-3, 1e-6, 1e-9] {
            let inside = sign * (1.0 - h);
            let outside = sign * (1.0 + h);
            let slack = h * (1.0 + 1e-6);
            c1 &= (smooth_l1_scalar(inside) - 0.5).abs() <= slack;
            c1 &= (smooth_l1_scalar(outside) - 0.5).abs() <= slack;
            c1 &= (smooth_l1_derivative(inside) - sign).abs() <= slack;
            c1 &= smooth_l1_derivative(outside) == sign;
        }
    }
    (
        focal_gap <= 1e-12 && clamps && c1,
        format!(
            "focal vs cross-entropy max gap {focal_gap:.1e}, target clamps {clamps}, smooth-L1 knot continuity {c1}"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn write_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let mut r = rng(9000);
    let cars: Vec<Box3d> =
        (0..6).map(|_| car([r.gen_range(6.0..45.0), r.gen_range(-18.0..18.0), -0.9], r.gen_range(-3.1..3.1))).collect();
    let mut cloud = scan_with_pattern(&ScanPattern::new(64, 0.0035), &cars, 3);
    for _ in 0..15_000 {
        cloud.push([r.gen_range(0.0..60.0), r.gen_range(-30.0..30.0), r.gen_range(-2.5..0.8)], &[r.gen()]).unwrap();
    }
    let mut proposals = Vec::new();
    for c in &cars {
        for _ in 0..4 {
            let b = car(
                add(c.center, [r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), 0.0]),
                c.yaw + r.gen_range(-0.3..0.3),
            );
            proposals.push(BoxProposal { bbox: b, score: r.gen(), label: Some("Car".into()) });
        }
    }
    let scan = dir.join("fixture.bin");
    let props = dir.join("fixture.jsonl");
    write_kitti_bin(&scan, &cloud).unwrap();
    std::fs::write(&props, boxes_to_jsonl(&proposals)).unwrap();
    (scan, props)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (scan, props) = write_fixture(dir.path());
    let mut outputs = Vec::new();
    for workers in ["1", "2"] {
        for run in 0..3 {
            let out = dir.path().join(format!("w{workers}_{run}.jsonl"));
            pdv(&[
                "refine",
                "--scan",
                s(&scan),
                "--proposals",
                s(&props),
                "--seed",
                "3",
                "--out",
                s(&out),
                "--workers",
                workers,
                "--dump-stage",
                "heads",
                "--dump-stage",
                "attended",
            ]);
            let mut bytes = std::fs::read(&out).unwrap();
            for stage in ["heads", "attended"] {
                bytes.extend(std::fs::read(format!("{}.{stage}.json", out.display())).unwrap());
            }
            outputs.push(bytes);
        }
    }
    let lines = String::from_utf8_lossy(&outputs[0]).lines().count();
    let identical = outputs.windows(2).all(|w| w[0] == w[1]);
    (
        identical && !outputs[0].is_empty(),
        format!(
            "3 runs each at 1 and 2 workers, output ({lines} boxes) and two stage dumps identical {identical}, {} bytes",
            outputs[0].len()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn density_distance_trend() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut counts = Vec::new();
    let az = 0.3f64;
    for d in (1..=12).map(|k| 5.0 * k as f64) {
        // Same target, same pose relative to the line of sight, farther out.
        let b = car([d * az.cos(), d * az.sin(), -0.9], az + 0.4);
        let boxes = dir.path().join(format!("boxes_{d}.jsonl"));
        let scan = dir.path().join(format!("scan_{d}.bin"));
        let stats = dir.path().join(format!("stats_{d}.csv"));
        std::fs::write(&boxes, boxes_to_jsonl(&[BoxProposal { bbox: b, score: 1.0, label: Some("Car".into()) }]))
            .unwrap();
        pdv(&["synth", "--boxes", s(&boxes), "--out", s(&scan), "--seed", "1"]);
        pdv(&["stats", "--scan", s(&scan), "--boxes", s(&boxes), "--bin-size", "10", "--out", s(&stats)]);
        let text = std::fs::read_to_string(&stats).unwrap();
        let row = text.lines().nth(1).expect("one box row");
        counts.push(row.split(',').nth(1).unwrap().parse::<u64>().unwrap());
    }
    let monotone = counts.windows(2).all(|w| w[0] >= w[1]) && counts[0] > *counts.last().unwrap();
    (monotone, format!("points per target at 5..60 m: {counts:?}"))
}

// ---------------------------------------------------------------- 11

fn performance_floor() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(11_000);
    let range = RangeSpec::kitti();
    let proposals: Vec<BoxProposal> = (0..100)
        .map(|_| BoxProposal {
            bbox: car([r.gen_range(3.0..68.0), r.gen_range(-38.0..38.0), -0.9], r.gen_range(-3.1..3.1)),
            score: r.gen(),
            label: Some("Car".into()),
        })
        .collect();
    let mut cloud = PointCloud::new(1);
    for i in 0..100_000 {
        let p = if i % 2 == 0 {
            [0, 1, 2].map(|a| r.gen_range(range.min[a]..range.max[a]))
        } else {
            let b = &proposals[(i / 2) % proposals.len()].bbox;
            b.to_world([0, 1, 2].map(|a| (r.gen::<f64>() - 0.5) * b.extents[a]))
        };
        cloud.push(p, &[r.gen()]).unwrap();
    }
    let scan = dir.path().join("big.bin");
    let props = dir.path().join("props.jsonl");
    let out = dir.path().join("out.jsonl");
    write_kitti_bin(&scan, &cloud).unwrap();
    std::fs::write(&props, boxes_to_jsonl(&proposals)).unwrap();
    let start = Instant::now();
    pdv(&["refine", "--scan", s(&scan), "--proposals", s(&props), "--out", s(&out), "--workers", "1"]);
    let refine_time = start.elapsed();

    // LiDAR-like scan of at least a million in-range points.
    let ground = Box3d::new([35.2, 0.0, -1.83], [70.4, 80.0, 0.2], 0.0).unwrap();
    let mut targets = vec![ground];
    targets.extend(proposals.iter().take(40).map(|p| p.bbox));
    let raw = scan_with_pattern(&ScanPattern::new(128, 2.0 * std::f64::consts::PI / 18_000.0), &targets, 0);
    let dense = crop_to_range(&raw, &range);
    let base = VoxelSpec::from_range(&range, [0.05, 0.05, 0.1]).unwrap();
    let conv = ConvMapSpec::with_stride(2);
    let level1 = voxelize(&dense, &base, 1).unwrap().layer;
    let best_of = |f: &dyn Fn()| {
        (0..3)
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed()
            })
            .min()
            .unwrap()
    };
    let propagate = best_of(&|| {
        let mut cur = level1.clone();
        for k in 0..3 {
            cur = centroids_propagate(&cur, &conv).unwrap().into_layer(k + 2).unwrap();
        }
    });
    let direct = best_of(&|| {
        let mut spec = base;
        for k in 0..3 {
            spec = spec.downsampled(&conv);
            voxelize(&dense, &spec, k + 2).unwrap();
        }
    });
    let speedup = direct.as_secs_f64() / propagate.as_secs_f64();
    (
        refine_time < Duration::from_secs(5) && speedup >= 5.0 && dense.len() >= 1_000_000,
        format!(
            "refine 100 proposals / 1e5 points on one worker {refine_time:.2?}; levels 2-4 at {} points: propagate {propagate:.2?} vs direct {direct:.2?} ({speedup:.1}x)",
            dense.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("centroid hierarchy equivalence", centroid_hierarchy),
        ("ball-query oracle", ball_query_oracle),
        ("KDE correctness", kde_correctness),
        ("gradient suite", gradient_suite),
        ("attention contracts", attention_contracts),
        ("pooling equivariance", pooling_equivariance),
        ("IoU/NMS oracles", iou_nms_oracles),
        ("loss degeneracies", loss_degeneracies),
        ("end-to-end determinism", determinism),
        ("density-distance trend", density_distance_trend),
        ("performance floor", performance_floor),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let (ok, detail) = run();
        println!("{} criterion {:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" }, i + 1);
        if !ok {
            failures += 1;
        }
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
