//! Finite-difference checks of every differentiable block, each on a small
//! randomly drawn instance. Shared by the `gradcheck` command and the tests.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attn::{
    encoder_layer_backward, encoder_layer_forward, grid_self_attention_backward, grid_self_attention_forward,
    AttnConfig, EncoderLayerSpec, PeConfig,
};
use crate::geometry::Box3d;
use crate::heads::{
    confidence_loss, focal_loss, rcnn_loss, rpn_loss, smooth_l1, FocalParams, HeadConfig, Heads, LossWeights,
};
use crate::nn::ops::{init_layer_norm, layer_norm_backward, softmax_rows_backward};
use crate::nn::{
    grad_check, layer_norm, maxpool_backward, maxpool_set, softmax_rows, Activation, Ffn, FfnSpec, GradCheckReport,
    Matrix, ParamGrads, ParamStore,
};
use crate::roipool::{GridPointSet, OffsetFrame};

/// Relative tolerance applied to every block.
pub const TOLERANCE: f64 = 1e-4;

pub const BLOCKS: [&str; 12] = [
    "ffn",
    "msg_maxpool",
    "softmax_xent",
    "layer_norm",
    "encoder_layer",
    "grid_attention",
    "focal",
    "smooth_l1",
    "confidence",
    "rcnn_loss",
    "rcnn_heads",
    "rpn_loss",
];

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-scale..scale))
}

fn flat(m: &Matrix) -> Vec<f64> {
    m.iter().copied().collect()
}

fn unflat(v: &[f64], shape: (usize, usize)) -> Matrix {
    Array2::from_shape_vec(shape, v.to_vec()).expect("shape matches")
}

/// `Σ y ⊙ r`: a fixed random linear read-out that turns a matrix into a scalar.
fn readout(y: &Matrix, r: &Matrix) -> f64 {
    (y * r).sum()
}

/// Checks `eval` over the named parameters followed by `extra` inputs.
/// `eval` returns the loss, parameter gradients and the gradient of `extra`.
fn check_with_params<F>(store: &ParamStore, names: &[String], extra: &[f64], eval: F) -> GradCheckReport
where
    F: Fn(&ParamStore, &[f64]) -> (f64, ParamGrads, Vec<f64>),
{
    let point: Vec<f64> =
        store.flatten(names).expect("named params exist").into_iter().chain(extra.iter().copied()).collect();
    let np = point.len() - extra.len();
    let f = |x: &[f64]| {
        let mut s = store.clone();
        s.unflatten(names, &x[..np]).expect("same layout");
        let (v, g, ge) = eval(&s, &x[np..]);
        let mut grad = g.flatten(names, &s).expect("named params exist");
        grad.extend(ge);
        (v, grad)
    };
    grad_check(f, &point, TOLERANCE)
}

fn check_ffn(rng: &mut ChaCha8Rng, seed: u64) -> GradCheckReport {
    let ffn = Ffn::new(FfnSpec::new(vec![5, 7, 6, 3], Activation::NoneOnLast).unwrap(), "f").unwrap();
    let mut p = ParamStore::new(seed);
    ffn.init(&mut p);
    let x = rand_matrix(rng, 4, 5, 1.0);
    let r = rand_matrix(rng, 4, 3, 1.0);
    check_with_params(&p, &ffn.param_names(), &flat(&x), |s, xv| {
        let x = unflat(xv, (4, 5));
        let (y, cache) = ffn.forward(&x, s).unwrap();
        let mut g = ParamGrads::new();
        let dx = ffn.backward(&r, &cache, s, &mut g).unwrap();
        (readout(&y, &r), g, flat(&dx))
    })
}

fn check_msg(rng: &mut ChaCha8Rng, seed: u64) -> GradCheckReport {
    let ffn = Ffn::new(FfnSpec::new(vec![6, 8, 5], Activation::Relu).unwrap(), "msg").unwrap();
    let mut p = ParamStore::new(seed);
    ffn.init(&mut p);
    let x = rand_matrix(rng, 7, 6, 1.0);
    let r: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    check_with_params(&p, &ffn.param_names(), &flat(&x), |s, xv| {
        let x = unflat(xv, (7, 6));
        let (y, cache) = ffn.forward(&x, s).unwrap();
        let pool = maxpool_set(&y);
        let v = pool.values.iter().zip(&r).map(|(a, b)| a * b).sum();
        let mut g = ParamGrads::new();
        let dx = ffn.backward(&maxpool_backward(&r, &pool), &cache, s, &mut g).unwrap();
        (v, g, flat(&dx))
    })
}

fn check_softmax_xent(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let x = rand_matrix(rng, 3, 5, 2.0);
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
    let f = |v: &[f64]| {
        let x = unflat(v, (3, 5));
        let y = softmax_rows(&x);
        let mut dy = Array2::zeros((3, 5));
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            loss -= y[[i, l]].ln();
            dy[[i, l]] = -1.0 / y[[i, l]];
        }
        (loss, flat(&softmax_rows_backward(&y, &dy)))
    };
    grad_check(f, &flat(&x), TOLERANCE)
}

fn check_layer_norm(rng: &mut ChaCha8Rng, seed: u64) -> GradCheckReport {
    let mut p = ParamStore::new(seed);
    init_layer_norm(&mut p, "ln", 6);
    for n in ["ln.gamma", "ln.beta"] {
        let noise = rand_matrix(rng, 1, 6, 0.5);
        *p.get_mut(n).unwrap() += &noise;
    }
    let x = rand_matrix(rng, 4, 6, 1.0);
    let r = rand_matrix(rng, 4, 6, 1.0);
    let names = vec!["ln.gamma".to_string(), "ln.beta".to_string()];
    check_with_params(&p, &names, &flat(&x), |s, xv| {
        let (y, cache) = layer_norm(&unflat(xv, (4, 6)), s, "ln").unwrap();
        let mut g = ParamGrads::new();
        let dx = layer_norm_backward(&r, &cache, s, "ln", &mut g).unwrap();
        (readout(&y, &r), g, flat(&dx))
    })
}

fn perturb_norms(p: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for n in ["gamma", "beta"] {
        let noise = rand_matrix(rng, 1, d, 0.3);
        *p.get_mut(&format!("{prefix}.{n}")).unwrap() += &noise;
    }
}

fn check_encoder(rng: &mut ChaCha8Rng, seed: u64) -> GradCheckReport {
    let spec = EncoderLayerSpec { d_model: 8, heads: 2, d_ff: 10, prefix: "enc".into() };
    let mut p = ParamStore::new(seed);
    spec.init(&mut p).unwrap();
    perturb_norms(&mut p, rng, "enc.ln1", 8);
    perturb_norms(&mut p, rng, "enc.ln2", 8);
    let x = rand_matrix(rng, 5, 8, 1.0);
    let pe = rand_matrix(rng, 5, 8, 0.5);
    let r = rand_matrix(rng, 5, 8, 1.0);
    let mut extra = flat(&x);
    extra.extend(flat(&pe));
    check_with_params(&p, &spec.param_names().unwrap(), &extra, |s, v| {
        let x = unflat(&v[..40], (5, 8));
        let pe = unflat(&v[40..], (5, 8));
        let (t, cache) = encoder_layer_forward(&x, Some(&pe), &spec, s).unwrap();
        let mut g = ParamGrads::new();
        let dx = encoder_layer_backward(&r, &cache, &spec, s, &mut g).unwrap();
        let mut ge = flat(&dx);
        ge.extend(flat(&dx));
        (readout(&t, &r), g, ge)
    })
}

fn check_grid_attention(rng: &mut ChaCha8Rng, seed: u64) -> GradCheckReport {
    let cfg = AttnConfig {
        encoder: EncoderLayerSpec { d_model: 6, heads: 1, d_ff: 8, prefix: "ga".into() },
        pe: PeConfig { hidden: vec![5], eps: 1.0, frame: OffsetFrame::World, prefix: "gpe".into() },
    };
    let mut p = ParamStore::new(seed);
    cfg.init(&mut p).unwrap();
    perturb_norms(&mut p, rng, "ga.ln1", 6);
    perturb_norms(&mut p, rng, "ga.ln2", 6);
    let bbox = Box3d::new([3.0, -1.0, 0.2], [4.0, 2.0, 1.5], rng.gen_range(-3.0..3.0)).unwrap();
    let positions = crate::roipool::sample_grid_points(&bbox, 2);
    let empty: Vec<bool> = (0..8).map(|j| j == 2 || j == 5).collect();
    let mut features = rand_matrix(rng, 8, 6, 1.0);
    for (j, e) in empty.iter().enumerate() {
        if *e {
            features.row_mut(j).fill(0.0);
        }
    }
    let grid = GridPointSet {
        grid_size: 2,
        positions,
        features,
        counts: (0..8).map(|_| rng.gen_range(0..20)).collect(),
        empty,
    };
    let r = rand_matrix(rng, 8, 6, 1.0);
    check_with_params(&p, &cfg.param_names().unwrap(), &flat(&grid.features), |s, v| {
        let mut gset = grid.clone();
        gset.features = unflat(v, (8, 6));
        let (out, cache) = grid_self_attention_forward(&gset, &bbox, &cfg, s).unwrap();
        let mut g = ParamGrads::new();
        let dx = grid_self_attention_backward(&r, &cache, &cfg, s, &mut g).unwrap();
        (readout(&out.features, &r), g, flat(&dx))
    })
}

fn one_hot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut t = Array2::zeros((rows, cols));
    for i in 0..rows {
        // some anchors are pure background
        if rng.gen_bool(0.7) {
            t[[i, rng.gen_range(0..cols)]] = 1.0;
        }
    }
    t
}

fn check_focal(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let z = rand_matrix(rng, 6, 3, 3.0);
    let t = one_hot(rng, 6, 3);
    let params = FocalParams::default();
    grad_check(
        |v| {
            let (l, g) = focal_loss(&unflat(v, (6, 3)), &t, params).unwrap();
            (l, flat(&g))
        },
        &flat(&z),
        TOLERANCE,
    )
}

/// Random residual pairs whose differences avoid a narrow band around the
/// smooth-L1 knot, where the second derivative jumps.
fn residual_pair(rng: &mut ChaCha8Rng, rows: usize) -> (Matrix, Matrix) {
    let pred = rand_matrix(rng, rows, 7, 2.0);
    let mut target = rand_matrix(rng, rows, 7, 2.0);
    for (t, p) in target.iter_mut().zip(pred.iter()) {
        if ((p - *t).abs() - 1.0).abs() < 1e-3 {
            *t += 0.01;
        }
    }
    (pred, target)
}

fn check_smooth_l1(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let (pred, target) = residual_pair(rng, 4);
    let w: Vec<f64> = (0..7).map(|_| rng.gen_range(0.5..2.0)).collect();
    grad_check(
        |v| {
            let (l, g) = smooth_l1(&unflat(v, (4, 7)), &target, Some(&w)).unwrap();
            (l, flat(&g))
        },
        &flat(&pred),
        TOLERANCE,
    )
}

fn check_confidence(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let z: Vec<f64> = (0..8).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let t: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
    grad_check(|v| confidence_loss(v, &t).unwrap(), &z, TOLERANCE)
}

fn check_rcnn_loss(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let t: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let (r, rt) = residual_pair(rng, 3);
    let w = LossWeights::default();
    let mut point = z.clone();
    point.extend(flat(&r));
    grad_check(
        |v| {
            let out = rcnn_loss(&v[..3], &t, &unflat(&v[3..], (3, 7)), &rt, &w).unwrap();
            let mut g = flat(&out.d_logits);
            g.extend(flat(&out.d_residuals));
            (out.value, g)
        },
        &point,
        TOLERANCE,
    )
}

/// The second-stage loss through the shared, regression and confidence FFNs.
fn check_rcnn_heads(rng: &mut ChaCha8Rng, seed: u64) -> GradCheckReport {
    let cfg = HeadConfig { shared: vec![9, 8], reg_hidden: vec![6], conf_hidden: vec![6], conf_eps: 1.0 };
    let heads = Heads::new(&cfg, 12).unwrap();
    let mut p = ParamStore::new(seed);
    heads.init(&mut p);
    let x = rand_matrix(rng, 3, 12, 1.0);
    let centers: Vec<[f64; 3]> = (0..3).map(|_| [rng.gen_range(0.0..40.0), rng.gen_range(-20.0..20.0), 0.0]).collect();
    let counts: Vec<u64> = (0..3).map(|_| rng.gen_range(0..200)).collect();
    let t: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let rt = rand_matrix(rng, 3, 7, 0.5);
    let w = LossWeights::default();
    check_with_params(&p, &heads.param_names(), &flat(&x), |s, v| {
        let x = unflat(v, (3, 12));
        let (out, cache) = heads.forward_cached(&x, &centers, &counts, s).unwrap();
        let loss = rcnn_loss(&out.logits, &t, &out.residuals, &rt, &w).unwrap();
        let mut g = ParamGrads::new();
        let dx = heads.backward(&loss.d_residuals, &loss.d_logits, &cache, s, &mut g).unwrap();
        (loss.value, g, flat(&dx))
    })
}

fn check_rpn_loss(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let z = rand_matrix(rng, 4, 3, 3.0);
    let t = one_hot(rng, 4, 3);
    let (r, rt) = residual_pair(rng, 4);
    let w = LossWeights { beta: rng.gen_range(0.5..2.0), ..LossWeights::default() };
    let mut point = flat(&z);
    point.extend(flat(&r));
    grad_check(
        |v| {
            let out = rpn_loss(&unflat(&v[..12], (4, 3)), &t, &unflat(&v[12..], (4, 7)), &rt, &w).unwrap();
            let mut g = flat(&out.d_logits);
            g.extend(flat(&out.d_residuals));
            (out.value, g)
        },
        &point,
        TOLERANCE,
    )
}

/// Runs one named block on an instance drawn from `seed`.
pub fn run_block(name: &str, seed: u64) -> Option<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Some(match name {
        "ffn" => check_ffn(&mut rng, seed),
        "msg_maxpool" => check_msg(&mut rng, seed),
        "softmax_xent" => check_softmax_xent(&mut rng),
        "layer_norm" => check_layer_norm(&mut rng, seed),
        "encoder_layer" => check_encoder(&mut rng, seed),
        "grid_attention" => check_grid_attention(&mut rng, seed),
        "focal" => check_focal(&mut rng),
        "smooth_l1" => check_smooth_l1(&mut rng),
        "confidence" => check_confidence(&mut rng),
        "rcnn_loss" => check_rcnn_loss(&mut rng),
        "rcnn_heads" => check_rcnn_heads(&mut rng, seed),
        "rpn_loss" => check_rpn_loss(&mut rng),
        _ => return None,
    })
}

/// Every block at `seed`.
pub fn run_all(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    BLOCKS.iter().map(|&b| (b, run_block(b, seed).expect("known block"))).collect()
}
