//! Finite-difference gradient suites. Each returns the worst relative error
//! seen over `points` random evaluation points.
#![allow(dead_code)]

use aunet::alignment::{alignment_loss, alignment_loss_grad, InterocularScale};
use aunet::attention::{attention_pool, attention_pool_backward};
use aunet::face::{LANDMARK_DIM, NUM_AUS};
use aunet::losses::{
    au_loss_and_grad, class_weights, dice_grad, dice_loss, weighted_softmax_grad, weighted_softmax_loss, LossConfig,
};
use aunet::nn::{Activation, FeatureMap, ParamStore};
use aunet::relation::GcnStack;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{rng, uniform_vec, fd_relative_error};

fn labels(r: &mut ChaCha8Rng) -> Vec<u8> {
    (0..NUM_AUS).map(|_| r.random_range(0..2u8)).collect()
}

fn weights(r: &mut ChaCha8Rng) -> Vec<f64> {
    class_weights(&uniform_vec(r, NUM_AUS, 0.05, 0.95)).unwrap().w
}

// probabilities stay away from the clamp at 1e-7 so the loss is smooth
fn probs(r: &mut ChaCha8Rng) -> Vec<f64> {
    uniform_vec(r, NUM_AUS, 0.15, 0.85)
}

pub fn alignment(points: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let y = uniform_vec(&mut r, LANDMARK_DIM, 0.0, 112.0);
        let y_hat = uniform_vec(&mut r, LANDMARK_DIM, 0.0, 112.0);
        let d = InterocularScale::new(r.random_range(20.0..60.0)).unwrap();
        let g = alignment_loss_grad(&y, &y_hat, d).unwrap();
        let mut f = |x: &[f64]| alignment_loss(&y, x, d).unwrap();
        worst = worst.max(fd_relative_error(&mut f, &y_hat, &g));
    }
    worst
}

pub fn weighted_softmax(points: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let (y, w, p) = (labels(&mut r), weights(&mut r), probs(&mut r));
        let g = weighted_softmax_grad(&y, &p, &w).unwrap();
        let mut f = |x: &[f64]| weighted_softmax_loss(&y, x, &w).unwrap();
        worst = worst.max(fd_relative_error(&mut f, &p, &g));
    }
    worst
}

pub fn dice(points: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let (y, w, p) = (labels(&mut r), weights(&mut r), probs(&mut r));
        let eps = r.random_range(0.1..2.0);
        let g = dice_grad(&y, &p, &w, eps).unwrap();
        let mut f = |x: &[f64]| dice_loss(&y, x, &w, eps).unwrap();
        worst = worst.max(fd_relative_error(&mut f, &p, &g));
    }
    worst
}

pub fn combined(points: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let (y, w, p) = (labels(&mut r), weights(&mut r), probs(&mut r));
        let cfg = LossConfig {
            lambda2: r.random_range(0.0..2.0),
            epsilon: r.random_range(0.1..2.0),
        };
        let (_, g) = au_loss_and_grad(&y, &p, &w, &cfg).unwrap();
        let mut f = |x: &[f64]| au_loss_and_grad(&y, x, &w, &cfg).unwrap().0;
        worst = worst.max(fd_relative_error(&mut f, &p, &g));
    }
    worst
}

fn row_normalized(r: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let mut g = Array2::from_shape_fn((n, n), |(i, j)| if i == j || r.random::<f64>() < 0.3 { 1.0 } else { 0.0 });
    for mut row in g.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    g
}

/// Two-layer tanh stack; the scalar objective is `Σ R ⊙ Z_out` for a random
/// `R`. Checks the gradient with respect to every weight and to `Z_0`.
pub fn gcn(points: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let widths = [6, 5, 4];
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let mut ps = ParamStore::new();
        let stack = GcnStack::new(&mut ps, &widths, Activation::Tanh, seed.wrapping_add(p as u64)).unwrap();
        let g = row_normalized(&mut r, NUM_AUS);
        let z0 = Array2::from_shape_vec((NUM_AUS, widths[0]), uniform_vec(&mut r, NUM_AUS * widths[0], -1.0, 1.0)).unwrap();
        let probe = Array2::from_shape_vec((NUM_AUS, 4), uniform_vec(&mut r, NUM_AUS * 4, -1.0, 1.0)).unwrap();
        let objective = |ps: &ParamStore, z: &Array2<f64>| (&stack.forward(ps, &g, z).unwrap().output * &probe).sum();

        let cache = stack.forward(&ps, &g, &z0).unwrap();
        let mut grads = ps.zero_grads();
        let gz0 = stack.backward(&ps, &g, &cache, &probe, &mut grads);

        let x = z0.as_slice().unwrap().to_vec();
        let mut fz = |v: &[f64]| objective(&ps, &Array2::from_shape_vec(z0.dim(), v.to_vec()).unwrap());
        worst = worst.max(fd_relative_error(&mut fz, &x, gz0.as_slice().unwrap()));

        for &id in &stack.layers {
            let w0 = ps.get(id).to_vec();
            let analytic = grads.get(id).to_vec();
            let mut fw = |v: &[f64]| {
                let mut q = ps.clone();
                q.get_mut(id).copy_from_slice(v);
                objective(&q, &z0)
            };
            worst = worst.max(fd_relative_error(&mut fw, &w0, &analytic));
        }
    }
    worst
}

/// Objective `Σ_c r_c · pool(shared, a)_c`; gradient w.r.t. the feature map
/// and the attention weights.
pub fn attention_pooling(points: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, h, w) = (3, 5, 5);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let shared = FeatureMap::from_vec(c, h, w, uniform_vec(&mut r, c * h * w, -1.0, 1.0)).unwrap();
        let attn = uniform_vec(&mut r, h * w, 0.05, 1.0);
        let probe = uniform_vec(&mut r, c, -1.0, 1.0);
        let dot = |q: &[f64]| q.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();

        let (pooled, mass) = attention_pool(&shared, &attn).unwrap();
        let mut g_shared = FeatureMap::zeros(c, h, w);
        let g_attn = attention_pool_backward(&shared, &attn, &pooled, mass, &probe, &mut g_shared);

        let mut fa = |v: &[f64]| dot(&attention_pool(&shared, v).unwrap().0);
        worst = worst.max(fd_relative_error(&mut fa, &attn, &g_attn));
        let mut fs = |v: &[f64]| dot(&attention_pool(&FeatureMap::from_vec(c, h, w, v.to_vec()).unwrap(), &attn).unwrap().0);
        worst = worst.max(fd_relative_error(&mut fs, &shared.data, &g_shared.data));
    }
    worst
}

/// Every suite with its name.
pub fn all(points: usize, seed: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("alignment_loss", alignment(points, seed)),
        ("weighted_softmax_loss", weighted_softmax(points, seed + 1)),
        ("dice_loss", dice(points, seed + 2)),
        ("combined_loss", combined(points, seed + 3)),
        ("gcn_forward", gcn(points, seed + 4)),
        ("attention_pooling", attention_pooling(points, seed + 5)),
    ]
}
