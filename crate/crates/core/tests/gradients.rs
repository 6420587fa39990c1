mod common;

use aunet::backbone::{Backbone, MultiScaleConfig};
use aunet::dataset::{generate_synthetic, CooccurrenceSpec, Dataset};
use aunet::model::{AuNet, HeadKind};
use aunet::nn::{Activation, FeatureMap, ParamId, ParamStore};
use aunet::relation::BooleanAdjacency;
use aunet::train::{build_adjacency, extract_all, training_weights, RunConfig};
use common::gradcheck;
use common::{rel_err, rng, uniform_vec, FD_STEP, FD_TOL};
use rand::Rng;

#[test]
fn loss_and_layer_gradients_match_central_differences() {
    for (name, worst) in gradcheck::all(20, 100) {
        assert!(worst <= FD_TOL, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn backbone_weight_perturbation_matches_gradient() {
    let cfg = MultiScaleConfig {
        input_size: 16,
        base_channels: 4,
        partition_grids: [4, 2, 1],
        activation: Activation::Tanh,
    };
    let mut ps = ParamStore::new();
    let bb = Backbone::build(&mut ps, &cfg, 9).unwrap();
    let mut r = rng(4);
    let image = FeatureMap::from_vec(3, 16, 16, uniform_vec(&mut r, 3 * 256, 0.0, 1.0)).unwrap();
    let probe = uniform_vec(&mut r, 4 * 4 * 4, -1.0, 1.0);
    let objective = |ps: &ParamStore| -> f64 {
        let out = bb.forward_shared(ps, &image).unwrap().tensor;
        out.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = bb.forward(&ps, &image).unwrap();
    let mut grads = ps.zero_grads();
    let g_out = FeatureMap::from_vec(4, 4, 4, probe.clone()).unwrap();
    bb.backward(&ps, &cache, &g_out, &mut grads);

    let ids: Vec<ParamId> = ps.ids().collect();
    for id in ids {
        let n = ps.get(id).len();
        for _ in 0..8 {
            let k = r.random_range(0..n);
            let v0 = ps.get(id)[k];
            let mut q = ps.clone();
            q.get_mut(id)[k] = v0 + FD_STEP;
            let fp = objective(&q);
            q.get_mut(id)[k] = v0 - FD_STEP;
            let fm = objective(&q);
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let err = rel_err(fd, grads.get(id)[k]);
            assert!(err <= FD_TOL, "{}[{k}]: fd {fd:e} vs analytic {:e}", ps.name(id), grads.get(id)[k]);
        }
    }
}

fn tiny_config() -> RunConfig {
    RunConfig {
        input_size: 112,
        base_channels: 4,
        activation: Activation::Tanh,
        gcn_activation: Activation::Tanh,
        local_width: 8,
        global_width: 8,
        hidden_width: 8,
        gcn_widths: vec![8, 4],
        ..RunConfig::default()
    }
}

fn tiny_data() -> Dataset {
    generate_synthetic(
        &CooccurrenceSpec {
            seed: 11,
            ..Default::default()
        },
        4,
    )
    .unwrap()
}

/// Central difference, or `None` when the point sits on or near a ReLU kink.
/// Zero-initialized biases put pre-activations at exactly 0, where a central
/// difference silently averages the two one-sided slopes, so the left and
/// right slopes are compared as well as two step sizes.
fn smooth_fd(f: &mut dyn FnMut(f64) -> f64, v0: f64) -> Option<f64> {
    let f0 = f(v0);
    let h = 1e-5;
    let left = (f0 - f(v0 - h)) / h;
    let right = (f(v0 + h) - f0) / h;
    let central = |f: &mut dyn FnMut(f64) -> f64, h: f64| (f(v0 + h) - f(v0 - h)) / (2.0 * h);
    let a = central(f, 1e-4);
    let b = central(f, 1e-5);
    (rel_err(left, right) <= 1e-3 && rel_err(a, b) <= 1e-3).then_some(a)
}

fn check_params(
    net: &mut AuNet,
    analytic: &aunet::nn::Grads,
    keep: impl Fn(&str) -> bool,
    per_tensor: usize,
    mut objective: impl FnMut(&AuNet) -> f64,
) {
    let mut r = rng(21);
    let (mut checked, mut skipped) = (0usize, 0usize);
    let ids: Vec<ParamId> = net.params.ids().filter(|&id| keep(net.params.name(id))).collect();
    for id in ids {
        let n = net.params.get(id).len();
        for _ in 0..per_tensor {
            let k = r.random_range(0..n);
            let v0 = net.params.get(id)[k];
            let mut f = |v: f64| {
                net.params.get_mut(id)[k] = v;
                let l = objective(net);
                net.params.get_mut(id)[k] = v0;
                l
            };
            match smooth_fd(&mut f, v0) {
                Some(fd) => {
                    checked += 1;
                    let an = analytic.get(id)[k];
                    assert!(rel_err(fd, an) <= FD_TOL, "{}[{k}]: fd {fd:e} vs analytic {an:e}", net.params.name(id));
                }
                None => skipped += 1,
            }
        }
    }
    assert!(skipped * 10 <= checked, "too many kinked points: {skipped} of {}", checked + skipped);
}

#[test]
fn stage_one_objective_gradient_covers_every_trained_tensor() {
    let cfg = tiny_config();
    let data = tiny_data();
    let mut net = AuNet::new(&cfg.model().unwrap(), 3).unwrap();
    let w = training_weights(&data.manifest.label_rows()).unwrap();
    let (lc, st) = (cfg.loss(), cfg.stage_one());
    let mut g = net.params.zero_grads();
    net.stage1_loss_and_grad(data.sample(0), &w, &lc, &st, &mut g).unwrap();
    // stage 1 never touches the graph head, the graph stack or buffers
    let keep = |n: &str| !n.starts_with("gcn") && !n.starts_with("fcn.graph") && !n.contains(".norm_");
    check_params(&mut net, &g, keep, 3, |m| {
        let mut scratch = m.params.zero_grads();
        m.stage1_loss_and_grad(data.sample(0), &w, &lc, &st, &mut scratch).unwrap().0.total
    });
}

#[test]
fn graph_head_gradient_reaches_gcn_and_classifier() {
    let cfg = tiny_config();
    let data = tiny_data();
    let mut net = AuNet::new(&cfg.model().unwrap(), 5).unwrap();
    let feats = extract_all(&net, &data, cfg.execution()).unwrap();
    net.fit_standardization(HeadKind::Graph, &feats);
    let labels = data.manifest.label_rows();
    let adj: BooleanAdjacency = build_adjacency(&labels, &cfg).unwrap();
    let w = training_weights(&labels).unwrap();
    let lc = cfg.loss();
    let mut g = net.params.zero_grads();
    net.head_loss_and_grad(HeadKind::Graph, &feats[1], &labels[1], &adj.g, &w, &lc, &mut g).unwrap();
    let keep = |n: &str| (n.starts_with("gcn") || n.starts_with("fcn.graph")) && !n.contains(".norm_");
    check_params(&mut net, &g, keep, 6, |m| {
        let mut scratch = m.params.zero_grads();
        m.head_loss_and_grad(HeadKind::Graph, &feats[1], &labels[1], &adj.g, &w, &lc, &mut scratch)
            .unwrap()
            .0
    });
}
