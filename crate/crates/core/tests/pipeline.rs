mod common;

use std::sync::OnceLock;

use aunet::backbone::PartitionedConv;
use aunet::checkpoint::Checkpoint;
use aunet::dataset::{generate_synthetic, CooccurrenceSpec, Dataset};
use aunet::metrics::EvalReport;
use aunet::model::{AuNet, HeadKind};
use aunet::nn::{FeatureMap, Grads, Init, ParamStore, Partition};
use aunet::train::{
    build_adjacency, run_ablation_from, run_stage1, run_stage2, training_weights, EpochRecord, OptimizerConfig,
    RunConfig, Sgd, StageOutput,
};
use common::{checksum, rng, uniform_vec};

fn cfg() -> RunConfig {
    RunConfig {
        base_channels: 4,
        stage1_epochs: 2,
        stage2_epochs: 3,
        batch_size: 8,
        ..RunConfig::default()
    }
}

fn data() -> &'static Dataset {
    static D: OnceLock<Dataset> = OnceLock::new();
    D.get_or_init(|| {
        generate_synthetic(
            &CooccurrenceSpec {
                seed: 21,
                ..Default::default()
            },
            32,
        )
        .unwrap()
    })
}

fn stage1() -> &'static StageOutput {
    static S: OnceLock<StageOutput> = OnceLock::new();
    S.get_or_init(|| run_stage1(data(), &cfg(), None).unwrap())
}

fn mean_stage1_loss(model: &AuNet, cfg: &RunConfig) -> f64 {
    let d = data();
    let w = training_weights(&d.manifest.label_rows()).unwrap();
    let total: f64 = (0..d.len())
        .map(|i| {
            let mut g = model.params.zero_grads();
            model
                .stage1_loss_and_grad(d.sample(i), &w, &cfg.loss(), &cfg.stage_one(), &mut g)
                .unwrap()
                .0
                .total
        })
        .sum();
    total / d.len() as f64
}

#[test]
fn learning_rate_steps_down_every_two_epochs() {
    let o = OptimizerConfig::default();
    let lrs: Vec<f64> = (0..4).map(|e| o.lr_at(e)).collect();
    for (got, want) in lrs.iter().zip([0.01, 0.01, 0.003, 0.003]) {
        assert!((got - want).abs() < 1e-15, "{lrs:?}");
    }
}

#[test]
fn nesterov_step_matches_hand_recurrence() {
    let mut ps = ParamStore::new();
    let id = ps.register("fcn.x", &[1], Init::Zeros, 0);
    ps.get_mut(id)[0] = 1.0;
    let cfg = OptimizerConfig {
        momentum: 0.9,
        nesterov: true,
        weight_decay: 0.1,
        ..OptimizerConfig::default()
    };
    let mut opt = Sgd::new(&ps, &cfg);
    let (mut p, mut v) = (1.0f64, 0.0f64);
    for step in 0..5 {
        let g = 0.5 * step as f64 - 0.3;
        let mut grads: Grads = ps.zero_grads();
        grads.get_mut(id)[0] = g;
        opt.step(&mut ps, &grads, 0.05);
        // PyTorch: d = g + wd·p; v = μv + d; p -= lr·(d + μv)
        let d = g + 0.1 * p;
        v = 0.9 * v + d;
        p -= 0.05 * (d + 0.9 * v);
        assert!((ps.get(id)[0] - p).abs() < 1e-15);
    }
}

#[test]
fn stage_one_lowers_the_objective() {
    let c = cfg();
    let init = AuNet::new(&c.model().unwrap(), c.seed).unwrap();
    let before = mean_stage1_loss(&init, &c);
    let one = RunConfig { stage1_epochs: 1, ..c.clone() };
    let after = mean_stage1_loss(&run_stage1(data(), &one, None).unwrap().state.model, &c);
    assert!(after < before, "loss {before} -> {after}");
}

#[test]
fn stage_one_is_deterministic_and_mode_independent() {
    let a = stage1();
    let seq = RunConfig { parallel: false, ..cfg() };
    let b = run_stage1(data(), &seq, None).unwrap();
    assert_eq!(a.state.history, b.state.history);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    let other = RunConfig { seed: 1, ..cfg() };
    let c = run_stage1(data(), &other, None).unwrap();
    assert_ne!(a.checkpoint.to_bytes(), c.checkpoint.to_bytes());
}

#[test]
fn stage_two_leaves_feature_extractor_bytes_untouched() {
    let s1 = &stage1().checkpoint;
    let labels = data().manifest.label_rows();
    let adj = build_adjacency(&labels, &cfg()).unwrap();
    for kind in [HeadKind::Graph, HeadKind::Direct] {
        let out = run_stage2(s1, data(), &adj, &cfg(), kind, None).unwrap();
        for p in Partition::FEATURE_EXTRACTOR {
            assert_eq!(s1.partition_bytes(p), out.checkpoint.partition_bytes(p), "{p} changed ({kind:?})");
            assert!(out.state.optimizer.is_frozen(p));
        }
        // the arm that is not trained keeps its stage-1 values
        let other = match kind {
            HeadKind::Graph => "fcn.direct",
            HeadKind::Direct => "fcn.graph",
        };
        for (name, t) in s1.tensors().iter().filter(|(n, _)| n.starts_with(other) && !n.contains(".norm_")) {
            assert_eq!(out.checkpoint.get(name), Some(t), "{name}");
        }
        let h: Vec<&EpochRecord> = out.state.history.iter().collect();
        assert_eq!(h.len(), 3);
        assert!(h.last().unwrap().au_loss < h[0].au_loss, "{kind:?}: {:?}", h);
    }
}

#[test]
fn ablation_is_repeatable_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let s1 = &stage1().checkpoint;
    let a = run_ablation_from(s1, data(), None, &cfg(), Some(dir.path())).unwrap();
    let b = run_ablation_from(s1, data(), None, &cfg(), None).unwrap();
    assert_eq!(a.without_gcn, b.without_gcn);
    assert_eq!(a, b);
    for r in [&a.with_gcn, &a.without_gcn] {
        assert!((0.0..=1.0).contains(&r.competition_metric));
    }
    assert_eq!(EvalReport::load(&dir.path().join("report_with_gcn.json")).unwrap(), a.with_gcn);
    assert_eq!(EvalReport::load(&dir.path().join("report_without_gcn.json")).unwrap(), a.without_gcn);
    assert!((a.difference - (a.with_gcn.competition_metric - a.without_gcn.competition_metric)).abs() < 1e-15);
}

#[test]
fn checkpoint_files_restore_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_stage1(data(), &RunConfig { stage1_epochs: 1, ..cfg() }, Some(dir.path())).unwrap();
    let path = out.checkpoint_path.clone().unwrap();
    assert!(dir.path().join("stage1_epoch0.ckpt").exists());
    assert!(dir.path().join("history.jsonl").exists());
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let model = AuNet::from_checkpoint(&cfg().model().unwrap(), &loaded).unwrap();
    assert_eq!(Checkpoint::from_params(&model.params), loaded);

    // a checkpoint missing one tensor is refused
    let mut ps = ParamStore::new();
    ps.register("backbone.conv0.weight", &[4, 3, 3, 3], Init::Zeros, 0);
    assert!(AuNet::from_checkpoint(&cfg().model().unwrap(), &Checkpoint::from_params(&ps)).is_err());
    assert!(Checkpoint::load(&dir.path().join("absent.ckpt")).is_err());
}

#[test]
fn model_init_is_seeded() {
    let m = cfg().model().unwrap();
    let sum = |net: &AuNet| checksum(net.params.iter().flat_map(|(_, t)| t.data.clone()));
    let a = AuNet::new(&m, 5).unwrap();
    let b = AuNet::new(&m, 5).unwrap();
    let c = AuNet::new(&m, 6).unwrap();
    assert_eq!(sum(&a), sum(&b));
    assert_ne!(sum(&a), sum(&c));
}

#[test]
fn zeroed_classifier_outputs_one_half() {
    let c = cfg();
    let mut net = AuNet::new(&c.model().unwrap(), 1).unwrap();
    let ids: Vec<_> = net
        .params
        .ids()
        .filter(|&id| net.params.name(id).starts_with("fcn.direct") && !net.params.name(id).contains(".norm_"))
        .collect();
    for id in ids {
        net.params.get_mut(id).fill(0.0);
    }
    let g = aunet::relation::BooleanAdjacency::identity(12).g;
    let p = net.predict(HeadKind::Direct, data().sample(0).image, &g).unwrap();
    assert!(p.iter().all(|&v| v == 0.5), "{p:?}");
}

#[test]
fn partitioned_layer_is_local_to_its_cell() {
    let mut ps = ParamStore::new();
    let layer = PartitionedConv::new(&mut ps, "backbone.region0", 4, 2, 3);
    let mut r = rng(2);
    let x = FeatureMap::from_vec(2, 16, 16, uniform_vec(&mut r, 512, -1.0, 1.0)).unwrap();
    let mut y = x.clone();
    // perturb inside cell (row 1, col 2): pixels y 4..8, x 8..12
    for ch in 0..2 {
        for yy in 4..8 {
            for xx in 8..12 {
                y.plane_mut(ch)[yy * 16 + xx] += 0.5;
            }
        }
    }
    let (a, b) = (layer.forward(&ps, &x), layer.forward(&ps, &y));
    for ch in 0..2 {
        for yy in 0..16 {
            for xx in 0..16 {
                let inside = (4..8).contains(&yy) && (8..12).contains(&xx);
                let differs = a.at(ch, yy, xx) != b.at(ch, yy, xx);
                assert!(inside || !differs, "change leaked to ({ch},{yy},{xx})");
            }
        }
    }
    assert!(a.data != b.data);
}
