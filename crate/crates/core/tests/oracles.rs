mod common;

use aunet::alignment::{alignment_loss, interocular_distance};
use aunet::attention::{attention_pool, predefined_attention, AttentionGrid, AuCenterSpec};
use aunet::dataset::{empirical_rates, generate_synthetic, CooccurrenceSpec, PairBoost};
use aunet::face::{template_vector, NUM_AUS};
use aunet::losses::{class_weights, dice_loss, weighted_softmax_loss};
use aunet::nn::FeatureMap;
use aunet::relation::{build_relation_matrix, threshold_adjacency, AdjacencyOptions, Propagation, RelationMatrix};
use common::{evaluate_trials, relation_trials, rng, uniform_vec};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn relation_matrix_matches_counting_oracle() {
    relation_trials(25, 400, 1).unwrap();
}

#[test]
fn evaluate_matches_confusion_oracle() {
    evaluate_trials(25, 2000, 2).unwrap();
}

fn hand_relation(m: Array2<f64>) -> RelationMatrix {
    let n = m.nrows();
    RelationMatrix {
        m,
        support_counts: Array2::zeros((n, n)),
        undefined_rows: vec![],
    }
}

#[test]
fn threshold_above_every_off_diagonal_gives_identity() {
    let rel = hand_relation(array![[1.0, 0.3, 0.7], [0.2, 1.0, 0.65], [0.1, 0.4, 1.0]]);
    let raw = AdjacencyOptions {
        propagation: Propagation::Raw,
        ..Default::default()
    };
    let adj = threshold_adjacency(&rel, 0.71, raw).unwrap();
    assert_eq!(adj.m_bool, Array2::<u8>::eye(3));
    let adj = threshold_adjacency(&rel, 0.65, raw).unwrap();
    assert_eq!(adj.m_bool, array![[1u8, 0, 1], [0, 1, 1], [0, 0, 1]]);
    // rows of (M_bool ∨ I) averaged
    let adj = threshold_adjacency(&rel, 0.65, AdjacencyOptions::default()).unwrap();
    assert_eq!(adj.g, array![[0.5, 0.0, 0.5], [0.0, 0.5, 0.5], [0.0, 0.0, 1.0]]);
}

#[test]
fn symmetrize_and_transpose_options() {
    let rel = hand_relation(array![[1.0, 0.9], [0.1, 1.0]]);
    let t = |o| threshold_adjacency(&rel, 0.5, o).unwrap().m_bool;
    let base = AdjacencyOptions {
        propagation: Propagation::Raw,
        ..Default::default()
    };
    assert_eq!(t(base), array![[1u8, 1], [0, 1]]);
    assert_eq!(t(AdjacencyOptions { transpose: true, ..base }), array![[1u8, 0], [1, 1]]);
    assert_eq!(t(AdjacencyOptions { symmetrize: true, ..base }), array![[1u8, 1], [1, 1]]);
}

#[test]
fn all_ones_labels_at_threshold_one() {
    let labels = vec![[1u8; NUM_AUS]; 5];
    let adj = threshold_adjacency(&build_relation_matrix(&labels).unwrap(), 1.0, AdjacencyOptions::default()).unwrap();
    assert!(adj.m_bool.iter().all(|&v| v == 1));
    assert!(threshold_adjacency(&build_relation_matrix(&labels).unwrap(), 0.0, AdjacencyOptions::default()).is_err());
}

#[test]
fn attention_pool_matches_brute_force_sum() {
    let mut r = rng(8);
    for _ in 0..50 {
        let (c, h, w) = (r.random_range(1..5), r.random_range(1..9), r.random_range(1..9));
        let shared = FeatureMap::from_vec(c, h, w, uniform_vec(&mut r, c * h * w, -2.0, 2.0)).unwrap();
        let attn = uniform_vec(&mut r, h * w, 0.0, 1.0);
        let (q, _) = attention_pool(&shared, &attn).unwrap();
        for (ch, &qc) in q.iter().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    num += attn[y * w + x] * shared.at(ch, y, x);
                    den += attn[y * w + x];
                }
            }
            assert!((qc - num / den).abs() <= 1e-12 * (1.0 + qc.abs()));
        }
    }
}

fn grid() -> AttentionGrid {
    AttentionGrid {
        h: 28,
        w: 28,
        cell_px: 4.0,
        radius: 8.0,
    }
}

#[test]
fn decay_profile_follows_manhattan_distance() {
    let mut lm = template_vector();
    let spec = AuCenterSpec::default();
    // put both anchors of AU index 4 (eye corners, no offset) on cell (row 12, col 10)
    for &l in &spec.entries[4].landmarks {
        lm[2 * l] = 42.0;
        lm[2 * l + 1] = 50.0;
    }
    let map = &predefined_attention(&spec, &lm, &grid()).unwrap()[4];
    for r in 0..28 {
        for c in 0..28 {
            let k = (r as f64 - 12.0).abs() + (c as f64 - 10.0).abs();
            assert_eq!(map.at(r, c), (1.0 - k / 8.0).max(0.0), "cell ({r},{c})");
        }
    }
}

#[test]
fn pair_boost_raises_conditional_rate() {
    let spec = CooccurrenceSpec {
        base_rates: [0.3; NUM_AUS],
        pair_boosts: vec![PairBoost {
            source: 0,
            target: 1,
            strength: 1.0,
        }],
        seed: 4,
    };
    let data = generate_synthetic(&spec, 10_000).unwrap();
    let rows = data.manifest.label_rows();
    let rates = empirical_rates(&data.manifest).unwrap();
    let with0: Vec<_> = rows.iter().filter(|l| l[0] == 1).collect();
    let cond = with0.iter().filter(|l| l[1] == 1).count() as f64 / with0.len() as f64;
    assert!(cond >= rates[1], "P(AU1|AU0) {cond} < P(AU1) {}", rates[1]);
    assert_eq!(cond, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn class_weights_sum_to_class_count(rates in prop::collection::vec(0.01f64..=1.0, 1..20)) {
        let w = class_weights(&rates).unwrap().w;
        prop_assert!((w.iter().sum::<f64>() - rates.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn losses_are_invariant_to_consistent_au_permutation(
        y in prop::collection::vec(0u8..2, NUM_AUS),
        p in prop::collection::vec(0.01f64..0.99, NUM_AUS),
        w in prop::collection::vec(0.1f64..3.0, NUM_AUS),
        shift in 0usize..NUM_AUS,
    ) {
        let rot = |v: &[f64]| { let mut v = v.to_vec(); v.rotate_left(shift); v };
        let mut yr = y.clone();
        yr.rotate_left(shift);
        let a = weighted_softmax_loss(&y, &p, &w).unwrap();
        let b = weighted_softmax_loss(&yr, &rot(&p), &rot(&w)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let a = dice_loss(&y, &p, &w, 1.0).unwrap();
        let b = dice_loss(&yr, &rot(&p), &rot(&w), 1.0).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn doubling_one_weight_doubles_its_contribution(
        y in prop::collection::vec(0u8..2, NUM_AUS),
        p in prop::collection::vec(0.01f64..0.99, NUM_AUS),
        i in 0usize..NUM_AUS,
    ) {
        let ones = vec![1.0; NUM_AUS];
        let mut two = ones.clone();
        two[i] = 2.0;
        let mut only = vec![0.0; NUM_AUS];
        only[i] = 1.0;
        let base = weighted_softmax_loss(&y, &p, &ones).unwrap();
        let doubled = weighted_softmax_loss(&y, &p, &two).unwrap();
        let term = weighted_softmax_loss(&y, &p, &only).unwrap();
        prop_assert!((doubled - base - term).abs() < 1e-12);
    }

    #[test]
    fn interocular_distance_ignores_translation(dx in -10.0f64..10.0, dy in -10.0f64..10.0) {
        let lm = template_vector();
        let moved: Vec<f64> = lm.iter().enumerate().map(|(k, v)| v + if k % 2 == 0 { dx } else { dy }).collect();
        let a = interocular_distance(&lm, (19, 28)).unwrap().d;
        let b = interocular_distance(&moved, (19, 28)).unwrap().d;
        prop_assert!((a - b).abs() < 1e-9);
        let scale = interocular_distance(&lm, (19, 28)).unwrap();
        prop_assert_eq!(alignment_loss(&lm, &lm, scale).unwrap(), 0.0);
    }

    #[test]
    fn predefined_maps_translate_with_landmarks(shift in 1usize..4) {
        // shifting every landmark by `shift` cells moves each map by the same
        // number of columns, up to clipping at the border
        let lm = template_vector();
        let g = grid();
        let moved: Vec<f64> = lm.iter().enumerate().map(|(k, v)| if k % 2 == 0 { v + shift as f64 * g.cell_px } else { *v }).collect();
        let spec = AuCenterSpec::default();
        let a = predefined_attention(&spec, &lm, &g).unwrap();
        let b = predefined_attention(&spec, &moved, &g).unwrap();
        for (ma, mb) in a.iter().zip(&b) {
            for r in 0..g.h {
                for c in shift..g.w {
                    prop_assert!((mb.at(r, c) - ma.at(r, c - shift)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn relation_diagonal_is_one_for_occurring_aus(seed in 0u64..1000) {
        let mut r = rng(seed);
        let labels = common::random_labels(&mut r, 50, 0.3);
        let rel = build_relation_matrix(&labels).unwrap();
        for i in 0..NUM_AUS {
            let expect = if rel.undefined_rows.contains(&i) { 0.0 } else { 1.0 };
            prop_assert_eq!(rel.m[[i, i]], expect);
        }
    }
}
