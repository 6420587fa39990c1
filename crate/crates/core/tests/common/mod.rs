//! Oracles and helpers shared by the integration tests and the acceptance
//! target. Nothing here calls into the code under test except to obtain the
//! value being checked.
#![allow(dead_code)]

pub mod gradcheck;

use aunet::dataset::AuLabels;
use aunet::face::NUM_AUS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error with an absolute floor so that two values that are both
/// essentially zero compare equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d < 1e-9 {
        return 0.0;
    }
    d / a.abs().max(b.abs())
}

/// Central difference of `f` at `x` along coordinate `k`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], k: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[k] += h;
    let fp = f(&xp);
    xp[k] = x[k] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Relative error of the whole gradient vector at one point,
/// `‖fd − analytic‖₂ / max(‖fd‖₂, ‖analytic‖₂)`, with central differences
/// taken along every coordinate of `x`.
pub fn fd_relative_error(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let fd: Vec<f64> = (0..x.len()).map(|k| central_diff(f, x, k, FD_STEP)).collect();
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|a| a * a).sum::<f64>().sqrt();
    let diff = norm(&mut fd.iter().zip(analytic).map(|(a, b)| a - b));
    let scale = norm(&mut fd.iter().copied()).max(norm(&mut analytic.iter().copied()));
    if diff < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

pub fn uniform_vec(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn random_labels(r: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<AuLabels> {
    (0..n)
        .map(|_| {
            let mut l = [0u8; NUM_AUS];
            for v in l.iter_mut() {
                *v = (r.random::<f64>() < p) as u8;
            }
            l
        })
        .collect()
}

/// `M[i][j] = #(i and j) / #(i)` by explicit per-pair counting.
pub fn brute_relation(labels: &[Vec<u8>]) -> Vec<Vec<Option<f64>>> {
    let r = labels[0].len();
    let mut out = vec![vec![None; r]; r];
    for i in 0..r {
        let ni = labels.iter().filter(|l| l[i] == 1).count();
        if ni == 0 {
            continue;
        }
        for j in 0..r {
            let nij = labels.iter().filter(|l| l[i] == 1 && l[j] == 1).count();
            out[i][j] = Some(nij as f64 / ni as f64);
        }
    }
    out
}

/// Per-AU F1, accuracy and combined metric from confusion counts built one
/// entry at a time.
pub fn brute_metrics(preds: &[[f64; NUM_AUS]], labels: &[AuLabels], t: f64) -> (Vec<f64>, f64, f64) {
    let mut f1 = Vec::with_capacity(NUM_AUS);
    let mut correct = 0usize;
    for au in 0..NUM_AUS {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (p, y) in preds.iter().zip(labels) {
            let hit = p[au] >= t;
            match (hit, y[au]) {
                (true, 1) => tp += 1,
                (true, _) => fp += 1,
                (false, 1) => fneg += 1,
                _ => {}
            }
            if hit == (y[au] == 1) {
                correct += 1;
            }
        }
        // 2PR/(P+R) reduced to integers, so the single division rounds exactly once
        let den = 2 * tp + fp + fneg;
        f1.push(if den == 0 { 0.0 } else { (2 * tp) as f64 / den as f64 });
    }
    let acc = correct as f64 / (preds.len() * NUM_AUS) as f64;
    let mean = f1.iter().sum::<f64>() / NUM_AUS as f64;
    (f1, acc, 0.5 * mean + 0.5 * acc)
}

pub fn checksum(values: impl IntoIterator<Item = f64>) -> u64 {
    values
        .into_iter()
        .fold(0xcbf29ce484222325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x100000001b3))
}

/// Random label matrices with up to `max_rows` rows and 2 to 12 columns,
/// some with columns that never fire. Returns a description of the first
/// mismatch against [`brute_relation`].
pub fn relation_trials(trials: usize, max_rows: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for t in 0..trials {
        let n = r.random_range(1..=max_rows);
        let cols = r.random_range(2..=NUM_AUS);
        let p = r.random_range(0.02..0.9);
        let labels: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..cols).map(|_| (r.random::<f64>() < p) as u8).collect())
            .collect();
        let got = aunet::relation::build_relation_matrix(&labels).map_err(|e| e.to_string())?;
        let want = brute_relation(&labels);
        for i in 0..cols {
            let undefined = got.undefined_rows.contains(&i);
            for j in 0..cols {
                let ok = match want[i][j] {
                    None => undefined && got.m[[i, j]] == 0.0,
                    Some(v) => !undefined && got.m[[i, j]] == v,
                };
                if !ok {
                    return Err(format!("trial {t}: M[{i}][{j}] = {} vs {:?}", got.m[[i, j]], want[i][j]));
                }
            }
        }
    }
    Ok(())
}

/// Random probability matrices with up to `max_rows` rows scored by
/// `evaluate` and by [`brute_metrics`]; every field must agree bit for bit.
pub fn evaluate_trials(trials: usize, max_rows: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for t in 0..trials {
        let n = r.random_range(1..=max_rows);
        let p = r.random_range(0.05..0.95);
        let labels = random_labels(&mut r, n, p);
        let preds: Vec<[f64; NUM_AUS]> = (0..n)
            .map(|_| std::array::from_fn(|_| if r.random::<f64>() < 0.05 { 0.5 } else { r.random::<f64>() }))
            .collect();
        let th = if t % 3 == 0 { 0.5 } else { r.random_range(0.05..0.95) };
        let got = aunet::metrics::evaluate(&preds, &labels, th).map_err(|e| e.to_string())?;
        let (f1, acc, metric) = brute_metrics(&preds, &labels, th);
        if got.per_au_f1 != f1 || got.total_accuracy != acc || got.competition_metric != metric {
            return Err(format!(
                "trial {t}: report {:?} vs oracle f1 {f1:?} acc {acc} metric {metric}",
                got
            ));
        }
    }
    Ok(())
}
