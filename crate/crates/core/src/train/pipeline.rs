use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{rates_of, AuLabels, Dataset};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::face::NUM_AUS;
use crate::losses::{class_weights, ClassWeights};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{AuNet, FrozenFeatures, HeadKind, LossBreakdown};
use crate::nn::{Grads, Partition, Standardize};
use crate::relation::{relation_from_au_labels, threshold_adjacency, BooleanAdjacency};
use crate::train::{RunConfig, Sgd};

/// One line of `history.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub head: HeadKind,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub align_loss: f64,
    pub au_loss: f64,
    pub local_loss: f64,
    /// Competition metric of the predictions made while training this epoch.
    pub train_metric: f64,
}

pub struct TrainState {
    pub model: AuNet,
    pub optimizer: Sgd,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    fn new(model: AuNet, seed: u64, cfg: &RunConfig) -> Self {
        let optimizer = Sgd::new(&model.params, &cfg.optimizer());
        TrainState {
            model,
            optimizer,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            history: Vec::new(),
        }
    }

    pub fn frozen(&self) -> Vec<Partition> {
        Partition::ALL.into_iter().filter(|&p| self.optimizer.is_frozen(p)).collect()
    }
}

pub struct StageOutput {
    pub state: TrainState,
    /// Snapshot after the last epoch.
    pub checkpoint: Checkpoint,
    pub checkpoint_path: Option<PathBuf>,
}

/// Paired result of the graph / no-graph comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_gcn: EvalReport,
    pub without_gcn: EvalReport,
    /// `with_gcn.competition_metric - without_gcn.competition_metric`.
    pub difference: f64,
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Class weights from training-label rates; rates of AUs that never occur
/// are raised to `1 / (2n)` so the weights stay finite.
pub fn training_weights(labels: &[AuLabels]) -> Result<ClassWeights> {
    let floor = 1.0 / (2.0 * labels.len() as f64);
    let rates = rates_of(labels)?;
    if rates.contains(&0.0) {
        warn!("some AUs never occur in the training labels; clamping their rate to {floor}");
    }
    class_weights(&rates.map(|r| r.max(floor)))
}

pub fn build_adjacency(labels: &[AuLabels], cfg: &RunConfig) -> Result<BooleanAdjacency> {
    let rel = relation_from_au_labels(labels)?;
    let adj = threshold_adjacency(&rel, cfg.relation_threshold, cfg.adjacency())?;
    if !adj.undefined_rows.is_empty() {
        warn!("relation rows {:?} are undefined (AU never occurs)", adj.undefined_rows);
    }
    Ok(adj)
}

struct Sink<'a> {
    dir: Option<&'a Path>,
}

impl Sink<'_> {
    fn history(&self, rec: &EpochRecord) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        let path = dir.join("history.jsonl");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&path, e))
    }

    fn checkpoint(&self, ck: &Checkpoint, name: &str) -> Result<Option<PathBuf>> {
        let Some(dir) = self.dir else { return Ok(None) };
        let path = dir.join(name);
        ck.save(&path)?;
        Ok(Some(path))
    }
}

fn prepare_dir(dir: Option<&Path>) -> Result<()> {
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    Ok(())
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

struct StepResult {
    grads: Grads,
    loss: LossBreakdown,
    probs: [f64; NUM_AUS],
}

/// Sums per-sample gradients in batch order, then averages.
fn reduce(results: Vec<Result<StepResult>>, sums: &mut LossBreakdown, preds: &mut Vec<(usize, [f64; NUM_AUS])>, batch: &[usize]) -> Result<Grads> {
    let n = results.len() as f64;
    let mut acc: Option<Grads> = None;
    for (r, &i) in results.into_iter().zip(batch) {
        let r = r?;
        sums.total += r.loss.total;
        sums.align += r.loss.align;
        sums.au += r.loss.au;
        sums.local += r.loss.local;
        preds.push((i, r.probs));
        match acc.as_mut() {
            None => acc = Some(r.grads),
            Some(a) => a.add_assign(&r.grads),
        }
    }
    let mut g = acc.expect("non-empty batch");
    g.scale(1.0 / n);
    Ok(g)
}

fn clip(g: &mut Grads, max_norm: f64) {
    let n = g.norm();
    if max_norm > 0.0 && n > max_norm {
        g.scale(max_norm / n);
    }
}

fn epoch_metric(preds: &mut [(usize, [f64; NUM_AUS])], labels: &[AuLabels], threshold: f64) -> Result<f64> {
    preds.sort_by_key(|p| p.0);
    let p: Vec<[f64; NUM_AUS]> = preds.iter().map(|p| p.1).collect();
    let l: Vec<AuLabels> = preds.iter().map(|p| labels[p.0]).collect();
    Ok(evaluate(&p, &l, threshold)?.competition_metric)
}

fn diverged(epoch: usize, last: &Option<PathBuf>) -> Error {
    Error::Diverged {
        epoch,
        last_checkpoint: last.clone(),
    }
}

/// Stage 1: alignment, attention, global and the direct classifier, trained
/// jointly on `λ_align·E_align + L_au + λ_local·L_local`. The graph stack is
/// frozen.
pub fn run_stage1(data: &Dataset, cfg: &RunConfig, out_dir: Option<&Path>) -> Result<StageOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::validation("stage 1 needs a non-empty training manifest"));
    }
    prepare_dir(out_dir)?;
    let sink = Sink { dir: out_dir };
    let opt_cfg = cfg.optimizer();
    let labels = data.manifest.label_rows();
    let weights = training_weights(&labels)?;
    let loss_cfg = cfg.loss();
    let stage = cfg.stage_one();
    let exec = cfg.execution();

    let model = AuNet::new(&cfg.model()?, cfg.seed)?;
    let mut st = TrainState::new(model, cfg.seed, cfg);
    st.optimizer.freeze(&[Partition::Gcn]);
    st.optimizer.skip_prefix(&st.model.params, HeadKind::Graph.prefix());
    st.optimizer.skip_where(&st.model.params, Standardize::is_buffer);

    let mut last_ckpt: Option<PathBuf> = None;
    let mut ck = Checkpoint::from_params(&st.model.params);
    for epoch in 0..opt_cfg.stage1_epochs {
        let lr = opt_cfg.lr_at(epoch);
        let order = shuffled(&mut st.rng, data.len());
        let mut sums = LossBreakdown::default();
        let mut preds = Vec::with_capacity(data.len());
        for batch in order.chunks(opt_cfg.batch_size) {
            let model = &st.model;
            let results = map_indexed(exec, batch.len(), |k| {
                let mut grads = model.params.zero_grads();
                let (loss, probs) = model.stage1_loss_and_grad(data.sample(batch[k]), &weights, &loss_cfg, &stage, &mut grads)?;
                Ok(StepResult { grads, loss, probs })
            });
            let mut g = reduce(results, &mut sums, &mut preds, batch)?;
            if !sums.total.is_finite() || !g.norm().is_finite() {
                return Err(diverged(epoch, &last_ckpt));
            }
            clip(&mut g, cfg.grad_clip_norm);
            st.optimizer.step(&mut st.model.params, &g, lr);
        }
        let n = data.len() as f64;
        let rec = EpochRecord {
            stage: 1,
            head: HeadKind::Direct,
            epoch,
            lr,
            loss: sums.total / n,
            align_loss: sums.align / n,
            au_loss: sums.au / n,
            local_loss: sums.local / n,
            train_metric: epoch_metric(&mut preds, &labels, cfg.decision_threshold)?,
        };
        info!(
            "stage 1 epoch {epoch}: loss {:.5} (align {:.5}, au {:.5}, local {:.5}) metric {:.4}",
            rec.loss, rec.align_loss, rec.au_loss, rec.local_loss, rec.train_metric
        );
        sink.history(&rec)?;
        st.history.push(rec);
        st.epoch = epoch + 1;
        ck = Checkpoint::from_params(&st.model.params);
        if let Some(p) = sink.checkpoint(&ck, &format!("stage1_epoch{epoch}.ckpt"))? {
            last_ckpt = Some(p);
        }
    }
    let checkpoint_path = sink.checkpoint(&ck, "stage1.ckpt")?;
    Ok(StageOutput {
        state: st,
        checkpoint: ck,
        checkpoint_path,
    })
}

/// Runs the frozen extractor over every sample.
pub fn extract_all(model: &AuNet, data: &Dataset, exec: Execution) -> Result<Vec<FrozenFeatures>> {
    map_indexed(exec, data.len(), |i| model.extract_features(data.sample(i).image))
        .into_iter()
        .collect()
}

/// Stage 2: loads the stage-1 snapshot, freezes the feature extractor and
/// trains only the chosen head (plus the graph stack for [`HeadKind::Graph`])
/// on `L_au`. The head is re-initialized from the run seed.
pub fn run_stage2(
    stage1: &Checkpoint,
    data: &Dataset,
    adjacency: &BooleanAdjacency,
    cfg: &RunConfig,
    kind: HeadKind,
    out_dir: Option<&Path>,
) -> Result<StageOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::validation("stage 2 needs a non-empty training manifest"));
    }
    prepare_dir(out_dir)?;
    let sink = Sink { dir: out_dir };
    let opt_cfg = cfg.optimizer();
    let labels = data.manifest.label_rows();
    let weights = training_weights(&labels)?;
    let loss_cfg = cfg.loss();
    let exec = cfg.execution();
    let g = &adjacency.g;

    let mut model = AuNet::from_checkpoint(&cfg.model()?, stage1)?;
    model.reinit_head(kind, cfg.seed);
    let mut st = TrainState::new(model, cfg.seed.wrapping_add(1), cfg);
    st.optimizer.freeze(&Partition::FEATURE_EXTRACTOR);
    let other = match kind {
        HeadKind::Direct => {
            st.optimizer.freeze(&[Partition::Gcn]);
            HeadKind::Graph
        }
        HeadKind::Graph => HeadKind::Direct,
    };
    st.optimizer.skip_prefix(&st.model.params, other.prefix());
    st.optimizer.skip_where(&st.model.params, Standardize::is_buffer);

    let feats = extract_all(&st.model, data, exec)?;
    st.model.fit_standardization(kind, &feats);
    let offset = if cfg.stage2_lr_restart { 0 } else { opt_cfg.stage1_epochs };
    let tag = match kind {
        HeadKind::Direct => "direct",
        HeadKind::Graph => "graph",
    };
    let mut last_ckpt: Option<PathBuf> = None;
    let mut ck = Checkpoint::from_params(&st.model.params);
    for epoch in 0..opt_cfg.stage2_epochs {
        let lr = opt_cfg.lr_at(offset + epoch);
        let order = shuffled(&mut st.rng, data.len());
        let mut sums = LossBreakdown::default();
        let mut preds = Vec::with_capacity(data.len());
        for batch in order.chunks(opt_cfg.batch_size) {
            let model = &st.model;
            let results = map_indexed(exec, batch.len(), |k| {
                let i = batch[k];
                let mut grads = model.params.zero_grads();
                let (au, probs) = model.head_loss_and_grad(kind, &feats[i], &labels[i], g, &weights, &loss_cfg, &mut grads)?;
                let loss = LossBreakdown {
                    total: au,
                    au,
                    ..Default::default()
                };
                Ok(StepResult { grads, loss, probs })
            });
            let mut gr = reduce(results, &mut sums, &mut preds, batch)?;
            if !sums.total.is_finite() || !gr.norm().is_finite() {
                return Err(diverged(epoch, &last_ckpt));
            }
            clip(&mut gr, cfg.grad_clip_norm);
            st.optimizer.step(&mut st.model.params, &gr, lr);
        }
        let n = data.len() as f64;
        let rec = EpochRecord {
            stage: 2,
            head: kind,
            epoch,
            lr,
            loss: sums.total / n,
            align_loss: 0.0,
            au_loss: sums.au / n,
            local_loss: 0.0,
            train_metric: epoch_metric(&mut preds, &labels, cfg.decision_threshold)?,
        };
        info!("stage 2 ({tag}) epoch {epoch}: loss {:.5} metric {:.4}", rec.loss, rec.train_metric);
        sink.history(&rec)?;
        st.history.push(rec);
        st.epoch = epoch + 1;
        ck = Checkpoint::from_params(&st.model.params);
        if let Some(p) = sink.checkpoint(&ck, &format!("stage2_{tag}_epoch{epoch}.ckpt"))? {
            last_ckpt = Some(p);
        }
    }
    let checkpoint_path = sink.checkpoint(&ck, &format!("stage2_{tag}.ckpt"))?;
    Ok(StageOutput {
        state: st,
        checkpoint: ck,
        checkpoint_path,
    })
}

/// Predicted probabilities for every sample.
pub fn predict_all(model: &AuNet, kind: HeadKind, data: &Dataset, g: &Array2<f64>, exec: Execution) -> Result<Vec<[f64; NUM_AUS]>> {
    map_indexed(exec, data.len(), |i| model.predict(kind, data.sample(i).image, g))
        .into_iter()
        .collect()
}

pub fn evaluate_model(model: &AuNet, kind: HeadKind, data: &Dataset, g: &Array2<f64>, cfg: &RunConfig) -> Result<EvalReport> {
    let preds = predict_all(model, kind, data, g, cfg.execution())?;
    evaluate(&preds, &data.manifest.label_rows(), cfg.decision_threshold)
}

/// Trains stage 1 once, then both stage-2 arms from the same snapshot and
/// seed, and evaluates each on `test` (the training set when `None`).
pub fn run_ablation(train: &Dataset, test: Option<&Dataset>, cfg: &RunConfig, out_dir: Option<&Path>) -> Result<AblationReport> {
    let s1 = run_stage1(train, cfg, out_dir)?;
    run_ablation_from(&s1.checkpoint, train, test, cfg, out_dir)
}

/// Both stage-2 arms from an existing stage-1 snapshot.
pub fn run_ablation_from(
    stage1: &Checkpoint,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    let adj = build_adjacency(&train.manifest.label_rows(), cfg)?;
    let test = test.unwrap_or(train);
    let mut reports = Vec::with_capacity(2);
    for kind in [HeadKind::Graph, HeadKind::Direct] {
        let out = run_stage2(stage1, train, &adj, cfg, kind, out_dir)?;
        reports.push(evaluate_model(&out.state.model, kind, test, &adj.g, cfg)?);
    }
    let without_gcn = reports.pop().expect("two arms");
    let with_gcn = reports.pop().expect("two arms");
    let difference = with_gcn.competition_metric - without_gcn.competition_metric;
    let report = AblationReport {
        with_gcn,
        without_gcn,
        difference,
    };
    if let Some(d) = out_dir {
        let p = d.join("ablation.json");
        fs::write(&p, report.to_json()?).map_err(|e| Error::io(&p, e))?;
        report.with_gcn.save(&d.join("report_with_gcn.json"))?;
        report.without_gcn.save(&d.join("report_without_gcn.json"))?;
    }
    Ok(report)
}
