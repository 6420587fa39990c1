//! The full network: backbone → {alignment, attention, global} → fused
//! classifier, with either the direct local-feature pathway (stage 1, and the
//! no-graph ablation arm) or the graph-convolution pathway (stage 2).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::alignment::{alignment_loss, alignment_loss_grad, interocular_distance, AlignmentHead, ALIGNMENT_FEATURE_WIDTH};
use crate::attention::{AttentionGrid, AttentionModule, AuCenterSpec};
use crate::backbone::{Backbone, MultiScaleConfig};
use crate::checkpoint::Checkpoint;
use crate::dataset::{FaceImage, Sample};
use crate::error::{Error, Result};
use crate::face::{DEFAULT_EYE_PAIR, NUM_AUS};
use crate::losses::{au_loss_and_grad, two_class_prob, two_class_prob_backward, ClassWeights, LossConfig};
use crate::nn::{Activation, FeatureMap, Grads, Init, Linear, ParamId, ParamStore, Partition, Standardize};
use crate::relation::{node_matrix, GcnStack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: MultiScaleConfig,
    pub branch_channels: usize,
    pub local_width: usize,
    pub global_width: usize,
    pub hidden_width: usize,
    /// Hidden and output widths of the graph stack; the input width is
    /// `local_width`.
    pub gcn_widths: Vec<usize>,
    pub gcn_activation: Activation,
    pub attention_radius: f64,
    pub centers: AuCenterSpec,
    pub eye_pair: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: MultiScaleConfig::default(),
            branch_channels: 4,
            local_width: 64,
            global_width: 64,
            hidden_width: 64,
            gcn_widths: vec![64, 16],
            gcn_activation: Activation::Relu,
            attention_radius: 8.0,
            centers: AuCenterSpec::default(),
            eye_pair: DEFAULT_EYE_PAIR,
        }
    }
}

/// Which pathway feeds the local AU features into the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Concatenated `f_i`.
    Direct,
    /// Flattened graph-convolution output over the `f_i` nodes.
    Graph,
}

impl HeadKind {
    pub fn prefix(self) -> &'static str {
        match self {
            HeadKind::Direct => "fcn.direct",
            HeadKind::Graph => "fcn.graph",
        }
    }
}

/// Input standardization, one hidden ReLU layer, then 12 two-class logit
/// pairs.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub norm: Standardize,
    hidden: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
pub struct ClassifierCache {
    xs: Vec<f64>,
    h: Vec<f64>,
    pub logits: Vec<[f64; 2]>,
    pub probs: [f64; NUM_AUS],
}

impl Classifier {
    pub fn new(ps: &mut ParamStore, prefix: &str, n_in: usize, hidden: usize, seed: u64) -> Self {
        Classifier {
            norm: Standardize::new(ps, prefix, n_in),
            hidden: Linear::new(ps, &format!("{prefix}.hidden"), n_in, hidden, seed),
            out: Linear::new(ps, &format!("{prefix}.out"), hidden, 2 * NUM_AUS, seed),
        }
    }

    pub fn n_in(&self) -> usize {
        self.hidden.n_in
    }

    pub fn inits(&self) -> Vec<(ParamId, Init)> {
        let mut v = self.norm.inits().to_vec();
        v.extend(self.hidden.inits());
        v.extend(self.out.inits());
        v
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64]) -> Result<ClassifierCache> {
        if x.len() != self.hidden.n_in {
            return Err(Error::shape(format!(
                "classifier expects {} fused inputs, got {}",
                self.hidden.n_in,
                x.len()
            )));
        }
        let xs = self.norm.forward(ps, x);
        let mut h = self.hidden.forward(ps, &xs);
        Activation::Relu.apply(&mut h);
        let z = self.out.forward(ps, &h);
        let logits: Vec<[f64; 2]> = z.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let mut probs = [0.0; NUM_AUS];
        for (p, l) in probs.iter_mut().zip(&logits) {
            *p = two_class_prob(*l);
        }
        Ok(ClassifierCache { xs, h, logits, probs })
    }

    pub fn backward(&self, ps: &ParamStore, cache: &ClassifierCache, g_probs: &[f64], grads: &mut Grads) -> Vec<f64> {
        let gz: Vec<f64> = cache
            .logits
            .iter()
            .zip(g_probs)
            .flat_map(|(l, &g)| two_class_prob_backward(*l, g))
            .collect();
        let mut gh = self.out.backward(ps, &cache.h, &gz, grads);
        Activation::Relu.backward(&cache.h, &mut gh);
        let gxs = self.hidden.backward(ps, &cache.xs, &gh, grads);
        self.norm.backward(ps, &gxs)
    }
}

/// Outputs of the frozen feature extractor for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenFeatures {
    pub alignment_feature: Vec<f64>,
    pub global_feature: Vec<f64>,
    pub local: Vec<Vec<f64>>,
    pub predicted_landmarks: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageOneWeights {
    pub lambda_align: f64,
    pub lambda_local: f64,
}

/// Per-sample loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub align: f64,
    pub au: f64,
    pub local: f64,
}

type GcnTrace = (Array2<f64>, crate::relation::GcnCache);

#[derive(Debug, Clone)]
pub struct AuNet {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub alignment: AlignmentHead,
    pub attention: AttentionModule,
    pub global: Linear,
    pub gcn: GcnStack,
    /// Standardizes the flattened `12 × local_width` node matrix.
    pub node_norm: Standardize,
    pub direct: Classifier,
    pub graph: Classifier,
}

impl AuNet {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.backbone.validate()?;
        if cfg.gcn_widths.is_empty() {
            return Err(Error::config("gcn_widths needs at least one layer"));
        }
        if !(cfg.attention_radius > 0.0) {
            return Err(Error::config("attention radius must be positive"));
        }
        if cfg.branch_channels == 0 || cfg.local_width == 0 || cfg.global_width == 0 || cfg.hidden_width == 0 {
            return Err(Error::config("layer widths must be positive"));
        }
        let mut ps = ParamStore::new();
        let c = cfg.backbone.base_channels;
        let side = cfg.backbone.output_size();
        let backbone = Backbone::build(&mut ps, &cfg.backbone, seed)?;
        let alignment = AlignmentHead::new(&mut ps, c, side, seed);
        let grid = AttentionGrid {
            h: side,
            w: side,
            cell_px: cfg.backbone.input_size as f64 / side as f64,
            radius: cfg.attention_radius,
        };
        let attention = AttentionModule::new(
            &mut ps,
            cfg.centers.clone(),
            grid,
            c,
            cfg.branch_channels,
            cfg.local_width,
            seed,
        )?;
        let global = Linear::new(&mut ps, "global.proj", c, cfg.global_width, seed);
        let mut widths = vec![cfg.local_width];
        widths.extend(&cfg.gcn_widths);
        let gcn = GcnStack::new(&mut ps, &widths, cfg.gcn_activation, seed)?;
        let node_norm = Standardize::new(&mut ps, "gcn.input", NUM_AUS * cfg.local_width);
        let base = ALIGNMENT_FEATURE_WIDTH + cfg.global_width;
        let direct = Classifier::new(&mut ps, HeadKind::Direct.prefix(), base + NUM_AUS * cfg.local_width, cfg.hidden_width, seed);
        let graph = Classifier::new(&mut ps, HeadKind::Graph.prefix(), base + NUM_AUS * gcn.out_width(), cfg.hidden_width, seed);
        Ok(AuNet {
            cfg: cfg.clone(),
            params: ps,
            backbone,
            alignment,
            attention,
            global,
            gcn,
            node_norm,
            direct,
            graph,
        })
    }

    pub fn from_checkpoint(cfg: &ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut net = AuNet::new(cfg, 0)?;
        let tensors = ckpt.tensors();
        let n = net.params.load_from(tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        if n != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint covers {n} of {} model tensors",
                net.params.len()
            )));
        }
        Ok(net)
    }

    pub fn classifier(&self, kind: HeadKind) -> &Classifier {
        match kind {
            HeadKind::Direct => &self.direct,
            HeadKind::Graph => &self.graph,
        }
    }

    /// Re-draws the parameters of a classifier (and the graph stack for the
    /// graph head) and resets its standardization to identity.
    pub fn reinit_head(&mut self, kind: HeadKind, seed: u64) {
        let mut inits = self.classifier(kind).inits();
        if kind == HeadKind::Graph {
            inits.extend(self.gcn.inits());
            inits.extend(self.node_norm.inits());
        }
        for p in [Partition::Fcn, Partition::Gcn] {
            self.params.reinit_partition(p, seed, &inits);
        }
    }

    /// Fits the standardization buffers of a head to frozen features. For
    /// the graph head only the frozen part of the classifier input is
    /// fitted; the graph output keeps the identity map.
    pub fn fit_standardization(&mut self, kind: HeadKind, feats: &[FrozenFeatures]) {
        let base = ALIGNMENT_FEATURE_WIDTH + self.cfg.global_width;
        let rows: Vec<Vec<f64>> = feats
            .iter()
            .map(|f| {
                let mut r = f.alignment_feature.clone();
                r.extend(&f.global_feature);
                if kind == HeadKind::Direct {
                    r.extend(f.local.concat());
                }
                r
            })
            .collect();
        let n = rows.first().map_or(base, Vec::len);
        let norm = self.classifier(kind).norm.clone();
        norm.fit(&mut self.params, &rows, 0..n);
        if kind == HeadKind::Graph {
            let nodes: Vec<Vec<f64>> = feats.iter().map(|f| f.local.concat()).collect();
            let nn = self.node_norm.clone();
            nn.fit(&mut self.params, &nodes, 0..NUM_AUS * self.cfg.local_width);
        }
    }

    fn global_forward(&self, shared: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
        let n = (shared.h * shared.w) as f64;
        let mean: Vec<f64> = (0..shared.c).map(|ch| shared.plane(ch).iter().sum::<f64>() / n).collect();
        let mut g = self.global.forward(&self.params, &mean);
        Activation::Relu.apply(&mut g);
        (mean, g)
    }

    /// Forward through every frozen-in-stage-2 module.
    pub fn extract_features(&self, image: &FaceImage) -> Result<FrozenFeatures> {
        let x = image.to_feature_map();
        let shared = self.backbone.forward_shared(&self.params, &x)?.tensor;
        let align = self.alignment.forward(&self.params, &shared)?.output;
        let att = self.attention.forward(&self.params, &shared, &align.predicted_landmarks)?;
        let (_, global) = self.global_forward(&shared);
        Ok(FrozenFeatures {
            alignment_feature: align.alignment_feature,
            global_feature: global,
            local: att.local.into_iter().map(|l| l.f).collect(),
            predicted_landmarks: align.predicted_landmarks,
        })
    }

    /// Predefined and refined attention maps at the predicted landmarks.
    pub fn attention_maps(&self, image: &FaceImage) -> Result<crate::attention::AttentionCache> {
        let shared = self.backbone.forward_shared(&self.params, &image.to_feature_map())?.tensor;
        let lm = self.alignment.forward_alignment(&self.params, &shared)?.predicted_landmarks;
        self.attention.forward(&self.params, &shared, &lm)
    }

    fn fused_input(&self, kind: HeadKind, feats: &FrozenFeatures, g: &Array2<f64>) -> Result<(Vec<f64>, Option<GcnTrace>)> {
        let mut x = feats.alignment_feature.clone();
        x.extend(&feats.global_feature);
        match kind {
            HeadKind::Direct => {
                for f in &feats.local {
                    x.extend(f);
                }
                Ok((x, None))
            }
            HeadKind::Graph => {
                let z = node_matrix(&feats.local)?;
                crate::relation::check_node_count(&z)?;
                let zs = self.node_norm.forward(&self.params, z.as_slice().expect("contiguous"));
                let z0 = Array2::from_shape_vec(z.dim(), zs).expect("shape");
                let cache = self.gcn.forward(&self.params, g, &z0)?;
                x.extend(cache.output.iter());
                Ok((x, Some((z0, cache))))
            }
        }
    }

    /// Per-AU occurrence probabilities from precomputed features.
    pub fn classify(&self, kind: HeadKind, feats: &FrozenFeatures, g: &Array2<f64>) -> Result<[f64; NUM_AUS]> {
        let (x, _) = self.fused_input(kind, feats, g)?;
        Ok(self.classifier(kind).forward(&self.params, &x)?.probs)
    }

    pub fn predict(&self, kind: HeadKind, image: &FaceImage, g: &Array2<f64>) -> Result<[f64; NUM_AUS]> {
        self.classify(kind, &self.extract_features(image)?, g)
    }

    /// Stage-2 objective on cached features: `L_au` only. Gradients reach the
    /// classifier and, for the graph head, the graph stack.
    pub fn head_loss_and_grad(
        &self,
        kind: HeadKind,
        feats: &FrozenFeatures,
        labels: &[u8],
        g: &Array2<f64>,
        weights: &ClassWeights,
        loss: &LossConfig,
        grads: &mut Grads,
    ) -> Result<(f64, [f64; NUM_AUS])> {
        let (x, gcn) = self.fused_input(kind, feats, g)?;
        let clf = self.classifier(kind);
        let cache = clf.forward(&self.params, &x)?;
        let (l, g_probs) = au_loss_and_grad(labels, &cache.probs, &weights.w, loss)?;
        let gx = clf.backward(&self.params, &cache, &g_probs, grads);
        if let Some((_, gc)) = gcn {
            let base = ALIGNMENT_FEATURE_WIDTH + self.cfg.global_width;
            let g_out = Array2::from_shape_vec(gc.output.dim(), gx[base..].to_vec()).expect("width");
            self.gcn.backward(&self.params, g, &gc, &g_out, grads);
        }
        Ok((l, cache.probs))
    }

    /// Stage-1 objective for one sample through the direct head:
    /// `λ_align·E_align + L_softmax + λ₂·L_dice + λ_local·L_local`.
    pub fn stage1_loss_and_grad(
        &self,
        sample: Sample<'_>,
        weights: &ClassWeights,
        loss: &LossConfig,
        stage: &StageOneWeights,
        grads: &mut Grads,
    ) -> Result<(LossBreakdown, [f64; NUM_AUS])> {
        let ps = &self.params;
        let x = sample.image.to_feature_map();
        let (shared, bb_cache) = self.backbone.forward(ps, &x)?;
        let shared = shared.tensor;
        let al = self.alignment.forward(ps, &shared)?;
        let y_hat = &al.output.predicted_landmarks;
        let att = self.attention.forward(ps, &shared, y_hat)?;
        let (mean, global) = self.global_forward(&shared);

        let mut fused = al.output.alignment_feature.clone();
        fused.extend(&global);
        for l in &att.local {
            fused.extend(&l.f);
        }
        let clf = self.direct.forward(ps, &fused)?;
        let labels = &sample.entry.labels;
        let (au, g_probs) = au_loss_and_grad(labels, &clf.probs, &weights.w, loss)?;
        let d = interocular_distance(&sample.entry.landmarks, self.cfg.eye_pair)?;
        let align = alignment_loss(&sample.entry.landmarks, y_hat, d)?;
        let (local, mut g_logits) = self.attention.local_loss(&att, labels, weights);

        // backward
        let g_fused = self.direct.backward(ps, &clf, &g_probs, grads);
        let aw = ALIGNMENT_FEATURE_WIDTH;
        let gw = self.cfg.global_width;
        let lw = self.cfg.local_width;
        let g_local: Vec<Vec<f64>> = (0..NUM_AUS)
            .map(|i| g_fused[aw + gw + i * lw..aw + gw + (i + 1) * lw].to_vec())
            .collect();
        for g in g_logits.iter_mut() {
            g[0] *= stage.lambda_local;
            g[1] *= stage.lambda_local;
        }
        let mut g_shared = FeatureMap::zeros(shared.c, shared.h, shared.w);
        let g_lm_att = self.attention.backward(ps, &shared, y_hat, &att, &g_local, &g_logits, grads, &mut g_shared);

        let mut g_global = g_fused[aw..aw + gw].to_vec();
        Activation::Relu.backward(&global, &mut g_global);
        let g_mean = self.global.backward(ps, &mean, &g_global, grads);
        let n = (shared.h * shared.w) as f64;
        for (ch, gm) in g_mean.iter().enumerate() {
            g_shared.plane_mut(ch).iter_mut().for_each(|v| *v += gm / n);
        }

        let mut g_coords = alignment_loss_grad(&sample.entry.landmarks, y_hat, d)?;
        for (a, b) in g_coords.iter_mut().zip(&g_lm_att) {
            *a = stage.lambda_align * *a + b;
        }
        self.alignment.backward(ps, &shared, &al, &g_coords, &g_fused[..aw], grads, &mut g_shared);
        self.backbone.backward(ps, &bb_cache, &g_shared, grads);

        let total = stage.lambda_align * align + au + stage.lambda_local * local;
        Ok((
            LossBreakdown {
                total,
                align,
                au,
                local,
            },
            clf.probs,
        ))
    }
}
