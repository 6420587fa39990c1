use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AuCenterSpec;
use crate::backbone::MultiScaleConfig;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::LossConfig;
use crate::model::{ModelConfig, StageOneWeights};
use crate::nn::Activation;
use crate::relation::{AdjacencyOptions, Propagation};
use crate::train::OptimizerConfig;

/// Every tunable of a run as one flat table. Missing keys take defaults,
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub decay_every_epochs: usize,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    /// Rescale a batch gradient whose global L2 norm exceeds this value;
    /// 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Restart the schedule at `initial_lr` for stage 2 instead of
    /// continuing from the stage-1 epoch count.
    pub stage2_lr_restart: bool,

    pub input_size: usize,
    pub base_channels: usize,
    pub partition_grids: [usize; 3],
    pub activation: Activation,
    pub branch_channels: usize,
    pub local_width: usize,
    pub global_width: usize,
    pub hidden_width: usize,
    pub gcn_widths: Vec<usize>,
    pub gcn_activation: Activation,
    pub attention_radius: f64,
    pub eye_left: usize,
    pub eye_right: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub centers_file: Option<PathBuf>,

    pub lambda2: f64,
    pub epsilon: f64,
    pub lambda_align: f64,
    pub lambda_local: f64,

    pub relation_threshold: f64,
    pub propagation: Propagation,
    pub symmetrize: bool,
    pub transpose: bool,

    pub decision_threshold: f64,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        let m = ModelConfig::default();
        let l = LossConfig::default();
        let a = AdjacencyOptions::default();
        RunConfig {
            seed: o.seed,
            initial_lr: o.initial_lr,
            lr_decay_factor: o.lr_decay_factor,
            decay_every_epochs: o.decay_every_epochs,
            momentum: o.momentum,
            nesterov: o.nesterov,
            weight_decay: o.weight_decay,
            stage1_epochs: o.stage1_epochs,
            stage2_epochs: o.stage2_epochs,
            batch_size: o.batch_size,
            grad_clip_norm: 5.0,
            stage2_lr_restart: true,
            input_size: m.backbone.input_size,
            base_channels: m.backbone.base_channels,
            partition_grids: m.backbone.partition_grids,
            activation: m.backbone.activation,
            branch_channels: m.branch_channels,
            local_width: m.local_width,
            global_width: m.global_width,
            hidden_width: m.hidden_width,
            gcn_widths: m.gcn_widths,
            gcn_activation: m.gcn_activation,
            attention_radius: m.attention_radius,
            eye_left: m.eye_pair.0,
            eye_right: m.eye_pair.1,
            centers_file: None,
            lambda2: l.lambda2,
            epsilon: l.epsilon,
            lambda_align: 1.0,
            lambda_local: 1.0,
            relation_threshold: 0.4,
            propagation: a.propagation,
            symmetrize: a.symmetrize,
            transpose: a.transpose,
            decision_threshold: 0.5,
            parallel: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            initial_lr: self.initial_lr,
            lr_decay_factor: self.lr_decay_factor,
            decay_every_epochs: self.decay_every_epochs,
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
            stage1_epochs: self.stage1_epochs,
            stage2_epochs: self.stage2_epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let centers = match &self.centers_file {
            Some(p) => AuCenterSpec::load(p)?,
            None => AuCenterSpec::default(),
        };
        Ok(ModelConfig {
            backbone: MultiScaleConfig {
                input_size: self.input_size,
                base_channels: self.base_channels,
                partition_grids: self.partition_grids,
                activation: self.activation,
            },
            branch_channels: self.branch_channels,
            local_width: self.local_width,
            global_width: self.global_width,
            hidden_width: self.hidden_width,
            gcn_widths: self.gcn_widths.clone(),
            gcn_activation: self.gcn_activation,
            attention_radius: self.attention_radius,
            centers,
            eye_pair: (self.eye_left, self.eye_right),
        })
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda2: self.lambda2,
            epsilon: self.epsilon,
        }
    }

    pub fn stage_one(&self) -> StageOneWeights {
        StageOneWeights {
            lambda_align: self.lambda_align,
            lambda_local: self.lambda_local,
        }
    }

    pub fn adjacency(&self) -> AdjacencyOptions {
        AdjacencyOptions {
            propagation: self.propagation,
            symmetrize: self.symmetrize,
            transpose: self.transpose,
        }
    }

    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        self.loss().validate()?;
        self.model()?.backbone.validate()?;
        if !(self.relation_threshold > 0.0 && self.relation_threshold <= 1.0) {
            return Err(Error::domain(format!(
                "relation threshold must lie in (0, 1], got {}",
                self.relation_threshold
            )));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(Error::config("decision_threshold must lie in (0, 1)"));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return Err(Error::config("grad_clip_norm must be non-negative"));
        }
        if self.lambda_align < 0.0 || self.lambda_local < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml("seed = 7\nbase_channels = 8\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.initial_lr, 0.01);
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
    }
}
