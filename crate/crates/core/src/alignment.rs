//! Face alignment head and its loss.
//!
//! Head: two stride-2 3×3 convolutions (ReLU) on the shared map, a fully
//! connected layer to the 64-wide alignment feature (ReLU), then a linear
//! layer to the 98 landmark coordinates. The coordinate bias starts at the
//! template face.
//!
//! Loss: `E = 1/(2 d²) · Σ_j [(y_{2j-1} - ŷ_{2j-1})² + (y_{2j} - ŷ_{2j})²]`
//! with `d` the ground-truth inter-ocular distance.

use crate::error::{Error, Result};
use crate::face::{template_vector, DEFAULT_EYE_PAIR, LANDMARK_DIM, NUM_LANDMARKS};
use crate::nn::ops::{conv_out_len, Activation, FeatureMap};
use crate::nn::{Conv3x3, Grads, Init, Linear, ParamId, ParamStore};

pub const ALIGNMENT_FEATURE_WIDTH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentOutput {
    pub predicted_landmarks: Vec<f64>,
    pub alignment_feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterocularScale {
    pub d: f64,
}

impl InterocularScale {
    pub fn new(d: f64) -> Result<Self> {
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::domain(format!("inter-ocular distance must be positive, got {d}")));
        }
        Ok(InterocularScale { d })
    }
}

/// Euclidean distance between landmarks `eyes.0` and `eyes.1`.
pub fn interocular_distance(landmarks: &[f64], eyes: (usize, usize)) -> Result<InterocularScale> {
    if eyes.0 >= NUM_LANDMARKS || eyes.1 >= NUM_LANDMARKS {
        return Err(Error::config(format!("eye landmark indices {eyes:?} out of range")));
    }
    if landmarks.len() != LANDMARK_DIM {
        return Err(Error::shape(format!(
            "expected {LANDMARK_DIM} landmark values, got {}",
            landmarks.len()
        )));
    }
    let dx = landmarks[2 * eyes.0] - landmarks[2 * eyes.1];
    let dy = landmarks[2 * eyes.0 + 1] - landmarks[2 * eyes.1 + 1];
    let d = dx.hypot(dy);
    if d == 0.0 {
        return Err(Error::domain("eye reference points coincide"));
    }
    InterocularScale::new(d)
}

pub fn default_interocular(landmarks: &[f64]) -> Result<InterocularScale> {
    interocular_distance(landmarks, DEFAULT_EYE_PAIR)
}

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() || !y.len().is_multiple_of(2) {
        return Err(Error::shape(format!(
            "landmark vectors must have equal even length, got {} and {}",
            y.len(),
            y_hat.len()
        )));
    }
    Ok(())
}

pub fn alignment_loss(y: &[f64], y_hat: &[f64], d: InterocularScale) -> Result<f64> {
    check_pair(y, y_hat)?;
    if !(d.d > 0.0) {
        return Err(Error::domain("inter-ocular distance must be positive"));
    }
    let s: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / (2.0 * d.d * d.d))
}

/// `∂E/∂ŷ = (ŷ - y) / d²`.
pub fn alignment_loss_grad(y: &[f64], y_hat: &[f64], d: InterocularScale) -> Result<Vec<f64>> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (b - a) / (d.d * d.d)).collect())
}

#[derive(Debug, Clone)]
pub struct AlignmentHead {
    conv1: Conv3x3,
    conv2: Conv3x3,
    feature: Linear,
    coords: Linear,
    in_c: usize,
    in_size: usize,
}

#[derive(Debug, Clone)]
pub struct AlignmentCache {
    a1: FeatureMap,
    a2: FeatureMap,
    pub output: AlignmentOutput,
}

impl AlignmentHead {
    pub fn new(ps: &mut ParamStore, in_c: usize, in_size: usize, seed: u64) -> Self {
        let conv1 = Conv3x3::new(ps, "alignment.conv1", in_c, in_c, 2, seed);
        let conv2 = Conv3x3::new(ps, "alignment.conv2", in_c, in_c, 2, seed);
        let s = conv_out_len(conv_out_len(in_size, 2), 2);
        let feature = Linear::new(ps, "alignment.feature", in_c * s * s, ALIGNMENT_FEATURE_WIDTH, seed);
        let coords = Linear::new(ps, "alignment.coords", ALIGNMENT_FEATURE_WIDTH, LANDMARK_DIM, seed);
        let head = AlignmentHead {
            conv1,
            conv2,
            feature,
            coords,
            in_c,
            in_size,
        };
        head.reset_coord_bias(ps);
        head
    }

    fn reset_coord_bias(&self, ps: &mut ParamStore) {
        let t = template_vector();
        let scale = self.in_size as f64 * 4.0 / crate::face::IMAGE_SIZE as f64;
        for (b, v) in ps.get_mut(self.coords.bias).iter_mut().zip(t) {
            *b = v * scale;
        }
    }

    pub fn coord_bias(&self) -> ParamId {
        self.coords.bias
    }

    pub fn inits(&self) -> Vec<(ParamId, Init)> {
        let mut v = Vec::new();
        v.extend(self.conv1.inits());
        v.extend(self.conv2.inits());
        v.extend(self.feature.inits());
        v.extend(self.coords.inits());
        v
    }

    pub fn forward_alignment(&self, ps: &ParamStore, shared: &FeatureMap) -> Result<AlignmentOutput> {
        Ok(self.forward(ps, shared)?.output)
    }

    pub fn forward(&self, ps: &ParamStore, shared: &FeatureMap) -> Result<AlignmentCache> {
        if shared.c != self.in_c || shared.h != self.in_size || shared.w != self.in_size {
            return Err(Error::shape(format!(
                "alignment head expects {}x{}x{} shared feature, got {}x{}x{}",
                self.in_size, self.in_size, self.in_c, shared.h, shared.w, shared.c
            )));
        }
        let mut a1 = self.conv1.forward(ps, shared);
        Activation::Relu.apply(&mut a1.data);
        let mut a2 = self.conv2.forward(ps, &a1);
        Activation::Relu.apply(&mut a2.data);
        let mut feat = self.feature.forward(ps, &a2.data);
        Activation::Relu.apply(&mut feat);
        let coords = self.coords.forward(ps, &feat);
        Ok(AlignmentCache {
            a1,
            a2,
            output: AlignmentOutput {
                predicted_landmarks: coords,
                alignment_feature: feat,
            },
        })
    }

    /// Backward from gradients on the landmark output and on the alignment
    /// feature; adds into `g_shared`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        ps: &ParamStore,
        shared: &FeatureMap,
        cache: &AlignmentCache,
        g_coords: &[f64],
        g_feature: &[f64],
        grads: &mut Grads,
        g_shared: &mut FeatureMap,
    ) {
        let feat = &cache.output.alignment_feature;
        let mut g_feat = self.coords.backward(ps, feat, g_coords, grads);
        for (a, b) in g_feat.iter_mut().zip(g_feature) {
            *a += b;
        }
        Activation::Relu.backward(feat, &mut g_feat);
        let g_a2 = self.feature.backward(ps, &cache.a2.data, &g_feat, grads);
        let mut g_a2 = FeatureMap::from_vec(cache.a2.c, cache.a2.h, cache.a2.w, g_a2).expect("shape");
        Activation::Relu.backward(&cache.a2.data, &mut g_a2.data);
        let mut g_a1 = self.conv2.backward(ps, &cache.a1, &g_a2, grads);
        Activation::Relu.backward(&cache.a1.data, &mut g_a1.data);
        let gs = self.conv1.backward(ps, shared, &g_a1, grads);
        for (a, b) in g_shared.data.iter_mut().zip(&gs.data) {
            *a += b;
        }
    }
}
