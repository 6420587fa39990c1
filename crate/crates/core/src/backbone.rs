//! Hierarchical multi-scale region layer.
//!
//! Layout for input side `S`, `C = base_channels`, grids `g1, g2, g3`:
//!
//! ```text
//! h0 = act(conv3x3(x))                         3 → C, S × S
//! p_k = partconv_{g_k}(h0)   k = 1..3          C → C, cell-local 3×3 filters
//! m  = act(h0 + p_1 + p_2 + p_3)
//! shared = avgpool2(avgpool2(m))               C × S/4 × S/4
//! ```
//!
//! A partitioned convolution splits the map into a `g × g` grid of cells and
//! convolves each cell with its own filters, zero-padding at cell borders,
//! so its output inside a cell depends only on its input inside that cell.
//!
//! Parameter count: `28·C + Σ_k g_k²·(9·C² + C)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face::{IMAGE_CHANNELS, IMAGE_SIZE};
use crate::nn::ops::{self, Activation, FeatureMap};
use crate::nn::{Conv3x3, Grads, Init, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiScaleConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub partition_grids: [usize; 3],
    pub activation: Activation,
}

impl Default for MultiScaleConfig {
    fn default() -> Self {
        MultiScaleConfig {
            input_size: IMAGE_SIZE,
            base_channels: 16,
            partition_grids: [8, 4, 2],
            activation: Activation::Relu,
        }
    }
}

impl MultiScaleConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c < 4 || !c.is_multiple_of(4) {
            return Err(Error::config(format!("base_channels must be >= 4 and divisible by 4, got {c}")));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(4) {
            return Err(Error::config(format!(
                "input size {} must be a positive multiple of 4",
                self.input_size
            )));
        }
        for g in self.partition_grids {
            if g == 0 || !self.input_size.is_multiple_of(g) {
                return Err(Error::config(format!(
                    "partition grid {g}x{g} does not divide the {}x{} input",
                    self.input_size, self.input_size
                )));
            }
        }
        Ok(())
    }

    /// Side length of the shared feature map.
    pub fn output_size(&self) -> usize {
        self.input_size / 4
    }

    pub fn param_count(&self) -> usize {
        let c = self.base_channels;
        28 * c + self.partition_grids.iter().map(|g| g * g * (9 * c * c + c)).sum::<usize>()
    }
}

/// Output of the backbone; `spatial_scale = H' / input height`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedFeature {
    pub tensor: FeatureMap,
    pub spatial_scale: f64,
}

#[derive(Debug, Clone)]
pub struct PartitionedConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub grid: usize,
    pub channels: usize,
}

impl PartitionedConv {
    pub fn new(ps: &mut ParamStore, name: &str, grid: usize, channels: usize, seed: u64) -> Self {
        let weight = ps.register(
            &format!("{name}.weight"),
            &[grid * grid, channels, channels, 3, 3],
            Init::FanIn(channels * 9),
            seed,
        );
        let bias = ps.register(&format!("{name}.bias"), &[grid * grid, channels], Init::Zeros, seed);
        PartitionedConv {
            weight,
            bias,
            grid,
            channels,
        }
    }

    fn cell_params<'a>(&self, w: &'a [f64], b: &'a [f64], cell: usize) -> (&'a [f64], &'a [f64]) {
        let c = self.channels;
        let wn = c * c * 9;
        (&w[cell * wn..(cell + 1) * wn], &b[cell * c..(cell + 1) * c])
    }

    pub fn forward(&self, ps: &ParamStore, x: &FeatureMap) -> FeatureMap {
        let (w, b) = (ps.get(self.weight), ps.get(self.bias));
        let (ch, cw) = (x.h / self.grid, x.w / self.grid);
        let mut out = FeatureMap::zeros(self.channels, x.h, x.w);
        for r in 0..self.grid {
            for c in 0..self.grid {
                let (cwt, cb) = self.cell_params(w, b, r * self.grid + c);
                let patch = x.crop(r * ch, c * cw, ch, cw);
                let y = ops::conv3x3_forward(&patch, cwt, cb, self.channels, 1);
                out.add_window(&y, r * ch, c * cw);
            }
        }
        out
    }

    pub fn backward(&self, ps: &ParamStore, x: &FeatureMap, g: &FeatureMap, grads: &mut Grads) -> FeatureMap {
        let w = ps.get(self.weight);
        let mut gw = std::mem::take(grads.get_mut_vec(self.weight));
        let mut gb = std::mem::take(grads.get_mut_vec(self.bias));
        let (ch, cw) = (x.h / self.grid, x.w / self.grid);
        let c = self.channels;
        let wn = c * c * 9;
        let mut gin = FeatureMap::zeros(x.c, x.h, x.w);
        for r in 0..self.grid {
            for col in 0..self.grid {
                let cell = r * self.grid + col;
                let patch = x.crop(r * ch, col * cw, ch, cw);
                let gpatch = g.crop(r * ch, col * cw, ch, cw);
                let gx = ops::conv3x3_backward(
                    &patch,
                    &w[cell * wn..(cell + 1) * wn],
                    &gpatch,
                    1,
                    &mut gw[cell * wn..(cell + 1) * wn],
                    &mut gb[cell * c..(cell + 1) * c],
                );
                gin.add_window(&gx, r * ch, col * cw);
            }
        }
        *grads.get_mut_vec(self.weight) = gw;
        *grads.get_mut_vec(self.bias) = gb;
        gin
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: MultiScaleConfig,
    pub conv0: Conv3x3,
    pub partitioned: [PartitionedConv; 3],
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    input: FeatureMap,
    h0: FeatureMap,
    merged: FeatureMap,
    pooled1: FeatureMap,
}

impl Backbone {
    pub fn build(ps: &mut ParamStore, cfg: &MultiScaleConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let conv0 = Conv3x3::new(ps, "backbone.conv0", IMAGE_CHANNELS, c, 1, seed);
        let partitioned = [0, 1, 2].map(|k| {
            PartitionedConv::new(
                ps,
                &format!("backbone.region{k}"),
                cfg.partition_grids[k],
                c,
                seed,
            )
        });
        Ok(Backbone {
            cfg: cfg.clone(),
            conv0,
            partitioned,
        })
    }

    pub fn inits(&self) -> Vec<(ParamId, Init)> {
        let mut v = self.conv0.inits().to_vec();
        for p in &self.partitioned {
            v.push((p.weight, Init::FanIn(p.channels * 9)));
            v.push((p.bias, Init::Zeros));
        }
        v
    }

    fn check_input(&self, image: &FeatureMap) -> Result<()> {
        let s = self.cfg.input_size;
        if image.c != IMAGE_CHANNELS || image.h != s || image.w != s {
            return Err(Error::shape(format!(
                "backbone expects {s}x{s}x{IMAGE_CHANNELS} input, got {}x{}x{}",
                image.h, image.w, image.c
            )));
        }
        Ok(())
    }

    pub fn forward_shared(&self, ps: &ParamStore, image: &FeatureMap) -> Result<SharedFeature> {
        Ok(self.forward(ps, image)?.0)
    }

    pub fn forward(&self, ps: &ParamStore, image: &FeatureMap) -> Result<(SharedFeature, BackboneCache)> {
        self.check_input(image)?;
        let act = self.cfg.activation;
        let mut h0 = self.conv0.forward(ps, image);
        act.apply(&mut h0.data);
        let mut merged = h0.clone();
        for p in &self.partitioned {
            let y = p.forward(ps, &h0);
            for (m, v) in merged.data.iter_mut().zip(&y.data) {
                *m += v;
            }
        }
        act.apply(&mut merged.data);
        let pooled1 = ops::avg_pool2(&merged);
        let out = ops::avg_pool2(&pooled1);
        let spatial_scale = out.h as f64 / image.h as f64;
        Ok((
            SharedFeature {
                tensor: out,
                spatial_scale,
            },
            BackboneCache {
                input: image.clone(),
                h0,
                merged,
                pooled1,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the image.
    pub fn backward(&self, ps: &ParamStore, cache: &BackboneCache, g_shared: &FeatureMap, grads: &mut Grads) -> FeatureMap {
        let act = self.cfg.activation;
        debug_assert_eq!(cache.pooled1.h, g_shared.h * 2);
        let g1 = ops::avg_pool2_backward(g_shared);
        let mut g_merged = ops::avg_pool2_backward(&g1);
        act.backward(&cache.merged.data, &mut g_merged.data);
        let mut g_h0 = g_merged.clone();
        for p in &self.partitioned {
            let gi = p.backward(ps, &cache.h0, &g_merged, grads);
            for (a, v) in g_h0.data.iter_mut().zip(&gi.data) {
                *a += v;
            }
        }
        act.backward(&cache.h0.data, &mut g_h0.data);
        self.conv0.backward(ps, &cache.input, &g_h0, grads)
    }
}
