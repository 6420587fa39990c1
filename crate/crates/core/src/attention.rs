//! Landmark-anchored AU attention: predefined maps from (predicted)
//! landmarks, per-AU refinement branches, attention-weighted local feature
//! pooling and the local AU supervision heads.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face::{LANDMARK_DIM, NUM_AUS, NUM_LANDMARKS};
use crate::losses::{local_supervision_loss, ClassWeights};
use crate::nn::{ops, Conv3x3, FeatureMap, Grads, Init, Linear, ParamId, ParamStore};

/// Landmark indices (one or two) plus a pixel offset defining where an AU's
/// attention is centered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuCenter {
    pub landmarks: Vec<usize>,
    pub offset: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuCenterSpec {
    pub entries: Vec<AuCenter>,
}

impl Default for AuCenterSpec {
    /// Brow, eye, cheek and lip anchors for AU1, 2, 4, 6, 7, 10, 12, 15, 23,
    /// 24, 25, 26 in the 49-point layout.
    fn default() -> Self {
        let c = |lm: &[usize], dx: f64, dy: f64| AuCenter {
            landmarks: lm.to_vec(),
            offset: (dx, dy),
        };
        AuCenterSpec {
            entries: vec![
                c(&[4, 5], 0.0, -6.0),
                c(&[0, 9], 0.0, -6.0),
                c(&[2, 7], 0.0, 5.0),
                c(&[24, 29], 0.0, 10.0),
                c(&[19, 28], 0.0, 0.0),
                c(&[33, 35], 0.0, -5.0),
                c(&[31, 37], 0.0, -4.0),
                c(&[31, 37], 0.0, 5.0),
                c(&[34, 40], 0.0, 0.0),
                c(&[32, 36], 0.0, 2.0),
                c(&[43, 46], 0.0, 0.0),
                c(&[40], 0.0, 14.0),
            ],
        }
    }
}

impl AuCenterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.entries.len() != NUM_AUS {
            return Err(Error::validation(format!(
                "AU center table has {} entries, expected {NUM_AUS}",
                self.entries.len()
            )));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.landmarks.is_empty() || e.landmarks.len() > 2 {
                return Err(Error::validation(format!("AU {i}: needs one or two landmark indices")));
            }
            if let Some(l) = e.landmarks.iter().find(|&&l| l >= NUM_LANDMARKS) {
                return Err(Error::validation(format!("AU {i}: landmark index {l} out of range")));
            }
            if !e.offset.0.is_finite() || !e.offset.1.is_finite() {
                return Err(Error::validation(format!("AU {i}: offset must be finite")));
            }
        }
        Ok(())
    }

    /// Pixel centers of AU `au`; offsets are multiplied by `scale`.
    pub fn centers_px(&self, au: usize, landmarks: &[f64], scale: f64) -> Vec<(f64, f64)> {
        let e = &self.entries[au];
        e.landmarks
            .iter()
            .map(|&l| {
                (
                    landmarks[2 * l] + scale * e.offset.0,
                    landmarks[2 * l + 1] + scale * e.offset.1,
                )
            })
            .collect()
    }

    /// Parses lines of the form `<au> = <lm>[,<lm>] <dx> <dy>`; `#` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut slots: Vec<Option<AuCenter>> = vec![None; NUM_AUS];
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let perr = |m: &str| Error::Parse { line, message: m.to_string() };
            let (key, val) = body.split_once('=').ok_or_else(|| perr("expected `<au> = ...`"))?;
            let au: usize = key.trim().parse().map_err(|_| perr("AU index is not an integer"))?;
            if au >= NUM_AUS {
                return Err(Error::validation(format!("line {line}: AU index {au} out of range")));
            }
            let parts: Vec<&str> = val.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(perr("expected `<landmarks> <dx> <dy>`"));
            }
            let landmarks = parts[0]
                .split(',')
                .map(|s| s.parse::<usize>().map_err(|_| perr("bad landmark index")))
                .collect::<Result<Vec<_>>>()?;
            let dx: f64 = parts[1].parse().map_err(|_| perr("bad x offset"))?;
            let dy: f64 = parts[2].parse().map_err(|_| perr("bad y offset"))?;
            if slots[au].is_some() {
                return Err(Error::validation(format!("line {line}: AU {au} defined twice")));
            }
            slots[au] = Some(AuCenter {
                landmarks,
                offset: (dx, dy),
            });
        }
        let entries = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| Error::validation(format!("AU {i} missing from center table"))))
            .collect::<Result<Vec<_>>>()?;
        let spec = AuCenterSpec { entries };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# au = landmark[,landmark] dx dy\n");
        for (i, e) in self.entries.iter().enumerate() {
            let lms: Vec<String> = e.landmarks.iter().map(|l| l.to_string()).collect();
            let _ = writeln!(s, "{i} = {} {} {}", lms.join(","), e.offset.0, e.offset.1);
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionStage {
    Predefined,
    Refined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub h: usize,
    pub w: usize,
    pub map: Vec<f64>,
    pub au_index: usize,
    pub stage: AttentionStage,
    /// Set when every value is zero (all centers too far outside the grid).
    pub empty: bool,
}

impl AttentionMap {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.map[r * self.w + c]
    }
}

/// Geometry of the attention grid relative to the input frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionGrid {
    pub h: usize,
    pub w: usize,
    /// Pixels per grid cell.
    pub cell_px: f64,
    /// Decay radius in cells (Manhattan).
    pub radius: f64,
}

impl AttentionGrid {
    /// Cell-unit coordinate of a pixel position; cell `k` spans pixels
    /// `[k·cell_px, (k+1)·cell_px)` and is centered at `k`.
    pub fn to_cell(&self, px: f64) -> f64 {
        px / self.cell_px - 0.5
    }
}

fn center_cells(spec: &AuCenterSpec, au: usize, landmarks: &[f64], grid: &AttentionGrid) -> Vec<(f64, f64)> {
    spec.centers_px(au, landmarks, 1.0)
        .into_iter()
        .map(|(x, y)| (grid.to_cell(x), grid.to_cell(y)))
        .collect()
}

/// Predefined map per AU: `max(0, 1 - k/R)` where `k` is the Manhattan
/// distance (in cells) to the nearest of the AU's centers.
pub fn predefined_attention(
    spec: &AuCenterSpec,
    landmarks: &[f64],
    grid: &AttentionGrid,
) -> Result<Vec<AttentionMap>> {
    if landmarks.len() != LANDMARK_DIM {
        return Err(Error::shape(format!(
            "expected {LANDMARK_DIM} landmark values, got {}",
            landmarks.len()
        )));
    }
    if landmarks.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("landmarks must be finite"));
    }
    Ok((0..NUM_AUS)
        .map(|au| {
            let cs = center_cells(spec, au, landmarks, grid);
            let mut map = vec![0.0; grid.h * grid.w];
            for r in 0..grid.h {
                for c in 0..grid.w {
                    map[r * grid.w + c] = cs
                        .iter()
                        .map(|&(ux, uy)| {
                            let k = (c as f64 - ux).abs() + (r as f64 - uy).abs();
                            (1.0 - k / grid.radius).max(0.0)
                        })
                        .fold(0.0, f64::max);
                }
            }
            let empty = map.iter().all(|&v| v == 0.0);
            AttentionMap {
                h: grid.h,
                w: grid.w,
                map,
                au_index: au,
                stage: AttentionStage::Predefined,
                empty,
            }
        })
        .collect())
}

/// Gradient of the predefined maps with respect to the landmark vector.
pub fn predefined_attention_backward(
    spec: &AuCenterSpec,
    landmarks: &[f64],
    grid: &AttentionGrid,
    grad_maps: &[Vec<f64>],
) -> Vec<f64> {
    let mut g = vec![0.0; LANDMARK_DIM];
    let dcell = 1.0 / (grid.cell_px * grid.radius);
    for (au, gm) in grad_maps.iter().enumerate() {
        let cs = center_cells(spec, au, landmarks, grid);
        let lms = &spec.entries[au].landmarks;
        for r in 0..grid.h {
            for c in 0..grid.w {
                let gv = gm[r * grid.w + c];
                if gv == 0.0 {
                    continue;
                }
                // winning center (first on ties)
                let mut best = (0usize, 0.0f64);
                for (k, &(ux, uy)) in cs.iter().enumerate() {
                    let v = 1.0 - ((c as f64 - ux).abs() + (r as f64 - uy).abs()) / grid.radius;
                    if k == 0 || v > best.1 {
                        best = (k, v);
                    }
                }
                if best.1 <= 0.0 {
                    continue;
                }
                let (ux, uy) = cs[best.0];
                let l = lms[best.0];
                g[2 * l] += gv * sign(c as f64 - ux) * dcell;
                g[2 * l + 1] += gv * sign(r as f64 - uy) * dcell;
            }
        }
    }
    g
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Attention-weighted average `Σ a(c)·v(c) / Σ a(c)` of every channel.
/// Returns `None` when the attention mass is zero.
pub fn attention_pool(shared: &FeatureMap, attn: &[f64]) -> Option<(Vec<f64>, f64)> {
    let mass: f64 = attn.iter().sum();
    if mass <= 0.0 {
        return None;
    }
    let pooled = (0..shared.c)
        .map(|ch| shared.plane(ch).iter().zip(attn).map(|(v, a)| v * a).sum::<f64>() / mass)
        .collect();
    Some((pooled, mass))
}

/// Backward of [`attention_pool`]: adds into `g_shared` and returns the
/// gradient with respect to the attention map.
pub fn attention_pool_backward(
    shared: &FeatureMap,
    attn: &[f64],
    pooled: &[f64],
    mass: f64,
    g_pooled: &[f64],
    g_shared: &mut FeatureMap,
) -> Vec<f64> {
    let n = shared.h * shared.w;
    let mut g_attn = vec![0.0; n];
    for ch in 0..shared.c {
        let gq = g_pooled[ch] / mass;
        if gq == 0.0 {
            continue;
        }
        let v = shared.plane(ch);
        let gs = g_shared.plane_mut(ch);
        for i in 0..n {
            gs[i] += gq * attn[i];
            g_attn[i] += gq * (v[i] - pooled[ch]);
        }
    }
    g_attn
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeature {
    pub f: Vec<f64>,
    pub au_index: usize,
    /// Set when the refined map was all zero and `f` is the zero vector.
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
struct Branch {
    conv_a: Conv3x3,
    conv_b: Conv3x3,
}

/// Per-AU refinement branches, local projections and local logit heads.
#[derive(Debug, Clone)]
pub struct AttentionModule {
    pub centers: AuCenterSpec,
    pub grid: AttentionGrid,
    pub local_width: usize,
    branches: Vec<Branch>,
    proj: Vec<Linear>,
    heads: Vec<Linear>,
}

/// Intermediate values of one attention forward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub predefined: Vec<AttentionMap>,
    pub refined: Vec<AttentionMap>,
    hidden: Vec<FeatureMap>,
    gate: Vec<Vec<f64>>,
    pooled: Vec<Option<(Vec<f64>, f64)>>,
    pub local: Vec<LocalFeature>,
    pub logits: Vec<[f64; 2]>,
}

impl AttentionModule {
    pub fn new(
        ps: &mut ParamStore,
        centers: AuCenterSpec,
        grid: AttentionGrid,
        shared_channels: usize,
        branch_channels: usize,
        local_width: usize,
        seed: u64,
    ) -> Result<Self> {
        centers.validate()?;
        let mut branches = Vec::with_capacity(NUM_AUS);
        let mut proj = Vec::with_capacity(NUM_AUS);
        let mut heads = Vec::with_capacity(NUM_AUS);
        for au in 0..NUM_AUS {
            branches.push(Branch {
                conv_a: Conv3x3::new(ps, &format!("attention.au{au}.refine_a"), shared_channels, branch_channels, 1, seed),
                conv_b: Conv3x3::new(ps, &format!("attention.au{au}.refine_b"), branch_channels, 1, 1, seed),
            });
            proj.push(Linear::new(ps, &format!("attention.au{au}.proj"), shared_channels, local_width, seed));
            heads.push(Linear::new(ps, &format!("attention.au{au}.local_head"), local_width, 2, seed));
        }
        Ok(AttentionModule {
            centers,
            grid,
            local_width,
            branches,
            proj,
            heads,
        })
    }

    pub fn inits(&self) -> Vec<(ParamId, Init)> {
        let mut v = Vec::new();
        for b in &self.branches {
            v.extend(b.conv_a.inits());
            v.extend(b.conv_b.inits());
        }
        for l in self.proj.iter().chain(&self.heads) {
            v.extend(l.inits());
        }
        v
    }

    /// Refines one predefined map: `σ(branch(shared)) ⊙ predefined`.
    pub fn refine_attention(
        &self,
        ps: &ParamStore,
        predefined: &AttentionMap,
        shared: &FeatureMap,
    ) -> Result<AttentionMap> {
        Ok(self.refine_inner(ps, predefined, shared)?.0)
    }

    fn refine_inner(
        &self,
        ps: &ParamStore,
        predefined: &AttentionMap,
        shared: &FeatureMap,
    ) -> Result<(AttentionMap, FeatureMap, Vec<f64>)> {
        if predefined.stage != AttentionStage::Predefined {
            return Err(Error::validation("refine_attention expects a predefined map"));
        }
        if predefined.h != shared.h || predefined.w != shared.w {
            return Err(Error::shape(format!(
                "attention map {}x{} does not match shared feature {}x{}",
                predefined.h, predefined.w, shared.h, shared.w
            )));
        }
        let b = &self.branches[predefined.au_index];
        let mut hidden = b.conv_a.forward(ps, shared);
        ops::Activation::Relu.apply(&mut hidden.data);
        let logit = b.conv_b.forward(ps, &hidden);
        let gate: Vec<f64> = logit.data.iter().map(|&z| ops::sigmoid(z)).collect();
        let map: Vec<f64> = gate.iter().zip(&predefined.map).map(|(g, p)| g * p).collect();
        let empty = map.iter().all(|&v| v == 0.0);
        Ok((
            AttentionMap {
                h: predefined.h,
                w: predefined.w,
                map,
                au_index: predefined.au_index,
                stage: AttentionStage::Refined,
                empty,
            },
            hidden,
            gate,
        ))
    }

    /// `f_i = W_i · pool(shared, a_i) + b_i`, which equals the attention pool
    /// of the per-cell projection `W_i·v(c) + b_i` since the weights sum to 1.
    pub fn extract_local_features(
        &self,
        ps: &ParamStore,
        shared: &FeatureMap,
        refined: &[AttentionMap],
    ) -> Result<Vec<LocalFeature>> {
        if refined.len() != NUM_AUS {
            return Err(Error::shape(format!("expected {NUM_AUS} attention maps, got {}", refined.len())));
        }
        refined
            .iter()
            .map(|a| {
                if a.h != shared.h || a.w != shared.w {
                    return Err(Error::shape("attention map does not match shared feature"));
                }
                Ok(self.local_from_pool(ps, a.au_index, attention_pool(shared, &a.map).as_ref()))
            })
            .collect()
    }

    fn local_from_pool(&self, ps: &ParamStore, au: usize, pooled: Option<&(Vec<f64>, f64)>) -> LocalFeature {
        match pooled {
            Some((q, _)) => LocalFeature {
                f: self.proj[au].forward(ps, q),
                au_index: au,
                degenerate: false,
            },
            None => LocalFeature {
                f: vec![0.0; self.local_width],
                au_index: au,
                degenerate: true,
            },
        }
    }

    /// Full forward: predefined maps at `landmarks`, refinement, pooling,
    /// projection and local logits.
    pub fn forward(&self, ps: &ParamStore, shared: &FeatureMap, landmarks: &[f64]) -> Result<AttentionCache> {
        let predefined = predefined_attention(&self.centers, landmarks, &self.grid)?;
        let mut refined = Vec::with_capacity(NUM_AUS);
        let mut hidden = Vec::with_capacity(NUM_AUS);
        let mut gate = Vec::with_capacity(NUM_AUS);
        let mut pooled = Vec::with_capacity(NUM_AUS);
        let mut local = Vec::with_capacity(NUM_AUS);
        let mut logits = Vec::with_capacity(NUM_AUS);
        for p in &predefined {
            let (r, h, g) = self.refine_inner(ps, p, shared)?;
            let pool = attention_pool(shared, &r.map);
            let lf = self.local_from_pool(ps, p.au_index, pool.as_ref());
            let z = self.heads[p.au_index].forward(ps, &lf.f);
            logits.push([z[0], z[1]]);
            local.push(lf);
            pooled.push(pool);
            refined.push(r);
            hidden.push(h);
            gate.push(g);
        }
        Ok(AttentionCache {
            predefined,
            refined,
            hidden,
            gate,
            pooled,
            local,
            logits,
        })
    }

    /// Local AU supervision loss and its gradient with respect to the
    /// logits.
    pub fn local_loss(&self, cache: &AttentionCache, labels: &[u8], w: &ClassWeights) -> (f64, Vec<[f64; 2]>) {
        local_supervision_loss(&cache.logits, labels, &w.w)
    }

    /// Backward through heads, projections, pooling and refinement.
    /// `g_local` is the gradient w.r.t. each `f_i` from downstream consumers
    /// (classifier), `g_logits` the gradient w.r.t. local logits. Adds into
    /// `g_shared` and returns the gradient w.r.t. the landmark vector.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        ps: &ParamStore,
        shared: &FeatureMap,
        landmarks: &[f64],
        cache: &AttentionCache,
        g_local: &[Vec<f64>],
        g_logits: &[[f64; 2]],
        grads: &mut Grads,
        g_shared: &mut FeatureMap,
    ) -> Vec<f64> {
        let mut g_pre = Vec::with_capacity(NUM_AUS);
        for au in 0..NUM_AUS {
            let lf = &cache.local[au];
            let mut gf = self.heads[au].backward(ps, &lf.f, &g_logits[au], grads);
            for (a, b) in gf.iter_mut().zip(&g_local[au]) {
                *a += b;
            }
            let Some((q, mass)) = &cache.pooled[au] else {
                g_pre.push(vec![0.0; self.grid.h * self.grid.w]);
                continue;
            };
            let gq = self.proj[au].backward(ps, q, &gf, grads);
            let refined = &cache.refined[au].map;
            let g_ref = attention_pool_backward(shared, refined, q, *mass, &gq, g_shared);
            // refined = gate ⊙ predefined
            let pre = &cache.predefined[au].map;
            let gate = &cache.gate[au];
            let mut g_logit = FeatureMap::zeros(1, self.grid.h, self.grid.w);
            let mut gp = vec![0.0; pre.len()];
            for i in 0..pre.len() {
                gp[i] = g_ref[i] * gate[i];
                g_logit.data[i] = g_ref[i] * pre[i] * gate[i] * (1.0 - gate[i]);
            }
            g_pre.push(gp);
            let b = &self.branches[au];
            let mut g_hidden = b.conv_b.backward(ps, &cache.hidden[au], &g_logit, grads);
            ops::Activation::Relu.backward(&cache.hidden[au].data, &mut g_hidden.data);
            let gs = b.conv_a.backward(ps, shared, &g_hidden, grads);
            for (a, v) in g_shared.data.iter_mut().zip(&gs.data) {
                *a += v;
            }
        }
        predefined_attention_backward(&self.centers, landmarks, &self.grid, &g_pre)
    }

    pub fn param_count(shared_channels: usize, branch_channels: usize, local_width: usize) -> usize {
        let branch = (9 * shared_channels * branch_channels + branch_channels) + (9 * branch_channels + 1);
        let proj = shared_channels * local_width + local_width;
        let head = local_width * 2 + 2;
        NUM_AUS * (branch + proj + head)
    }
}
