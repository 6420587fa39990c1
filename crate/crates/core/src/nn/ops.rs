//! Dense kernels on channel-major (`C × H × W`) feature maps, each with an
//! explicit backward pass. All convolutions are 3×3 with zero padding 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::shape(format!(
                "feature map {c}x{h}x{w} needs {} values, got {}",
                c * h * w,
                data.len()
            )));
        }
        Ok(FeatureMap { c, h, w, data })
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[ch * n..(ch + 1) * n]
    }

    pub fn at(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[(ch * self.h + y) * self.w + x]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    /// Copies the `[y0, y0+h) × [x0, x0+w)` window of every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.c, h, w);
        for ch in 0..self.c {
            for y in 0..h {
                let src = (ch * self.h + y0 + y) * self.w + x0;
                let dst = (ch * h + y) * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }

    /// Adds `patch` into the window starting at `(y0, x0)`.
    pub fn add_window(&mut self, patch: &FeatureMap, y0: usize, x0: usize) {
        debug_assert_eq!(patch.c, self.c);
        for ch in 0..self.c {
            for y in 0..patch.h {
                let dst = (ch * self.h + y0 + y) * self.w + x0;
                let src = (ch * patch.h + y) * patch.w;
                for (d, s) in self.data[dst..dst + patch.w]
                    .iter_mut()
                    .zip(&patch.data[src..src + patch.w])
                {
                    *d += s;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the activation
    /// output `out`.
    pub fn backward(self, out: &[f64], grad: &mut [f64]) {
        match self {
            Activation::Relu => {
                for (g, &y) in grad.iter_mut().zip(out) {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for (g, &y) in grad.iter_mut().zip(out) {
                    *g *= 1.0 - y * y;
                }
            }
            Activation::Identity => {}
        }
    }

    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Output side length of a 3×3, padding-1 convolution.
pub fn conv_out_len(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    // indices i with 0 <= i + d < n
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

/// 3×3 convolution. `weight` is `[out_c][in_c][3][3]`, `bias` is `[out_c]`.
pub fn conv3x3_forward(
    input: &FeatureMap,
    weight: &[f64],
    bias: &[f64],
    out_c: usize,
    stride: usize,
) -> FeatureMap {
    let (ic_n, h, w) = (input.c, input.h, input.w);
    debug_assert_eq!(weight.len(), out_c * ic_n * 9);
    let (oh, ow) = (conv_out_len(h, stride), conv_out_len(w, stride));
    let mut out = FeatureMap::zeros(out_c, oh, ow);
    for oc in 0..out_c {
        let oplane = &mut out.data[oc * oh * ow..(oc + 1) * oh * ow];
        oplane.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..ic_n {
            let iplane = input.plane(ic);
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[((oc * ic_n + ic) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                    if stride == 1 {
                        let (y0, y1) = valid_range(h, dy);
                        let (x0, x1) = valid_range(w, dx);
                        for y in y0..y1 {
                            let src_row = ((y as isize + dy) as usize) * w;
                            let src = &iplane[(src_row as isize + x0 as isize + dx) as usize
                                ..(src_row as isize + x1 as isize + dx) as usize];
                            let dst = &mut oplane[y * ow + x0..y * ow + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    } else {
                        for oy in 0..oh {
                            let iy = (oy * stride) as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * stride) as isize + dx;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                oplane[oy * ow + ox] += wv * iplane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv3x3_forward`]. Accumulates into `gw`/`gb` and returns
/// the gradient with respect to the input.
pub fn conv3x3_backward(
    input: &FeatureMap,
    weight: &[f64],
    grad_out: &FeatureMap,
    stride: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) -> FeatureMap {
    let (ic_n, h, w) = (input.c, input.h, input.w);
    let (oc_n, oh, ow) = (grad_out.c, grad_out.h, grad_out.w);
    let mut gin = FeatureMap::zeros(ic_n, h, w);
    for oc in 0..oc_n {
        let gplane = grad_out.plane(oc);
        gb[oc] += gplane.iter().sum::<f64>();
        for ic in 0..ic_n {
            let iplane = input.plane(ic);
            let giplane = &mut gin.data[ic * h * w..(ic + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((oc * ic_n + ic) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                    let mut acc = [0.0f64; 4];
                    if stride == 1 {
                        let (y0, y1) = valid_range(h, dy);
                        let (x0, x1) = valid_range(w, dx);
                        for y in y0..y1 {
                            let src_row = (y as isize + dy) as usize * w;
                            let lo = (src_row as isize + x0 as isize + dx) as usize;
                            let hi = (src_row as isize + x1 as isize + dx) as usize;
                            let g = &gplane[y * ow + x0..y * ow + x1];
                            let src = &iplane[lo..hi];
                            let mut gc = g.chunks_exact(4);
                            let mut sc = src.chunks_exact(4);
                            for (a, b) in (&mut gc).zip(&mut sc) {
                                for k in 0..4 {
                                    acc[k] += a[k] * b[k];
                                }
                            }
                            for (a, b) in gc.remainder().iter().zip(sc.remainder()) {
                                acc[0] += a * b;
                            }
                            if wv != 0.0 {
                                let dst = &mut giplane[lo..hi];
                                for (d, gv) in dst.iter_mut().zip(g) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    } else {
                        for oy in 0..oh {
                            let iy = (oy * stride) as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * stride) as isize + dx;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let gv = gplane[oy * ow + ox];
                                let ii = iy as usize * w + ix as usize;
                                acc[0] += gv * iplane[ii];
                                giplane[ii] += wv * gv;
                            }
                        }
                    }
                    gw[widx] += acc.iter().sum::<f64>();
                }
            }
        }
    }
    gin
}

/// 2×2 average pooling with stride 2. Side lengths must be even.
pub fn avg_pool2(input: &FeatureMap) -> FeatureMap {
    let (oh, ow) = (input.h / 2, input.w / 2);
    let mut out = FeatureMap::zeros(input.c, oh, ow);
    for ch in 0..input.c {
        let p = input.plane(ch);
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * input.w + 2 * x;
                out.data[(ch * oh + y) * ow + x] =
                    0.25 * (p[i] + p[i + 1] + p[i + input.w] + p[i + input.w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &FeatureMap) -> FeatureMap {
    let (h, w) = (grad_out.h * 2, grad_out.w * 2);
    let mut gin = FeatureMap::zeros(grad_out.c, h, w);
    for ch in 0..grad_out.c {
        for y in 0..h {
            for x in 0..w {
                gin.data[(ch * h + y) * w + x] =
                    0.25 * grad_out.data[(ch * grad_out.h + y / 2) * grad_out.w + x / 2];
            }
        }
    }
    gin
}

/// `out = W·x + b` with `W` stored row-major `[out][in]`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            let row = &weight[o * n_in..(o + 1) * n_in];
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect()
}

pub fn linear_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let n_in = x.len();
    let mut gx = vec![0.0; n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        gb[o] += g;
        if g == 0.0 {
            continue;
        }
        let row = &weight[o * n_in..(o + 1) * n_in];
        let grow = &mut gw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] += g * x[i];
            gx[i] += g * row[i];
        }
    }
    gx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &FeatureMap, weight: &[f64], bias: &[f64], oc_n: usize, stride: usize) -> FeatureMap {
        let (oh, ow) = (conv_out_len(input.h, stride), conv_out_len(input.w, stride));
        let mut out = FeatureMap::zeros(oc_n, oh, ow);
        for oc in 0..oc_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias[oc];
                    for ic in 0..input.c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                let ix = (ox * stride + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < input.h && (ix as usize) < input.w {
                                    s += weight[((oc * input.c + ic) * 3 + ky) * 3 + kx]
                                        * input.at(ic, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.data[(oc * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for stride in [1, 2] {
            let input = FeatureMap::from_vec(3, 7, 6, pseudo(126, 1)).unwrap();
            let w = pseudo(4 * 3 * 9, 2);
            let b = pseudo(4, 3);
            let fast = conv3x3_forward(&input, &w, &b, 4, stride);
            let slow = naive_conv(&input, &w, &b, 4, stride);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and w, so the backward must reproduce it exactly.
        for stride in [1, 2] {
            let input = FeatureMap::from_vec(2, 6, 5, pseudo(60, 4)).unwrap();
            let w = pseudo(3 * 2 * 9, 5);
            let zero_b = vec![0.0; 3];
            let out = conv3x3_forward(&input, &w, &zero_b, 3, stride);
            let g = FeatureMap::from_vec(out.c, out.h, out.w, pseudo(out.data.len(), 6)).unwrap();
            let mut gw = vec![0.0; w.len()];
            let mut gb = vec![0.0; 3];
            let gin = conv3x3_backward(&input, &w, &g, stride, &mut gw, &mut gb);
            let lhs: f64 = out.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let via_x: f64 = gin.data.iter().zip(&input.data).map(|(a, b)| a * b).sum();
            let via_w: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10);
            assert!((lhs - via_w).abs() < 1e-10);
        }
    }

    #[test]
    fn pool_roundtrip_shapes() {
        let x = FeatureMap::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(avg_pool2(&x).data, vec![3.0]);
        let g = avg_pool2_backward(&FeatureMap::from_vec(1, 1, 1, vec![4.0]).unwrap());
        assert_eq!(g.data, vec![1.0; 4]);
    }

    #[test]
    fn crop_and_add_window_invert() {
        let x = FeatureMap::from_vec(2, 4, 4, pseudo(32, 9)).unwrap();
        let mut y = FeatureMap::zeros(2, 4, 4);
        for (y0, x0) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            y.add_window(&x.crop(y0, x0, 2, 2), y0, x0);
        }
        assert_eq!(x, y);
    }
}
