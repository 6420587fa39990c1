//! Minimal layer library: parameters live in a [`ParamStore`], layers keep
//! only [`ParamId`] handles, and every forward has a matching backward that
//! accumulates into [`Grads`].

pub mod ops;
pub mod params;

pub use ops::{Activation, FeatureMap};
pub use params::{Grads, Init, ParamId, ParamStore, Partition, Tensor};

/// 3×3 convolution, padding 1.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn new(ps: &mut ParamStore, name: &str, in_c: usize, out_c: usize, stride: usize, seed: u64) -> Self {
        let weight = ps.register(
            &format!("{name}.weight"),
            &[out_c, in_c, 3, 3],
            Init::FanIn(in_c * 9),
            seed,
        );
        let bias = ps.register(&format!("{name}.bias"), &[out_c], Init::Zeros, seed);
        Conv3x3 {
            weight,
            bias,
            in_c,
            out_c,
            stride,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &FeatureMap) -> FeatureMap {
        ops::conv3x3_forward(x, ps.get(self.weight), ps.get(self.bias), self.out_c, self.stride)
    }

    pub fn backward(&self, ps: &ParamStore, x: &FeatureMap, g: &FeatureMap, grads: &mut Grads) -> FeatureMap {
        let mut gw = std::mem::take(&mut grads.bufs[self.weight.0]);
        let mut gb = std::mem::take(&mut grads.bufs[self.bias.0]);
        let gin = ops::conv3x3_backward(x, ps.get(self.weight), g, self.stride, &mut gw, &mut gb);
        grads.bufs[self.weight.0] = gw;
        grads.bufs[self.bias.0] = gb;
        gin
    }

    pub fn inits(&self) -> [(ParamId, Init); 2] {
        [(self.weight, Init::FanIn(self.in_c * 9)), (self.bias, Init::Zeros)]
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, n_in: usize, n_out: usize, seed: u64) -> Self {
        let weight = ps.register(&format!("{name}.weight"), &[n_out, n_in], Init::FanIn(n_in), seed);
        let bias = ps.register(&format!("{name}.bias"), &[n_out], Init::Zeros, seed);
        Linear {
            weight,
            bias,
            n_in,
            n_out,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_in);
        ops::linear_forward(x, ps.get(self.weight), ps.get(self.bias))
    }

    pub fn backward(&self, ps: &ParamStore, x: &[f64], g: &[f64], grads: &mut Grads) -> Vec<f64> {
        let mut gw = std::mem::take(&mut grads.bufs[self.weight.0]);
        let mut gb = std::mem::take(&mut grads.bufs[self.bias.0]);
        let gx = ops::linear_backward(x, ps.get(self.weight), g, &mut gw, &mut gb);
        grads.bufs[self.weight.0] = gw;
        grads.bufs[self.bias.0] = gb;
        gx
    }

    pub fn inits(&self) -> [(ParamId, Init); 2] {
        [(self.weight, Init::FanIn(self.n_in)), (self.bias, Init::Zeros)]
    }
}

/// Fixed elementwise affine map `(x - shift) · scale`. Its tensors are
/// buffers: they are fitted from data, never by gradient descent, and their
/// names end in `.norm_shift` / `.norm_scale`.
#[derive(Debug, Clone)]
pub struct Standardize {
    pub shift: ParamId,
    pub scale: ParamId,
}

impl Standardize {
    pub const MARKER: &'static str = ".norm_";

    pub fn new(ps: &mut ParamStore, name: &str, n: usize) -> Self {
        Standardize {
            shift: ps.register(&format!("{name}.norm_shift"), &[n], Init::Zeros, 0),
            scale: ps.register(&format!("{name}.norm_scale"), &[n], Init::Ones, 0),
        }
    }

    pub fn is_buffer(name: &str) -> bool {
        name.contains(Self::MARKER)
    }

    pub fn inits(&self) -> [(ParamId, Init); 2] {
        [(self.shift, Init::Zeros), (self.scale, Init::Ones)]
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64]) -> Vec<f64> {
        let (m, s) = (ps.get(self.shift), ps.get(self.scale));
        x.iter().zip(m).zip(s).map(|((x, m), s)| (x - m) * s).collect()
    }

    pub fn backward(&self, ps: &ParamStore, g: &[f64]) -> Vec<f64> {
        g.iter().zip(ps.get(self.scale)).map(|(g, s)| g * s).collect()
    }

    /// Sets entries `range` from the column mean and standard deviation of
    /// `rows`; constant columns get scale 0.
    pub fn fit(&self, ps: &mut ParamStore, rows: &[Vec<f64>], range: std::ops::Range<usize>) {
        let n = rows.len().max(1) as f64;
        for (k, j) in range.clone().enumerate() {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            ps.get_mut(self.shift)[j] = mean;
            ps.get_mut(self.scale)[j] = if sd > 1e-12 * mean.abs().max(1.0) { 1.0 / sd } else { 0.0 };
        }
    }
}
