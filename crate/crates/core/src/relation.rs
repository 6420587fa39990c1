//! AU relation graph and graph convolution.
//!
//! `M[i][j] = P(AU j | AU i)` estimated by counting over training labels,
//! `M_bool[i][j] = 1 ⇔ M[i][j] >= threshold`, and the propagation matrix `G`
//! is either `M_bool` itself or `M_bool` with self loops, row-normalized so
//! each node averages itself and its strongly related neighbours. A graph
//! convolution layer computes `Z_{l+1} = G · Z_l · W_l`.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::AuLabels;
use crate::error::{Error, Result};
use crate::face::NUM_AUS;
use crate::nn::{Activation, Grads, Init, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix {
    pub m: Array2<f64>,
    pub support_counts: Array2<u64>,
    /// Rows whose AU never occurs; their entries are all zero.
    pub undefined_rows: Vec<usize>,
}

/// Builds the conditional co-occurrence matrix from a binary label matrix
/// with any number of AU columns.
pub fn build_relation_matrix<L: AsRef<[u8]>>(labels: &[L]) -> Result<RelationMatrix> {
    let Some(first) = labels.first() else {
        return Err(Error::validation("relation matrix needs at least one label row"));
    };
    let r = first.as_ref().len();
    let mut counts = Array2::<u64>::zeros((r, r));
    for row in labels {
        let row = row.as_ref();
        if row.len() != r {
            return Err(Error::shape("label rows have different lengths"));
        }
        let on: Vec<usize> = (0..r).filter(|&i| row[i] == 1).collect();
        for &i in &on {
            for &j in &on {
                counts[[i, j]] += 1;
            }
        }
    }
    let mut m = Array2::<f64>::zeros((r, r));
    let mut undefined_rows = Vec::new();
    for i in 0..r {
        let denom = counts[[i, i]];
        if denom == 0 {
            undefined_rows.push(i);
            continue;
        }
        for j in 0..r {
            m[[i, j]] = counts[[i, j]] as f64 / denom as f64;
        }
    }
    Ok(RelationMatrix {
        m,
        support_counts: counts,
        undefined_rows,
    })
}

pub fn relation_from_au_labels(labels: &[AuLabels]) -> Result<RelationMatrix> {
    build_relation_matrix(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// `G = rownorm(M_bool ∨ I)`.
    #[default]
    RowNormalized,
    /// `G = M_bool` as thresholded.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyOptions {
    pub propagation: Propagation,
    /// Use `max(M, Mᵀ)` before thresholding.
    pub symmetrize: bool,
    /// Use `Mᵀ` (i.e. `P(i | j)` in row `i`) before thresholding.
    pub transpose: bool,
}

impl Default for AdjacencyOptions {
    fn default() -> Self {
        AdjacencyOptions {
            propagation: Propagation::RowNormalized,
            symmetrize: false,
            transpose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BooleanAdjacency {
    pub threshold: f64,
    /// The matrix that was thresholded (after transpose/symmetrize).
    pub m: Array2<f64>,
    pub m_bool: Array2<u8>,
    pub g: Array2<f64>,
    pub undefined_rows: Vec<usize>,
    pub options: AdjacencyOptions,
}

pub fn threshold_adjacency(rel: &RelationMatrix, threshold: f64, opts: AdjacencyOptions) -> Result<BooleanAdjacency> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::domain(format!("adjacency threshold {threshold} not in (0,1]")));
    }
    let mut m = if opts.transpose {
        rel.m.t().to_owned()
    } else {
        rel.m.clone()
    };
    if opts.symmetrize {
        let mt = m.t().to_owned();
        m.zip_mut_with(&mt, |a, b| *a = a.max(*b));
    }
    let m_bool = m.mapv(|v| (v >= threshold) as u8);
    let r = m.nrows();
    let g = match opts.propagation {
        Propagation::Raw => m_bool.mapv(f64::from),
        Propagation::RowNormalized => {
            let mut a = m_bool.mapv(f64::from);
            for i in 0..r {
                a[[i, i]] = 1.0;
            }
            for mut row in a.rows_mut() {
                let s: f64 = row.sum();
                row.mapv_inplace(|v| v / s);
            }
            a
        }
    };
    Ok(BooleanAdjacency {
        threshold,
        m,
        m_bool,
        g,
        undefined_rows: rel.undefined_rows.clone(),
        options: opts,
    })
}

impl BooleanAdjacency {
    /// Identity propagation (no relational mixing).
    pub fn identity(r: usize) -> Self {
        BooleanAdjacency {
            threshold: 1.0,
            m: Array2::eye(r),
            m_bool: Array2::eye(r),
            g: Array2::eye(r),
            undefined_rows: vec![],
            options: AdjacencyOptions::default(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&AdjacencyFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: AdjacencyFile = serde_json::from_str(text)?;
        f.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// On-disk layout: nested row lists, floats printed at round-trip precision.
#[derive(Serialize, Deserialize)]
struct AdjacencyFile {
    threshold: f64,
    options: AdjacencyOptions,
    undefined_rows: Vec<usize>,
    m: Vec<Vec<f64>>,
    m_bool: Vec<Vec<u8>>,
    g: Vec<Vec<f64>>,
}

fn rows<T: Clone>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows<T: Clone>(v: Vec<Vec<T>>, what: &str) -> Result<Array2<T>> {
    let r = v.len();
    let c = v.first().map_or(0, Vec::len);
    if v.iter().any(|row| row.len() != c) {
        return Err(Error::shape(format!("{what}: ragged rows")));
    }
    Array2::from_shape_vec((r, c), v.into_iter().flatten().collect()).map_err(|e| Error::shape(e.to_string()))
}

impl From<&BooleanAdjacency> for AdjacencyFile {
    fn from(a: &BooleanAdjacency) -> Self {
        AdjacencyFile {
            threshold: a.threshold,
            options: a.options,
            undefined_rows: a.undefined_rows.clone(),
            m: rows(&a.m),
            m_bool: rows(&a.m_bool),
            g: rows(&a.g),
        }
    }
}

impl TryFrom<AdjacencyFile> for BooleanAdjacency {
    type Error = Error;

    fn try_from(f: AdjacencyFile) -> Result<Self> {
        Ok(BooleanAdjacency {
            threshold: f.threshold,
            m: from_rows(f.m, "m")?,
            m_bool: from_rows(f.m_bool, "m_bool")?,
            g: from_rows(f.g, "g")?,
            undefined_rows: f.undefined_rows,
            options: f.options,
        })
    }
}

/// Stack of bias-free graph convolution layers.
#[derive(Debug, Clone)]
pub struct GcnStack {
    pub layers: Vec<ParamId>,
    pub widths: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct GcnCache {
    /// Input of each layer; `inputs[0] = Z_0`.
    inputs: Vec<Array2<f64>>,
    /// `G · Z_l` for each layer.
    propagated: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl GcnStack {
    /// `widths = [in, h1, ..., out]`.
    pub fn new(ps: &mut ParamStore, widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(format!("GCN widths {widths:?} need at least input and output")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| ps.register(&format!("gcn.layer{l}.weight"), &[w[0], w[1]], Init::FanIn(w[0]), seed))
            .collect();
        Ok(GcnStack {
            layers,
            widths: widths.to_vec(),
            activation,
        })
    }

    pub fn inits(&self) -> Vec<(ParamId, Init)> {
        self.layers.iter().zip(&self.widths).map(|(&id, &w)| (id, Init::FanIn(w))).collect()
    }

    pub fn out_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    fn weight<'a>(&self, ps: &'a ParamStore, l: usize) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.widths[l], self.widths[l + 1]), ps.get(self.layers[l])).expect("registered shape")
    }

    pub fn forward(&self, ps: &ParamStore, g: &Array2<f64>, z0: &Array2<f64>) -> Result<GcnCache> {
        if g.nrows() != g.ncols() || g.ncols() != z0.nrows() {
            return Err(Error::shape(format!(
                "propagation matrix {:?} incompatible with node features {:?}",
                g.dim(),
                z0.dim()
            )));
        }
        if z0.ncols() != self.widths[0] {
            return Err(Error::shape(format!(
                "node feature width {} does not match GCN input width {}",
                z0.ncols(),
                self.widths[0]
            )));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut propagated = Vec::with_capacity(n);
        let mut z = z0.clone();
        for l in 0..n {
            let gz = g.dot(&z);
            let mut next = gz.dot(&self.weight(ps, l));
            if l + 1 < n {
                let act = self.activation;
                next.mapv_inplace(|v| {
                    let mut x = [v];
                    act.apply(&mut x);
                    x[0]
                });
            }
            inputs.push(z);
            propagated.push(gz);
            z = next;
        }
        Ok(GcnCache {
            inputs,
            propagated,
            output: z,
        })
    }

    /// Accumulates weight gradients and returns `∂L/∂Z_0`.
    pub fn backward(
        &self,
        ps: &ParamStore,
        g: &Array2<f64>,
        cache: &GcnCache,
        g_out: &Array2<f64>,
        grads: &mut Grads,
    ) -> Array2<f64> {
        let n = self.layers.len();
        let mut gz = g_out.clone();
        for l in (0..n).rev() {
            if l + 1 < n {
                // gz is w.r.t. the activated output of layer l, i.e. inputs[l+1]
                let out = &cache.inputs[l + 1];
                let mut gs = gz.as_slice().expect("contiguous").to_vec();
                self.activation.backward(out.as_slice().expect("contiguous"), &mut gs);
                gz = Array2::from_shape_vec(gz.dim(), gs).expect("shape");
            }
            let gw = cache.propagated[l].t().dot(&gz);
            for (a, b) in grads.get_mut(self.layers[l]).iter_mut().zip(gw.iter()) {
                *a += b;
            }
            gz = g.t().dot(&gz.dot(&self.weight(ps, l).t()));
        }
        gz
    }
}

/// Stacks a slice of node feature vectors into an `R × width` matrix.
pub fn node_matrix(features: &[Vec<f64>]) -> Result<Array2<f64>> {
    let w = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != w) {
        return Err(Error::shape("node features have different widths"));
    }
    Array2::from_shape_vec((features.len(), w), features.concat()).map_err(|e| Error::shape(e.to_string()))
}

pub fn check_node_count(z: &Array2<f64>) -> Result<()> {
    if z.nrows() != NUM_AUS {
        return Err(Error::shape(format!("expected {NUM_AUS} AU nodes, got {}", z.nrows())));
    }
    Ok(())
}
