// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};

use super::{sigmoid, tensor_ref, tensor_ref1, TensorRef};
use crate::error::{Error, Result};

/// One stacked GRU layer. Gate matrices act on `[h_prev ; input]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruLayer {
    pub w_r: Array2<f64>,
    pub w_z: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b_r: Array1<f64>,
    pub b_z: Array1<f64>,
    pub b_h: Array1<f64>,
}

impl GruLayer {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w = || Array2::zeros((hidden, hidden + input));
        Self {
            w_r: w(),
            w_z: w(),
            w_h: w(),
            b_r: Array1::zeros(hidden),
            b_z: Array1::zeros(hidden),
            b_h: Array1::zeros(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_r.len()
    }

    pub fn input(&self) -> usize {
        self.w_r.ncols() - self.hidden()
    }

    pub(super) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        out.push(tensor_ref(format!("{prefix}.w_r"), &self.w_r));
        out.push(tensor_ref(format!("{prefix}.w_z"), &self.w_z));
        out.push(tensor_ref(format!("{prefix}.w_h"), &self.w_h));
        out.push(tensor_ref1(format!("{prefix}.b_r"), &self.b_r));
        out.push(tensor_ref1(format!("{prefix}.b_z"), &self.b_z));
        out.push(tensor_ref1(format!("{prefix}.b_h"), &self.b_h));
    }

    pub(super) fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.w_r"), self.w_r.as_slice_mut().unwrap());
        f(&format!("{prefix}.w_z"), self.w_z.as_slice_mut().unwrap());
        f(&format!("{prefix}.w_h"), self.w_h.as_slice_mut().unwrap());
        f(&format!("{prefix}.b_r"), self.b_r.as_slice_mut().unwrap());
        f(&format!("{prefix}.b_z"), self.b_z.as_slice_mut().unwrap());
        f(&format!("{prefix}.b_h"), self.b_h.as_slice_mut().unwrap());
    }

    pub(super) fn push_slices_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.w_r.as_slice_mut().unwrap());
        out.push(self.w_z.as_slice_mut().unwrap());
        out.push(self.w_h.as_slice_mut().unwrap());
        out.push(self.b_r.as_slice_mut().unwrap());
        out.push(self.b_z.as_slice_mut().unwrap());
        out.push(self.b_h.as_slice_mut().unwrap());
    }

    /// One cell update for a batch. Returns the new hidden rows and, when
    /// `keep` is set, everything the backward pass needs.
    fn step(&self, h_prev: &Array2<f64>, x: ArrayView2<'_, f64>, keep: bool) -> (Array2<f64>, Option<CellCache>) {
        let hd = self.hidden();
        let cat = concatenate(Axis(1), &[h_prev.view(), x]).expect("row counts match");
        let mut r = cat.dot(&self.w_r.t()) + &self.b_r;
        r.mapv_inplace(sigmoid);
        let mut z = cat.dot(&self.w_z.t()) + &self.b_z;
        z.mapv_inplace(sigmoid);
        // reset gate applies to the recurrent half of the input
        let mut cat2 = cat.clone();
        cat2.slice_mut(s![.., ..hd]).zip_mut_with(&r, |c, &g| *c *= g);
        let mut cand = cat2.dot(&self.w_h.t()) + &self.b_h;
        cand.mapv_inplace(f64::tanh);
        let mut h = h_prev.clone();
        Zip::from(&mut h)
            .and(&z)
            .and(&cand)
            .for_each(|h, &z, &c| *h = (1.0 - z) * *h + z * c);
        let cache = keep.then(|| CellCache {
            h_prev: h_prev.clone(),
            cat,
            cat2,
            r,
            z,
            cand,
        });
        (h, cache)
    }

    /// Backward through one cell. Accumulates parameter gradients into
    /// `grads` and returns `(d h_prev, d input)`.
    fn step_backward(&self, c: &CellCache, dh: &Array2<f64>, grads: &mut GruLayer) -> (Array2<f64>, Array2<f64>) {
        let hd = self.hidden();
        // h = (1 - z) h_prev + z cand
        let mut dz = dh * &(&c.cand - &c.h_prev);
        let mut da_h = dh * &c.z;
        let mut dh_prev = dh * &c.z.mapv(|z| 1.0 - z);
        Zip::from(&mut da_h).and(&c.cand).for_each(|d, &t| *d *= 1.0 - t * t);
        general_mat_mul(1.0, &da_h.t(), &c.cat2, 1.0, &mut grads.w_h);
        grads.b_h += &da_h.sum_axis(Axis(0));
        let dcat2 = da_h.dot(&self.w_h);
        let drh = dcat2.slice(s![.., ..hd]);
        let mut dx = dcat2.slice(s![.., hd..]).to_owned();
        let mut dr = &drh * &c.h_prev;
        dh_prev += &(&drh * &c.r);

        Zip::from(&mut dz).and(&c.z).for_each(|d, &z| *d *= z * (1.0 - z));
        Zip::from(&mut dr).and(&c.r).for_each(|d, &r| *d *= r * (1.0 - r));
        general_mat_mul(1.0, &dz.t(), &c.cat, 1.0, &mut grads.w_z);
        grads.b_z += &dz.sum_axis(Axis(0));
        general_mat_mul(1.0, &dr.t(), &c.cat, 1.0, &mut grads.w_r);
        grads.b_r += &dr.sum_axis(Axis(0));

        let mut dcat = dz.dot(&self.w_z);
        general_mat_mul(1.0, &dr, &self.w_r, 1.0, &mut dcat);
        dh_prev += &dcat.slice(s![.., ..hd]);
        dx += &dcat.slice(s![.., hd..]);
        (dh_prev, dx)
    }
}

struct CellCache {
    h_prev: Array2<f64>,
    cat: Array2<f64>,
    cat2: Array2<f64>,
    r: Array2<f64>,
    z: Array2<f64>,
    cand: Array2<f64>,
}

/// The stacked conditional embedding network.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub layers: Vec<GruLayer>,
}

/// Hidden state of every layer for a single sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub layers: Vec<Array1<f64>>,
}

impl HiddenState {
    pub fn zeros(layers: usize, hidden: usize) -> Self {
        Self {
            layers: vec![Array1::zeros(hidden); layers],
        }
    }

    /// Concatenation of all layers, the denoiser's conditioning vector.
    pub fn concat(&self) -> Array1<f64> {
        let views: Vec<_> = self.layers.iter().map(|l| l.view()).collect();
        concatenate(Axis(0), &views).unwrap_or_else(|_| Array1::zeros(0))
    }
}

/// Per-position, per-layer caches of one unrolled batch.
pub struct GruCache {
    cells: Vec<Vec<CellCache>>,
}

impl GruParams {
    pub fn zeros(layers: usize, hidden: usize, input: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|i| GruLayer::zeros(hidden, if i == 0 { input } else { hidden }))
                .collect(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.layers.first().map_or(0, GruLayer::hidden)
    }

    /// Runs the stack over a sequence of covariate batches (one `B x (C+f)`
    /// matrix per position), starting from `h_0 = 0`, and returns the final
    /// hidden state of all layers concatenated (`B x layers*hidden`).
    pub fn unroll(&self, inputs: &[Array2<f64>]) -> Array2<f64> {
        self.unroll_impl(inputs, false).0
    }

    /// [`unroll`](Self::unroll) that also records the caches for
    /// [`backward`](Self::backward).
    pub fn unroll_cached(&self, inputs: &[Array2<f64>]) -> (Array2<f64>, GruCache) {
        self.unroll_impl(inputs, true)
    }

    fn unroll_impl(&self, inputs: &[Array2<f64>], keep: bool) -> (Array2<f64>, GruCache) {
        let batch = inputs.first().map_or(0, |x| x.nrows());
        let hd = self.hidden();
        let mut h: Vec<Array2<f64>> = vec![Array2::zeros((batch, hd)); self.layers.len()];
        let mut cells = Vec::with_capacity(if keep { inputs.len() } else { 0 });
        for x in inputs {
            let mut per_layer = Vec::with_capacity(self.layers.len());
            for (l, layer) in self.layers.iter().enumerate() {
                let (new_h, cache) = if l == 0 {
                    layer.step(&h[0], x.view(), keep)
                } else {
                    let below = h[l - 1].clone();
                    layer.step(&h[l], below.view(), keep)
                };
                h[l] = new_h;
                if let Some(c) = cache {
                    per_layer.push(c);
                }
            }
            if keep {
                cells.push(per_layer);
            }
        }
        let views: Vec<_> = h.iter().map(|a| a.view()).collect();
        let out = concatenate(Axis(1), &views).unwrap_or_else(|_| Array2::zeros((batch, 0)));
        (out, GruCache { cells })
    }

    /// Backpropagation through time from the gradient of the concatenated
    /// final hidden state. Gradients are added into `grads`.
    pub fn backward(&self, cache: &GruCache, d_final: &Array2<f64>, grads: &mut GruParams) {
        let hd = self.hidden();
        let mut dh: Vec<Array2<f64>> = (0..self.layers.len())
            .map(|l| d_final.slice(s![.., l * hd..(l + 1) * hd]).to_owned())
            .collect();
        for cells in cache.cells.iter().rev() {
            for l in (0..self.layers.len()).rev() {
                let (dprev, dx) = self.layers[l].step_backward(&cells[l], &dh[l], &mut grads.layers[l]);
                dh[l] = dprev;
                if l > 0 {
                    dh[l - 1] += &dx;
                }
            }
        }
    }
}

/// Single-sequence, single-step update of the whole stack: layer 1 reads
/// `[h_prev^1 ; c_t]`, layer `i > 1` reads `[h_prev^i ; h_t^(i-1)]`.
pub fn gru_forward(c_t: &[f64], h_prev: &HiddenState, p: &GruParams) -> Result<HiddenState> {
    let first = p
        .layers
        .first()
        .ok_or_else(|| Error::Dimension("GRU has no layers".into()))?;
    if c_t.len() != first.input() {
        return Err(Error::Dimension(format!(
            "covariate has {} entries, layer 1 expects {}",
            c_t.len(),
            first.input()
        )));
    }
    if h_prev.layers.len() != p.layers.len() || h_prev.layers.iter().any(|h| h.len() != p.hidden()) {
        return Err(Error::Dimension("hidden state does not match the GRU stack".into()));
    }
    let mut below = Array2::from_shape_vec((1, c_t.len()), c_t.to_vec()).expect("shape");
    let mut out = Vec::with_capacity(p.layers.len());
    for (layer, h) in p.layers.iter().zip(&h_prev.layers) {
        let hp = h.clone().insert_axis(Axis(0));
        let (h_new, _) = layer.step(&hp, below.view(), false);
        out.push(h_new.row(0).to_owned());
        below = h_new;
    }
    Ok(HiddenState { layers: out })
}
