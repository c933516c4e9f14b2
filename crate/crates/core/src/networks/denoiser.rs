// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::{soft_act, soft_act_grad, tensor_ref, tensor_ref1, HiddenState, TensorRef};
use crate::error::{Error, Result};

/// `o = a + W2 act(W1 a + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Noise-prediction network.
///
/// The input projection mixes the noisy value, the conditioning vector and
/// an affine map of the sinusoidal step embedding. Each residual block's
/// output is also averaged into a skip path, which feeds a one-layer head.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub w_x: Array1<f64>,
    pub w_cond: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_step: Array2<f64>,
    pub b_step: Array1<f64>,
    pub blocks: Vec<ResidualBlock>,
    pub w_head: Array2<f64>,
    pub b_head: Array1<f64>,
    pub w_out: Array1<f64>,
    pub b_out: Array1<f64>,
}

/// Sinusoidal encoding of diffusion step `m`: `dim/2` sines then `dim/2`
/// cosines at geometrically spaced frequencies.
pub fn step_embedding(m: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let arg = m as f64 * freq;
        out[j] = arg.sin();
        out[half + j] = arg.cos();
    }
    out
}

/// Projected step embeddings `W_step e(m) + b_step` for `m = 0..=T`.
pub struct StepTable {
    rows: Array2<f64>,
}

impl StepTable {
    pub fn row(&self, m: usize) -> ArrayView1<'_, f64> {
        self.rows.row(m)
    }
}

/// Activations kept by [`DenoiserParams::forward_cached`].
pub struct DenoiserCache {
    x: Array1<f64>,
    cond: Array2<f64>,
    emb: Array2<f64>,
    /// Input of each block.
    block_in: Vec<Array2<f64>>,
    /// Pre-activation of each block's first layer.
    block_pre: Vec<Array2<f64>>,
    skip: Array2<f64>,
    head_pre: Array2<f64>,
    head: Array2<f64>,
}

/// Reusable buffers for allocation-free inference.
pub struct Scratch {
    a: Array2<f64>,
    u: Array2<f64>,
    skip: Array2<f64>,
}

impl Scratch {
    pub fn new(rows: usize, hidden: usize) -> Self {
        Self {
            a: Array2::zeros((rows, hidden)),
            u: Array2::zeros((rows, hidden)),
            skip: Array2::zeros((rows, hidden)),
        }
    }
}

impl DenoiserParams {
    pub fn zeros(hidden: usize, cond_dim: usize, embed: usize, blocks: usize) -> Self {
        let sq = || Array2::zeros((hidden, hidden));
        let v = || Array1::zeros(hidden);
        Self {
            w_x: v(),
            w_cond: Array2::zeros((hidden, cond_dim)),
            b_in: v(),
            w_step: Array2::zeros((hidden, embed)),
            b_step: v(),
            blocks: (0..blocks)
                .map(|_| ResidualBlock {
                    w1: sq(),
                    b1: v(),
                    w2: sq(),
                    b2: v(),
                })
                .collect(),
            w_head: sq(),
            b_head: v(),
            w_out: v(),
            b_out: Array1::zeros(1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_in.len()
    }

    pub fn cond_dim(&self) -> usize {
        self.w_cond.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_step.ncols()
    }

    pub(super) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        out.push(tensor_ref1(format!("{prefix}.w_x"), &self.w_x));
        out.push(tensor_ref(format!("{prefix}.w_cond"), &self.w_cond));
        out.push(tensor_ref1(format!("{prefix}.b_in"), &self.b_in));
        out.push(tensor_ref(format!("{prefix}.w_step"), &self.w_step));
        out.push(tensor_ref1(format!("{prefix}.b_step"), &self.b_step));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(tensor_ref(format!("{prefix}.block.{i}.w1"), &b.w1));
            out.push(tensor_ref1(format!("{prefix}.block.{i}.b1"), &b.b1));
            out.push(tensor_ref(format!("{prefix}.block.{i}.w2"), &b.w2));
            out.push(tensor_ref1(format!("{prefix}.block.{i}.b2"), &b.b2));
        }
        out.push(tensor_ref(format!("{prefix}.w_head"), &self.w_head));
        out.push(tensor_ref1(format!("{prefix}.b_head"), &self.b_head));
        out.push(tensor_ref1(format!("{prefix}.w_out"), &self.w_out));
        out.push(tensor_ref1(format!("{prefix}.b_out"), &self.b_out));
    }

    pub(super) fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.w_x"), self.w_x.as_slice_mut().unwrap());
        f(&format!("{prefix}.w_cond"), self.w_cond.as_slice_mut().unwrap());
        f(&format!("{prefix}.b_in"), self.b_in.as_slice_mut().unwrap());
        f(&format!("{prefix}.w_step"), self.w_step.as_slice_mut().unwrap());
        f(&format!("{prefix}.b_step"), self.b_step.as_slice_mut().unwrap());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("{prefix}.block.{i}.w1"), b.w1.as_slice_mut().unwrap());
            f(&format!("{prefix}.block.{i}.b1"), b.b1.as_slice_mut().unwrap());
            f(&format!("{prefix}.block.{i}.w2"), b.w2.as_slice_mut().unwrap());
            f(&format!("{prefix}.block.{i}.b2"), b.b2.as_slice_mut().unwrap());
        }
        f(&format!("{prefix}.w_head"), self.w_head.as_slice_mut().unwrap());
        f(&format!("{prefix}.b_head"), self.b_head.as_slice_mut().unwrap());
        f(&format!("{prefix}.w_out"), self.w_out.as_slice_mut().unwrap());
        f(&format!("{prefix}.b_out"), self.b_out.as_slice_mut().unwrap());
    }

    pub(super) fn push_slices_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.w_x.as_slice_mut().unwrap());
        out.push(self.w_cond.as_slice_mut().unwrap());
        out.push(self.b_in.as_slice_mut().unwrap());
        out.push(self.w_step.as_slice_mut().unwrap());
        out.push(self.b_step.as_slice_mut().unwrap());
        for b in self.blocks.iter_mut() {
            out.push(b.w1.as_slice_mut().unwrap());
            out.push(b.b1.as_slice_mut().unwrap());
            out.push(b.w2.as_slice_mut().unwrap());
            out.push(b.b2.as_slice_mut().unwrap());
        }
        out.push(self.w_head.as_slice_mut().unwrap());
        out.push(self.b_head.as_slice_mut().unwrap());
        out.push(self.w_out.as_slice_mut().unwrap());
        out.push(self.b_out.as_slice_mut().unwrap());
    }

    fn embeddings(&self, steps: &[usize]) -> Array2<f64> {
        let e = self.embed_dim();
        let mut emb = Array2::zeros((steps.len(), e));
        for (mut row, &m) in emb.rows_mut().into_iter().zip(steps) {
            row.assign(&Array1::from(step_embedding(m, e)));
        }
        emb
    }

    pub fn step_table(&self, steps: usize) -> StepTable {
        let all: Vec<usize> = (0..=steps).collect();
        let rows = self.embeddings(&all).dot(&self.w_step.t()) + &self.b_step + &self.b_in;
        StepTable { rows }
    }

    /// Conditioning part of the input projection, `cond W_cond^T`, one row
    /// per conditioning vector. Constant across diffusion steps and samples.
    pub fn condition_rows(&self, cond: ArrayView2<'_, f64>) -> Array2<f64> {
        cond.dot(&self.w_cond.t())
    }

    /// Batched noise prediction with caches for the backward pass.
    pub fn forward_cached(
        &self,
        x: &Array1<f64>,
        cond: ArrayView2<'_, f64>,
        steps: &[usize],
    ) -> (Array1<f64>, DenoiserCache) {
        let emb = self.embeddings(steps);
        let mut a = cond.dot(&self.w_cond.t());
        general_mat_mul(1.0, &emb, &self.w_step.t(), 1.0, &mut a);
        a += &self.b_in;
        a += &self.b_step;
        Zip::from(a.rows_mut()).and(x).for_each(|mut row, &xv| {
            row.scaled_add(xv, &self.w_x);
        });
        let k = self.blocks.len() as f64;
        let mut skip = Array2::zeros(a.raw_dim());
        let mut block_in = Vec::with_capacity(self.blocks.len());
        let mut block_pre = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let pre = a.dot(&b.w1.t()) + &b.b1;
            let u = pre.mapv(soft_act);
            let mut o = a.clone();
            general_mat_mul(1.0, &u, &b.w2.t(), 1.0, &mut o);
            o += &b.b2;
            skip.scaled_add(1.0 / k, &o);
            block_in.push(std::mem::replace(&mut a, o));
            block_pre.push(pre);
        }
        let head_pre = skip.dot(&self.w_head.t()) + &self.b_head;
        let head = head_pre.mapv(soft_act);
        let out = head.dot(&self.w_out) + self.b_out[0];
        let cache = DenoiserCache {
            x: x.clone(),
            cond: cond.to_owned(),
            emb,
            block_in,
            block_pre,
            skip,
            head_pre,
            head,
        };
        (out, cache)
    }

    /// Reverse pass from `d loss / d output`. Adds parameter gradients into
    /// `grads` and returns the gradient with respect to the conditioning rows.
    pub fn backward(&self, c: &DenoiserCache, dout: &Array1<f64>, grads: &mut DenoiserParams) -> Array2<f64> {
        grads.w_out.scaled_add(1.0, &c.head.t().dot(dout));
        grads.b_out[0] += dout.sum();
        let mut dpre = Array2::zeros(c.head.raw_dim());
        Zip::from(dpre.rows_mut()).and(dout).for_each(|mut row, &d| {
            row.scaled_add(d, &self.w_out);
        });
        Zip::from(&mut dpre)
            .and(&c.head_pre)
            .for_each(|d, &p| *d *= soft_act_grad(p));
        general_mat_mul(1.0, &dpre.t(), &c.skip, 1.0, &mut grads.w_head);
        grads.b_head += &dpre.sum_axis(Axis(0));
        let k = self.blocks.len() as f64;
        let dskip_each = dpre.dot(&self.w_head) / k;

        // gradient w.r.t. the output of the current block from later blocks
        let mut da = Array2::zeros(dskip_each.raw_dim());
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let d_o = &da + &dskip_each;
            let u = c.block_pre[i].mapv(soft_act);
            general_mat_mul(1.0, &d_o.t(), &u, 1.0, &mut grads.blocks[i].w2);
            grads.blocks[i].b2 += &d_o.sum_axis(Axis(0));
            let mut du = d_o.dot(&b.w2);
            Zip::from(&mut du)
                .and(&c.block_pre[i])
                .for_each(|d, &p| *d *= soft_act_grad(p));
            general_mat_mul(1.0, &du.t(), &c.block_in[i], 1.0, &mut grads.blocks[i].w1);
            grads.blocks[i].b1 += &du.sum_axis(Axis(0));
            da = d_o;
            general_mat_mul(1.0, &du, &b.w1, 1.0, &mut da);
        }

        grads.w_x.scaled_add(1.0, &da.t().dot(&c.x));
        let db = da.sum_axis(Axis(0));
        grads.b_in += &db;
        grads.b_step += &db;
        general_mat_mul(1.0, &da.t(), &c.cond, 1.0, &mut grads.w_cond);
        general_mat_mul(1.0, &da.t(), &c.emb, 1.0, &mut grads.w_step);
        da.dot(&self.w_cond)
    }

    /// Allocation-free batched prediction for sampling. `cond_rows` is the
    /// output of [`condition_rows`](Self::condition_rows) for each row and
    /// `step_row` the matching [`StepTable`] row.
    pub fn predict_into(
        &self,
        x: &[f64],
        cond_rows: ArrayView2<'_, f64>,
        step_row: ArrayView1<'_, f64>,
        scratch: &mut Scratch,
        out: &mut [f64],
    ) {
        let Scratch { a, u, skip } = scratch;
        a.assign(&cond_rows);
        Zip::from(a.rows_mut()).and(x).for_each(|mut row, &xv| {
            Zip::from(&mut row)
                .and(&self.w_x)
                .and(&step_row)
                .for_each(|r, &w, &s| *r += xv * w + s);
        });
        skip.fill(0.0);
        let k = 1.0 / self.blocks.len() as f64;
        for b in &self.blocks {
            general_mat_mul(1.0, &*a, &b.w1.t(), 0.0, u);
            Zip::from(u.rows_mut()).for_each(|mut row| {
                Zip::from(&mut row)
                    .and(&b.b1)
                    .for_each(|v, &bias| *v = soft_act(*v + bias));
            });
            general_mat_mul(1.0, &*u, &b.w2.t(), 1.0, a);
            Zip::from(a.rows_mut())
                .and(skip.rows_mut())
                .for_each(|mut row, mut srow| {
                    Zip::from(&mut row).and(&mut srow).and(&b.b2).for_each(|v, s, &bias| {
                        *v += bias;
                        *s += k * *v;
                    });
                });
        }
        general_mat_mul(1.0, &*skip, &self.w_head.t(), 0.0, u);
        for (o, row) in out.iter_mut().zip(u.rows()) {
            let mut acc = self.b_out[0];
            for ((&v, &bias), &w) in row.iter().zip(&self.b_head).zip(&self.w_out) {
                acc += soft_act(v + bias) * w;
            }
            *o = acc;
        }
    }
}

/// Noise prediction for one noisy value, conditioned on the recurrent hidden
/// state (all layers concatenated).
pub fn denoiser_forward(xm: f64, h: &HiddenState, m: usize, p: &DenoiserParams) -> Result<f64> {
    let cond = h.concat();
    if cond.len() != p.cond_dim() {
        return Err(Error::Dimension(format!(
            "conditioning vector has {} entries, denoiser expects {}",
            cond.len(),
            p.cond_dim()
        )));
    }
    let cond = cond.insert_axis(Axis(0));
    let (out, _) = p.forward_cached(&Array1::from(vec![xm]), cond.view(), &[m]);
    Ok(out[0])
}
