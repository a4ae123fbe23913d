//! Label prototypes.
//!
//! Each label `l` contributes a 3-token sequence `(h_l, c_l, v_l)`: its text
//! embedding, its EMA centroid of positive query embeddings, and a free
//! vector shared by a cluster of similar labels. One pre-norm transformer
//! encoder block mixes the three tokens:
//!
//! ```text
//! a  = LN₁(x)
//! x₁ = x + dropout(softmax(a W_q (a W_k)ᵀ / √d) (a W_v) W_o)
//! b  = LN₂(x₁)
//! x₂ = x₁ + dropout(gelu(b W_in + b_in) W_out + b_out)
//! z  = normalize(mean_t x₂[t])
//! ```
//!
//! There are no positional encodings, so the block is permutation
//! equivariant over the slots and the pooled prototype is slot-order invariant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, normalize_backward, normalize_in_place, Matrix};

const LN_EPS: f64 = 1e-5;
const SLOTS: usize = 3;
/// Slot order of the input sequence.
pub const SLOT_TEXT: usize = 0;
pub const SLOT_CENTROID: usize = 1;
pub const SLOT_FREE: usize = 2;

pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const DEFAULT_ALPHA: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeNetParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ffn_in: Matrix,
    pub ffn_in_bias: Vec<f64>,
    pub ffn_out: Matrix,
    pub ffn_out_bias: Vec<f64>,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub dropout: f64,
}

/// Gradient buffers mirroring [`PrototypeNetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeNetGrads {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ffn_in: Matrix,
    pub ffn_in_bias: Vec<f64>,
    pub ffn_out: Matrix,
    pub ffn_out_bias: Vec<f64>,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks are drawn from a stream keyed by this seed and the row position.
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct RowCache {
    x: Matrix,
    ln1: LayerNormCache,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Matrix,
    ctx: Matrix,
    mask_attn: Option<Matrix>,
    ln2: LayerNormCache,
    b: Matrix,
    pre_act: Matrix,
    act: Matrix,
    mask_ffn: Option<Matrix>,
    pooled_norm: f64,
}

/// Prototypes for a set of labels plus the activations needed for backward.
#[derive(Debug, Clone)]
pub struct PrototypeBatch {
    pub z: Matrix,
    caches: Vec<RowCache>,
}

/// Gradients with respect to the text-embedding and free-vector slots.
/// The centroid slot's gradient is dropped: centroids are updated by EMA only.
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub text: Matrix,
    pub free: Matrix,
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, LayerNormCache) {
    let (n, d) = x.shape();
    let mut xhat = Matrix::zeros(n, d);
    let mut out = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for t in 0..n {
        let row = x.row(t);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat[(t, j)] = xh;
            out[(t, j)] = gain[j] * xh + bias[j];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    grad_out: &Matrix,
    grad_gain: &mut [f64],
    grad_bias: &mut [f64],
) -> Matrix {
    let (n, d) = grad_out.shape();
    let mut grad_in = Matrix::zeros(n, d);
    for t in 0..n {
        let gy = grad_out.row(t);
        let xh = cache.xhat.row(t);
        let mut gxh = vec![0.0; d];
        for j in 0..d {
            grad_gain[j] += gy[j] * xh[j];
            grad_bias[j] += gy[j];
            gxh[j] = gy[j] * gain[j];
        }
        let mean_g = gxh.iter().sum::<f64>() / d as f64;
        let mean_gx = dot(&gxh, xh) / d as f64;
        let is = cache.inv_std[t];
        let gi = grad_in.row_mut(t);
        for j in 0..d {
            gi[j] = is * (gxh[j] - mean_g - xh[j] * mean_gx);
        }
    }
    grad_in
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for t in 0..m.rows() {
        axpy(1.0, bias, m.row_mut(t));
    }
}

fn sum_rows_into(m: &Matrix, acc: &mut [f64]) {
    for t in 0..m.rows() {
        axpy(1.0, m.row(t), acc);
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_vec(
        a.rows(),
        a.cols(),
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).collect(),
    )
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let keep = 1.0 / (1.0 - rate);
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    )
}

impl PrototypeNetParams {
    pub fn new<R: Rng>(dim: usize, ffn_dim: usize, dropout: f64, rng: &mut R) -> Result<Self> {
        if dim < 2 || ffn_dim < dim {
            return Err(Error::Config(format!(
                "prototype network needs dim >= 2 and ffn_dim >= dim (got {dim}, {ffn_dim})"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {dropout}")));
        }
        let bd = 1.0 / (dim as f64).sqrt();
        let bf = 1.0 / (ffn_dim as f64).sqrt();
        Ok(Self {
            w_q: uniform_matrix(dim, dim, bd, rng),
            w_k: uniform_matrix(dim, dim, bd, rng),
            w_v: uniform_matrix(dim, dim, bd, rng),
            w_o: uniform_matrix(dim, dim, bd, rng),
            ffn_in: uniform_matrix(dim, ffn_dim, bd, rng),
            ffn_in_bias: vec![0.0; ffn_dim],
            ffn_out: uniform_matrix(ffn_dim, dim, bf, rng),
            ffn_out_bias: vec![0.0; dim],
            ln1_gain: vec![1.0; dim],
            ln1_bias: vec![0.0; dim],
            ln2_gain: vec![1.0; dim],
            ln2_bias: vec![0.0; dim],
            dropout,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    #[inline]
    pub fn ffn_dim(&self) -> usize {
        self.ffn_in.cols()
    }

    pub fn zero_grads(&self) -> PrototypeNetGrads {
        let d = self.dim();
        let f = self.ffn_dim();
        PrototypeNetGrads {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ffn_in: Matrix::zeros(d, f),
            ffn_in_bias: vec![0.0; f],
            ffn_out: Matrix::zeros(f, d),
            ffn_out_bias: vec![0.0; d],
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
        }
    }

    fn forward_row(&self, x: Matrix, rng: Option<&mut ChaCha8Rng>) -> Result<(Vec<f64>, RowCache)> {
        let d = self.dim();
        let (a, ln1) = layer_norm(&x, &self.ln1_gain, &self.ln1_bias);
        let q = a.matmul(&self.w_q);
        let k = a.matmul(&self.w_k);
        let v = a.matmul(&self.w_v);
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = q.matmul_t(&k);
        for t in 0..SLOTS {
            let row = probs.row_mut(t);
            row.iter_mut().for_each(|s| *s *= scale);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|s| *s = (*s - max).exp());
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|s| *s /= sum);
        }
        let ctx = probs.matmul(&v);
        let mut attn_out = ctx.matmul(&self.w_o);

        let (mask_attn, mask_ffn) = match rng {
            Some(rng) if self.dropout > 0.0 => (
                Some(dropout_mask(SLOTS, d, self.dropout, rng)),
                Some(dropout_mask(SLOTS, d, self.dropout, rng)),
            ),
            _ => (None, None),
        };
        if let Some(m) = &mask_attn {
            attn_out = hadamard(&attn_out, m);
        }
        let mut x1 = x.clone();
        x1.add_assign(&attn_out);

        let (b, ln2) = layer_norm(&x1, &self.ln2_gain, &self.ln2_bias);
        let mut pre_act = b.matmul(&self.ffn_in);
        add_bias(&mut pre_act, &self.ffn_in_bias);
        let act = Matrix::from_vec(
            pre_act.rows(),
            pre_act.cols(),
            pre_act.as_slice().iter().map(|&u| gelu(u)).collect(),
        );
        let mut ffn_out = act.matmul(&self.ffn_out);
        add_bias(&mut ffn_out, &self.ffn_out_bias);
        if let Some(m) = &mask_ffn {
            ffn_out = hadamard(&ffn_out, m);
        }
        let mut x2 = x1;
        x2.add_assign(&ffn_out);

        let mut pooled = vec![0.0; d];
        sum_rows_into(&x2, &mut pooled);
        pooled.iter_mut().for_each(|p| *p /= SLOTS as f64);
        let pooled_norm = normalize_in_place(&mut pooled);
        if !pooled_norm.is_finite() || pooled_norm < 1e-12 || !x2.is_finite() {
            return Err(Error::Numerical("prototype overflow".into()));
        }
        Ok((
            pooled,
            RowCache {
                x,
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                mask_attn,
                ln2,
                b,
                pre_act,
                act,
                mask_ffn,
                pooled_norm,
            },
        ))
    }

    /// Computes prototypes for `n` labels from unit-norm text embeddings,
    /// centroids and free vectors (each `n×d`).
    pub fn forward(&self, text: &Matrix, centroid: &Matrix, free: &Matrix, mode: Mode) -> Result<PrototypeBatch> {
        let d = self.dim();
        let n = text.rows();
        for m in [text, centroid, free] {
            if m.shape() != (n, d) {
                return Err(Error::Data(format!(
                    "prototype forward: expected {n}x{d} inputs, got {:?}",
                    m.shape()
                )));
            }
        }
        let rows: Vec<(Vec<f64>, RowCache)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut x = Matrix::zeros(SLOTS, d);
                x.row_mut(SLOT_TEXT).copy_from_slice(text.row(i));
                x.row_mut(SLOT_CENTROID).copy_from_slice(centroid.row(i));
                x.row_mut(SLOT_FREE).copy_from_slice(free.row(i));
                match mode {
                    Mode::Eval => self.forward_row(x, None),
                    Mode::Train { seed } => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(i as u64);
                        self.forward_row(x, Some(&mut rng))
                    }
                }
            })
            .collect::<Result<_>>()?;
        let mut z = Matrix::zeros(n, d);
        let mut caches = Vec::with_capacity(n);
        for (i, (row, cache)) in rows.into_iter().enumerate() {
            z.row_mut(i).copy_from_slice(&row);
            caches.push(cache);
        }
        Ok(PrototypeBatch { z, caches })
    }

    /// Accumulates parameter gradients and returns input gradients for the
    /// text and free-vector slots, given `dL/dz`.
    pub fn backward(
        &self,
        batch: &PrototypeBatch,
        upstream: &Matrix,
        grads: &mut PrototypeNetGrads,
    ) -> Result<InputGrads> {
        let d = self.dim();
        let n = batch.z.rows();
        if upstream.shape() != (n, d) {
            return Err(Error::Data(format!(
                "prototype backward: upstream {:?} vs {n}x{d}",
                upstream.shape()
            )));
        }
        if grads.ffn_in.shape() != self.ffn_in.shape() {
            return Err(Error::Data("prototype backward: gradient buffer shape mismatch".into()));
        }
        let mut text = Matrix::zeros(n, d);
        let mut free = Matrix::zeros(n, d);
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..n {
            let gz = upstream.row(i);
            if gz.iter().all(|&g| g == 0.0) {
                continue;
            }
            let c = &batch.caches[i];
            let g_pooled = normalize_backward(batch.z.row(i), c.pooled_norm, gz);

            let mut g_x2 = Matrix::zeros(SLOTS, d);
            for t in 0..SLOTS {
                axpy(1.0 / SLOTS as f64, &g_pooled, g_x2.row_mut(t));
            }

            // FFN branch
            let g_ffn = match &c.mask_ffn {
                Some(m) => hadamard(&g_x2, m),
                None => g_x2.clone(),
            };
            grads.ffn_out.add_assign(&c.act.t_matmul(&g_ffn));
            sum_rows_into(&g_ffn, &mut grads.ffn_out_bias);
            let g_act = g_ffn.matmul_t(&self.ffn_out);
            let g_pre = Matrix::from_vec(
                SLOTS,
                self.ffn_dim(),
                g_act
                    .as_slice()
                    .iter()
                    .zip(c.pre_act.as_slice())
                    .map(|(g, &u)| g * gelu_grad(u))
                    .collect(),
            );
            grads.ffn_in.add_assign(&c.b.t_matmul(&g_pre));
            sum_rows_into(&g_pre, &mut grads.ffn_in_bias);
            let g_b = g_pre.matmul_t(&self.ffn_in);
            let mut g_x1 = layer_norm_backward(&c.ln2, &self.ln2_gain, &g_b, &mut grads.ln2_gain, &mut grads.ln2_bias);
            g_x1.add_assign(&g_x2);

            // attention branch
            let g_attn = match &c.mask_attn {
                Some(m) => hadamard(&g_x1, m),
                None => g_x1.clone(),
            };
            grads.w_o.add_assign(&c.ctx.t_matmul(&g_attn));
            let g_ctx = g_attn.matmul_t(&self.w_o);
            let g_probs = g_ctx.matmul_t(&c.v);
            let g_v = c.probs.t_matmul(&g_ctx);
            let mut g_scores = Matrix::zeros(SLOTS, SLOTS);
            for t in 0..SLOTS {
                let p = c.probs.row(t);
                let gp = g_probs.row(t);
                let inner = dot(p, gp);
                for u in 0..SLOTS {
                    g_scores[(t, u)] = p[u] * (gp[u] - inner) * scale;
                }
            }
            let g_q = g_scores.matmul(&c.k);
            let g_k = g_scores.t_matmul(&c.q);
            grads.w_q.add_assign(&c.a.t_matmul(&g_q));
            grads.w_k.add_assign(&c.a.t_matmul(&g_k));
            grads.w_v.add_assign(&c.a.t_matmul(&g_v));
            let mut g_a = g_q.matmul_t(&self.w_q);
            g_a.add_assign(&g_k.matmul_t(&self.w_k));
            g_a.add_assign(&g_v.matmul_t(&self.w_v));
            let g_x = layer_norm_backward(&c.ln1, &self.ln1_gain, &g_a, &mut grads.ln1_gain, &mut grads.ln1_bias);

            let mut g_in = g_x1;
            g_in.add_assign(&g_x);
            debug_assert_eq!(c.x.rows(), SLOTS);
            text.row_mut(i).copy_from_slice(g_in.row(SLOT_TEXT));
            free.row_mut(i).copy_from_slice(g_in.row(SLOT_FREE));
        }
        Ok(InputGrads { text, free })
    }
}

impl PrototypeNetGrads {
    pub fn fill_zero(&mut self) {
        for m in [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ffn_in,
            &mut self.ffn_out,
        ] {
            m.fill(0.0);
        }
        for v in [
            &mut self.ffn_in_bias,
            &mut self.ffn_out_bias,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// EMA centroids `c_l ← normalize(α c_l + (1 − α) h_q)`, outside the gradient graph.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidStore {
    pub centroids: Matrix,
    pub alpha: f64,
    pub touched: Vec<u64>,
}

impl CentroidStore {
    pub fn new(initial: Matrix, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let touched = vec![0; initial.rows()];
        Ok(Self {
            centroids: initial,
            alpha,
            touched,
        })
    }

    pub fn update(&mut self, label: usize, query: &[f64]) {
        let alpha = self.alpha;
        let c = self.centroids.row_mut(label);
        for (ci, qi) in c.iter_mut().zip(query) {
            *ci = alpha * *ci + (1.0 - alpha) * qi;
        }
        normalize_in_place(c);
        self.touched[label] += 1;
    }

    /// Replaces centroids that have never been updated with fresh label embeddings.
    pub fn refresh_untouched(&mut self, label_embeddings: &Matrix) {
        for l in 0..self.touched.len() {
            if self.touched[l] == 0 {
                self.centroids.row_mut(l).copy_from_slice(label_embeddings.row(l));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.touched.len()
    }

    pub fn is_empty(&self) -> bool {
        self.touched.is_empty()
    }
}

/// Learnable vectors, each shared by a cluster of labels. Rows are stored raw
/// and normalized on the way into the prototype network.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeVectorBank {
    pub bank: Matrix,
    pub assignment: Vec<usize>,
}

/// Normalized bank rows for a set of labels and the norms used to produce them.
#[derive(Debug, Clone)]
pub struct GatheredFree {
    pub vectors: Matrix,
    pub norms: Vec<f64>,
}

impl FreeVectorBank {
    pub fn new<R: Rng>(size: usize, dim: usize, assignment: Vec<usize>, rng: &mut R) -> Result<Self> {
        if let Some(&bad) = assignment.iter().find(|&&a| a >= size) {
            return Err(Error::Data(format!("bank assignment {bad} out of range for {size} vectors")));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            bank: uniform_matrix(size, dim, bound, rng),
            assignment,
        })
    }

    pub fn size(&self) -> usize {
        self.bank.rows()
    }

    pub fn gather(&self, labels: &[usize]) -> GatheredFree {
        let mut vectors = Matrix::zeros(labels.len(), self.bank.cols());
        let mut norms = Vec::with_capacity(labels.len());
        for (i, &l) in labels.iter().enumerate() {
            let row = vectors.row_mut(i);
            row.copy_from_slice(self.bank.row(self.assignment[l]));
            norms.push(normalize_in_place(row));
        }
        GatheredFree { vectors, norms }
    }

    /// Chains `dL/dv̂` through the normalization and sums it into the shared bank rows.
    pub fn scatter_grad(&self, labels: &[usize], gathered: &GatheredFree, grad: &Matrix, grad_bank: &mut Matrix) {
        for (i, &l) in labels.iter().enumerate() {
            let g = normalize_backward(gathered.vectors.row(i), gathered.norms[i], grad.row(i));
            axpy(1.0, &g, grad_bank.row_mut(self.assignment[l]));
        }
    }
}

/// Prototypes for every label in eval mode, `L×d` with unit rows.
pub fn materialize_all_prototypes(
    net: &PrototypeNetParams,
    encoder: &EncoderParams,
    corpus: &Corpus,
    centroids: &CentroidStore,
    bank: &FreeVectorBank,
) -> Result<Matrix> {
    const CHUNK: usize = 1024;
    let num_labels = corpus.num_labels();
    if centroids.len() != num_labels || bank.assignment.len() != num_labels {
        return Err(Error::Data(format!(
            "corpus has {num_labels} labels but state covers {} centroids / {} assignments",
            centroids.len(),
            bank.assignment.len()
        )));
    }
    let mut out = Matrix::zeros(num_labels, net.dim());
    let all: Vec<usize> = (0..num_labels).collect();
    for chunk in all.chunks(CHUNK) {
        let texts: Vec<&str> = chunk.iter().map(|&l| corpus.label(l).text.as_str()).collect();
        let h = encoder.encode_texts(&texts)?;
        let c = centroids.centroids.select_rows(chunk);
        let v = bank.gather(chunk);
        let z = net.forward(&h.vectors, &c, &v.vectors, Mode::Eval)?;
        for (i, &l) in chunk.iter().enumerate() {
            out.row_mut(l).copy_from_slice(z.z.row(i));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut m = uniform_matrix(n, d, 1.0, rng);
        for i in 0..n {
            normalize_in_place(m.row_mut(i));
        }
        m
    }

    #[test]
    fn centroid_update_arithmetic() {
        let mut store = CentroidStore::new(Matrix::from_rows(&[vec![1.0, 0.0]]), 0.95).unwrap();
        store.update(0, &[0.0, 1.0]);
        let n = (0.95f64 * 0.95 + 0.05 * 0.05).sqrt();
        let c = store.centroids.row(0);
        assert!((c[0] - 0.95 / n).abs() < 1e-12 && (c[1] - 0.05 / n).abs() < 1e-12);
        assert_eq!(store.touched[0], 1);
    }

    #[test]
    fn centroid_fixed_point() {
        let mut store = CentroidStore::new(Matrix::from_rows(&[vec![0.6, 0.8]]), 0.95).unwrap();
        store.update(0, &[0.6, 0.8]);
        let c = store.centroids.row(0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn alpha_must_be_open_interval() {
        assert!(CentroidStore::new(Matrix::zeros(1, 2), 1.0).is_err());
        assert!(CentroidStore::new(Matrix::zeros(1, 2), 0.0).is_err());
    }

    #[test]
    fn zero_weights_collapse_to_normalized_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = PrototypeNetParams::new(4, 8, 0.0, &mut rng).unwrap();
        for m in [&mut net.w_q, &mut net.w_k, &mut net.w_v, &mut net.w_o, &mut net.ffn_in, &mut net.ffn_out] {
            m.fill(0.0);
        }
        let h = unit_rows(2, 4, &mut rng);
        let c = unit_rows(2, 4, &mut rng);
        let v = unit_rows(2, 4, &mut rng);
        let out = net.forward(&h, &c, &v, Mode::Eval).unwrap();
        for i in 0..2 {
            let mut mean: Vec<f64> = (0..4).map(|j| (h[(i, j)] + c[(i, j)] + v[(i, j)]) / 3.0).collect();
            normalize_in_place(&mut mean);
            for j in 0..4 {
                assert!((out.z[(i, j)] - mean[j]).abs() < 1e-12);
            }
        }
        // identical slots: prototype is the input direction itself
        let same = net.forward(&h, &h, &h, Mode::Eval).unwrap();
        assert!(same.z.max_abs_diff(&h) < 1e-12);
    }

    #[test]
    fn slot_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = PrototypeNetParams::new(6, 12, 0.1, &mut rng).unwrap();
        let h = unit_rows(3, 6, &mut rng);
        let c = unit_rows(3, 6, &mut rng);
        let v = unit_rows(3, 6, &mut rng);
        let base = net.forward(&h, &c, &v, Mode::Eval).unwrap().z;
        for (a, b, cc) in [(&h, &v, &c), (&c, &h, &v), (&v, &c, &h)] {
            let z = net.forward(a, b, cc, Mode::Eval).unwrap().z;
            assert!(z.max_abs_diff(&base) < 1e-8);
        }
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = PrototypeNetParams::new(8, 32, 0.5, &mut rng).unwrap();
        let h = unit_rows(4, 8, &mut rng);
        let e1 = net.forward(&h, &h, &h, Mode::Eval).unwrap().z;
        let e2 = net.forward(&h, &h, &h, Mode::Eval).unwrap().z;
        assert_eq!(e1, e2);
        let t1 = net.forward(&h, &h, &h, Mode::Train { seed: 1 }).unwrap().z;
        let t1b = net.forward(&h, &h, &h, Mode::Train { seed: 1 }).unwrap().z;
        let t2 = net.forward(&h, &h, &h, Mode::Train { seed: 2 }).unwrap().z;
        assert_eq!(t1, t1b);
        assert_ne!(t1, t2);
        assert_ne!(t1, e1);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = PrototypeNetParams::new(4, 8, 0.0, &mut rng).unwrap();
        let h = unit_rows(2, 4, &mut rng);
        let batch = net.forward(&h, &h, &h, Mode::Eval).unwrap();
        let mut g = net.zero_grads();
        let inputs = net.backward(&batch, &Matrix::zeros(2, 4), &mut g).unwrap();
        assert_eq!(g, net.zero_grads());
        assert!(inputs.text.as_slice().iter().chain(inputs.free.as_slice()).all(|&x| x == 0.0));
    }

    #[test]
    fn bank_gather_and_assignment_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(FreeVectorBank::new(2, 4, vec![0, 2], &mut rng).is_err());
        let bank = FreeVectorBank::new(2, 4, vec![0, 1, 0], &mut rng).unwrap();
        let g = bank.gather(&[0, 2, 1]);
        assert_eq!(g.vectors.row(0), g.vectors.row(1));
        for i in 0..3 {
            assert!((crate::linalg::norm(g.vectors.row(i)) - 1.0).abs() < 1e-12);
        }
    }
}
