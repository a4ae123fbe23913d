//! Shallow text encoder: hashed bag of tokens, mean pooling, a linear
//! projection and L2 normalization.
//!
//! ```text
//! x = mean(token_table[t] for t in tokens)
//! y = proj · x + bias
//! h = y / ‖y‖
//! ```

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, normalize_backward, Matrix};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_VOCAB: usize = 1 << 16;
pub const DEFAULT_MAX_SEQ_LEN: usize = 32;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lowercases, splits on runs of non-alphanumeric characters and hashes each
/// token into `[0, vocab)`. Empty input maps to the reserved id 0.
pub fn tokenize(text: &str, vocab: usize, max_len: usize) -> Vec<u32> {
    let lower = text.to_lowercase();
    let mut ids: Vec<u32> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .take(max_len.max(1))
        .map(|t| (fnv1a(t.as_bytes()) % vocab as u64) as u32)
        .collect();
    if ids.is_empty() {
        ids.push(0);
    }
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_table: Matrix,
    pub proj: Matrix,
    pub proj_bias: Vec<f64>,
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub token_table: Matrix,
    pub proj: Matrix,
    pub proj_bias: Vec<f64>,
}

/// Output of a forward pass, with what the backward pass needs.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    /// Unit-norm rows `h`.
    pub vectors: Matrix,
    /// `‖y‖` before normalization.
    pub norms: Vec<f64>,
    /// Mean-pooled token embeddings `x`.
    pub pooled: Matrix,
    pub token_ids: Vec<Vec<u32>>,
}

impl EncoderParams {
    pub fn new<R: Rng>(dim: usize, vocab: usize, max_seq_len: usize, rng: &mut R) -> Result<Self> {
        if dim < 2 || vocab < 1 || max_seq_len < 1 {
            return Err(Error::Config(format!(
                "encoder needs dim >= 2, vocab >= 1, max_seq_len >= 1 (got {dim}, {vocab}, {max_seq_len})"
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let table = (0..vocab * dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let mut proj = Matrix::identity(dim);
        for v in proj.as_mut_slice() {
            *v += rng.gen_range(-0.01..0.01);
        }
        Ok(Self {
            token_table: Matrix::from_vec(vocab, dim, table),
            proj,
            proj_bias: vec![0.0; dim],
            max_seq_len,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.proj.rows()
    }

    #[inline]
    pub fn vocab(&self) -> usize {
        self.token_table.rows()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        tokenize(text, self.vocab(), self.max_seq_len)
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            token_table: Matrix::zeros(self.vocab(), self.dim()),
            proj: Matrix::zeros(self.dim(), self.dim()),
            proj_bias: vec![0.0; self.dim()],
        }
    }

    /// Encodes one token sequence; returns `(h, ‖y‖, x)`.
    fn encode_one(&self, tokens: &[u32]) -> Result<(Vec<f64>, f64, Vec<f64>)> {
        let d = self.dim();
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        let mut pooled = vec![0.0; d];
        for &t in tokens {
            let t = t as usize;
            if t >= self.vocab() {
                return Err(Error::Data(format!("token id {t} outside vocabulary of {}", self.vocab())));
            }
            for (p, e) in pooled.iter_mut().zip(self.token_table.row(t)) {
                *p += e;
            }
        }
        let inv_len = 1.0 / tokens.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= inv_len);

        let mut y: Vec<f64> = (0..d)
            .map(|j| dot(self.proj.row(j), &pooled) + self.proj_bias[j])
            .collect();
        let n = dot(&y, &y).sqrt();
        if !(n >= 1e-12) {
            return Err(Error::Numerical("degenerate embedding".into()));
        }
        y.iter_mut().for_each(|v| *v /= n);
        Ok((y, n, pooled))
    }

    /// Forward pass over a batch. Rows are computed independently, so the
    /// result does not depend on batch composition or thread count.
    pub fn forward(&self, token_ids: Vec<Vec<u32>>) -> Result<EmbeddingBatch> {
        let d = self.dim();
        let rows: Vec<(Vec<f64>, f64, Vec<f64>)> = token_ids
            .par_iter()
            .map(|t| self.encode_one(t))
            .collect::<Result<_>>()?;
        let mut vectors = Vec::with_capacity(rows.len() * d);
        let mut pooled = Vec::with_capacity(rows.len() * d);
        let mut norms = Vec::with_capacity(rows.len());
        for (h, n, x) in rows {
            vectors.extend(h);
            pooled.extend(x);
            norms.push(n);
        }
        let b = norms.len();
        Ok(EmbeddingBatch {
            vectors: Matrix::from_vec(b, d, vectors),
            norms,
            pooled: Matrix::from_vec(b, d, pooled),
            token_ids,
        })
    }

    pub fn encode_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<EmbeddingBatch> {
        self.forward(texts.iter().map(|t| self.tokenize(t.as_ref())).collect())
    }

    /// Accumulates `dL/dθ` into `grads` given `dL/dh` for every batch row.
    pub fn backward(
        &self,
        batch: &EmbeddingBatch,
        upstream: &Matrix,
        grads: &mut EncoderGrads,
    ) -> Result<()> {
        let d = self.dim();
        if upstream.shape() != batch.vectors.shape() {
            return Err(Error::Data(format!(
                "encoder backward: upstream {:?} vs batch {:?}",
                upstream.shape(),
                batch.vectors.shape()
            )));
        }
        if grads.token_table.shape() != self.token_table.shape() {
            return Err(Error::Data("encoder backward: gradient buffer shape mismatch".into()));
        }
        let mut grad_x = vec![0.0; d];
        for i in 0..batch.vectors.rows() {
            let g = upstream.row(i);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let grad_y = normalize_backward(batch.vectors.row(i), batch.norms[i], g);
            let x = batch.pooled.row(i);
            for (j, &gy) in grad_y.iter().enumerate() {
                grads.proj_bias[j] += gy;
                axpy(gy, x, grads.proj.row_mut(j));
            }
            grad_x.iter_mut().for_each(|v| *v = 0.0);
            for (j, &gy) in grad_y.iter().enumerate() {
                axpy(gy, self.proj.row(j), &mut grad_x);
            }
            let tokens = &batch.token_ids[i];
            let scale = 1.0 / tokens.len() as f64;
            for &t in tokens {
                axpy(scale, &grad_x, grads.token_table.row_mut(t as usize));
            }
        }
        Ok(())
    }
}

impl EncoderGrads {
    pub fn fill_zero(&mut self) {
        self.token_table.fill(0.0);
        self.proj.fill(0.0);
        self.proj_bias.iter_mut().for_each(|v| *v = 0.0);
    }
}
