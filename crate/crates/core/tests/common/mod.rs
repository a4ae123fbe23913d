//! Independent oracles and fixtures shared by the integration tests.
//!
//! Nothing in here calls the kernels it is used to check: losses, metrics
//! and ranking are re-derived with plain loops over `Vec`s.

#![allow(dead_code)]

use prime_core::encoder::EncoderParams;
use prime_core::linalg::Matrix;
use prime_core::model::Model;
use prime_core::prototype::{CentroidStore, FreeVectorBank, Mode, PrototypeNetParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- triplets

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleTriplet {
    pub loss: f64,
    pub d_pos: f64,
    pub d_neg: f64,
    pub region: &'static str,
}

pub fn oracle_clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Three-region table: easy, uncertain (inverted direction), hard.
pub fn oracle_dynamic(sp: f64, sn: f64, gmin: f64, gmax: f64) -> OracleTriplet {
    if sp > sn && sp - sn >= gmin {
        OracleTriplet { loss: 0.0, d_pos: 0.0, d_neg: 0.0, region: "easy" }
    } else if sp > sn {
        OracleTriplet { loss: (sp - sn) + gmin, d_pos: 1.0, d_neg: -1.0, region: "uncertain" }
    } else {
        let gap = sn - sp;
        OracleTriplet { loss: gap + oracle_clip(gap, gmin, gmax), d_pos: -1.0, d_neg: 1.0, region: "hard" }
    }
}

pub fn oracle_fixed(sp: f64, sn: f64, m: f64) -> OracleTriplet {
    let v = sn - sp + m;
    if v >= 0.0 {
        OracleTriplet { loss: v, d_pos: -1.0, d_neg: 1.0, region: "hard" }
    } else {
        OracleTriplet { loss: 0.0, d_pos: 0.0, d_neg: 0.0, region: "easy" }
    }
}

pub struct OracleBatch {
    pub loss: f64,
    pub grad: Vec<Vec<f64>>,
    pub easy: u64,
    pub uncertain: u64,
    pub hard: u64,
}

/// Triple loop over every (anchor, positive, negative), averaged.
pub fn oracle_batch(
    sims: &[Vec<f64>],
    pos: &[Vec<bool>],
    neg: &[Vec<bool>],
    kernel: impl Fn(f64, f64) -> OracleTriplet,
) -> OracleBatch {
    let mut out = OracleBatch {
        loss: 0.0,
        grad: sims.iter().map(|r| vec![0.0; r.len()]).collect(),
        easy: 0,
        uncertain: 0,
        hard: 0,
    };
    let mut count = 0usize;
    for a in 0..sims.len() {
        for j in 0..sims[a].len() {
            for k in 0..sims[a].len() {
                if !(pos[a][j] && neg[a][k]) {
                    continue;
                }
                let t = kernel(sims[a][j], sims[a][k]);
                out.loss += t.loss;
                out.grad[a][j] += t.d_pos;
                out.grad[a][k] += t.d_neg;
                match t.region {
                    "easy" => out.easy += 1,
                    "uncertain" => out.uncertain += 1,
                    _ => out.hard += 1,
                }
                count += 1;
            }
        }
    }
    if count > 0 {
        out.loss /= count as f64;
        for row in &mut out.grad {
            for g in row {
                *g /= count as f64;
            }
        }
    }
    out
}

/// `(R, dR/ds, dR/db)`.
pub fn oracle_regularizer(
    s: &[Vec<f64>],
    b: &[Vec<f64>],
    pos: &[Vec<bool>],
    neg: &[Vec<bool>],
    m: f64,
) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut p_terms = Vec::new();
    let mut n_terms = Vec::new();
    for i in 0..s.len() {
        for j in 0..s[i].len() {
            if pos[i][j] {
                p_terms.push((i, j, (s[i][j] - b[i][j] + m).max(0.0)));
            }
            if neg[i][j] {
                n_terms.push((i, j, (b[i][j] - s[i][j] + m).max(0.0)));
            }
        }
    }
    let mut gs: Vec<Vec<f64>> = s.iter().map(|r| vec![0.0; r.len()]).collect();
    let mut gb = gs.clone();
    let mut rp = 0.0;
    for &(i, j, v) in &p_terms {
        rp += v / p_terms.len() as f64;
        if v > 0.0 {
            gs[i][j] += 0.5 / p_terms.len() as f64;
            gb[i][j] -= 0.5 / p_terms.len() as f64;
        }
    }
    let mut rn = 0.0;
    for &(i, j, v) in &n_terms {
        rn += v / n_terms.len() as f64;
        if v > 0.0 {
            gb[i][j] += 0.5 / n_terms.len() as f64;
            gs[i][j] -= 0.5 / n_terms.len() as f64;
        }
    }
    ((rp + rn) / 2.0, gs, gb)
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

pub fn transpose_rows(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if m.is_empty() {
        return Vec::new();
    }
    (0..m[0].len()).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

pub fn transpose_mask(m: &[Vec<bool>]) -> Vec<Vec<bool>> {
    if m.is_empty() {
        return Vec::new();
    }
    (0..m[0].len()).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

pub fn random_sims(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

/// Disjoint positive/negative masks with every anchor having at least one of each.
pub fn random_masks(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<bool>>, Vec<Vec<bool>>) {
    assert!(cols >= 2);
    let mut pos = vec![vec![false; cols]; rows];
    let mut neg = vec![vec![false; cols]; rows];
    for a in 0..rows {
        for j in 0..cols {
            match rng.gen_range(0..3) {
                0 => pos[a][j] = true,
                1 => neg[a][j] = true,
                _ => {}
            }
        }
        let p = rng.gen_range(0..cols);
        let n = (p + 1 + rng.gen_range(0..cols - 1)) % cols;
        pos[a][p] = true;
        neg[a][p] = false;
        neg[a][n] = true;
        pos[a][n] = false;
    }
    (pos, neg)
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ----------------------------------------------------------------- metrics

fn hits(pred: &[usize], truth: &[usize], k: usize) -> usize {
    let mut n = 0;
    for p in pred.iter().take(k) {
        for t in truth {
            if p == t {
                n += 1;
            }
        }
    }
    n
}

pub fn oracle_precision(pred: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> f64 {
    let (mut sum, mut n) = (0.0, 0);
    for (p, t) in pred.iter().zip(truth) {
        if !t.is_empty() {
            sum += hits(p, t, k) as f64 / k as f64;
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

pub fn oracle_recall(pred: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> f64 {
    let (mut sum, mut n) = (0.0, 0);
    for (p, t) in pred.iter().zip(truth) {
        if !t.is_empty() {
            sum += hits(p, t, k) as f64 / t.len() as f64;
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

/// Ratio of achieved to best attainable propensity-weighted hits.
pub fn oracle_psp(pred: &[Vec<usize>], truth: &[Vec<usize>], p: &[f64], k: usize) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (pr, t) in pred.iter().zip(truth) {
        if t.is_empty() {
            continue;
        }
        for l in pr.iter().take(k) {
            if t.contains(l) {
                num += 1.0 / p[*l] / k as f64;
            }
        }
        let mut w: Vec<f64> = t.iter().map(|&l| 1.0 / p[l]).collect();
        w.sort_by(|a, b| b.partial_cmp(a).unwrap());
        den += w.iter().take(k).sum::<f64>() / k as f64;
    }
    if den == 0.0 { 0.0 } else { num / den }
}

/// Full stable sort by descending score, ascending label.
pub fn oracle_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

// ------------------------------------------------- scripted transformer block

fn ln_rows(x: &[Vec<f64>], g: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mu = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
            r.iter()
                .enumerate()
                .map(|(j, v)| g[j] * (v - mu) / (var + 1e-5).sqrt() + b[j])
                .collect()
        })
        .collect()
}

fn mat(x: &[Vec<f64>], w: &Matrix) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| (0..w.cols()).map(|c| (0..w.rows()).map(|k| r[k] * w[(k, c)]).sum()).collect())
        .collect()
}

/// Straight-line eval-mode prototype for one label: pre-norm single-head
/// block over (text, centroid, free), mean pool, unit norm.
pub fn scripted_prototype(net: &PrototypeNetParams, h: &[f64], c: &[f64], v: &[f64]) -> Vec<f64> {
    let d = h.len();
    let x = vec![h.to_vec(), c.to_vec(), v.to_vec()];
    let a = ln_rows(&x, &net.ln1_gain, &net.ln1_bias);
    let (q, k, val) = (mat(&a, &net.w_q), mat(&a, &net.w_k), mat(&a, &net.w_v));
    let mut ctx = vec![vec![0.0; d]; 3];
    for t in 0..3 {
        let logits: Vec<f64> = (0..3)
            .map(|u| (0..d).map(|j| q[t][j] * k[u][j]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for u in 0..3 {
            let w = logits[u].exp() / z;
            for j in 0..d {
                ctx[t][j] += w * val[u][j];
            }
        }
    }
    let attn = mat(&ctx, &net.w_o);
    let x1: Vec<Vec<f64>> = (0..3).map(|t| (0..d).map(|j| x[t][j] + attn[t][j]).collect()).collect();
    let bnorm = ln_rows(&x1, &net.ln2_gain, &net.ln2_bias);
    let pre = mat(&bnorm, &net.ffn_in);
    let act: Vec<Vec<f64>> = pre
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, u)| {
                    let u = u + net.ffn_in_bias[j];
                    0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
                })
                .collect()
        })
        .collect();
    let out = mat(&act, &net.ffn_out);
    let mut pooled = vec![0.0; d];
    for t in 0..3 {
        for j in 0..d {
            pooled[j] += (x1[t][j] + out[t][j] + net.ffn_out_bias[j]) / 3.0;
        }
    }
    let n = pooled.iter().map(|p| p * p).sum::<f64>().sqrt();
    pooled.iter().map(|p| p / n).collect()
}

// ------------------------------------------------------ finite differences

pub const FD_EPS: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_SCALE_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_SCALE_FLOOR)
}

fn weighted_sum(m: &Matrix, u: &Matrix) -> f64 {
    m.as_slice().iter().zip(u.as_slice()).map(|(a, b)| a * b).sum()
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = random_matrix(rows, cols, 1.0, rng);
    for i in 0..rows {
        let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    m
}

fn fd_over(values_len: usize, mut perturb: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
    (0..values_len)
        .map(|i| {
            let plus = perturb(i, FD_EPS);
            let minus = perturb(i, -FD_EPS);
            (plus - minus) / (2.0 * FD_EPS)
        })
        .collect()
}

/// Encoder fixture: loss `Σ u·h` over a small random batch. Returns the
/// maximum relative error over every parameter.
pub fn encoder_gradient_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = r.gen_range(3..=8);
    let vocab = r.gen_range(6..=20);
    let mut enc = EncoderParams::new(d, vocab, 8, &mut r).unwrap();
    for v in enc.proj.as_mut_slice() {
        *v += r.gen_range(-0.5..0.5);
    }
    for v in &mut enc.proj_bias {
        *v = r.gen_range(-0.3..0.3);
    }
    let n = r.gen_range(1..=3);
    let tokens: Vec<Vec<u32>> = (0..n)
        .map(|_| (0..r.gen_range(1..=6)).map(|_| r.gen_range(0..vocab as u32)).collect())
        .collect();
    let u = random_matrix(n, d, 1.0, &mut r);
    let loss = |e: &EncoderParams| weighted_sum(&e.forward(tokens.clone()).unwrap().vectors, &u);

    let batch = enc.forward(tokens.clone()).unwrap();
    let mut grads = enc.zero_grads();
    enc.backward(&batch, &u, &mut grads).unwrap();

    let mut worst: f64 = 0.0;
    macro_rules! check {
        ($field:ident, $analytic:expr) => {{
            let len = enc.$field.len_values();
            let numeric = fd_over(len, |i, h| {
                let mut e = enc.clone();
                *e.$field.value_mut(i) += h;
                loss(&e)
            });
            for (a, n) in $analytic.iter().zip(&numeric) {
                worst = worst.max(rel_err(*a, *n));
            }
        }};
    }
    check!(token_table, grads.token_table.as_slice());
    check!(proj, grads.proj.as_slice());
    check!(proj_bias, grads.proj_bias);
    worst
}

/// Flat access to parameter storage for perturbation.
pub trait Values {
    fn len_values(&self) -> usize;
    fn value_mut(&mut self, i: usize) -> &mut f64;
}

impl Values for Matrix {
    fn len_values(&self) -> usize {
        self.as_slice().len()
    }
    fn value_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.as_mut_slice()[i]
    }
}

impl Values for Vec<f64> {
    fn len_values(&self) -> usize {
        self.len()
    }
    fn value_mut(&mut self, i: usize) -> &mut f64 {
        &mut self[i]
    }
}

/// Random model small enough for exhaustive finite differences. Every
/// parameter (layernorm included) is moved off its initial value.
pub fn tiny_model(seed: u64, num_labels: usize, bank_size: usize) -> Model {
    let mut r = rng(seed);
    let d = r.gen_range(3..=6);
    let f = d + r.gen_range(0..=6);
    let encoder = EncoderParams::new(d, 12, 6, &mut r).unwrap();
    let net = PrototypeNetParams::new(d, f, 0.0, &mut r).unwrap();
    let assignment = (0..num_labels).map(|l| l % bank_size).collect();
    let bank = FreeVectorBank::new(bank_size, d, assignment, &mut r).unwrap();
    let centroids = CentroidStore::new(unit_rows(num_labels, d, &mut r), 0.95).unwrap();
    let mut model = Model { encoder, net, bank, centroids };
    for t in model.param_tensors() {
        for v in t.values.iter_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
    }
    model
}

/// Label-side composite: tokens → encoder → prototype network (with
/// centroid and shared free vector) → `Σ u·z`. Checks every model
/// parameter: encoder through the text slot, network weights, bank rows.
pub fn prototype_gradient_check(seed: u64) -> f64 {
    let mut r = rng(seed ^ 0x9e37_79b9);
    let num_labels = r.gen_range(2..=4);
    let model = tiny_model(seed, num_labels, 2);
    let d = model.dim();
    let labels: Vec<usize> = (0..num_labels).collect();
    let tokens: Vec<Vec<u32>> = labels
        .iter()
        .map(|_| (0..r.gen_range(1..=4)).map(|_| r.gen_range(0..12u32)).collect())
        .collect();
    let u = random_matrix(num_labels, d, 1.0, &mut r);

    let loss = |m: &Model| {
        let h = m.encoder.forward(tokens.clone()).unwrap();
        let c = m.centroids.centroids.select_rows(&labels);
        let v = m.bank.gather(&labels);
        let z = m.net.forward(&h.vectors, &c, &v.vectors, Mode::Eval).unwrap();
        weighted_sum(&z.z, &u)
    };

    let h = model.encoder.forward(tokens.clone()).unwrap();
    let c = model.centroids.centroids.select_rows(&labels);
    let v = model.bank.gather(&labels);
    let z = model.net.forward(&h.vectors, &c, &v.vectors, Mode::Eval).unwrap();
    let mut grads = model.zero_grads();
    let inputs = model.net.backward(&z, &u, &mut grads.net).unwrap();
    model.bank.scatter_grad(&labels, &v, &inputs.free, &mut grads.bank);
    model.encoder.backward(&h, &inputs.text, &mut grads.encoder).unwrap();

    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(<[f64]>::to_vec).collect();
    let mut probe = model.clone();
    let sizes: Vec<usize> = probe.param_tensors().iter().map(|t| t.values.len()).collect();
    assert_eq!(sizes.len(), analytic.len());
    let mut worst: f64 = 0.0;
    for (t, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = probe.param_tensors()[t].values[i];
            let mut eval_at = |delta: f64| {
                probe.param_tensors()[t].values[i] = orig + delta;
                let l = loss(&probe);
                probe.param_tensors()[t].values[i] = orig;
                l
            };
            let numeric = (eval_at(FD_EPS) - eval_at(-FD_EPS)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic[t][i], numeric));
        }
    }
    worst
}
