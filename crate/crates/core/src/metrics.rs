//! Ranking metrics for extreme multi-label evaluation.
//!
//! All metrics are averaged over queries with a non-empty ground truth;
//! queries without labels are skipped and counted.
//!
//! * `P@k  = mean_q |top_k ∩ P_q| / k`
//! * `R@k  = mean_q |top_k ∩ P_q| / |P_q|`
//! * `PSP@k = Σ_q SP@k(pred_q) / Σ_q SP@k(ideal_q)`, where
//!   `SP@k = (1/k) Σ_{l ∈ top_k} y_l / p_l` and the ideal ranking orders the
//!   query's true labels by decreasing `1/p_l`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;

fn check_k(predictions: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> Result<()> {
    if predictions.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} prediction rows for {} queries",
            predictions.len(),
            truth.len()
        )));
    }
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    for (q, (p, t)) in predictions.iter().zip(truth).enumerate() {
        if !t.is_empty() && p.len() < k {
            return Err(Error::Config(format!(
                "k = {k} exceeds the {} predictions of query {q}",
                p.len()
            )));
        }
    }
    Ok(())
}

fn hits_in_top_k(pred: &[usize], truth: &[usize], k: usize) -> usize {
    pred[..k].iter().filter(|l| truth.contains(l)).count()
}

fn mean_over_labelled(
    predictions: &[Vec<usize>],
    truth: &[Vec<usize>],
    per_query: impl Fn(&[usize], &[usize]) -> f64,
) -> f64 {
    let values: Vec<f64> = predictions
        .iter()
        .zip(truth)
        .filter(|(_, t)| !t.is_empty())
        .map(|(p, t)| per_query(p, t))
        .collect();
    if values.is_empty() {
        0.0
    } else {
        pairwise_sum(&values) / values.len() as f64
    }
}

pub fn precision_at_k(predictions: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> Result<f64> {
    check_k(predictions, truth, k)?;
    Ok(mean_over_labelled(predictions, truth, |p, t| {
        hits_in_top_k(p, t, k) as f64 / k as f64
    }))
}

pub fn recall_at_k(predictions: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> Result<f64> {
    check_k(predictions, truth, k)?;
    Ok(mean_over_labelled(predictions, truth, |p, t| {
        hits_in_top_k(p, t, k) as f64 / t.len() as f64
    }))
}

/// Returns `(PSP@k, unnormalized mean SP@k)`.
pub fn psp_at_k(predictions: &[Vec<usize>], truth: &[Vec<usize>], propensity: &[f64], k: usize) -> Result<(f64, f64)> {
    check_k(predictions, truth, k)?;
    let lookup = |l: usize| -> Result<f64> {
        propensity
            .get(l)
            .copied()
            .ok_or_else(|| Error::Data(format!("missing propensity entry for label {l}")))
    };
    let mut achieved = Vec::new();
    let mut ideal = Vec::new();
    for (p, t) in predictions.iter().zip(truth) {
        if t.is_empty() {
            continue;
        }
        let mut sp = 0.0;
        for l in &p[..k] {
            if t.contains(l) {
                sp += 1.0 / lookup(*l)?;
            }
        }
        let mut inv: Vec<f64> = t.iter().map(|&l| lookup(l).map(|p| 1.0 / p)).collect::<Result<_>>()?;
        inv.sort_by(|a, b| b.total_cmp(a));
        let best: f64 = inv.iter().take(k).sum();
        achieved.push(sp / k as f64);
        ideal.push(best / k as f64);
    }
    if achieved.is_empty() {
        return Ok((0.0, 0.0));
    }
    let num = pairwise_sum(&achieved);
    let den = pairwise_sum(&ideal);
    let psp = if den > 0.0 { num / den } else { 0.0 };
    Ok((psp, num / achieved.len() as f64))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalResult {
    pub p_at: BTreeMap<usize, f64>,
    pub psp_at: BTreeMap<usize, f64>,
    pub sp_at: BTreeMap<usize, f64>,
    pub r_at: BTreeMap<usize, f64>,
    pub evaluated_queries: usize,
    pub skipped_queries: usize,
}

pub fn evaluate(
    predictions: &[Vec<usize>],
    truth: &[Vec<usize>],
    propensity: &[f64],
    ks: &[usize],
) -> Result<EvalResult> {
    let mut out = EvalResult {
        skipped_queries: truth.iter().filter(|t| t.is_empty()).count(),
        ..Default::default()
    };
    out.evaluated_queries = truth.len() - out.skipped_queries;
    for &k in ks {
        out.p_at.insert(k, precision_at_k(predictions, truth, k)?);
        let (psp, sp) = psp_at_k(predictions, truth, propensity, k)?;
        out.psp_at.insert(k, psp);
        out.sp_at.insert(k, sp);
        out.r_at.insert(k, recall_at_k(predictions, truth, k)?);
    }
    Ok(out)
}

impl EvalResult {
    /// Aligned text table, values in percent.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6} {:>9} {:>9} {:>9}", "k", "P@k", "PSP@k", "R@k");
        for (k, p) in &self.p_at {
            let _ = writeln!(
                s,
                "{:>6} {:>9.4} {:>9.4} {:>9.4}",
                k,
                100.0 * p,
                100.0 * self.psp_at[k],
                100.0 * self.r_at[k]
            );
        }
        let _ = writeln!(
            s,
            "queries evaluated: {}, skipped (no labels): {}",
            self.evaluated_queries, self.skipped_queries
        );
        s
    }
}
