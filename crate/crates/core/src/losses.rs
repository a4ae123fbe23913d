//! Triplet objectives over similarity scores.
//!
//! With `Δ = s_qp − s_qn`, the clipped dynamic-margin kernel partitions the
//! `(s_qp, s_qn)` plane into three regions:
//!
//! | region    | condition                 | loss                    | (∂/∂s_qp, ∂/∂s_qn) |
//! |-----------|---------------------------|-------------------------|--------------------|
//! | Easy      | `Δ > 0`, `Δ ≥ γ_min`      | 0                       | (0, 0)             |
//! | Uncertain | `Δ > 0`, `Δ < γ_min`      | `Δ + γ_min`             | (1, −1)            |
//! | Hard      | `Δ ≤ 0`                   | `−Δ + clip(−Δ)`         | (−1, 1)            |
//!
//! The clipped margin in the Hard region is detached: it adds to the value but
//! not to the gradient. In the Uncertain region the gradient pushes the
//! positive away and pulls the negative in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DEFAULT_GAMMA_MIN: f64 = 0.1;
pub const DEFAULT_GAMMA_MAX: f64 = 0.3;
pub const DEFAULT_FIXED_MARGIN: f64 = 0.3;
pub const DEFAULT_REG_MARGIN: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginConfig {
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Margin of the fixed-margin baseline.
    pub fixed_margin: f64,
    /// Margin `m′` of the prototype regularizer.
    pub reg_margin: f64,
    pub lambda: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            gamma_min: DEFAULT_GAMMA_MIN,
            gamma_max: DEFAULT_GAMMA_MAX,
            fixed_margin: DEFAULT_FIXED_MARGIN,
            reg_margin: DEFAULT_REG_MARGIN,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.gamma_min
            && self.gamma_min <= self.gamma_max
            && self.gamma_max < 2.0
            && (0.0..2.0).contains(&self.fixed_margin)
            && self.reg_margin >= 0.0
            && self.lambda >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid margins: need 0 <= gamma_min <= gamma_max < 2, fixed margin in [0, 2), \
                 reg margin >= 0, lambda >= 0 (got {self:?})"
            )))
        }
    }

    pub fn clip(&self, x: f64) -> f64 {
        if x < self.gamma_min {
            self.gamma_min
        } else if x > self.gamma_max {
            self.gamma_max
        } else {
            x
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Easy,
    Uncertain,
    Hard,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Easy, Region::Uncertain, Region::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Easy => "easy",
            Region::Uncertain => "uncertain",
            Region::Hard => "hard",
        }
    }
}

/// Value and gradient of one triplet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletGrad {
    pub d_sap: f64,
    pub d_san: f64,
    pub region: Region,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MarginMode {
    Fixed,
    Dynamic,
}

/// `max(s_qn − s_qp + m, 0)`, active when `s_qp − s_qn ≤ m`.
pub fn triplet_fixed(s_qp: f64, s_qn: f64, m: f64) -> TripletGrad {
    let gap = s_qp - s_qn;
    if gap <= m {
        TripletGrad {
            d_sap: -1.0,
            d_san: 1.0,
            region: Region::Hard,
            loss: m - gap,
        }
    } else {
        TripletGrad {
            d_sap: 0.0,
            d_san: 0.0,
            region: Region::Easy,
            loss: 0.0,
        }
    }
}

pub fn triplet_clipped_dynamic(s_qp: f64, s_qn: f64, cfg: &MarginConfig) -> TripletGrad {
    if s_qp <= s_qn {
        let gap = s_qn - s_qp;
        TripletGrad {
            d_sap: -1.0,
            d_san: 1.0,
            region: Region::Hard,
            loss: gap + cfg.clip(gap),
        }
    } else {
        let gap = s_qp - s_qn;
        if gap >= cfg.gamma_min {
            TripletGrad {
                d_sap: 0.0,
                d_san: 0.0,
                region: Region::Easy,
                loss: 0.0,
            }
        } else {
            TripletGrad {
                d_sap: 1.0,
                d_san: -1.0,
                region: Region::Uncertain,
                loss: gap + cfg.gamma_min,
            }
        }
    }
}

pub fn triplet_kernel(s_qp: f64, s_qn: f64, cfg: &MarginConfig, mode: MarginMode) -> TripletGrad {
    match mode {
        MarginMode::Fixed => triplet_fixed(s_qp, s_qn, cfg.fixed_margin),
        MarginMode::Dynamic => triplet_clipped_dynamic(s_qp, s_qn, cfg),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionHistogram {
    pub easy: u64,
    pub uncertain: u64,
    pub hard: u64,
}

impl RegionHistogram {
    pub fn record(&mut self, region: Region) {
        match region {
            Region::Easy => self.easy += 1,
            Region::Uncertain => self.uncertain += 1,
            Region::Hard => self.hard += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.easy + self.uncertain + self.hard
    }

    pub fn merge(&mut self, other: &RegionHistogram) {
        self.easy += other.easy;
        self.uncertain += other.uncertain;
        self.hard += other.hard;
    }

    pub fn easy_fraction(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.easy as f64 / self.total() as f64
        }
    }
}

/// Which anchor/candidate pairs form triplets. `positive[a][j]` marks
/// candidate `j` as a positive for anchor `a`, `negative[a][j]` as a negative.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMasks {
    pub positive: Vec<Vec<bool>>,
    pub negative: Vec<Vec<bool>>,
}

impl PairMasks {
    pub fn new(anchors: usize, candidates: usize) -> Self {
        Self {
            positive: vec![vec![false; candidates]; anchors],
            negative: vec![vec![false; candidates]; anchors],
        }
    }

    pub fn anchors(&self) -> usize {
        self.positive.len()
    }

    /// Swaps the roles of anchors and candidates.
    pub fn transpose(&self) -> PairMasks {
        let a = self.anchors();
        let c = self.positive.first().map_or(0, Vec::len);
        let mut out = PairMasks::new(c, a);
        for i in 0..a {
            for j in 0..c {
                out.positive[j][i] = self.positive[i][j];
                out.negative[j][i] = self.negative[i][j];
            }
        }
        out
    }

    fn check(&self, sims: &Matrix) -> Result<()> {
        let (a, c) = sims.shape();
        let shape_ok = self.positive.len() == a
            && self.negative.len() == a
            && self.positive.iter().chain(&self.negative).all(|r| r.len() == c);
        if !shape_ok {
            return Err(Error::Data(format!("mask shape does not match similarity matrix {a}x{c}")));
        }
        for (p, n) in self.positive.iter().zip(&self.negative) {
            if p.iter().zip(n).any(|(&p, &n)| p && n) {
                return Err(Error::Data("label leakage".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLossOutput {
    /// Mean loss over valid triplets (0 when there are none).
    pub loss: f64,
    /// `∂loss/∂sims`, same shape as the similarity matrix.
    pub grad: Matrix,
    pub histogram: RegionHistogram,
    pub num_triplets: u64,
}

/// Mean of the triplet kernel over every (anchor, positive, negative)
/// combination allowed by `masks`.
pub fn batch_triplet_loss(
    sims: &Matrix,
    masks: &PairMasks,
    cfg: &MarginConfig,
    mode: MarginMode,
) -> Result<TripletLossOutput> {
    masks.check(sims)?;
    let (anchors, candidates) = sims.shape();
    let mut grad = Matrix::zeros(anchors, candidates);
    let mut histogram = RegionHistogram::default();
    let mut total = 0.0;
    let mut count = 0u64;
    for a in 0..anchors {
        let row = sims.row(a);
        let pos = &masks.positive[a];
        let neg = &masks.negative[a];
        for j in (0..candidates).filter(|&j| pos[j]) {
            for k in (0..candidates).filter(|&k| neg[k]) {
                let t = triplet_kernel(row[j], row[k], cfg, mode);
                total += t.loss;
                grad[(a, j)] += t.d_sap;
                grad[(a, k)] += t.d_san;
                histogram.record(t.region);
                count += 1;
            }
        }
    }
    if count > 0 {
        let inv = 1.0 / count as f64;
        grad.as_mut_slice().iter_mut().for_each(|g| *g *= inv);
        total *= inv;
    }
    Ok(TripletLossOutput {
        loss: total,
        grad,
        histogram,
        num_triplets: count,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerOutput {
    pub value: f64,
    pub positive_term: f64,
    pub negative_term: f64,
    /// `∂R/∂s` (query–label similarities).
    pub grad_label: Matrix,
    /// `∂R/∂b` (query–prototype similarities).
    pub grad_proto: Matrix,
}

/// `R = (R_p + R_n)/2` with
/// `R_p = mean over positives of max(s − b + m′, 0)` and
/// `R_n = mean over negatives of max(b − s + m′, 0)`.
pub fn prototype_regularizer(
    label_sims: &Matrix,
    proto_sims: &Matrix,
    masks: &PairMasks,
    reg_margin: f64,
) -> Result<RegularizerOutput> {
    if label_sims.shape() != proto_sims.shape() {
        return Err(Error::Data("regularizer similarity matrices are misaligned".into()));
    }
    masks.check(label_sims)?;
    let (a, c) = label_sims.shape();
    let num_pos = masks.positive.iter().flatten().filter(|&&m| m).count();
    let num_neg = masks.negative.iter().flatten().filter(|&&m| m).count();
    let mut grad_label = Matrix::zeros(a, c);
    let mut grad_proto = Matrix::zeros(a, c);
    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    let wp = if num_pos > 0 { 0.5 / num_pos as f64 } else { 0.0 };
    let wn = if num_neg > 0 { 0.5 / num_neg as f64 } else { 0.0 };
    for i in 0..a {
        for j in 0..c {
            let s = label_sims[(i, j)];
            let b = proto_sims[(i, j)];
            if masks.positive[i][j] {
                let v = s - b + reg_margin;
                if v > 0.0 {
                    pos_sum += v;
                    grad_label[(i, j)] += wp;
                    grad_proto[(i, j)] -= wp;
                }
            } else if masks.negative[i][j] {
                let v = b - s + reg_margin;
                if v > 0.0 {
                    neg_sum += v;
                    grad_proto[(i, j)] += wn;
                    grad_label[(i, j)] -= wn;
                }
            }
        }
    }
    let positive_term = if num_pos > 0 { pos_sum / num_pos as f64 } else { 0.0 };
    let negative_term = if num_neg > 0 { neg_sum / num_neg as f64 } else { 0.0 };
    Ok(RegularizerOutput {
        value: 0.5 * (positive_term + negative_term),
        positive_term,
        negative_term,
        grad_label,
        grad_proto,
    })
}

/// Which terms of the joint objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTerms {
    pub query_label: bool,
    pub label_query: bool,
    pub regularizer: bool,
}

impl LossTerms {
    pub const FULL: LossTerms = LossTerms {
        query_label: true,
        label_query: true,
        regularizer: true,
    };
    pub const PROTOTYPE_ONLY: LossTerms = LossTerms {
        query_label: false,
        label_query: false,
        regularizer: false,
    };
}

impl Default for LossTerms {
    fn default() -> Self {
        Self::FULL
    }
}

/// Similarity matrices for one batch. `query_proto` and `query_label` are
/// `B×K` (queries × label pool); `label_query` is `K×B`.
#[derive(Debug, Clone)]
pub struct BatchSims {
    pub query_proto: Matrix,
    pub query_label: Matrix,
    pub label_query: Matrix,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub query_proto: f64,
    pub query_label: f64,
    pub label_query: f64,
    pub regularizer: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermHistograms {
    pub query_proto: RegionHistogram,
    pub query_label: RegionHistogram,
    pub label_query: RegionHistogram,
}

impl TermHistograms {
    pub fn combined(&self) -> RegionHistogram {
        let mut h = self.query_proto;
        h.merge(&self.query_label);
        h.merge(&self.label_query);
        h
    }

    pub fn merge(&mut self, other: &TermHistograms) {
        self.query_proto.merge(&other.query_proto);
        self.query_label.merge(&other.query_label);
        self.label_query.merge(&other.label_query);
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub terms: TermValues,
    pub regions: TermHistograms,
    pub lambda: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub mode: Option<MarginMode>,
    /// Distinct labels encoded in this step.
    pub encoded_labels: usize,
}

#[derive(Debug, Clone)]
pub struct CombinedGrads {
    pub query_proto: Matrix,
    pub query_label: Matrix,
    pub label_query: Matrix,
}

/// Joint objective: prototype triplet term, text query→label and label→query
/// terms, and `λ·R`. `masks` are the query-anchored masks; the label-anchored
/// term uses `label_masks`.
pub fn combined_loss(
    sims: &BatchSims,
    masks: &PairMasks,
    label_masks: &PairMasks,
    cfg: &MarginConfig,
    mode: MarginMode,
    terms: LossTerms,
) -> Result<(LossReport, CombinedGrads)> {
    let qz = batch_triplet_loss(&sims.query_proto, masks, cfg, mode)?;
    let mut report = LossReport {
        lambda: cfg.lambda,
        gamma_min: cfg.gamma_min,
        gamma_max: cfg.gamma_max,
        mode: Some(mode),
        ..Default::default()
    };
    report.terms.query_proto = qz.loss;
    report.regions.query_proto = qz.histogram;
    let mut grads = CombinedGrads {
        query_proto: qz.grad,
        query_label: Matrix::zeros(sims.query_label.rows(), sims.query_label.cols()),
        label_query: Matrix::zeros(sims.label_query.rows(), sims.label_query.cols()),
    };

    if terms.query_label {
        let ql = batch_triplet_loss(&sims.query_label, masks, cfg, mode)?;
        report.terms.query_label = ql.loss;
        report.regions.query_label = ql.histogram;
        grads.query_label = ql.grad;
    }
    if terms.label_query {
        let lq = batch_triplet_loss(&sims.label_query, label_masks, cfg, mode)?;
        report.terms.label_query = lq.loss;
        report.regions.label_query = lq.histogram;
        grads.label_query = lq.grad;
    }
    if terms.regularizer && cfg.lambda > 0.0 {
        let r = prototype_regularizer(&sims.query_label, &sims.query_proto, masks, cfg.reg_margin)?;
        report.terms.regularizer = r.value;
        for (g, d) in grads.query_label.as_mut_slice().iter_mut().zip(r.grad_label.as_slice()) {
            *g += cfg.lambda * d;
        }
        for (g, d) in grads.query_proto.as_mut_slice().iter_mut().zip(r.grad_proto.as_slice()) {
            *g += cfg.lambda * d;
        }
    }
    report.total = report.terms.query_proto
        + report.terms.query_label
        + report.terms.label_query
        + cfg.lambda * report.terms.regularizer;
    Ok((report, grads))
}
