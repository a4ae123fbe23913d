//! Joint training of the encoder, the prototype network and the free-vector bank.
//!
//! One step:
//! 1. draw positives for the batch queries and form the label pool;
//! 2. encode queries and pool labels, build prototypes from text embedding,
//!    centroid and free vector;
//! 3. score query→prototype, query→label and label→query similarities and
//!    evaluate the joint objective;
//! 4. backpropagate through both networks, take an AdamW step;
//! 5. move the centroids of every positive label of each batch query towards
//!    that query's (pre-step) embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::cluster_labels;
use crate::corpus::{compute_propensities, Corpus, PropensityTable, DEFAULT_PROPENSITY_A, DEFAULT_PROPENSITY_B};
use crate::encoder::{EncoderParams, DEFAULT_DIM, DEFAULT_MAX_SEQ_LEN, DEFAULT_VOCAB};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{combined_loss, BatchSims, LossReport, LossTerms, MarginConfig, MarginMode};
use crate::model::{Model, ModelGrads};
use crate::optim::AdamW;
use crate::prototype::{CentroidStore, FreeVectorBank, Mode, PrototypeNetParams, DEFAULT_ALPHA, DEFAULT_DROPOUT};
use crate::sampling::{assemble_triplet_batch, sample_positives, QueryClusters};
use crate::seeding::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    /// Prototype network FFN width; 0 means `4·dim`.
    pub ffn_dim: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear warmup length in steps; 0 disables it.
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub positives_per_query: usize,
    pub margins: MarginConfig,
    pub mode: MarginMode,
    pub terms: LossTerms,
    pub alpha: f64,
    pub bank_size: usize,
    pub seed: u64,
    /// Epochs between re-clustering of queries for batching.
    pub refresh_period: usize,
    pub propensity_a: f64,
    pub propensity_b: f64,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            vocab: DEFAULT_VOCAB,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            ffn_dim: 0,
            dropout: DEFAULT_DROPOUT,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 0,
            epochs: 50,
            batch_size: 32,
            positives_per_query: 2,
            margins: MarginConfig::default(),
            mode: MarginMode::Dynamic,
            terms: LossTerms::FULL,
            alpha: DEFAULT_ALPHA,
            bank_size: 64,
            seed: 0,
            refresh_period: 10,
            propensity_a: DEFAULT_PROPENSITY_A,
            propensity_b: DEFAULT_PROPENSITY_B,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.weight_decay < 0.0 {
            return fail("weight decay must be non-negative".into());
        }
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return fail("batch size must be at least 2".into());
        }
        if !(1..=2).contains(&self.positives_per_query) {
            return fail(format!("positives per query must be 1 or 2, got {}", self.positives_per_query));
        }
        if self.bank_size < 1 {
            return fail("bank size must be at least 1".into());
        }
        if self.refresh_period < 1 {
            return fail("refresh period must be at least 1".into());
        }
        if self.ffn_dim != 0 && self.ffn_dim < self.dim {
            return fail("ffn dim must be at least dim".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        self.margins.validate()
    }

    pub fn effective_ffn_dim(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.dim
        } else {
            self.ffn_dim
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub easy_fraction: f64,
    pub max_encoded_labels: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub reports: Vec<LossReport>,
    pub epochs: Vec<EpochSummary>,
    pub propensity: PropensityTable,
}

fn label_texts(corpus: &Corpus, labels: &[usize]) -> Vec<String> {
    labels.iter().map(|&l| corpus.label(l).text.clone()).collect()
}

fn encode_all_labels(encoder: &EncoderParams, corpus: &Corpus) -> Result<Matrix> {
    let texts: Vec<&str> = corpus.labels().iter().map(|l| l.text.as_str()).collect();
    Ok(encoder.encode_texts(&texts)?.vectors)
}

fn encode_all_queries(encoder: &EncoderParams, corpus: &Corpus) -> Result<Matrix> {
    let texts: Vec<&str> = corpus.queries().iter().map(|q| q.text.as_str()).collect();
    Ok(encoder.encode_texts(&texts)?.vectors)
}

/// Fresh model: random networks, centroids set to the label text embeddings,
/// free vectors assigned by balanced clustering of those embeddings.
pub fn init_model(corpus: &Corpus, cfg: &TrainConfig) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1]));
    let encoder = EncoderParams::new(cfg.dim, cfg.vocab, cfg.max_seq_len, &mut rng)?;
    let net = PrototypeNetParams::new(cfg.dim, cfg.effective_ffn_dim(), cfg.dropout, &mut rng)?;
    let label_emb = encode_all_labels(&encoder, corpus)?;
    // Never more free vectors than labels.
    let bank_size = cfg.bank_size.min(corpus.num_labels());
    let assignment = cluster_labels(&label_emb, bank_size, derive_seed(cfg.seed, &[2]))?;
    let bank = FreeVectorBank::new(bank_size, cfg.dim, assignment, &mut rng)?;
    let centroids = CentroidStore::new(label_emb, cfg.alpha)?;
    Ok(Model {
        encoder,
        net,
        bank,
        centroids,
    })
}

/// Stateful trainer; [`train`] drives it for the configured number of epochs.
pub struct Trainer<'a> {
    corpus: &'a Corpus,
    cfg: TrainConfig,
    pub model: Model,
    optimizer: AdamW,
    grads: ModelGrads,
    pub propensity: PropensityTable,
    clusters: QueryClusters,
    batch_size: usize,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a Corpus, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if corpus.num_queries() < 2 {
            return Err(Error::Data("training needs at least two queries".into()));
        }
        if let Some(q) = (0..corpus.num_queries()).find(|&q| corpus.positives(q).is_empty()) {
            return Err(Error::Data(format!("training query {} has no positives", corpus.query(q).id)));
        }
        let propensity = compute_propensities(corpus, cfg.propensity_a, cfg.propensity_b)?;
        let model = init_model(corpus, &cfg)?;
        let batch_size = cfg.batch_size.min(corpus.num_queries());
        let query_emb = encode_all_queries(&model.encoder, corpus)?;
        let clusters = QueryClusters::build(&query_emb, batch_size, derive_seed(cfg.seed, &[5, 0]))?;
        let grads = model.zero_grads();
        Ok(Self {
            corpus,
            cfg,
            model,
            optimizer: AdamW::new(),
            grads,
            propensity,
            clusters,
            batch_size,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Maximum number of distinct labels a step may encode (`B·P`).
    pub fn label_budget(&self) -> usize {
        self.batch_size * self.cfg.positives_per_query
    }

    fn refresh_clusters(&mut self, epoch: usize) -> Result<()> {
        let query_emb = encode_all_queries(&self.model.encoder, self.corpus)?;
        self.clusters = QueryClusters::build(&query_emb, self.batch_size, derive_seed(self.cfg.seed, &[5, epoch as u64]))?;
        let label_emb = encode_all_labels(&self.model.encoder, self.corpus)?;
        self.model.centroids.refresh_untouched(&label_emb);
        Ok(())
    }

    pub fn run_epoch(&mut self, epoch: usize) -> Result<(EpochSummary, Vec<LossReport>)> {
        if epoch > 0 && epoch.is_multiple_of(self.cfg.refresh_period) {
            self.refresh_clusters(epoch)?;
        }
        let plan = self.clusters.plan(self.cfg.seed, epoch as u64);
        let mut reports = Vec::with_capacity(plan.batches.len());
        for (b, batch) in plan.batches.iter().enumerate() {
            let report = self.train_step(epoch, b, batch)?;
            reports.push(report);
        }
        let losses: Vec<f64> = reports.iter().map(|r| r.total).collect();
        let mut hist = crate::losses::RegionHistogram::default();
        for r in &reports {
            hist.merge(&r.regions.combined());
        }
        let summary = EpochSummary {
            epoch,
            steps: reports.len(),
            mean_loss: crate::linalg::pairwise_sum(&losses) / losses.len().max(1) as f64,
            easy_fraction: hist.easy_fraction(),
            max_encoded_labels: reports.iter().map(|r| r.encoded_labels).max().unwrap_or(0),
        };
        Ok((summary, reports))
    }

    pub fn train_step(&mut self, epoch: usize, batch_index: usize, queries: &[usize]) -> Result<LossReport> {
        let cfg = &self.cfg;
        let corpus = self.corpus;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[3, epoch as u64, batch_index as u64]));
        let sampled: Vec<Vec<usize>> = queries
            .iter()
            .map(|&q| sample_positives(q, corpus, &self.propensity, cfg.positives_per_query, &mut rng))
            .collect();
        let batch = assemble_triplet_batch(queries, &sampled, corpus)?;
        let encoded_labels = batch.pool.len();
        if encoded_labels > self.label_budget() {
            return Err(Error::Numerical(format!(
                "label pool of {encoded_labels} exceeds the per-step budget {}",
                self.label_budget()
            )));
        }

        let model = &self.model;
        let query_texts: Vec<&str> = queries.iter().map(|&q| corpus.query(q).text.as_str()).collect();
        let hq = model.encoder.encode_texts(&query_texts)?;
        let hl = model.encoder.encode_texts(&label_texts(corpus, &batch.pool))?;
        let centroids = model.centroids.centroids.select_rows(&batch.pool);
        let free = model.bank.gather(&batch.pool);
        let proto = model.net.forward(
            &hl.vectors,
            &centroids,
            &free.vectors,
            Mode::Train {
                seed: derive_seed(cfg.seed, &[4, self.step as u64]),
            },
        )?;

        let query_label = hq.vectors.matmul_t(&hl.vectors);
        let sims = BatchSims {
            query_proto: hq.vectors.matmul_t(&proto.z),
            label_query: query_label.transpose(),
            query_label,
        };
        let (mut report, g) = combined_loss(
            &sims,
            &batch.query_masks(),
            &batch.label_masks(),
            &cfg.margins,
            cfg.mode,
            cfg.terms,
        )?;
        report.epoch = epoch;
        report.step = self.step;
        report.encoded_labels = encoded_labels;
        if !report.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss; last report: {}",
                serde_json::to_string(&report).unwrap_or_default()
            )));
        }

        // dL/dh_q, dL/dz, dL/dh_l
        let mut grad_hq = g.query_proto.matmul(&proto.z);
        grad_hq.add_assign(&g.query_label.matmul(&hl.vectors));
        grad_hq.add_assign(&g.label_query.t_matmul(&hl.vectors));
        let grad_z = g.query_proto.t_matmul(&hq.vectors);
        let mut grad_hl = g.query_label.t_matmul(&hq.vectors);
        grad_hl.add_assign(&g.label_query.matmul(&hq.vectors));

        self.grads.fill_zero();
        let inputs = model.net.backward(&proto, &grad_z, &mut self.grads.net)?;
        grad_hl.add_assign(&inputs.text);
        model.bank.scatter_grad(&batch.pool, &free, &inputs.free, &mut self.grads.bank);
        model.encoder.backward(&hq, &grad_hq, &mut self.grads.encoder)?;
        model.encoder.backward(&hl, &grad_hl, &mut self.grads.encoder)?;

        let lr = if cfg.warmup_steps > 0 {
            cfg.lr * ((self.step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
        } else {
            cfg.lr
        };
        let grads = self.grads.tensors();
        self.optimizer
            .step(self.model.param_tensors(), &grads, lr, self.cfg.weight_decay)
            .map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!(
                    "{m}; last report: {}",
                    serde_json::to_string(&report).unwrap_or_default()
                )),
                other => other,
            })?;

        for (i, &q) in queries.iter().enumerate() {
            for &l in corpus.positives(q) {
                self.model.centroids.update(l, hq.vectors.row(i));
            }
        }
        if !self.model.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite parameters after step {}",
                self.step
            )));
        }
        self.step += 1;
        Ok(report)
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs `f` on a pool with `threads` workers (0 = all cores).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    Ok(thread_pool(threads)?.install(f))
}

/// Trains for `cfg.epochs` epochs, calling `on_step` after every step.
pub fn train_with<F>(corpus: &Corpus, cfg: &TrainConfig, mut on_step: F) -> Result<TrainOutput>
where
    F: FnMut(&LossReport) + Send,
{
    with_threads(cfg.threads, || {
        let mut trainer = Trainer::new(corpus, cfg.clone())?;
        let mut reports = Vec::new();
        let mut epochs = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let (summary, step_reports) = trainer.run_epoch(epoch)?;
            for r in &step_reports {
                on_step(r);
            }
            reports.extend(step_reports);
            epochs.push(summary);
        }
        let propensity = trainer.propensity.clone();
        Ok(TrainOutput {
            model: trainer.into_model(),
            reports,
            epochs,
            propensity,
        })
    })?
}

pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(corpus, cfg, |_| {})
}
