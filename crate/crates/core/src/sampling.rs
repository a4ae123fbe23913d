//! Batch construction.
//!
//! Queries are grouped by balanced 2-means over their embeddings so that the
//! positives of one query act as semi-hard in-batch negatives for its
//! neighbours. Positives are drawn per query proportionally to the inverse
//! propensity of each label. The label pool of a batch is the union of the
//! sampled positives, so its size is bounded by `B·P` regardless of `L`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cluster::cluster_by_size;
use crate::corpus::{Corpus, PropensityTable};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::PairMasks;
use crate::seeding::derive_seed;

/// Query groups from the last clustering pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryClusters {
    pub clusters: Vec<Vec<usize>>,
    pub batch_size: usize,
    pub num_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    /// Order in which clusters are visited this epoch.
    pub epoch_order: Vec<usize>,
    pub batches: Vec<Vec<usize>>,
}

impl QueryClusters {
    pub fn build(query_embeddings: &Matrix, batch_size: usize, seed: u64) -> Result<Self> {
        let q = query_embeddings.rows();
        if batch_size < 1 || batch_size > q {
            return Err(Error::Config(format!(
                "batch size {batch_size} must lie in [1, {q}] (number of queries)"
            )));
        }
        Ok(Self {
            clusters: cluster_by_size(query_embeddings, batch_size, seed),
            batch_size,
            num_queries: q,
        })
    }

    /// Shuffles cluster order (and members within clusters) for `epoch`, then
    /// cuts the concatenated sequence into contiguous batches.
    pub fn plan(&self, seed: u64, epoch: u64) -> BatchPlan {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xba7c, epoch]));
        let mut epoch_order: Vec<usize> = (0..self.clusters.len()).collect();
        epoch_order.shuffle(&mut rng);
        let mut sequence = Vec::with_capacity(self.num_queries);
        for &c in &epoch_order {
            let mut members = self.clusters[c].clone();
            members.shuffle(&mut rng);
            sequence.extend(members);
        }
        let batches = sequence.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        BatchPlan { epoch_order, batches }
    }
}

/// Clusters queries and plans one epoch.
pub fn build_batch_plan(query_embeddings: &Matrix, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchPlan> {
    if batch_size < 2 {
        return Err(Error::Config("batch size must be at least 2".into()));
    }
    Ok(QueryClusters::build(query_embeddings, batch_size, seed)?.plan(seed, epoch))
}

/// Draws up to `count` distinct positives of `query`, each draw proportional
/// to the inverse propensity `γ_l` of the remaining candidates.
pub fn sample_positives<R: Rng>(
    query: usize,
    corpus: &Corpus,
    propensity: &PropensityTable,
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut remaining: Vec<usize> = corpus.positives(query).to_vec();
    if remaining.len() <= count {
        return remaining;
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = remaining.iter().map(|&l| propensity.gamma[l]).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (i, &l) in remaining.iter().enumerate() {
            u -= propensity.gamma[l];
            if u < 0.0 {
                pick = i;
                break;
            }
        }
        out.push(remaining.remove(pick));
    }
    out
}

/// Queries of one batch, their sampled positives, and the shared label pool.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub queries: Vec<usize>,
    /// Label indices of the pool (distinct, in order of first appearance).
    pub pool: Vec<usize>,
    /// Per query, pool positions of its sampled positives.
    pub positives: Vec<Vec<usize>>,
    /// `negative_mask[i][j]` is true iff pool label `j` is not a ground-truth positive of query `i`.
    pub negative_mask: Vec<Vec<bool>>,
    /// Ground-truth relevance of each pool label for each batch query.
    pub relevant: Vec<Vec<bool>>,
}

pub fn assemble_triplet_batch(queries: &[usize], sampled: &[Vec<usize>], corpus: &Corpus) -> Result<TripletBatch> {
    if queries.len() != sampled.len() {
        return Err(Error::Data("one positive list per batch query expected".into()));
    }
    let mut pool: Vec<usize> = Vec::new();
    let mut positives = Vec::with_capacity(queries.len());
    for (&q, labels) in queries.iter().zip(sampled) {
        if labels.is_empty() {
            return Err(Error::Data(format!("query {} has no sampled positive", corpus.query(q).id)));
        }
        let mut slots = Vec::with_capacity(labels.len());
        for &l in labels {
            let pos = match pool.iter().position(|&p| p == l) {
                Some(p) => p,
                None => {
                    pool.push(l);
                    pool.len() - 1
                }
            };
            slots.push(pos);
        }
        positives.push(slots);
    }
    let relevant: Vec<Vec<bool>> = queries
        .iter()
        .map(|&q| pool.iter().map(|&l| corpus.is_positive(q, l)).collect())
        .collect();
    let negative_mask = relevant
        .iter()
        .map(|row| row.iter().map(|&r| !r).collect())
        .collect();
    Ok(TripletBatch {
        queries: queries.to_vec(),
        pool,
        positives,
        negative_mask,
        relevant,
    })
}

impl TripletBatch {
    /// Query-anchored masks: sampled positives vs. in-pool negatives.
    pub fn query_masks(&self) -> PairMasks {
        let mut m = PairMasks::new(self.queries.len(), self.pool.len());
        for (i, slots) in self.positives.iter().enumerate() {
            for &j in slots {
                m.positive[i][j] = true;
            }
            m.negative[i].clone_from(&self.negative_mask[i]);
        }
        m
    }

    /// Label-anchored masks over the transposed batch relevance: for pool
    /// label `j`, batch queries relevant to it are positives, the rest negatives.
    pub fn label_masks(&self) -> PairMasks {
        let k = self.pool.len();
        let b = self.queries.len();
        let mut m = PairMasks::new(k, b);
        for j in 0..k {
            for i in 0..b {
                if self.relevant[i][j] {
                    m.positive[j][i] = true;
                } else {
                    m.negative[j][i] = true;
                }
            }
        }
        m
    }
}
