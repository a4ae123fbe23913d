//! Inference path: materialize label vectors once, then exact top-k per query.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{evaluate, EvalResult};
use crate::model::Model;
use crate::prototype::materialize_all_prototypes;
use crate::retrieval::{Hit, PrototypeIndex};

/// What queries are scored against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Label prototypes `z_l`.
    #[default]
    Prototype,
    /// Plain label text embeddings `h_l` (ablation).
    TextEmbedding,
}

fn check_compatible(model: &Model, corpus: &Corpus) -> Result<()> {
    if model.num_labels() != corpus.num_labels() {
        return Err(Error::Data(format!(
            "checkpoint covers {} labels but the corpus has {}",
            model.num_labels(),
            corpus.num_labels()
        )));
    }
    Ok(())
}

pub fn label_matrix(model: &Model, corpus: &Corpus, mode: ScoreMode) -> Result<Matrix> {
    check_compatible(model, corpus)?;
    match mode {
        ScoreMode::Prototype => {
            materialize_all_prototypes(&model.net, &model.encoder, corpus, &model.centroids, &model.bank)
        }
        ScoreMode::TextEmbedding => {
            let texts: Vec<&str> = corpus.labels().iter().map(|l| l.text.as_str()).collect();
            Ok(model.encoder.encode_texts(&texts)?.vectors)
        }
    }
}

pub fn build_index(model: &Model, corpus: &Corpus, mode: ScoreMode) -> Result<PrototypeIndex> {
    let ids = corpus.labels().iter().map(|l| l.id.clone()).collect();
    PrototypeIndex::build(label_matrix(model, corpus, mode)?, ids)
}

pub fn predict(model: &Model, index: &PrototypeIndex, corpus: &Corpus, k: usize) -> Result<Vec<Vec<Hit>>> {
    if index.dim() != model.dim() {
        return Err(Error::Data(format!(
            "index dimension {} does not match encoder dimension {}",
            index.dim(),
            model.dim()
        )));
    }
    let texts: Vec<&str> = corpus.queries().iter().map(|q| q.text.as_str()).collect();
    let queries = model.encoder.encode_texts(&texts)?.vectors;
    index.topk_batch(&queries, k)
}

pub fn ranked_labels(hits: &[Vec<Hit>]) -> Vec<Vec<usize>> {
    hits.iter().map(|row| row.iter().map(|h| h.label).collect()).collect()
}

/// Predicts `max(ks)` labels per query and scores them.
pub fn evaluate_model(
    model: &Model,
    corpus: &Corpus,
    propensity: &[f64],
    ks: &[usize],
    mode: ScoreMode,
) -> Result<EvalResult> {
    let k = ks.iter().copied().max().unwrap_or(1);
    let index = build_index(model, corpus, mode)?;
    let hits = predict(model, &index, corpus, k)?;
    evaluate(&ranked_labels(&hits), &corpus.relevance_rows(), propensity, ks)
}
