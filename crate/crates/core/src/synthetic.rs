//! Synthetic corpora with planted structure, for tests and benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, IngestOptions, Record};
use crate::error::Result;

fn records(prefix: &str, texts: Vec<String>) -> Vec<Record> {
    texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| Record {
            id: format!("{prefix}{i}"),
            text,
        })
        .collect()
}

/// `clusters` groups with disjoint vocabularies. Every query is relevant to
/// all labels of its group; label and query texts draw words from the group
/// vocabulary only.
pub fn planted_clusters(
    clusters: usize,
    queries_per_cluster: usize,
    labels_per_cluster: usize,
    seed: u64,
) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const WORDS_PER_CLUSTER: usize = 12;
    let word = |c: usize, w: usize| format!("topic{c}word{w}");

    let mut label_texts = Vec::new();
    for c in 0..clusters {
        for j in 0..labels_per_cluster {
            let mut words: Vec<String> = (0..4).map(|_| word(c, rng.gen_range(0..WORDS_PER_CLUSTER))).collect();
            words.push(format!("topic{c}label{j}"));
            label_texts.push(words.join(" "));
        }
    }
    let mut query_texts = Vec::new();
    let mut relevance = Vec::new();
    for c in 0..clusters {
        for _ in 0..queries_per_cluster {
            let len = rng.gen_range(3..7);
            let words: Vec<String> = (0..len).map(|_| word(c, rng.gen_range(0..WORDS_PER_CLUSTER))).collect();
            query_texts.push(words.join(" "));
            relevance.push((c * labels_per_cluster..(c + 1) * labels_per_cluster).collect());
        }
    }
    Corpus::from_parts(records("q", query_texts), records("l", label_texts), relevance, IngestOptions::default())
}

/// Each query's text equals the text of its single label.
pub fn self_retrieval(num_labels: usize, seed: u64) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texts: Vec<String> = (0..num_labels)
        .map(|l| {
            let extra: Vec<String> = (0..3).map(|_| format!("w{}", rng.gen_range(0..1000))).collect();
            format!("item{l} {}", extra.join(" "))
        })
        .collect();
    let relevance = (0..num_labels).map(|l| vec![l]).collect();
    Corpus::from_parts(records("q", texts.clone()), records("l", texts), relevance, IngestOptions::default())
}

/// Topic-structured corpus for ablations.
#[derive(Debug, Clone)]
pub struct TopicCorpus {
    /// Training split with some positives removed.
    pub train: Corpus,
    /// Held-out queries with complete relevance.
    pub test: Corpus,
    /// Number of (query, label) pairs dropped from the training split.
    pub dropped_positives: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TopicSpec {
    pub train_queries: usize,
    pub test_queries: usize,
    pub labels: usize,
    pub labels_per_topic: usize,
    /// Fraction of training positives removed (missing labels).
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for TopicSpec {
    fn default() -> Self {
        Self {
            train_queries: 2000,
            test_queries: 500,
            labels: 500,
            labels_per_topic: 10,
            missing_rate: 0.05,
            seed: 0,
        }
    }
}

/// Labels belong to topics and carry a few words of their own plus shared
/// topic words. A query picks one to three labels from a single topic and
/// mixes their words with topic words and global noise.
pub fn topic_corpus(spec: TopicSpec) -> Result<TopicCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let topics = spec.labels.div_ceil(spec.labels_per_topic);
    let topic_of = |l: usize| l / spec.labels_per_topic;
    let own = |l: usize, w: usize| format!("lab{l}x{w}");
    let topic_word = |t: usize, w: usize| format!("top{t}y{w}");
    const TOPIC_WORDS: usize = 8;
    const NOISE_WORDS: usize = 200;

    let label_texts: Vec<String> = (0..spec.labels)
        .map(|l| {
            let t = topic_of(l);
            format!(
                "{} {} {} {}",
                own(l, 0),
                own(l, 1),
                topic_word(t, rng.gen_range(0..TOPIC_WORDS)),
                topic_word(t, rng.gen_range(0..TOPIC_WORDS))
            )
        })
        .collect();

    let make_queries = |n: usize, rng: &mut ChaCha8Rng| {
        let mut texts = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let t = rng.gen_range(0..topics);
            let members: Vec<usize> = (t * spec.labels_per_topic..((t + 1) * spec.labels_per_topic).min(spec.labels)).collect();
            let count = rng.gen_range(1..=3usize).min(members.len());
            let chosen: Vec<usize> = members.choose_multiple(rng, count).copied().collect();
            let mut words = Vec::new();
            for &l in &chosen {
                words.push(own(l, rng.gen_range(0..2)));
            }
            words.push(topic_word(t, rng.gen_range(0..TOPIC_WORDS)));
            for _ in 0..rng.gen_range(1..4) {
                words.push(format!("noise{}", rng.gen_range(0..NOISE_WORDS)));
            }
            words.shuffle(rng);
            texts.push(words.join(" "));
            rows.push(chosen);
        }
        (texts, rows)
    };

    let (train_texts, mut train_rows) = make_queries(spec.train_queries, &mut rng);
    let (test_texts, test_rows) = make_queries(spec.test_queries, &mut rng);

    let mut dropped = 0;
    for row in &mut train_rows {
        let mut i = 0;
        while i < row.len() {
            if row.len() > 1 && rng.gen::<f64>() < spec.missing_rate {
                row.remove(i);
                dropped += 1;
            } else {
                i += 1;
            }
        }
    }

    let labels = records("l", label_texts);
    let train = Corpus::from_parts(records("q", train_texts), labels.clone(), train_rows, IngestOptions::default())?;
    let test = Corpus::from_parts(records("t", test_texts), labels, test_rows, IngestOptions::default())?;
    Ok(TopicCorpus {
        train,
        test,
        dropped_positives: dropped,
    })
}
