//! Queries, labels, and their sparse relevance.
//!
//! Input files are line oriented, UTF-8, TAB separated:
//!
//! ```text
//! labels:   id<TAB>text
//! queries:  id<TAB>label-id,label-id,...<TAB>text
//! ```
//!
//! Lines starting with `#` are ignored. The canonical serialization writes the
//! same format with every query's positives listed once, in order of first
//! appearance, so re-ingesting it is byte stable.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub text: String,
}

/// Queries, labels and the query→label relevance in compressed-row form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    queries: Vec<Record>,
    labels: Vec<Record>,
    offsets: Vec<usize>,
    positives: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    /// Accept queries without labels (evaluation splits). Metrics skip them.
    pub allow_empty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub num_queries: usize,
    pub num_labels: usize,
    pub nnz: usize,
    pub empty_queries: usize,
}

impl Corpus {
    /// Builds a corpus from in-memory parts. Positive lists are deduplicated in
    /// order of first appearance.
    pub fn from_parts(
        queries: Vec<Record>,
        labels: Vec<Record>,
        relevance: Vec<Vec<usize>>,
        opts: IngestOptions,
    ) -> Result<Self> {
        if queries.len() != relevance.len() {
            return Err(Error::Data(format!(
                "{} queries but {} relevance rows",
                queries.len(),
                relevance.len()
            )));
        }
        let num_labels = labels.len();
        let mut offsets = Vec::with_capacity(queries.len() + 1);
        let mut positives = Vec::new();
        offsets.push(0);
        for (i, row) in relevance.iter().enumerate() {
            let start = positives.len();
            for &l in row {
                if l >= num_labels {
                    return Err(Error::Data(format!(
                        "query {} references label index {l} but only {num_labels} labels exist",
                        queries[i].id
                    )));
                }
                if !positives[start..].contains(&l) {
                    positives.push(l);
                }
            }
            if positives.len() == start && !opts.allow_empty {
                return Err(Error::Data(format!(
                    "empty positive set for query {}",
                    queries[i].id
                )));
            }
            offsets.push(positives.len());
        }
        Ok(Self {
            queries,
            labels,
            offsets,
            positives,
        })
    }

    pub fn ingest(query_file: &Path, label_file: &Path, opts: IngestOptions) -> Result<Self> {
        let labels = read_labels(label_file)?;
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            index.insert(l.id.clone(), i);
        }

        let reader = BufReader::new(File::open(query_file).map_err(|e| Error::io(query_file, e))?);
        let parse_err = |line: usize, message: String| Error::Parse {
            path: query_file.to_path_buf(),
            line,
            message,
        };

        let mut queries = Vec::new();
        let mut offsets = vec![0];
        let mut positives: Vec<usize> = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let lineno = n + 1;
            let line = line.map_err(|e| Error::io(query_file, e))?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let id = fields.next().unwrap_or_default();
            let Some(label_field) = fields.next() else {
                return Err(parse_err(lineno, "malformed query record (expected id<TAB>labels<TAB>text)".into()));
            };
            if id.is_empty() {
                return Err(parse_err(lineno, "empty query id".into()));
            }
            let text = fields.next().unwrap_or_default();

            let start = positives.len();
            for token in label_field.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                let Some(&l) = index.get(token) else {
                    return Err(parse_err(lineno, format!("unknown label id {token:?}")));
                };
                if !positives[start..].contains(&l) {
                    positives.push(l);
                }
            }
            if positives.len() == start && !opts.allow_empty {
                return Err(parse_err(lineno, "empty positive set".into()));
            }
            offsets.push(positives.len());
            queries.push(Record {
                id: id.to_string(),
                text: text.to_string(),
            });
        }

        Ok(Self {
            queries,
            labels,
            offsets,
            positives,
        })
    }

    #[inline]
    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    #[inline]
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.positives.len()
    }

    #[inline]
    pub fn positives(&self, query: usize) -> &[usize] {
        &self.positives[self.offsets[query]..self.offsets[query + 1]]
    }

    pub fn is_positive(&self, query: usize, label: usize) -> bool {
        self.positives(query).contains(&label)
    }

    pub fn query(&self, i: usize) -> &Record {
        &self.queries[i]
    }

    pub fn label(&self, l: usize) -> &Record {
        &self.labels[l]
    }

    pub fn queries(&self) -> &[Record] {
        &self.queries
    }

    pub fn labels(&self) -> &[Record] {
        &self.labels
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Positive sets as owned rows, mostly for metrics.
    pub fn relevance_rows(&self) -> Vec<Vec<usize>> {
        (0..self.num_queries()).map(|i| self.positives(i).to_vec()).collect()
    }

    /// Number of queries each label is positive for.
    pub fn label_frequencies(&self) -> Vec<usize> {
        let mut freq = vec![0usize; self.num_labels()];
        for &l in &self.positives {
            freq[l] += 1;
        }
        freq
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            num_queries: self.num_queries(),
            num_labels: self.num_labels(),
            nnz: self.nnz(),
            empty_queries: (0..self.num_queries())
                .filter(|&i| self.positives(i).is_empty())
                .count(),
        }
    }

    pub fn write_queries<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, q) in self.queries.iter().enumerate() {
            let ids: Vec<&str> = self
                .positives(i)
                .iter()
                .map(|&l| self.labels[l].id.as_str())
                .collect();
            writeln!(w, "{}\t{}\t{}", q.id, ids.join(","), q.text)?;
        }
        Ok(())
    }

    pub fn write_labels<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for l in &self.labels {
            writeln!(w, "{}\t{}", l.id, l.text)?;
        }
        Ok(())
    }

    /// Writes the canonical `queries.txt` / `labels.txt` pair into `dir`.
    pub fn write_canonical(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let qpath = dir.join("queries.txt");
        let lpath = dir.join("labels.txt");
        let mut buf = Vec::new();
        self.write_queries(&mut buf).expect("write to Vec");
        std::fs::write(&qpath, &buf).map_err(|e| Error::io(&qpath, e))?;
        buf.clear();
        self.write_labels(&mut buf).expect("write to Vec");
        std::fs::write(&lpath, &buf).map_err(|e| Error::io(&lpath, e))?;
        Ok((qpath, lpath))
    }
}

pub fn read_labels(path: &Path) -> Result<Vec<Record>> {
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut seen = HashMap::new();
    let mut labels = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let Some((id, text)) = line.split_once('\t') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: "malformed label record (expected id<TAB>text)".into(),
            });
        };
        if id.is_empty() || seen.insert(id.to_string(), lineno).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("empty or duplicate label id {id:?}"),
            });
        }
        labels.push(Record {
            id: id.to_string(),
            text: text.to_string(),
        });
    }
    Ok(labels)
}

/// Per-label propensities `p_l` and their inverses `γ_l = 1/p_l`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropensityTable {
    pub a: f64,
    pub b: f64,
    /// `C = (ln Q − 1)(b + 1)^a`
    pub c: f64,
    pub frequency: Vec<usize>,
    pub p: Vec<f64>,
    pub gamma: Vec<f64>,
}

pub const DEFAULT_PROPENSITY_A: f64 = 0.55;
pub const DEFAULT_PROPENSITY_B: f64 = 1.5;

/// Standard XMC propensity model `p_l = 1 / (1 + C·exp(−a·ln(n_l + b)))`.
pub fn compute_propensities(corpus: &Corpus, a: f64, b: f64) -> Result<PropensityTable> {
    propensities_from_frequencies(corpus.num_queries(), corpus.label_frequencies(), a, b)
}

pub fn propensities_from_frequencies(
    num_queries: usize,
    frequency: Vec<usize>,
    a: f64,
    b: f64,
) -> Result<PropensityTable> {
    if !(a > 0.0) || !(b >= 0.0) {
        return Err(Error::Config(format!(
            "propensity constants must satisfy a > 0, b >= 0 (got a={a}, b={b})"
        )));
    }
    if num_queries < 3 {
        return Err(Error::Data("corpus too small for propensity fit".into()));
    }
    let c = ((num_queries as f64).ln() - 1.0) * (b + 1.0).powf(a);
    let p: Vec<f64> = frequency
        .iter()
        .map(|&n| 1.0 / (1.0 + c * (-a * (n as f64 + b).ln()).exp()))
        .collect();
    let gamma = p.iter().map(|p| 1.0 / p).collect();
    Ok(PropensityTable {
        a,
        b,
        c,
        frequency,
        p,
        gamma,
    })
}

impl PropensityTable {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Uniform table (`p_l = 1`), useful when no training statistics exist.
    pub fn uniform(num_labels: usize) -> Self {
        Self {
            a: 0.0,
            b: 0.0,
            c: 0.0,
            frequency: vec![0; num_labels],
            p: vec![1.0; num_labels],
            gamma: vec![1.0; num_labels],
        }
    }

    /// TSV with header `label_id  frequency  propensity  inv_propensity`.
    pub fn write_tsv<W: Write>(&self, corpus: &Corpus, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# a={} b={} c={}", self.a, self.b, self.c)?;
        for l in 0..self.len() {
            writeln!(
                w,
                "{}\t{}\t{:e}\t{:e}",
                corpus.label(l).id,
                self.frequency[l],
                self.p[l],
                self.gamma[l]
            )?;
        }
        Ok(())
    }

    /// Reads a table written by [`PropensityTable::write_tsv`], aligned to `labels`.
    pub fn read_tsv(path: &Path, labels: &[Record]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: HashMap<&str, usize> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.as_str(), i))
            .collect();
        let mut table = Self::uniform(labels.len());
        let mut seen = vec![false; labels.len()];
        for (n, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let perr = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(perr("expected 4 fields".into()));
            }
            let Some(&l) = index.get(fields[0]) else {
                return Err(perr(format!("unknown label id {:?}", fields[0])));
            };
            let num = |s: &str| s.parse::<f64>().map_err(|e| perr(e.to_string()));
            table.frequency[l] = fields[1].parse().map_err(|e: std::num::ParseIntError| perr(e.to_string()))?;
            table.p[l] = num(fields[2])?;
            table.gamma[l] = num(fields[3])?;
            seen[l] = true;
        }
        if let Some(l) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!(
                "missing propensity entry for label {}",
                labels[l].id
            )));
        }
        Ok(table)
    }
}
