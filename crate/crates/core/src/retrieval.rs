//! Exact maximum-inner-product search over unit-norm label prototypes.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

const UNIT_TOLERANCE: f64 = 1e-6;

/// Immutable search index over `L` unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeIndex {
    matrix: Matrix,
    ids: Vec<String>,
}

/// A scored label, by index into the index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub label: usize,
    pub score: f64,
}

/// Descending score, then ascending label index.
fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.label.cmp(&b.label))
}

impl PrototypeIndex {
    pub fn build(matrix: Matrix, ids: Vec<String>) -> Result<Self> {
        if matrix.rows() != ids.len() {
            return Err(Error::Data(format!(
                "{} prototype rows but {} label ids",
                matrix.rows(),
                ids.len()
            )));
        }
        for (i, row) in matrix.iter_rows().enumerate() {
            let n = norm(row);
            if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
                return Err(Error::Data(format!(
                    "prototype row {i} ({}) has norm {n}, expected 1",
                    ids[i]
                )));
            }
        }
        Ok(Self { matrix, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn topk(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        if k > self.len() {
            return Err(Error::Config(format!("k = {k} exceeds the number of labels {}", self.len())));
        }
        if query.len() != self.dim() {
            return Err(Error::Data(format!(
                "query has dimension {} but the index has {}",
                query.len(),
                self.dim()
            )));
        }
        let mut hits: Vec<Hit> = self
            .matrix
            .iter_rows()
            .enumerate()
            .map(|(label, row)| Hit { label, score: dot(query, row) })
            .collect();
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, rank_order);
            hits.truncate(k);
        }
        hits.sort_unstable_by(rank_order);
        Ok(hits)
    }

    /// Independent top-k for every row of `queries`.
    pub fn topk_batch(&self, queries: &Matrix, k: usize) -> Result<Vec<Vec<Hit>>> {
        (0..queries.rows())
            .into_par_iter()
            .map(|i| self.topk(queries.row(i), k))
            .collect()
    }

    /// `id<TAB>hex(f32 little-endian row)` per label.
    pub fn write_export<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (id, row) in self.ids.iter().zip(self.matrix.iter_rows()) {
            let bytes: Vec<u8> = row.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            writeln!(w, "{id}\t{}", hex::encode(bytes))?;
        }
        Ok(())
    }

    pub fn read_export(text: &str) -> Result<Self> {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut dim = None;
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| Error::Data(format!("prototype export line {}: {m}", n + 1));
            let (id, hexrow) = line.split_once('\t').ok_or_else(|| bad("expected id<TAB>hex"))?;
            let bytes = hex::decode(hexrow).map_err(|e| bad(&e.to_string()))?;
            if bytes.len() % 4 != 0 || bytes.is_empty() {
                return Err(bad("row length is not a multiple of 4 bytes"));
            }
            let d = bytes.len() / 4;
            if *dim.get_or_insert(d) != d {
                return Err(bad("inconsistent row dimension"));
            }
            ids.push(id.to_string());
            data.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))),
            );
        }
        let rows = ids.len();
        Self::build(Matrix::from_vec(rows, dim.unwrap_or(0), data), ids)
    }
}

/// `query_id<TAB>label_id:score,...` with six-decimal scores.
pub fn write_predictions<W: Write>(
    mut w: W,
    query_ids: &[String],
    label_ids: &[String],
    hits: &[Vec<Hit>],
) -> std::io::Result<()> {
    for (qid, row) in query_ids.iter().zip(hits) {
        let items: Vec<String> = row
            .iter()
            .map(|h| format!("{}:{:.6}", label_ids[h.label], h.score))
            .collect();
        writeln!(w, "{qid}\t{}", items.join(","))?;
    }
    Ok(())
}

/// Parsed predictions: query id and its ranked `(label id, score)` list.
pub type PredictionRow = (String, Vec<(String, f64)>);

pub fn read_predictions(text: &str) -> Result<Vec<PredictionRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let bad = |m: &str| Error::Data(format!("predictions line {}: {m}", n + 1));
            let (qid, rest) = line.split_once('\t').ok_or_else(|| bad("expected query_id<TAB>..."))?;
            let items = rest
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|item| {
                    let (label, score) = item.rsplit_once(':').ok_or_else(|| bad("expected label:score"))?;
                    let score = score.parse::<f64>().map_err(|e| bad(&e.to_string()))?;
                    Ok((label.to_string(), score))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((qid.to_string(), items))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn zero_row_is_rejected() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(PrototypeIndex::build(m, ids(2)).is_err());
    }

    #[test]
    fn self_retrieval_and_full_ranking() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let idx = PrototypeIndex::build(m, ids(3)).unwrap();
        let hits = idx.topk(&[0.0, 1.0], 1).unwrap();
        assert_eq!(hits, vec![Hit { label: 1, score: 1.0 }]);
        let all = idx.topk(&[1.0, 0.0], 3).unwrap();
        assert_eq!(all.iter().map(|h| h.label).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(idx.topk(&[1.0, 0.0], 4).is_err());
    }

    #[test]
    fn ties_break_by_label_index() {
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, -1.0]]);
        let idx = PrototypeIndex::build(m, ids(4)).unwrap();
        let q = [std::f64::consts::FRAC_1_SQRT_2; 2];
        let hits = idx.topk(&q, 3).unwrap();
        assert_eq!(hits.iter().map(|h| h.label).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn predictions_round_trip() {
        let hits = vec![vec![Hit { label: 1, score: 0.5 }, Hit { label: 0, score: -0.25 }]];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &["q:0".to_string()], &ids(2), &hits).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "q:0\tl1:0.500000,l0:-0.250000\n");
        let parsed = read_predictions(&text).unwrap();
        assert_eq!(parsed[0].0, "q:0");
        assert_eq!(parsed[0].1, vec![("l1".to_string(), 0.5), ("l0".to_string(), -0.25)]);
    }
}
