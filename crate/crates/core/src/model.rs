//! Trainable state and its binary checkpoint.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! "PRIM" | version u32 | d u32 | V u32 | t_max u32
//! token_table V×d f32 | proj d×d f32 | proj_bias d f32
//! segment*: tag [u8; 4] | tensor count u32 | (rows u32 | cols u32 | payload)*
//! ```
//!
//! Segments: `PNET` (dropout, then the prototype network tensors), `CENT`
//! (alpha, centroids), `CTCH` (centroid update counters, u32), `BANK` (free
//! vectors), `ASGN` (label → bank row, u32). Payloads are f32 unless noted.

use std::path::Path;

use crate::encoder::{EncoderGrads, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::optim::ParamTensor;
use crate::prototype::{CentroidStore, FreeVectorBank, PrototypeNetGrads, PrototypeNetParams};

pub const MAGIC: &[u8; 4] = b"PRIM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub net: PrototypeNetParams,
    pub bank: FreeVectorBank,
    pub centroids: CentroidStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: EncoderGrads,
    pub net: PrototypeNetGrads,
    pub bank: Matrix,
}

impl Model {
    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn num_labels(&self) -> usize {
        self.centroids.len()
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            encoder: self.encoder.zero_grads(),
            net: self.net.zero_grads(),
            bank: Matrix::zeros(self.bank.bank.rows(), self.bank.bank.cols()),
        }
    }

    /// Every trainable tensor in a fixed order, flagged for weight decay.
    /// Biases, layernorm parameters and the free-vector bank are excluded.
    pub fn param_tensors(&mut self) -> Vec<ParamTensor<'_>> {
        let e = &mut self.encoder;
        let n = &mut self.net;
        let t = |name, decay, values| ParamTensor { name, decay, values };
        vec![
            t("encoder.token_table", true, e.token_table.as_mut_slice()),
            t("encoder.proj", true, e.proj.as_mut_slice()),
            t("encoder.proj_bias", false, e.proj_bias.as_mut_slice()),
            t("prototype.w_q", true, n.w_q.as_mut_slice()),
            t("prototype.w_k", true, n.w_k.as_mut_slice()),
            t("prototype.w_v", true, n.w_v.as_mut_slice()),
            t("prototype.w_o", true, n.w_o.as_mut_slice()),
            t("prototype.ffn_in", true, n.ffn_in.as_mut_slice()),
            t("prototype.ffn_in_bias", false, n.ffn_in_bias.as_mut_slice()),
            t("prototype.ffn_out", true, n.ffn_out.as_mut_slice()),
            t("prototype.ffn_out_bias", false, n.ffn_out_bias.as_mut_slice()),
            t("prototype.ln1_gain", false, n.ln1_gain.as_mut_slice()),
            t("prototype.ln1_bias", false, n.ln1_bias.as_mut_slice()),
            t("prototype.ln2_gain", false, n.ln2_gain.as_mut_slice()),
            t("prototype.ln2_bias", false, n.ln2_bias.as_mut_slice()),
            t("bank", false, self.bank.bank.as_mut_slice()),
        ]
    }

    pub fn all_finite(&self) -> bool {
        let n = &self.net;
        [
            &self.encoder.token_table,
            &self.encoder.proj,
            &n.w_q,
            &n.w_k,
            &n.w_v,
            &n.w_o,
            &n.ffn_in,
            &n.ffn_out,
            &self.bank.bank,
            &self.centroids.centroids,
        ]
        .iter()
        .all(|m| m.is_finite())
            && [
                &self.encoder.proj_bias,
                &n.ffn_in_bias,
                &n.ffn_out_bias,
                &n.ln1_gain,
                &n.ln1_bias,
                &n.ln2_gain,
                &n.ln2_bias,
            ]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        let e = &self.encoder;
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(e.dim() as u32);
        w.u32(e.vocab() as u32);
        w.u32(e.max_seq_len as u32);
        w.f32s(e.token_table.as_slice());
        w.f32s(e.proj.as_slice());
        w.f32s(&e.proj_bias);

        let n = &self.net;
        w.segment(
            b"PNET",
            &[
                (1, 1, &[n.dropout][..]),
                shape_of(&n.w_q),
                shape_of(&n.w_k),
                shape_of(&n.w_v),
                shape_of(&n.w_o),
                shape_of(&n.ffn_in),
                (1, n.ffn_in_bias.len(), &n.ffn_in_bias),
                shape_of(&n.ffn_out),
                (1, n.ffn_out_bias.len(), &n.ffn_out_bias),
                (1, n.ln1_gain.len(), &n.ln1_gain),
                (1, n.ln1_bias.len(), &n.ln1_bias),
                (1, n.ln2_gain.len(), &n.ln2_gain),
                (1, n.ln2_bias.len(), &n.ln2_bias),
            ],
        );
        w.segment(
            b"CENT",
            &[(1, 1, &[self.centroids.alpha][..]), shape_of(&self.centroids.centroids)],
        );
        w.segment_u32(b"CTCH", self.centroids.touched.iter().map(|&t| t.min(u64::from(u32::MAX)) as u32));
        w.segment(b"BANK", &[shape_of(&self.bank.bank)]);
        w.segment_u32(b"ASGN", self.bank.assignment.iter().map(|&a| a as u32));
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let d = r.u32()? as usize;
        let vocab = r.u32()? as usize;
        let max_seq_len = r.u32()? as usize;
        let encoder = EncoderParams {
            token_table: Matrix::from_vec(vocab, d, r.f32s(vocab * d)?),
            proj: Matrix::from_vec(d, d, r.f32s(d * d)?),
            proj_bias: r.f32s(d)?,
            max_seq_len,
        };

        let pnet = r.segment(b"PNET")?;
        if pnet.len() != 13 {
            return Err(Error::Checkpoint("PNET segment has wrong tensor count".into()));
        }
        let mut it = pnet.into_iter();
        let mut next = || it.next().expect("counted");
        let dropout = next().into_vec()[0];
        let net = PrototypeNetParams {
            dropout,
            w_q: next(),
            w_k: next(),
            w_v: next(),
            w_o: next(),
            ffn_in: next(),
            ffn_in_bias: next().into_vec(),
            ffn_out: next(),
            ffn_out_bias: next().into_vec(),
            ln1_gain: next().into_vec(),
            ln1_bias: next().into_vec(),
            ln2_gain: next().into_vec(),
            ln2_bias: next().into_vec(),
        };
        let cent = r.segment(b"CENT")?;
        if cent.len() != 2 {
            return Err(Error::Checkpoint("CENT segment has wrong tensor count".into()));
        }
        let alpha = cent[0].as_slice()[0];
        let centroid_matrix = cent[1].clone();
        let touched: Vec<u64> = r.segment_u32(b"CTCH")?.into_iter().map(u64::from).collect();
        let bank = r.segment(b"BANK")?.pop().ok_or_else(|| Error::Checkpoint("empty BANK".into()))?;
        let assignment: Vec<usize> = r.segment_u32(b"ASGN")?.into_iter().map(|a| a as usize).collect();
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }

        let shapes_ok = net.w_q.shape() == (d, d)
            && net.ffn_in.rows() == d
            && net.ffn_out.shape() == (net.ffn_in.cols(), d)
            && centroid_matrix.cols() == d
            && bank.cols() == d
            && touched.len() == centroid_matrix.rows()
            && assignment.len() == centroid_matrix.rows()
            && assignment.iter().all(|&a| a < bank.rows());
        if !shapes_ok {
            return Err(Error::Checkpoint("inconsistent tensor shapes".into()));
        }
        let mut centroids = CentroidStore::new(centroid_matrix, alpha)?;
        centroids.touched = touched;
        Ok(Self {
            encoder,
            net,
            bank: FreeVectorBank { bank, assignment },
            centroids,
        })
    }

    /// Writes atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl ModelGrads {
    pub fn fill_zero(&mut self) {
        self.encoder.fill_zero();
        self.net.fill_zero();
        self.bank.fill(0.0);
    }

    /// Same order as [`Model::param_tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let e = &self.encoder;
        let n = &self.net;
        vec![
            e.token_table.as_slice(),
            e.proj.as_slice(),
            &e.proj_bias,
            n.w_q.as_slice(),
            n.w_k.as_slice(),
            n.w_v.as_slice(),
            n.w_o.as_slice(),
            n.ffn_in.as_slice(),
            &n.ffn_in_bias,
            n.ffn_out.as_slice(),
            &n.ffn_out_bias,
            &n.ln1_gain,
            &n.ln1_bias,
            &n.ln2_gain,
            &n.ln2_bias,
            self.bank.as_slice(),
        ]
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn shape_of(m: &Matrix) -> (usize, usize, &[f64]) {
    (m.rows(), m.cols(), m.as_slice())
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, values: &[f64]) {
        for &v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn segment(&mut self, tag: &[u8; 4], tensors: &[(usize, usize, &[f64])]) {
        self.bytes(tag);
        self.u32(tensors.len() as u32);
        for &(rows, cols, data) in tensors {
            debug_assert_eq!(rows * cols, data.len());
            self.u32(rows as u32);
            self.u32(cols as u32);
            self.f32s(data);
        }
    }

    fn segment_u32(&mut self, tag: &[u8; 4], values: impl ExactSizeIterator<Item = u32>) {
        self.bytes(tag);
        self.u32(1);
        self.u32(values.len() as u32);
        self.u32(1);
        for v in values {
            self.u32(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }

    fn tag(&mut self, expected: &[u8; 4]) -> Result<u32> {
        let tag = self.take(4)?;
        if tag != expected {
            return Err(Error::Checkpoint(format!(
                "expected segment {}, found {}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(tag)
            )));
        }
        self.u32()
    }

    fn segment(&mut self, expected: &[u8; 4]) -> Result<Vec<Matrix>> {
        let count = self.tag(expected)?;
        (0..count)
            .map(|_| {
                let rows = self.u32()? as usize;
                let cols = self.u32()? as usize;
                Ok(Matrix::from_vec(rows, cols, self.f32s(rows * cols)?))
            })
            .collect()
    }

    fn segment_u32(&mut self, expected: &[u8; 4]) -> Result<Vec<u32>> {
        if self.tag(expected)? != 1 {
            return Err(Error::Checkpoint("u32 segment must hold one tensor".into()));
        }
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        (0..rows * cols).map(|_| self.u32()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let encoder = EncoderParams::new(4, 16, 8, &mut rng).unwrap();
        let net = PrototypeNetParams::new(4, 16, 0.1, &mut rng).unwrap();
        let bank = FreeVectorBank::new(2, 4, vec![0, 1, 1], &mut rng).unwrap();
        let mut centroids = CentroidStore::new(Matrix::from_rows(&vec![vec![1.0, 0.0, 0.0, 0.0]; 3]), 0.95).unwrap();
        centroids.update(1, &[0.0, 1.0, 0.0, 0.0]);
        Model { encoder, net, bank, centroids }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let m = model();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"PRIM");
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.centroids.touched, vec![0, 1, 0]);
        assert_eq!(back.bank.assignment, vec![0, 1, 1]);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let bytes = model().to_bytes();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Model::from_bytes(&bad).is_err());
    }

    #[test]
    fn decay_exclusions_complement_biases_norms_and_bank() {
        let mut m = model();
        let excluded: Vec<&str> = m.param_tensors().iter().filter(|t| !t.decay).map(|t| t.name).collect();
        assert_eq!(
            excluded,
            [
                "encoder.proj_bias",
                "prototype.ffn_in_bias",
                "prototype.ffn_out_bias",
                "prototype.ln1_gain",
                "prototype.ln1_bias",
                "prototype.ln2_gain",
                "prototype.ln2_bias",
                "bank"
            ]
        );
        let g = m.zero_grads();
        let lens: Vec<usize> = m.param_tensors().iter().map(|t| t.values.len()).collect();
        assert_eq!(lens, g.tensors().iter().map(|t| t.len()).collect::<Vec<_>>());
    }
}
