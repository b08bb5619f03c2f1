//! Activation and logit captures, and their on-disk binary format.
//!
//! A matrix file is a 16-byte header (rows, cols as little-endian `u64`)
//! followed by `rows * cols` little-endian `f32` values in row-major order.
//! Labels are a bare sequence of little-endian `u32`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

pub const MATRIX_HEADER_LEN: usize = 16;
pub const LOGITS_FILE: &str = "logits.f32";
pub const LABELS_FILE: &str = "labels.u32";

/// Tolerance on row sums of a probability batch.
pub const PROB_SUM_TOL: f64 = 1e-6;

pub fn mlp_tap_file(encoder: usize) -> String {
    format!("enc{encoder}_mlp.f32")
}

pub fn attn_tap_file(encoder: usize) -> String {
    format!("enc{encoder}_attn.f32")
}

pub fn encode_matrix(m: ArrayView2<'_, f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + 4 * m.len());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < MATRIX_HEADER_LEN {
        return Err(Error::domain(format!(
            "matrix file is {} bytes, shorter than its header",
            bytes.len()
        )));
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload = &bytes[MATRIX_HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::domain(format!("matrix header {rows}x{cols} overflows")))?;
    if payload.len() as u64 != expected {
        return Err(Error::domain(format!(
            "matrix header declares {rows}x{cols} ({expected} payload bytes) but {} bytes follow",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Array2::from_shape_vec((rows as usize, cols as usize), data)
        .map_err(|e| Error::domain(e.to_string()))
}

pub fn encode_labels(labels: &[u32]) -> Vec<u8> {
    labels.iter().flat_map(|l| l.to_le_bytes()).collect()
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::domain(format!(
            "label file length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub(crate) fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Batch of class-probability rows with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBatch {
    probs: Array2<f64>,
    labels: Vec<u32>,
}

impl LogitBatch {
    pub fn new(probs: Array2<f64>, labels: Vec<u32>) -> Result<Self> {
        Self::with_tolerance(probs, labels, PROB_SUM_TOL)
    }

    fn with_tolerance(probs: Array2<f64>, labels: Vec<u32>, tol: f64) -> Result<Self> {
        let (n, k) = probs.dim();
        if n == 0 {
            return Err(Error::domain("empty logit batch"));
        }
        if k < 2 {
            return Err(Error::domain("logit batch needs at least 2 classes"));
        }
        if labels.len() != n {
            return Err(Error::domain(format!(
                "{n} probability rows but {} labels",
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::domain(format!("label {l} outside [0, {k})")));
        }
        for (i, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::domain(format!("row {i} has entries outside [0, 1]")));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::domain(format!("row {i} sums to {sum}")));
            }
        }
        Ok(LogitBatch { probs, labels })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prediction(&self, sample: usize) -> usize {
        argmax(self.probs.row(sample))
    }

    pub fn is_correct(&self, sample: usize) -> bool {
        self.prediction(sample) == self.labels[sample] as usize
    }

    pub fn accuracy(&self) -> f64 {
        (0..self.len()).filter(|&i| self.is_correct(i)).count() as f64 / self.len() as f64
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(LOGITS_FILE), encode_matrix(self.probs.view()))?;
        fs::write(dir.join(LABELS_FILE), encode_labels(&self.labels))?;
        Ok(())
    }

    /// Decodes a logit/label pair. Rows are renormalised after widening from
    /// f32, so the row-sum check allows for the f32 rounding of every entry.
    pub fn from_bytes(logits: &[u8], labels: &[u8]) -> Result<Self> {
        let mut probs = decode_matrix(logits)?;
        let labels = decode_labels(labels)?;
        let tol = PROB_SUM_TOL + probs.ncols() as f64 * f32::EPSILON as f64;
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::domain("logit file contains non-finite values"));
        }
        for mut row in probs.rows_mut() {
            let sum = row.sum();
            if sum > 0.0 && (sum - 1.0).abs() <= tol {
                row /= sum;
            }
        }
        Self::with_tolerance(probs, labels, tol)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let logits = read_file(&dir.join(LOGITS_FILE))?;
        let labels = read_file(&dir.join(LABELS_FILE))?;
        Self::from_bytes(&logits, &labels).map_err(|e| Error::Ingestion {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCapture {
    pub mlp_out: Option<Array2<f64>>,
    pub attn_out: Option<Array2<f64>>,
}

/// Per-encoder activation taps. Encoder `i` (1-based) lives at index `i - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCapture {
    encoders: Vec<EncoderCapture>,
    rows: usize,
    cols: usize,
}

impl ActivationCapture {
    pub fn new(encoders: Vec<EncoderCapture>) -> Result<Self> {
        let mut shape: Option<(usize, usize)> = None;
        for (i, enc) in encoders.iter().enumerate() {
            for m in [&enc.mlp_out, &enc.attn_out].into_iter().flatten() {
                match shape {
                    None => shape = Some(m.dim()),
                    Some(s) if s != m.dim() => {
                        return Err(Error::domain(format!(
                            "encoder {} tap has shape {:?}, expected {:?}",
                            i + 1,
                            m.dim(),
                            s
                        )))
                    }
                    _ => {}
                }
            }
        }
        let (rows, cols) = shape.ok_or_else(|| Error::domain("capture holds no taps"))?;
        if rows < 2 {
            return Err(Error::domain(format!(
                "capture has {rows} rows; at least 2 are needed"
            )));
        }
        Ok(ActivationCapture {
            encoders,
            rows,
            cols,
        })
    }

    pub fn num_encoders(&self) -> usize {
        self.encoders.len()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn mlp_out(&self, encoder: usize) -> Result<&Array2<f64>> {
        self.encoders
            .get(encoder.wrapping_sub(1))
            .and_then(|e| e.mlp_out.as_ref())
            .ok_or(Error::MissingTap {
                encoder,
                tap: "mlp",
            })
    }

    pub fn attn_out(&self, encoder: usize) -> Result<&Array2<f64>> {
        self.encoders
            .get(encoder.wrapping_sub(1))
            .and_then(|e| e.attn_out.as_ref())
            .ok_or(Error::MissingTap {
                encoder,
                tap: "attn",
            })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, enc) in self.encoders.iter().enumerate() {
            if let Some(m) = &enc.mlp_out {
                fs::write(dir.join(mlp_tap_file(i + 1)), encode_matrix(m.view()))?;
            }
            if let Some(a) = &enc.attn_out {
                fs::write(dir.join(attn_tap_file(i + 1)), encode_matrix(a.view()))?;
            }
        }
        Ok(())
    }

    /// Reads the taps of encoders `1..=num_encoders`; absent files become
    /// missing taps, undecodable files are ingestion errors.
    pub fn read_dir(dir: &Path, num_encoders: usize) -> Result<Self> {
        let load = |name: String| -> Result<Option<Array2<f64>>> {
            let path: PathBuf = dir.join(name);
            match fs::read(&path) {
                Ok(bytes) => decode_matrix(&bytes)
                    .map(Some)
                    .map_err(|e| Error::Ingestion {
                        path,
                        reason: e.to_string(),
                    }),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(Error::Ingestion {
                    path,
                    reason: e.to_string(),
                }),
            }
        };
        let encoders = (1..=num_encoders)
            .map(|i| {
                Ok(EncoderCapture {
                    mlp_out: load(mlp_tap_file(i))?,
                    attn_out: load(attn_tap_file(i))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(encoders).map_err(|e| Error::Ingestion {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn matrix_header_layout() {
        let m = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let bytes = encode_matrix(m.view());
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(&bytes[0..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &3u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(decode_matrix(&bytes).unwrap(), m);
    }

    #[test]
    fn truncated_and_oversized_headers_fail() {
        assert!(decode_matrix(&[0u8; 7]).is_err());
        let mut bytes = encode_matrix(array![[1.0]].view());
        bytes.pop();
        assert!(decode_matrix(&bytes).is_err());
        let mut huge = Vec::new();
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_matrix(&huge).is_err());
        assert!(decode_labels(&[1, 2, 3]).is_err());
    }

    #[test]
    fn logit_batch_validation() {
        assert!(LogitBatch::new(array![[0.5, 0.6]], vec![0]).is_err());
        assert!(LogitBatch::new(array![[0.5, 0.5]], vec![2]).is_err());
        assert!(LogitBatch::new(array![[0.5, 0.5]], vec![0, 1]).is_err());
        assert!(LogitBatch::new(array![[1.5, -0.5]], vec![0]).is_err());
        let b = LogitBatch::new(array![[0.2, 0.8], [0.7, 0.3]], vec![1, 1]).unwrap();
        assert_eq!(b.accuracy(), 0.5);
    }

    #[test]
    fn logit_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = LogitBatch::new(
            array![[0.1, 0.2, 0.7], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]],
            vec![2, 0],
        )
        .unwrap();
        b.write_dir(dir.path()).unwrap();
        let back = LogitBatch::read_dir(dir.path()).unwrap();
        assert_eq!(back.labels(), b.labels());
        for (x, y) in back.probs().iter().zip(b.probs().iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn capture_dir_reports_missing_taps() {
        let dir = tempfile::tempdir().unwrap();
        let m = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
        let cap = ActivationCapture::new(vec![
            EncoderCapture {
                mlp_out: Some(m.clone()),
                attn_out: Some(m.clone()),
            },
            EncoderCapture {
                mlp_out: Some(m.clone()),
                attn_out: None,
            },
        ])
        .unwrap();
        cap.write_dir(dir.path()).unwrap();
        let back = ActivationCapture::read_dir(dir.path(), 2).unwrap();
        assert_eq!(back, cap);
        assert!(matches!(
            back.attn_out(2),
            Err(Error::MissingTap { encoder: 2, .. })
        ));
        assert!(back.attn_out(9).is_err());

        fs::write(dir.path().join(attn_tap_file(2)), b"garbage").unwrap();
        assert!(matches!(
            ActivationCapture::read_dir(dir.path(), 2),
            Err(Error::Ingestion { .. })
        ));
    }

    #[test]
    fn capture_needs_two_rows_and_equal_shapes() {
        let one = array![[1.0, 2.0]];
        assert!(ActivationCapture::new(vec![EncoderCapture {
            mlp_out: Some(one.clone()),
            attn_out: None
        }])
        .is_err());
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[1.0], [3.0]];
        assert!(ActivationCapture::new(vec![EncoderCapture {
            mlp_out: Some(a),
            attn_out: Some(b)
        }])
        .is_err());
    }
}
