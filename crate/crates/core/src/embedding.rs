//! Embedding matrices, the RISF-EMB file format and temperature-softmax
//! image/text similarity.
//!
//! Embeddings are held as `f32` (the precision encoders emit) while all
//! similarity arithmetic runs in `f64`.
//!
//! # File format
//!
//! ```text
//! 0..4    magic "REMB"
//! 4       version (1)
//! 5       normalized flag (0 or 1)
//! 6..8    reserved, zero
//! 8..12   rows, u32 little-endian
//! 12..16  dim,  u32 little-endian
//! 16..    rows * dim f32 little-endian, row-major
//! ```
//!
//! Row keys live in a sidecar text file at `<path>.idx`, one key per line.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::ClassId;

pub const MAGIC: &[u8; 4] = b"REMB";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;

/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 0.01;

/// Rows whose norm is within this distance of 1 are left untouched by
/// [`l2_normalize`]. It is a few f32 ulps, so a row that was normalized and
/// rounded to f32 is a fixed point.
const UNIT_NORM_SLACK: f64 = 4.0 * f32::EPSILON as f64;

/// Norm deviation tolerated by [`similarity_scores`].
pub const NORM_TOLERANCE: f64 = 1e-4;

const ZERO_NORM: f64 = 1e-12;

/// Row-major `f32` embeddings with one unique string key per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    index: Vec<String>,
    lookup: HashMap<String, usize>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>, index: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidHeader("embedding dim must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                found: data.len() % dim,
            });
        }
        let rows = data.len() / dim;
        if index.len() != rows {
            return Err(Error::IndexLengthMismatch {
                rows,
                keys: index.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let mut lookup = HashMap::with_capacity(rows);
        for (i, key) in index.iter().enumerate() {
            if key.is_empty() || key.contains('\n') || key.contains('\r') {
                return Err(Error::InvalidKey(key.clone()));
            }
            if lookup.insert(key.clone(), i).is_some() {
                return Err(Error::DuplicateKey(key.clone()));
            }
        }
        Ok(EmbeddingMatrix {
            dim,
            data,
            index,
            lookup,
            normalized: false,
        })
    }

    /// Builds a matrix from per-row vectors; every row must have length `dim`.
    pub fn from_rows(dim: usize, rows: &[Vec<f32>], index: Vec<String>) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data, index)
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new(), Vec::new())
    }

    pub fn rows(&self) -> usize {
        self.index.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn index(&self) -> &[String] {
        &self.index
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row position of `key`, if present.
    pub fn position(&self, key: &str) -> Option<usize> {
        self.lookup.get(key).copied()
    }

    /// Whether rows are known to be unit-norm (set by [`l2_normalize`] or read
    /// from the file header).
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// L2 norm of row `i`, accumulated in f64.
    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i)
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Returns a new matrix holding the rows named by `keys`, in that order.
    /// Unknown keys are an error.
    pub fn select(&self, keys: &[&str]) -> Result<Self> {
        let mut data = Vec::with_capacity(keys.len() * self.dim);
        let mut index = Vec::with_capacity(keys.len());
        for &k in keys {
            let i = self.position(k).ok_or_else(|| Error::InvalidKey(k.to_string()))?;
            data.extend_from_slice(self.row(i));
            index.push(k.to_string());
        }
        let mut out = Self::new(self.dim, data, index)?;
        out.normalized = self.normalized;
        Ok(out)
    }
}

/// Scales every row to unit L2 norm. Index and row order are preserved.
pub fn l2_normalize(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = matrix.data.clone();
    for (i, row) in data.chunks_mut(matrix.dim).enumerate() {
        let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm < ZERO_NORM {
            return Err(Error::ZeroNormRow(i));
        }
        if (norm - 1.0).abs() <= UNIT_NORM_SLACK {
            continue;
        }
        for v in row.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
    Ok(EmbeddingMatrix {
        dim: matrix.dim,
        data,
        index: matrix.index.clone(),
        lookup: matrix.lookup.clone(),
        normalized: true,
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".idx");
    PathBuf::from(s)
}

/// Writes `matrix` and its `.idx` sidecar.
pub fn save_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let rows = u32::try_from(matrix.rows()).map_err(|_| Error::InvalidHeader("too many rows".into()))?;
    let dim = u32::try_from(matrix.dim).map_err(|_| Error::InvalidHeader("dim too large".into()))?;

    let mut bytes = Vec::with_capacity(HEADER_LEN + matrix.data.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.push(FORMAT_VERSION);
    bytes.push(u8::from(matrix.normalized));
    bytes.extend_from_slice(&[0, 0]);
    bytes.extend_from_slice(&rows.to_le_bytes());
    bytes.extend_from_slice(&dim.to_le_bytes());
    for v in &matrix.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;

    let mut idx = String::new();
    for key in &matrix.index {
        idx.push_str(key);
        idx.push('\n');
    }
    let side = sidecar_path(path);
    fs::write(&side, idx).map_err(|e| Error::io(side, e))
}

/// Reads an embedding file exactly as stored; no normalization is applied.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic(bytes.iter().take(4).copied().collect()));
    }
    let side = sidecar_path(path);
    let idx = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    decode(&bytes, &idx)
}

/// Reads an embedding file and normalizes its rows.
pub fn load_normalized(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    l2_normalize(&load_embeddings(path)?)
}

fn decode(bytes: &[u8], idx: &str) -> Result<EmbeddingMatrix> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic(bytes.iter().take(4).copied().collect()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let normalized = match bytes[5] {
        0 => false,
        1 => true,
        other => return Err(Error::InvalidHeader(format!("normalized flag {other}"))),
    };
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::InvalidHeader("reserved bytes are not zero".into()));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if dim == 0 {
        return Err(Error::InvalidHeader("embedding dim must be positive".into()));
    }

    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::InvalidHeader("payload size overflows".into()))?;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes {
            expected,
            found: bytes.len(),
        });
    }

    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let index: Vec<String> = idx.lines().map(str::to_string).collect();
    if index.len() != rows {
        return Err(Error::IndexLengthMismatch {
            rows,
            keys: index.len(),
        });
    }
    let mut m = EmbeddingMatrix::new(dim, data, index)?;
    m.normalized = normalized;
    Ok(m)
}

/// Softmax temperature for image/text similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityParams {
    tau: f64,
}

impl SimilarityParams {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::param(
                "tau",
                format!("must be a positive finite number, got {tau}"),
            ));
        }
        Ok(SimilarityParams { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

impl Default for SimilarityParams {
    fn default() -> Self {
        SimilarityParams { tau: DEFAULT_TAU }
    }
}

/// Per-item, per-class scores in `[0, 1]`, row-major.
///
/// Columns carry class ids. Matrices built without explicit ids label
/// their columns positionally (`0..n_classes`).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n_items: usize,
    class_ids: Vec<ClassId>,
    values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(n_items: usize, n_classes: usize, values: Vec<f64>) -> Result<Self> {
        Self::with_class_ids(n_items, (0..n_classes as ClassId).collect(), values)
    }

    pub fn with_class_ids(n_items: usize, class_ids: Vec<ClassId>, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_items * class_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {}x{} score matrix",
                values.len(),
                n_items,
                class_ids.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidScore {
                    context: format!(
                        "score matrix entry ({}, {})",
                        i / class_ids.len().max(1),
                        i % class_ids.len().max(1)
                    ),
                    value: v,
                });
            }
        }
        Ok(ScoreMatrix {
            n_items,
            class_ids,
            values,
        })
    }

    /// Builds a matrix from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>], class_ids: Vec<ClassId>) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * class_ids.len());
        for r in rows {
            if r.len() != class_ids.len() {
                return Err(Error::ShapeMismatch(format!(
                    "row of length {} for {} classes",
                    r.len(),
                    class_ids.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Self::with_class_ids(rows.len(), class_ids, values)
    }

    /// Replaces the column labels.
    pub fn relabel(mut self, class_ids: Vec<ClassId>) -> Result<Self> {
        if class_ids.len() != self.class_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} columns",
                class_ids.len(),
                self.class_ids.len()
            )));
        }
        self.class_ids = class_ids;
        Ok(self)
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.n_classes();
        &self.values[i * k..(i + 1) * k]
    }

    pub fn get(&self, item: usize, col: usize) -> f64 {
        self.values[item * self.n_classes() + col]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_items).map(move |i| self.row(i))
    }
}

fn check_unit_rows(m: &EmbeddingMatrix) -> Result<()> {
    for i in 0..m.rows() {
        let norm = m.row_norm(i);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NonNormalizedInput { row: i, norm });
        }
    }
    Ok(())
}

/// Temperature softmax over image/text cosine similarities.
///
/// Entry `(i, k)` is `exp(I_i . T_k / tau) / sum_k' exp(I_i . T_k' / tau)`,
/// evaluated with the row maximum subtracted before exponentiation. Columns
/// follow the row order of `text`. An empty `image` yields an empty matrix.
pub fn similarity_scores(
    image: &EmbeddingMatrix,
    text: &EmbeddingMatrix,
    params: &SimilarityParams,
) -> Result<ScoreMatrix> {
    if image.dim() != text.dim() {
        return Err(Error::DimMismatch {
            expected: text.dim(),
            found: image.dim(),
        });
    }
    if text.is_empty() {
        return Err(Error::NoClasses);
    }
    check_unit_rows(image)?;
    check_unit_rows(text)?;

    let k = text.rows();
    let mut values = Vec::with_capacity(image.rows() * k);
    let mut logits = vec![0.0f64; k];
    for i in 0..image.rows() {
        let img = image.row(i);
        for (c, logit) in logits.iter_mut().enumerate() {
            let dot: f64 = img
                .iter()
                .zip(text.row(c))
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            *logit = dot / params.tau;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = values.len();
        let mut total = 0.0;
        for &l in &logits {
            let e = (l - max).exp();
            total += e;
            values.push(e);
        }
        for v in &mut values[start..] {
            *v /= total;
        }
    }
    ScoreMatrix::new(image.rows(), k, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn keys(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("k{i}")).collect()
    }

    fn unit(v: &[f32]) -> EmbeddingMatrix {
        l2_normalize(&EmbeddingMatrix::from_rows(v.len(), &[v.to_vec()], keys(1)).unwrap()).unwrap()
    }

    #[test]
    fn normalizes_three_four_five() {
        let m = EmbeddingMatrix::new(2, vec![3.0, 4.0], keys(1)).unwrap();
        let n = l2_normalize(&m).unwrap();
        assert!((f64::from(n.row(0)[0]) - 0.6).abs() < 1e-7);
        assert!((f64::from(n.row(0)[1]) - 0.8).abs() < 1e-7);
        assert_eq!(n.index(), m.index());
        assert!(n.is_normalized());
    }

    #[test]
    fn normalization_is_idempotent() {
        let m = EmbeddingMatrix::new(3, vec![0.3, -1.7, 2.2, 5.0, 0.1, 0.0], keys(2)).unwrap();
        let once = l2_normalize(&m).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((f64::from(*a) - f64::from(*b)).abs() <= 1e-12);
        }
    }

    #[test]
    fn random_rows_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..40).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
        let n = l2_normalize(&EmbeddingMatrix::new(8, data, keys(5)).unwrap()).unwrap();
        for row in n.data().chunks(8) {
            // Independent summation order: largest magnitudes last.
            let mut sq: Vec<f64> = row.iter().map(|&v| f64::from(v).powi(2)).collect();
            sq.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let norm = sq.iter().fold(0.0, |acc, v| acc + v).sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
    }

    #[test]
    fn zero_row_is_rejected() {
        let m = EmbeddingMatrix::new(2, vec![1.0, 0.0, 0.0, 0.0], keys(2)).unwrap();
        assert!(matches!(l2_normalize(&m), Err(Error::ZeroNormRow(1))));
    }

    #[test]
    fn construction_checks_invariants() {
        assert!(matches!(
            EmbeddingMatrix::new(2, vec![1.0, 2.0], vec!["a".into(), "b".into()]),
            Err(Error::IndexLengthMismatch { rows: 1, keys: 2 })
        ));
        assert!(matches!(
            EmbeddingMatrix::new(1, vec![1.0, 2.0], vec!["a".into(), "a".into()]),
            Err(Error::DuplicateKey(_))
        ));
        assert!(matches!(
            EmbeddingMatrix::new(1, vec![f32::NAN], vec!["a".into()]),
            Err(Error::NonFinite { row: 0, col: 0 })
        ));
        assert!(EmbeddingMatrix::new(0, vec![], vec![]).is_err());
    }

    #[test]
    fn identical_text_rows_give_uniform_scores() {
        let t = [0.2f32, 0.5, -0.4];
        let text = l2_normalize(
            &EmbeddingMatrix::from_rows(3, &[t.to_vec(), t.to_vec(), t.to_vec(), t.to_vec()], keys(4)).unwrap(),
        )
        .unwrap();
        let img =
            l2_normalize(&EmbeddingMatrix::from_rows(3, &[vec![1.0, 0.0, 0.0], vec![0.3, 0.3, 0.9]], keys(2)).unwrap())
                .unwrap();
        let s = similarity_scores(&img, &text, &SimilarityParams::default()).unwrap();
        for v in s.values() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn matching_text_dominates_at_low_temperature() {
        let text = EmbeddingMatrix::from_rows(2, &[vec![1.0, 0.0], vec![0.0, 1.0]], keys(2)).unwrap();
        let img = unit(&[1.0, 0.0]);
        let s = similarity_scores(&img, &text, &SimilarityParams::new(0.01).unwrap()).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(s.get(0, 1) < 1e-12);
    }

    #[test]
    fn softmax_matches_scalar_evaluation() {
        // Image (1, 0); text rows at +-60 degrees give dots 0.5 and -0.5.
        let s3 = 3f32.sqrt() / 2.0;
        let text = EmbeddingMatrix::from_rows(2, &[vec![0.5, s3], vec![-0.5, s3]], keys(2)).unwrap();
        let img = unit(&[1.0, 0.0]);
        let s = similarity_scores(&img, &text, &SimilarityParams::new(1.0).unwrap()).unwrap();
        // Dots in f64 of the stored f32 values are exactly +-0.5.
        let z = 0.5f64.exp() + (-0.5f64).exp();
        assert!((s.get(0, 0) - 0.5f64.exp() / z).abs() < 1e-15);
        assert!((s.get(0, 1) - (-0.5f64).exp() / z).abs() < 1e-15);
    }

    #[test]
    fn similarity_rejects_bad_inputs() {
        let text = EmbeddingMatrix::from_rows(2, &[vec![1.0, 0.0]], keys(1)).unwrap();
        let img3 = unit(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            similarity_scores(&img3, &text, &SimilarityParams::default()),
            Err(Error::DimMismatch { .. })
        ));
        let raw = EmbeddingMatrix::from_rows(2, &[vec![2.0, 0.0]], keys(1)).unwrap();
        assert!(matches!(
            similarity_scores(&raw, &text, &SimilarityParams::default()),
            Err(Error::NonNormalizedInput { row: 0, .. })
        ));
        assert!(SimilarityParams::new(0.0).is_err());
        assert!(SimilarityParams::new(f64::NAN).is_err());
    }

    #[test]
    fn empty_image_matrix_gives_empty_scores() {
        let text = EmbeddingMatrix::from_rows(2, &[vec![1.0, 0.0], vec![0.0, 1.0]], keys(2)).unwrap();
        let s = similarity_scores(&EmbeddingMatrix::empty(2).unwrap(), &text, &SimilarityParams::default()).unwrap();
        assert_eq!(s.n_items(), 0);
        assert_eq!(s.n_classes(), 2);
    }

    #[test]
    fn score_matrix_rejects_out_of_range_entries() {
        assert!(ScoreMatrix::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(ScoreMatrix::new(1, 2, vec![0.5]).is_err());
        assert!(ScoreMatrix::new(1, 2, vec![0.5, f64::NAN]).is_err());
    }

    #[test]
    fn select_reorders_rows() {
        let m = EmbeddingMatrix::from_rows(1, &[vec![1.0], vec![2.0], vec![3.0]], keys(3)).unwrap();
        let s = m.select(&["k2", "k0"]).unwrap();
        assert_eq!(s.data(), &[3.0, 1.0]);
        assert!(m.select(&["nope"]).is_err());
    }
}
