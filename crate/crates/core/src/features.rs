//! Feature extraction and the on-disk feature matrix.
//!
//! Binary layout (all integers little-endian):
//!
//! | offset | size  | field                                        |
//! |--------|-------|----------------------------------------------|
//! | 0      | 8     | magic `FEATMTX\0`                            |
//! | 8      | 4     | version, `u32` = 1                           |
//! | 12     | 4     | flags, `u32`; bit 0 = rows L2-normalized     |
//! | 16     | 8     | N, `u64`                                     |
//! | 24     | 4     | D, `u32`                                     |
//! | 28     | 4     | reserved, zero                               |
//! | 32     | 32    | encoder checkpoint SHA-256                   |
//! | 64     | 32    | SHA-256 of the sidecar id file               |
//! | 96     | 4·N·D | values, row-major `f32`                      |
//! | end-32 | 32    | SHA-256 of every preceding byte              |
//!
//! The sidecar `<file>.ids` lists one image id per line, newline-terminated.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::digest;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::GrayImage;
use crate::ssl::EncoderWeights;

pub const MAGIC: &[u8; 8] = b"FEATMTX\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 96;
const FLAG_NORMALIZED: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n: usize,
    pub d: usize,
    /// Row-major, `n * d` values.
    pub values: Vec<f32>,
    pub image_ids: Vec<String>,
    /// Hex SHA-256 of the encoder checkpoint.
    pub encoder_fingerprint: String,
    pub normalized: bool,
}

impl FeatureMatrix {
    pub fn new(
        d: usize,
        values: Vec<f32>,
        image_ids: Vec<String>,
        encoder_fingerprint: String,
    ) -> Result<Self> {
        let m = Self {
            n: image_ids.len(),
            d,
            values,
            image_ids,
            encoder_fingerprint,
            normalized: false,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.n * self.d || self.image_ids.len() != self.n {
            return Err(Error::Shape {
                expected: format!("{} ids and {}x{} values", self.n, self.n, self.d),
                actual: format!("{} ids and {} values", self.image_ids.len(), self.values.len()),
            });
        }
        let mut seen = HashSet::new();
        for id in &self.image_ids {
            if id.is_empty() || id.contains(['\n', '\r']) {
                return Err(Error::invalid(format!("invalid image id {id:?}")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate image id {id}")));
            }
        }
        match digest::from_hex(&self.encoder_fingerprint) {
            Some(b) if b.len() == 32 && b.iter().any(|&x| x != 0) => Ok(()),
            _ => Err(Error::invalid("encoder fingerprint is absent or malformed")),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    /// Values widened to `f64`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let flags = if self.normalized { FLAG_NORMALIZED } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&digest::from_hex(&self.encoder_fingerprint).unwrap_or_default());
        out.resize(64, 0);
        out.extend_from_slice(&digest::sha256(self.ids_text().as_bytes()));
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let checksum = digest::sha256(&out);
        out.extend_from_slice(&checksum);
        out
    }

    fn ids_text(&self) -> String {
        let mut s = String::new();
        for id in &self.image_ids {
            s.push_str(id);
            s.push('\n');
        }
        s
    }

    pub fn from_bytes(bytes: &[u8], ids_text: &str, path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < HEADER_LEN + 32 {
            return Err(corrupt("file too short"));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        if digest::sha256(body)[..] != checksum[..] {
            return Err(corrupt("checksum mismatch"));
        }
        if &body[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes"));
        if u32_at(8) != VERSION {
            return Err(corrupt("unsupported version"));
        }
        let flags = u32_at(12);
        let n = u64::from_le_bytes(body[16..24].try_into().expect("8 bytes")) as usize;
        let d = u32_at(24) as usize;
        let fingerprint = &body[32..64];
        if fingerprint.iter().all(|&b| b == 0) {
            return Err(corrupt("encoder fingerprint absent"));
        }
        if digest::sha256(ids_text.as_bytes())[..] != body[64..96] {
            return Err(corrupt("id sidecar does not match"));
        }
        let payload = &body[HEADER_LEN..];
        if payload.len() != 4 * n * d {
            return Err(corrupt("value block has the wrong length"));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let image_ids: Vec<String> = ids_text.lines().map(str::to_owned).collect();
        let m = Self {
            n,
            d,
            values,
            image_ids,
            encoder_fingerprint: digest::to_hex(fingerprint),
            normalized: flags & FLAG_NORMALIZED != 0,
        };
        m.validate().map_err(|e| corrupt(&e.to_string()))?;
        Ok(m)
    }

    /// Writes the matrix and its sidecar, each through a temporary file
    /// renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        atomic_write(&ids_path(path), self.ids_text().as_bytes())?;
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ids_file = ids_path(path);
        let ids = fs::read_to_string(&ids_file).map_err(|e| Error::io(&ids_file, e))?;
        Self::from_bytes(&bytes, &ids, path)
    }
}

pub fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Pooled backbone output (the layer before the final linear head) for
/// every image, without augmentation.
pub fn extract_features(
    weights: &EncoderWeights,
    image_ids: &[String],
    images: &[GrayImage],
    geometry: (usize, usize),
    exec: Exec,
) -> Result<FeatureMatrix> {
    if image_ids.len() != images.len() {
        return Err(Error::Shape {
            expected: format!("{} images", image_ids.len()),
            actual: format!("{}", images.len()),
        });
    }
    for (id, img) in image_ids.iter().zip(images) {
        if img.dims() != geometry {
            return Err(Error::Shape {
                expected: format!("{}x{} image", geometry.0, geometry.1),
                actual: format!("{}x{} for {id}", img.height, img.width),
            });
        }
    }
    let rows = exec.map_slice(images, |img| weights.encoder.features(&weights.params, img));
    let d = weights.encoder.feature_dim();
    let mut values = Vec::with_capacity(rows.len() * d);
    for row in &rows {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("extracted feature".into()));
        }
        values.extend(row.iter().map(|&v| v as f32));
    }
    FeatureMatrix::new(d, values, image_ids.to_vec(), weights.fingerprint.clone())
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut out = matrix.clone();
    for i in 0..out.n {
        let row = &mut out.values[i * out.d..(i + 1) * out.d];
        let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid(format!(
                "row {} ({}) has zero norm",
                i, matrix.image_ids[i]
            )));
        }
        row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
    }
    out.normalized = true;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fp() -> String {
        digest::fingerprint(b"checkpoint")
    }

    fn random_matrix(n: usize, d: usize) -> FeatureMatrix {
        let mut r = crate::rng::from_seed(5);
        let values = (0..n * d).map(|_| r.random_range(-3.0f32..3.0)).collect();
        let ids = (0..n).map(|i| format!("img{i}")).collect();
        FeatureMatrix::new(d, values, ids, fp()).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact_and_canonical() {
        let m = random_matrix(10, 8);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        m.save(&p).unwrap();
        let back = FeatureMatrix::load(&p).unwrap();
        assert_eq!(back, m);
        let first = fs::read(&p).unwrap();
        back.save(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }

    #[test]
    fn truncation_and_tampering_are_detected() {
        let m = random_matrix(4, 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        m.save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(FeatureMatrix::load(&p), Err(Error::Corrupt { .. })));
        m.save(&p).unwrap();
        fs::write(ids_path(&p), "a\nb\nc\nd\n").unwrap();
        assert!(matches!(FeatureMatrix::load(&p), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn absent_fingerprint_is_rejected() {
        let mut m = random_matrix(2, 2);
        m.encoder_fingerprint = "00".repeat(32);
        assert!(m.validate().is_err());
        let bytes = m.to_bytes();
        let ids = "img0\nimg1\n";
        assert!(FeatureMatrix::from_bytes(&bytes, ids, Path::new("x")).is_err());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let r = FeatureMatrix::new(1, vec![1.0, 2.0], vec!["a".into(), "a".into()], fp());
        assert!(r.is_err());
    }

    #[test]
    fn normalize_cases() {
        let m = FeatureMatrix::new(2, vec![3.0, 4.0], vec!["a".into()], fp()).unwrap();
        let n = l2_normalize(&m).unwrap();
        assert!(n.normalized);
        assert!((n.values[0] - 0.6).abs() < 1e-7 && (n.values[1] - 0.8).abs() < 1e-7);
        let again = l2_normalize(&n).unwrap();
        for (a, b) in again.values.iter().zip(&n.values) {
            assert!(((a - b) as f64).abs() < 1e-7);
        }
        let z = FeatureMatrix::new(2, vec![0.0, 0.0], vec!["a".into()], fp()).unwrap();
        assert!(l2_normalize(&z).is_err());
        let r = l2_normalize(&random_matrix(30, 6)).unwrap();
        for i in 0..r.n {
            let norm: f64 = r.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}
