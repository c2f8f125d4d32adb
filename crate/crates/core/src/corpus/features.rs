//! Binary feature files: magic `DVCF`, little-endian `u32` rows and columns,
//! then `rows × cols` little-endian `f32` values in row-major order.

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"DVCF";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err("missing DVCF header".into());
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != rows * cols * 4 {
            return Err(format!("expected {} payload bytes for {}x{}, found {}", rows * cols * 4, rows, cols, body.len()));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { rows, cols, data })
    }
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    fs::write(path, m.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::from_bytes(&bytes).map_err(|message| Error::Features { path: path.to_path_buf(), message })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let m = FeatureMatrix { rows: 2, cols: 1, data: vec![1.0, -2.5] };
        let b = m.to_bytes();
        assert_eq!(&b[..4], b"DVCF");
        assert_eq!(&b[4..12], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[12..16], &1.0f32.to_le_bytes());
        assert_eq!(FeatureMatrix::from_bytes(&b).unwrap(), m);
    }

    #[test]
    fn truncated_payload_rejected() {
        let m = FeatureMatrix { rows: 2, cols: 2, data: vec![0.0; 4] };
        let b = m.to_bytes();
        assert!(FeatureMatrix::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(FeatureMatrix::from_bytes(b"NOPE").is_err());
    }
}
