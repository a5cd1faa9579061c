//! Model files: JSON documents with a format version, a hash of the fitting
//! configuration and one section per fitted component.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Dense matrix stored row by row.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<f64>>,
}

impl MatrixData {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixData { rows: m.nrows(), cols: m.ncols(), data: matrix_rows(m) }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        matrix_from_rows(&self.data, self.rows, self.cols)
    }
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidInput(format!("matrix data does not have shape {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Hex SHA-256 of a configuration string.
pub fn config_hash(config: &str) -> String {
    let digest = Sha256::digest(config.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Top-level model document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelFile {
    pub version: u32,
    pub config_hash: String,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub foliation: Option<crate::foliation::FoliationData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_foliation: Option<crate::localfoliation::LocalFoliationData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autoencoder: Option<crate::autoencoder::AutoencoderData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<crate::polynomial::PolyMapData>,
}

impl ModelFile {
    pub fn new(config: serde_json::Value) -> Self {
        let text = serde_json::to_string(&config).expect("json value serialises");
        ModelFile {
            version: FORMAT_VERSION,
            config_hash: config_hash(&text),
            config,
            foliation: None,
            local_foliation: None,
            autoencoder: None,
            decoder: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!("unsupported model version {}", m.version)));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrices_round_trip_exactly() {
        let m = DMatrix::from_fn(3, 2, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0));
        let d = MatrixData::from_matrix(&m);
        let text = serde_json::to_string(&d).unwrap();
        let back: MatrixData = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_matrix().unwrap(), m);
    }
}
