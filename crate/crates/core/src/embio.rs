//! `LMI1` embedding matrix files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "LMI1"
//!      4     4  format version (u32, = 1)
//!      8     4  rows (u32)
//!     12     4  cols (u32)
//!     16     1  key space (0 = item, 1 = user)
//!     17     3  reserved, zero
//!     20     8  index-map checksum (u64, 0 = not recorded)
//!     28  4·r·c payload: f32 values, row-major
//! ```
//!
//! Row `r` holds the entity with dense index `r`. The checksum is
//! [`index_checksum`] over the raw ids of that key space, so a matrix built
//! against a different index map is caught at load time.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 4] = b"LMI1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Debug, thiserror::Error)]
pub enum EmbioError {
    #[error("{path}: not an embedding matrix: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: payload is {actual} bytes, header declares {expected}")]
    Length {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: non-finite value at row {row}, col {col}")]
    NonFinite { path: PathBuf, row: usize, col: usize },
    #[error("invalid matrix: {0}")]
    Invalid(String),
    #[error("index checksum mismatch: file has {found:#018x}, index map gives {expected:#018x}")]
    Checksum { expected: u64, found: u64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KeySpace {
    Item = 0,
    User = 1,
}

impl KeySpace {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(KeySpace::Item),
            1 => Some(KeySpace::User),
            _ => None,
        }
    }
}

/// Dense row-major `f32` matrix whose rows are keyed to dense entity indices.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    key_space: KeySpace,
    index_checksum: u64,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, key_space: KeySpace) -> Result<Self, EmbioError> {
        if cols == 0 {
            return Err(EmbioError::Invalid("cols must be at least 1".into()));
        }
        if rows > u32::MAX as usize || cols > u32::MAX as usize {
            return Err(EmbioError::Invalid(format!("{rows}x{cols} exceeds u32 dimensions")));
        }
        if data.len() != rows * cols {
            return Err(EmbioError::Invalid(format!(
                "data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbioError::Invalid(format!(
                "non-finite value at row {}, col {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            key_space,
            index_checksum: 0,
        })
    }

    /// Builds a matrix from a row-major `f64` buffer, rounding to `f32`.
    pub fn from_f64(rows: usize, cols: usize, data: &[f64], key_space: KeySpace) -> Result<Self, EmbioError> {
        Self::new(rows, cols, data.iter().map(|&v| v as f32).collect(), key_space)
    }

    pub fn with_index_checksum(mut self, checksum: u64) -> Self {
        self.index_checksum = checksum;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn key_space(&self) -> KeySpace {
        self.key_space
    }

    pub fn index_checksum(&self) -> u64 {
        self.index_checksum
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Checks that this matrix was built against `ids` (raw ids in dense
    /// order). Matrices without a recorded checksum only have their row count
    /// checked.
    pub fn verify_alignment(&self, ids: &[String]) -> Result<(), EmbioError> {
        if self.rows != ids.len() {
            return Err(EmbioError::Invalid(format!(
                "matrix has {} rows, index map has {} entries",
                self.rows,
                ids.len()
            )));
        }
        if self.index_checksum != 0 {
            let expected = index_checksum(ids);
            if expected != self.index_checksum {
                return Err(EmbioError::Checksum {
                    expected,
                    found: self.index_checksum,
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.push(self.key_space as u8);
        out.extend_from_slice(&[0u8; 3]);
        out.extend_from_slice(&self.index_checksum.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a whole file image. `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, EmbioError> {
        let format_err = |message: &str| EmbioError::Format {
            path: path.to_path_buf(),
            message: message.to_owned(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(format_err("file shorter than header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(format_err("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(4) != VERSION {
            return Err(format_err(&format!("unsupported version {}", u32_at(4))));
        }
        let rows = u32_at(8) as usize;
        let cols = u32_at(12) as usize;
        let key_space = KeySpace::from_byte(bytes[16]).ok_or_else(|| format_err("bad key space"))?;
        if bytes[17..20] != [0, 0, 0] {
            return Err(format_err("reserved bytes are not zero"));
        }
        if cols == 0 {
            return Err(format_err("zero columns"));
        }
        let index_checksum = u64::from_le_bytes(bytes[20..28].try_into().unwrap());

        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| format_err("dimensions overflow"))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(EmbioError::Length {
                path: path.to_path_buf(),
                expected,
                actual: payload.len(),
            });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for (k, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(EmbioError::NonFinite {
                    path: path.to_path_buf(),
                    row: k / cols,
                    col: k % cols,
                });
            }
            data.push(v);
        }
        Ok(Self {
            rows,
            cols,
            data,
            key_space,
            index_checksum,
        })
    }
}

pub fn read_matrix(path: &Path) -> Result<EmbeddingMatrix, EmbioError> {
    let bytes = fs::read(path).map_err(|source| EmbioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    EmbeddingMatrix::from_bytes(&bytes, path)
}

pub fn write_matrix(m: &EmbeddingMatrix, path: &Path) -> Result<(), EmbioError> {
    fs::write(path, m.to_bytes()).map_err(|source| EmbioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// First 8 bytes (little-endian) of SHA-256 over the ids joined with `\n`,
/// each id followed by a newline. Zero is reserved for "not recorded" and is
/// mapped to 1.
pub fn index_checksum(ids: &[String]) -> u64 {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    let digest = h.finalize();
    let v = u64::from_le_bytes(digest[..8].try_into().unwrap());
    if v == 0 {
        1
    } else {
        v
    }
}
