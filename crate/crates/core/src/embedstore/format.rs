//! Binary matrix files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes  | content                         |
//! |--------|---------------------------------|
//! | 0..4   | magic `LGCV`                    |
//! | 4..8   | format version, `u32` = 1       |
//! | 8..12  | rows, `u32`                     |
//! | 12..16 | cols, `u32`                     |
//! | 16..   | rows x cols `f32`, row-major    |
//!
//! Row ids live next to the binary in `<stem>.ids.json` as `{"ids": [...]}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::matrix::EmbeddingMatrix;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LGCV";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Serialize, Deserialize)]
struct IdsFile {
    ids: Vec<String>,
}

/// Path of the id sidecar for a matrix file: `feats.bin` -> `feats.ids.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("ids.json")
}

/// Serializes the numeric part of `m` (header + f32 payload).
pub fn encode_matrix(m: &EmbeddingMatrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows())
        .map_err(|_| Error::Shape(format!("{} rows exceed u32", m.rows())))?;
    let cols = u32::try_from(m.cols())
        .map_err(|_| Error::Shape(format!("{} cols exceed u32", m.cols())))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + m.data().len() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for (pos, &v) in m.data().iter().enumerate() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(Error::NonFinite {
                row: pos / m.cols(),
                col: pos % m.cols(),
            });
        }
        buf.extend_from_slice(&narrowed.to_le_bytes());
    }
    Ok(buf)
}

/// Parses a header + payload into `(rows, cols, values)`.
pub fn decode_payload(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4-byte slice");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"));
    let version = word(4);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = rows as u64 * cols as u64 * 4;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::InvalidData(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            found - expected
        )));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: pos / cols,
            col: pos % cols,
        });
    }
    Ok((rows, cols, values))
}

/// Writes `path` and its id sidecar.
pub fn save_matrix(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let bytes = encode_matrix(m)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let ids = IdsFile {
        ids: m.ids().to_vec(),
    };
    super::write_json(&sidecar_path(path), &ids)
}

/// Reads a matrix and its sidecar. A missing sidecar yields index ids
/// `"0".."rows-1"`.
pub fn load_matrix(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (rows, cols, values) = decode_payload(path, &bytes)?;
    let sidecar = sidecar_path(path);
    if !sidecar.exists() {
        log::warn!(
            "{} has no id sidecar; using row indices as ids",
            path.display()
        );
        return EmbeddingMatrix::with_index_ids(rows, cols, values);
    }
    let ids: IdsFile = super::read_json(&sidecar)?;
    if ids.ids.len() != rows {
        return Err(Error::Shape(format!(
            "{} lists {} ids but the matrix has {rows} rows",
            sidecar.display(),
            ids.ids.len()
        )));
    }
    EmbeddingMatrix::new(ids.ids, cols, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: &[u8; 4], version: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut b = magic.to_vec();
        b.extend_from_slice(&version.to_le_bytes());
        b.extend_from_slice(&rows.to_le_bytes());
        b.extend_from_slice(&cols.to_le_bytes());
        b
    }

    #[test]
    fn zeros_2x3_is_16_plus_24_bytes() {
        let m = EmbeddingMatrix::with_index_ids(2, 3, vec![0.0; 6]).unwrap();
        let bytes = encode_matrix(&m).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 24);
        assert_eq!(&bytes[..4], b"LGCV");
        assert!(bytes[HEADER_LEN..].iter().all(|&b| b == 0));
    }

    #[test]
    fn decode_errors_are_distinct() {
        let p = Path::new("mem");
        let mut bad = header(b"XXXX", 1, 1, 1);
        bad.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_payload(p, &bad), Err(Error::BadMagic { .. })));

        let mut v2 = header(b"LGCV", 2, 1, 1);
        v2.extend_from_slice(&[0; 4]);
        assert!(matches!(
            decode_payload(p, &v2),
            Err(Error::VersionMismatch { found: 2, .. })
        ));

        let mut short = header(b"LGCV", 1, 3, 2);
        short.extend_from_slice(&[0; 20]);
        assert!(matches!(
            decode_payload(p, &short),
            Err(Error::Truncated {
                expected: 24,
                found: 20,
                ..
            })
        ));

        let mut ok = header(b"LGCV", 1, 3, 2);
        ok.extend_from_slice(&[0; 24]);
        let (r, c, v) = decode_payload(p, &ok).unwrap();
        assert_eq!((r, c, v.len()), (3, 2, 6));

        let mut nan = header(b"LGCV", 1, 1, 2);
        nan.extend_from_slice(&0f32.to_le_bytes());
        nan.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_payload(p, &nan),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));

        assert!(matches!(
            decode_payload(p, b"LGCV\x01"),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn encode_rejects_values_that_overflow_f32() {
        let m = EmbeddingMatrix::with_index_ids(1, 3, vec![0.0, 1.0, 1e300]).unwrap();
        assert!(matches!(
            encode_matrix(&m),
            Err(Error::NonFinite { row: 0, col: 2 })
        ));
    }

    #[test]
    fn sidecar_naming() {
        assert_eq!(
            sidecar_path(Path::new("dir/feats.bin")),
            PathBuf::from("dir/feats.ids.json")
        );
    }
}
