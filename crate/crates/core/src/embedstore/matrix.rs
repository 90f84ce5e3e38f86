use std::collections::HashMap;

use crate::error::{Error, Result};

/// Row-major feature matrix with one string id per row.
///
/// Values are held at 64-bit precision; the on-disk format stores 32-bit
/// floats. The matrix is immutable once built.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.ids == other.ids
            && self.data == other.data
    }
}

impl EmbeddingMatrix {
    /// Builds a matrix, checking shape, finiteness and id uniqueness.
    pub fn new(ids: Vec<String>, cols: usize, data: Vec<f64>) -> Result<Self> {
        let rows = ids.len();
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Shape(format!(
                "{rows} ids x {cols} cols does not match {} values",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        let mut index = HashMap::with_capacity(rows);
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            rows,
            cols,
            data,
            ids,
            index,
        })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.len()
            )));
        }
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Shape(format!(
                "row {bad} has {} values, expected {cols}",
                rows[bad].len()
            )));
        }
        Self::new(ids, cols, rows.concat())
    }

    /// Ids `"0"`, `"1"`, ... for matrices whose rows have no natural name.
    pub fn with_index_ids(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new((0..rows).map(|i| i.to_string()).collect(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-column matrix has no meaningful rows.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row_by_id(&self, id: &str) -> Result<&[f64]> {
        self.index_of(id)
            .map(|i| self.row(i))
            .ok_or_else(|| Error::missing(id, "embedding matrix"))
    }

    /// Row indices for `ids`, failing on the first id that is absent.
    pub fn rows_for<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.index_of(id.as_ref())
                    .ok_or_else(|| Error::missing(id.as_ref(), "embedding matrix"))
            })
            .collect()
    }

    /// New matrix holding only `ids`, in that order.
    pub fn select<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self> {
        let rows = self.rows_for(ids)?;
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in &rows {
            data.extend_from_slice(self.row(r));
        }
        Self::new(
            ids.iter().map(|s| s.as_ref().to_string()).collect(),
            self.cols,
            data,
        )
    }

    /// The matrix as it will read back from disk: every value rounded to f32.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| f64::from(v as f32)).collect();
        Self {
            data,
            ..self.clone()
        }
    }
}

/// Pairs `(i, j)` with `a.ids()[i] == b.ids()[j]`, in the row order of `a`.
pub fn join_by_id(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Vec<(usize, usize)> {
    a.ids()
        .iter()
        .enumerate()
        .filter_map(|(i, id)| b.index_of(id).map(|j| (i, j)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn rejects_nan_with_position() {
        let err = EmbeddingMatrix::new(ids(&["a", "b"]), 3, vec![0.0, 1.0, f64::NAN, 0.0, 0.0, 0.0])
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 0, col: 2 }), "{err}");
    }

    #[test]
    fn rejects_duplicate_ids_and_bad_shape() {
        assert!(matches!(
            EmbeddingMatrix::new(ids(&["a", "a"]), 1, vec![0.0, 1.0]),
            Err(Error::DuplicateId(_))
        ));
        assert!(matches!(
            EmbeddingMatrix::new(ids(&["a", "b"]), 2, vec![0.0; 3]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn join_examples() {
        let a = EmbeddingMatrix::new(ids(&["x", "y"]), 1, vec![0.0, 1.0]).unwrap();
        let b = EmbeddingMatrix::new(ids(&["y", "z"]), 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(join_by_id(&a, &b), vec![(1, 0)]);
        assert_eq!(join_by_id(&a, &a), vec![(0, 0), (1, 1)]);
        let c = EmbeddingMatrix::new(ids(&["p", "q"]), 1, vec![0.0, 1.0]).unwrap();
        assert!(join_by_id(&a, &c).is_empty());
    }

    #[test]
    fn select_reorders_rows() {
        let m = EmbeddingMatrix::new(ids(&["a", "b", "c"]), 2, (0..6).map(f64::from).collect())
            .unwrap();
        let s = m.select(&["c", "a"]).unwrap();
        assert_eq!(s.row(0), &[4.0, 5.0]);
        assert_eq!(s.row(1), &[0.0, 1.0]);
        assert!(m.select(&["zz"]).is_err());
    }
}
