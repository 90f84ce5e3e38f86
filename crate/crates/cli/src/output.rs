//! Report files: JSON for machines, aligned text tables for people, CSV for
//! grids. All writes go through one [`OutputDir`] owned by the main thread.

use std::fs;
use std::path::{Path, PathBuf};

use lgcav_core::embedstore::write_json;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub struct OutputDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| output_err(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let path = self.path(name);
        write_json(&path, value)?;
        self.written.push(path);
        Ok(())
    }

    pub fn text(&mut self, name: &str, text: &str) -> CliResult<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| output_err(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> CliResult<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| output_err(&path, e))?;
        for row in rows {
            w.serialize(row).map_err(|e| output_err(&path, e))?;
        }
        w.flush().map_err(|e| output_err(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    /// Records a file written by a library call (CAVs, heads, worlds).
    pub fn record(&mut self, path: PathBuf) {
        self.written.push(path);
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

fn output_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// A plain-text table with right-aligned numeric-looking cells.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row<S: Into<String>>(&mut self, cells: impl IntoIterator<Item = S>) {
        self.rows.push(cells.into_iter().map(Into::into).collect());
    }

    pub fn render(&self) -> String {
        let cols = self.header.len();
        let mut width = vec![0; cols];
        for r in std::iter::once(&self.header).chain(&self.rows) {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |r: &[String]| {
            let cells: Vec<String> = r
                .iter()
                .zip(&width)
                .enumerate()
                .map(|(i, (c, &w))| {
                    if i > 0 && looks_numeric(c) {
                        format!("{c:>w$}")
                    } else {
                        format!("{c:<w$}")
                    }
                })
                .collect();
            cells.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
        out.push_str(&rule.join("  "));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

fn looks_numeric(s: &str) -> bool {
    let s = s.trim_start_matches(['-', '+']);
    !s.is_empty() && s.chars().next().is_some_and(|c| c.is_ascii_digit())
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn fmt_pm(mean: f64, std: f64) -> String {
    format!("{mean:.4} ± {std:.4}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_aligns_columns() {
        let mut t = Table::new(["concept", "acc"]);
        t.row(["a", "0.5000"]);
        t.row(["longer", "1.0000"]);
        let s = t.render();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "concept  acc");
        assert_eq!(lines[2], "a        0.5000");
        assert_eq!(lines[3], "longer   1.0000");
    }
}
