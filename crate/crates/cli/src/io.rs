//! Small text formats, JSON emission, and the output-directory lock.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use embalance::{validate, EmbeddingSet};
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Newline-delimited non-negative integers.
pub fn write_index_list(path: &Path, values: &[usize]) -> CliResult<()> {
    let mut text = String::with_capacity(values.len() * 8);
    for v in values {
        text.push_str(&v.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_index_list(path: &Path) -> CliResult<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<usize>().map_err(|e| CliError::Parse {
                path: path.into(),
                line: i + 1,
                message: format!("{e}: {l:?}"),
            })
        })
        .collect()
}

/// Rows of floats separated by commas and/or whitespace. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_float_text(path: &Path) -> CliResult<EmbeddingSet> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut data = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let before = data.len();
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()) {
            if tok.is_empty() {
                continue;
            }
            let v: f32 = tok.parse().map_err(|e| CliError::Parse {
                path: path.into(),
                line: i + 1,
                message: format!("{e}: {tok:?}"),
            })?;
            data.push(v);
        }
        let width = data.len() - before;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(CliError::Parse {
                    path: path.into(),
                    line: i + 1,
                    message: format!("row has {width} values, expected {d}"),
                })
            }
            _ => {}
        }
    }
    let dim = dim.ok_or_else(|| CliError::Parse {
        path: path.into(),
        line: 0,
        message: "no rows".into(),
    })?;
    Ok(EmbeddingSet::new(dim, data)?)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Writes the JSON to `out`, or stdout when `None`.
pub fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let text = to_json(value);
    match out {
        Some(p) => fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| CliError::io("<stdout>", e))
        }
    }
}

/// Loads an embedding file, normalizing on request. Without `normalize`
/// the rows must already be clean and unit-norm.
pub fn load_embeddings(path: &Path, normalize: bool) -> CliResult<EmbeddingSet> {
    let set = embalance::read_embeddings(path)?;
    let report = validate(&set);
    if report.nan_count > 0 || report.inf_count > 0 {
        return Err(CliError::Validation(format!(
            "{}: {} NaN and {} infinite values",
            path.display(),
            report.nan_count,
            report.inf_count
        )));
    }
    if normalize {
        return Ok(embalance::normalize(&set)?);
    }
    if !report.is_normalized() {
        return Err(CliError::Validation(format!(
            "{}: rows are not unit-norm (max deviation {:.3e}, {} zero rows); pass --normalize",
            path.display(),
            report.norm_deviation_max,
            report.zero_rows.len()
        )));
    }
    Ok(set)
}

/// Exclusive lock on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    pub const NAME: &'static str = ".embalance.lock";

    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(Self::NAME);
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => CliError::Locked(path.clone()),
                _ => CliError::io(&path, e),
            })?;
        let _ = writeln!(file, "{}", std::process::id());
        Ok(Self { path, _file: file })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_list_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("keep.txt");
        write_index_list(&p, &[0, 5, 17]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "0\n5\n17\n");
        assert_eq!(read_index_list(&p).unwrap(), vec![0, 5, 17]);
    }

    #[test]
    fn float_text_accepts_mixed_separators() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        fs::write(&p, "# header\n1, 2 3\n\n4\t5,6\n").unwrap();
        let s = parse_float_text(&p).unwrap();
        assert_eq!((s.len(), s.dim()), (2, 3));
        fs::write(&p, "1 2\n3\n").unwrap();
        assert!(matches!(parse_float_text(&p), Err(CliError::Parse { line: 2, .. })));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let first = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(CliError::Locked(_))));
        drop(first);
        DirLock::acquire(dir.path()).unwrap();
    }
}
