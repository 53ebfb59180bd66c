//! CSV tables and atomic artifact emission.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::{io_failure, Failure};

/// A CSV table. Numbers use the shortest representation that parses back
/// to the same value.
#[derive(Debug, Clone)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

/// A CSV cell.
pub trait Cell {
    fn cell(&self) -> String;
}

impl Cell for f64 {
    fn cell(&self) -> String {
        format!("{self:?}")
    }
}

impl Cell for usize {
    fn cell(&self) -> String {
        self.to_string()
    }
}

impl Cell for &str {
    fn cell(&self) -> String {
        self.to_string()
    }
}

impl Cell for String {
    fn cell(&self) -> String {
        self.clone()
    }
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Renders the table after two comment lines carrying the seed and the
    /// resolved configuration.
    pub fn finish(self, cfg: &RunConfig) -> Vec<u8> {
        let config = serde_json::to_string(cfg).expect("configuration serializes");
        let mut out = format!(
            "# mfc {} model={} seed={}\n# config={config}\n",
            cfg.experiment.name(),
            cfg.model.name(),
            cfg.seed
        );
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out.into_bytes()
    }
}

/// Builds a row from heterogeneous cells.
#[macro_export]
macro_rules! row {
    ($($v:expr),* $(,)?) => {
        vec![$($crate::output::Cell::cell(&$v)),*]
    };
}

#[derive(Debug, Clone)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn new(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            bytes,
        }
    }
}

/// Writes every artifact to a hidden temporary file in `dir`, then renames
/// them into place. Nothing is renamed unless every write succeeded.
pub fn write_atomic(dir: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>, Failure> {
    fs::create_dir_all(dir).map_err(io_failure(dir))?;
    let pid = std::process::id();
    let mut staged = Vec::with_capacity(artifacts.len());
    let cleanup = |staged: &[(PathBuf, PathBuf)]| {
        for (tmp, _) in staged {
            let _ = fs::remove_file(tmp);
        }
    };
    for a in artifacts {
        let tmp = dir.join(format!(".{}.{pid}.tmp", a.name));
        let dst = dir.join(&a.name);
        let written = fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&a.bytes).and_then(|_| f.sync_all()));
        if let Err(e) = written {
            cleanup(&staged);
            let _ = fs::remove_file(&tmp);
            return Err(io_failure(&tmp)(e));
        }
        staged.push((tmp, dst));
    }
    for (i, (tmp, dst)) in staged.iter().enumerate() {
        if let Err(e) = fs::rename(tmp, dst) {
            cleanup(&staged[i..]);
            return Err(io_failure(dst)(e));
        }
    }
    Ok(staged.into_iter().map(|(_, dst)| dst).collect())
}
