//! CSV tables, atomic file writes and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};

/// Renders a float with 17 significant digits, enough to round-trip.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// In-memory CSV table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|h| h.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width must match header");
        self.rows.push(row);
    }

    pub fn push_nums(&mut self, row: &[f64]) {
        self.push(row.iter().map(|&v| num(v)).collect());
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j].as_str()).collect())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

/// Collects the files a command produces in its output directory.
#[derive(Debug)]
pub struct OutputDir {
    dir: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        write_atomic(&self.path(name), contents)?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        self.write(name, &t.to_csv()?)
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }
}

/// Summary of one run, written as `manifest.txt` when it ends.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub config: Vec<(String, String)>,
    pub wall_clock: Duration,
    /// `(epoch, name, value)`.
    pub epochs: Vec<(usize, String, f64)>,
    pub metrics: Vec<(String, String)>,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn metric(&mut self, name: &str, value: impl ToString) {
        self.metrics.push((name.to_string(), value.to_string()));
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.metrics.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("command = {}\n", self.command));
        s.push_str(&format!("status = {}\n", self.status));
        s.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
        s.push_str(&format!("wall_clock_s = {:.3}\n", self.wall_clock.as_secs_f64()));
        s.push_str("\n[config]\n");
        for (k, v) in &self.config {
            s.push_str(&format!("{k} = {v}\n"));
        }
        if !self.epochs.is_empty() {
            s.push_str("\n[epochs]\n");
            for (e, k, v) in &self.epochs {
                s.push_str(&format!("epoch.{e}.{k} = {}\n", num(*v)));
            }
        }
        s.push_str("\n[summary]\n");
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str("\n[files]\n");
        for f in &self.files {
            s.push_str(&format!("{f}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn csv_has_header_and_quotes_when_needed() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["x,y".into(), num(0.5)]);
        assert_eq!(t.to_csv().unwrap(), "a,b\n\"x,y\",5.0000000000000000e-1\n");
        assert_eq!(t.column("b").unwrap(), vec!["5.0000000000000000e-1"]);
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let d = tempfile::tempdir().unwrap();
        let mut o = OutputDir::create(d.path()).unwrap();
        o.write("m.txt", "hello").unwrap();
        assert_eq!(std::fs::read_to_string(d.path().join("m.txt")).unwrap(), "hello");
        assert!(!d.path().join("m.tmp").exists());
    }
}
