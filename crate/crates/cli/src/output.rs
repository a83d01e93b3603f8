//! CSV writers and the file manifest. Floats use 17 significant digits so
//! repeated runs are byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use kvnsim::dynamics::GridDensity;
use kvnsim::propagation::WaveFunction;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::CliError;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn dims(w: &kvnsim::grid::PhaseSpaceGrid) -> String {
    (0..w.dim()).map(|j| w.levels(j).to_string()).collect::<Vec<_>>().join("x")
}

/// Header, then one `re,im` line per node in flat-index order.
pub fn wavefunction_csv(psi: &WaveFunction, hash: &str) -> String {
    let g = psi.grid();
    let mut s = format!(
        "# N={},dims={},time={},config_sha256={hash}\n",
        g.len(),
        dims(g),
        fmt_f64(psi.time)
    );
    s.reserve(psi.len() * 48);
    for a in &psi.amplitudes {
        writeln!(s, "{},{}", fmt_f64(a.re), fmt_f64(a.im)).unwrap();
    }
    s
}

pub fn density_csv(d: &GridDensity, time: f64, hash: &str) -> String {
    let g = &d.grid;
    let mut s = format!(
        "# N={},dims={},time={},config_sha256={hash}\n",
        g.len(),
        dims(g),
        fmt_f64(time)
    );
    s.reserve(d.values.len() * 24);
    for v in &d.values {
        writeln!(s, "{}", fmt_f64(*v)).unwrap();
    }
    s
}

/// Header line, column names, then rows.
pub fn table_csv(hash: &str, columns: &[String], rows: &[Vec<f64>]) -> String {
    let mut s = format!("# config_sha256={hash}\n{}\n", columns.join(","));
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(s, "{}", line.join(",")).unwrap();
    }
    s
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    /// Written by a run that later aborted.
    pub partial: bool,
}

/// Writes files under one directory and records them.
pub struct OutputDir {
    root: PathBuf,
    pub manifest: Vec<ManifestEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|source| CliError::Write {
            path: root.display().to_string(),
            source,
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> Result<(), CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| CliError::Write {
                path: parent.display().to_string(),
                source,
            })?;
        }
        std::fs::write(&path, contents).map_err(|source| CliError::Write {
            path: path.display().to_string(),
            source,
        })?;
        self.manifest.push(ManifestEntry {
            path: rel.to_string(),
            sha256: hex(&Sha256::digest(contents.as_bytes())),
            bytes: contents.len() as u64,
            partial: false,
        });
        Ok(())
    }

    pub fn mark_partial(&mut self) {
        for e in &mut self.manifest {
            e.partial = true;
        }
    }
}
