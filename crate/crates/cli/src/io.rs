use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use stexpr::eval::MetricsReport;
use stexpr::rng::sha256_hex;
use stexpr::Split;

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of a directory's regular files, in name order (not recursive).
pub fn sha256_dir(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut joined = String::new();
    for p in names {
        let name = p
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        joined.push_str(&format!("{name}:{}\n", sha256_file(&p)?));
    }
    Ok(sha256_hex(joined.as_bytes()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

/// `dir/stem.suffix` for a sibling of `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// What `evaluate` writes: the metrics plus the per-spot predictions that
/// `render` draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub split: Split,
    pub checkpoint_sha256: String,
    pub targets_fingerprint: String,
    /// `(section, spot)` per prediction row.
    pub spots: Vec<(String, String)>,
    pub main_genes: Vec<String>,
    /// Transformed-space predictions, spots × main genes.
    pub predictions: Array2<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_genes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_predictions: Option<Array2<f64>>,
}
