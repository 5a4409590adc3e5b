//! Loading raw spatial-transcriptomics sections.
//!
//! A section is three files: a tissue image, a count table and a spot table.
//! Sections are listed in a JSON manifest and assembled into a [`Dataset`]
//! holding one row per spot.

mod archive;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use archive::{read_archive, write_archive, ArchiveMeta, SpotArchive};

/// One tissue section and the files that describe it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionRecord {
    pub patient_id: String,
    pub section_id: String,
    #[serde(rename = "image")]
    pub image_path: PathBuf,
    #[serde(rename = "counts")]
    pub counts_path: PathBuf,
    #[serde(rename = "spots")]
    pub spots_path: PathBuf,
}

/// Gene × spot read counts for a single section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    pub gene_ids: Vec<String>,
    pub spot_ids: Vec<String>,
    /// genes × spots
    pub counts: Array2<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpotRecord {
    pub spot_id: String,
    pub array_row: i64,
    pub array_col: i64,
    pub pixel_x: u32,
    pub pixel_y: u32,
    pub patient_id: String,
    pub section_id: String,
}

/// Ensembl ID → HGNC symbol.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GeneIdMap {
    pub entries: HashMap<String, String>,
}

/// Which axis of a count table carries the gene ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneAxis {
    /// One row per gene; the header row lists spot ids.
    Rows,
    /// One column per gene; the header row lists gene ids.
    Cols,
}

impl std::str::FromStr for GeneAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rows" => Ok(GeneAxis::Rows),
            "cols" => Ok(GeneAxis::Cols),
            other => Err(Error::Argument(format!(
                "genes-as must be `rows` or `cols`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnmappedPolicy {
    #[default]
    Drop,
    Keep,
}

/// Assembled multi-section dataset, one row per spot.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub genes: Vec<String>,
    pub spots: Vec<SpotRecord>,
    /// spots × genes
    pub counts: Array2<u32>,
}

impl Dataset {
    pub fn n_genes(&self) -> usize {
        self.genes.len()
    }

    pub fn n_spots(&self) -> usize {
        self.spots.len()
    }

    /// Sorted distinct patient ids.
    pub fn patients(&self) -> Vec<String> {
        let mut p: Vec<String> = self
            .spots
            .iter()
            .map(|s| s.patient_id.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        p.sort();
        p
    }

    pub fn spot_totals(&self) -> Vec<u64> {
        self.counts
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&c| c as u64).sum())
            .collect()
    }

    /// Keep the given spot rows, in the given order.
    pub fn select_spots(&self, rows: &[usize]) -> Dataset {
        Dataset {
            genes: self.genes.clone(),
            spots: rows.iter().map(|&i| self.spots[i].clone()).collect(),
            counts: self.counts.select(ndarray::Axis(0), rows),
        }
    }

    /// Keep the given gene columns, in the given order.
    pub fn select_genes(&self, cols: &[usize]) -> Dataset {
        Dataset {
            genes: cols.iter().map(|&j| self.genes[j].clone()).collect(),
            spots: self.spots.clone(),
            counts: self.counts.select(ndarray::Axis(1), cols),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn find_duplicate(ids: &[String]) -> Option<&str> {
    let mut seen = HashSet::new();
    ids.iter()
        .find(|id| !seen.insert(id.as_str()))
        .map(|s| s.as_str())
}

/// Parse a tab-separated count table and normalize it to genes × spots.
pub fn load_count_matrix(path: &Path, axis: GeneAxis) -> Result<CountMatrix> {
    let text = read_text(path)?;
    let mut it = lines(&text);
    let (_, header) = it
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty count table"))?;
    let col_ids: Vec<String> = header.split('\t').skip(1).map(str::to_owned).collect();
    if col_ids.is_empty() {
        return Err(parse_err(path, 1, "header has no data columns"));
    }
    let mut row_ids = Vec::new();
    let mut values: Vec<u32> = Vec::new();
    for (ln, line) in it {
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().to_owned();
        let start = values.len();
        for f in fields {
            let v: i64 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(path, ln, format!("`{f}` is not an integer count")))?;
            if v < 0 {
                return Err(Error::Validation(format!(
                    "{}:{ln}: negative count {v} for `{id}`",
                    path.display()
                )));
            }
            let v = u32::try_from(v).map_err(|_| parse_err(path, ln, "count overflows u32"))?;
            values.push(v);
        }
        if values.len() - start != col_ids.len() {
            return Err(parse_err(
                path,
                ln,
                format!(
                    "expected {} values, found {}",
                    col_ids.len(),
                    values.len() - start
                ),
            ));
        }
        row_ids.push(id);
    }
    if row_ids.is_empty() {
        return Err(parse_err(path, 2, "count table has no data rows"));
    }
    let table = Array2::from_shape_vec((row_ids.len(), col_ids.len()), values)
        .expect("row lengths checked above");
    let (gene_ids, spot_ids, counts) = match axis {
        GeneAxis::Rows => (row_ids, col_ids, table),
        GeneAxis::Cols => (
            col_ids,
            row_ids,
            table.reversed_axes().as_standard_layout().to_owned(),
        ),
    };
    if let Some(dup) = find_duplicate(&gene_ids) {
        return Err(Error::Validation(format!(
            "{}: duplicate gene id `{dup}`",
            path.display()
        )));
    }
    if let Some(dup) = find_duplicate(&spot_ids) {
        return Err(Error::Validation(format!(
            "{}: duplicate spot id `{dup}`",
            path.display()
        )));
    }
    Ok(CountMatrix {
        gene_ids,
        spot_ids,
        counts,
    })
}

const SPOT_COLUMNS: [&str; 5] = ["spot_id", "array_row", "array_col", "pixel_x", "pixel_y"];

/// Parse a spot coordinate table and stamp each row with the section identity.
pub fn load_spot_table(path: &Path, section: &SectionRecord) -> Result<Vec<SpotRecord>> {
    let text = read_text(path)?;
    let mut it = lines(&text);
    let (_, header) = it
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty spot table"))?;
    let names: Vec<&str> = header.split('\t').map(str::trim).collect();
    let mut idx = [0usize; 5];
    for (slot, col) in idx.iter_mut().zip(SPOT_COLUMNS) {
        *slot = names
            .iter()
            .position(|n| *n == col)
            .ok_or_else(|| Error::Schema(format!("{}: missing column `{col}`", path.display())))?;
    }
    let mut out = Vec::new();
    for (ln, line) in it {
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != names.len() {
            return Err(parse_err(
                path,
                ln,
                format!("expected {} fields, found {}", names.len(), fields.len()),
            ));
        }
        let int = |k: usize| -> Result<i64> {
            let f = fields[idx[k]];
            f.parse().map_err(|_| {
                parse_err(
                    path,
                    ln,
                    format!("`{}` = `{f}` is not an integer", SPOT_COLUMNS[k]),
                )
            })
        };
        let (row, col, px, py) = (int(1)?, int(2)?, int(3)?, int(4)?);
        if px < 0 || py < 0 {
            return Err(Error::Validation(format!(
                "{}:{ln}: negative pixel coordinate ({px}, {py})",
                path.display()
            )));
        }
        let to_u32 = |v: i64| {
            u32::try_from(v).map_err(|_| parse_err(path, ln, "pixel coordinate too large"))
        };
        out.push(SpotRecord {
            spot_id: fields[idx[0]].to_owned(),
            array_row: row,
            array_col: col,
            pixel_x: to_u32(px)?,
            pixel_y: to_u32(py)?,
            patient_id: section.patient_id.clone(),
            section_id: section.section_id.clone(),
        });
    }
    Ok(out)
}

/// Parse a two-column `ensembl_id<TAB>symbol` table. A header row is optional.
pub fn load_gene_map(path: &Path) -> Result<GeneIdMap> {
    let text = read_text(path)?;
    let mut entries = HashMap::new();
    for (ln, line) in lines(&text) {
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(parse_err(path, ln, "expected two columns"));
        }
        if ln == 1 && fields[0] == "ensembl_id" {
            continue;
        }
        if fields[1].is_empty() {
            return Err(Error::Validation(format!(
                "{}:{ln}: empty symbol for `{}`",
                path.display(),
                fields[0]
            )));
        }
        if entries
            .insert(fields[0].to_owned(), fields[1].to_owned())
            .is_some()
        {
            return Err(Error::Validation(format!(
                "{}:{ln}: duplicate Ensembl id `{}`",
                path.display(),
                fields[0]
            )));
        }
    }
    Ok(GeneIdMap { entries })
}

/// Rename Ensembl ids to symbols. Rows that collapse onto the same symbol are
/// summed; the merged row sits where the symbol first appeared.
pub fn map_gene_symbols(m: &CountMatrix, map: &GeneIdMap, policy: UnmappedPolicy) -> CountMatrix {
    let mut order: Vec<String> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    let mut sources: Vec<Vec<usize>> = Vec::new();
    for (i, id) in m.gene_ids.iter().enumerate() {
        let symbol = match (map.entries.get(id), policy) {
            (Some(s), _) => s.clone(),
            (None, UnmappedPolicy::Keep) => id.clone(),
            (None, UnmappedPolicy::Drop) => continue,
        };
        let k = *slot.entry(symbol.clone()).or_insert_with(|| {
            order.push(symbol);
            sources.push(Vec::new());
            order.len() - 1
        });
        sources[k].push(i);
    }
    let mut counts = Array2::<u32>::zeros((order.len(), m.spot_ids.len()));
    for (k, rows) in sources.iter().enumerate() {
        let mut dst = counts.row_mut(k);
        for &i in rows {
            dst += &m.counts.row(i);
        }
    }
    CountMatrix {
        gene_ids: order,
        spot_ids: m.spot_ids.clone(),
        counts,
    }
}

/// Manifest listing the sections of a dataset. Relative paths are resolved
/// against the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gene_map: Option<PathBuf>,
    pub sections: Vec<SectionRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = read_text(path)?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(g) = m.gene_map.as_mut() {
            resolve(g);
        }
        for s in &mut m.sections {
            resolve(&mut s.image_path);
            resolve(&mut s.counts_path);
            resolve(&mut s.spots_path);
        }
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.sections {
            if !seen.insert((&s.patient_id, &s.section_id)) {
                return Err(Error::Validation(format!(
                    "duplicate section ({}, {})",
                    s.patient_id, s.section_id
                )));
            }
            for p in [&s.image_path, &s.counts_path, &s.spots_path] {
                fs::File::open(p).map_err(|e| Error::io(p, e))?;
            }
        }
        if self.sections.is_empty() {
            return Err(Error::EmptyDataset("manifest lists no sections".into()));
        }
        Ok(())
    }
}

/// Outcome of assembling a dataset.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub dataset: Dataset,
    /// Spots present in a coordinate table but absent from the count matrix.
    pub dropped_spots: Vec<(String, String)>,
}

/// Load every section (in parallel) and join spots to count columns.
///
/// The gene axis is the union of all sections' genes in first-seen order;
/// genes missing from a section count as zero there.
pub fn assemble(manifest: &Manifest, axis: GeneAxis, policy: UnmappedPolicy) -> Result<Assembly> {
    let gene_map = manifest
        .gene_map
        .as_deref()
        .map(load_gene_map)
        .transpose()?;
    let loaded: Vec<(CountMatrix, Vec<SpotRecord>)> = manifest
        .sections
        .par_iter()
        .map(|s| {
            let mut m = load_count_matrix(&s.counts_path, axis)?;
            if let Some(map) = &gene_map {
                m = map_gene_symbols(&m, map, policy);
            }
            let spots = load_spot_table(&s.spots_path, s)?;
            Ok((m, spots))
        })
        .collect::<Result<_>>()?;

    let mut genes: Vec<String> = Vec::new();
    let mut gene_slot: HashMap<String, usize> = HashMap::new();
    for (m, _) in &loaded {
        for g in &m.gene_ids {
            if !gene_slot.contains_key(g) {
                gene_slot.insert(g.clone(), genes.len());
                genes.push(g.clone());
            }
        }
    }

    let mut spots = Vec::new();
    let mut rows: Vec<u32> = Vec::new();
    let mut dropped = Vec::new();
    for (m, table) in &loaded {
        let col_of: HashMap<&str, usize> = m
            .spot_ids
            .iter()
            .enumerate()
            .map(|(j, s)| (s.as_str(), j))
            .collect();
        let gene_cols: Vec<usize> = m.gene_ids.iter().map(|g| gene_slot[g]).collect();
        let mut seen = HashSet::new();
        for rec in table {
            if !seen.insert(rec.spot_id.as_str()) {
                return Err(Error::Validation(format!(
                    "section {}: duplicate spot `{}` in coordinate table",
                    rec.section_id, rec.spot_id
                )));
            }
            let Some(&j) = col_of.get(rec.spot_id.as_str()) else {
                log::warn!(
                    "section {}: spot `{}` has no count column; dropped",
                    rec.section_id,
                    rec.spot_id
                );
                dropped.push((rec.section_id.clone(), rec.spot_id.clone()));
                continue;
            };
            let mut row = vec![0u32; genes.len()];
            for (i, &g) in gene_cols.iter().enumerate() {
                row[g] = m.counts[[i, j]];
            }
            rows.extend(row);
            spots.push(rec.clone());
        }
    }
    if spots.is_empty() {
        return Err(Error::EmptyDataset(
            "no spot joined to a count column".into(),
        ));
    }
    let counts =
        Array2::from_shape_vec((spots.len(), genes.len()), rows).expect("one row per joined spot");
    Ok(Assembly {
        dataset: Dataset {
            genes,
            spots,
            counts,
        },
        dropped_spots: dropped,
    })
}

/// Serialize a count matrix as a genes-as-rows TSV.
pub fn write_count_table(m: &CountMatrix) -> String {
    let mut out = String::from("gene");
    for s in &m.spot_ids {
        out.push('\t');
        out.push_str(s);
    }
    out.push('\n');
    for (g, row) in m.gene_ids.iter().zip(m.counts.rows()) {
        out.push_str(g);
        for v in row {
            out.push('\t');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}
