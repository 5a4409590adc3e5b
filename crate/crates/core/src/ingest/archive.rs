//! Per-spot archive: a zip container with one raw little-endian array per
//! entry and a `manifest.json` recording dtype, shape and CRC-32 of each.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;

use super::{Dataset, SpotRecord};
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "stexpr-archive/1";

/// Free-form provenance stored alongside the arrays (seed, thresholds,
/// input hashes). Sorted for stable serialization.
pub type ArchiveMeta = BTreeMap<String, String>;

/// The archive's array view of a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpotArchive {
    /// spots × genes
    pub count: Array2<u32>,
    /// spots × 2 (x, y)
    pub pixel: Array2<u32>,
    pub patient: Vec<String>,
    /// spots × 3 (section index, array row, array col)
    pub index: Array2<i64>,
    pub gene: Vec<String>,
    pub spot: Vec<String>,
    /// Section ids referenced by `index[:, 0]`.
    pub section: Vec<String>,
    pub meta: ArchiveMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    crc32: u32,
    bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    format: String,
    arrays: Vec<Entry>,
    meta: ArchiveMeta,
}

const REQUIRED: [&str; 7] = [
    "count", "pixel", "patient", "index", "gene", "spot", "section",
];

impl SpotArchive {
    pub fn from_dataset(d: &Dataset, meta: ArchiveMeta) -> SpotArchive {
        let mut section: Vec<String> = Vec::new();
        let n = d.spots.len();
        let mut pixel = Array2::zeros((n, 2));
        let mut index = Array2::zeros((n, 3));
        for (i, s) in d.spots.iter().enumerate() {
            let k = match section.iter().position(|x| *x == s.section_id) {
                Some(k) => k,
                None => {
                    section.push(s.section_id.clone());
                    section.len() - 1
                }
            };
            pixel[[i, 0]] = s.pixel_x;
            pixel[[i, 1]] = s.pixel_y;
            index[[i, 0]] = k as i64;
            index[[i, 1]] = s.array_row;
            index[[i, 2]] = s.array_col;
        }
        SpotArchive {
            count: d.counts.clone(),
            pixel,
            patient: d.spots.iter().map(|s| s.patient_id.clone()).collect(),
            index,
            gene: d.genes.clone(),
            spot: d.spots.iter().map(|s| s.spot_id.clone()).collect(),
            section,
            meta,
        }
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        let n = self.spot.len();
        let check = |name: &str, len: usize| {
            if len != n {
                return Err(Error::Schema(format!(
                    "array `{name}` has {len} rows, expected {n}"
                )));
            }
            Ok(())
        };
        check("count", self.count.nrows())?;
        check("pixel", self.pixel.nrows())?;
        check("patient", self.patient.len())?;
        check("index", self.index.nrows())?;
        if self.count.ncols() != self.gene.len() {
            return Err(Error::Schema(format!(
                "array `count` has {} columns, `gene` has {} entries",
                self.count.ncols(),
                self.gene.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        let mut spots = Vec::with_capacity(n);
        for i in 0..n {
            let k = usize::try_from(self.index[[i, 0]])
                .ok()
                .filter(|&k| k < self.section.len())
                .ok_or_else(|| Error::Schema(format!("spot {i}: section index out of range")))?;
            if !seen.insert((k, &self.spot[i])) {
                return Err(Error::Validation(format!(
                    "spot `{}` appears twice in section `{}`",
                    self.spot[i], self.section[k]
                )));
            }
            spots.push(SpotRecord {
                spot_id: self.spot[i].clone(),
                array_row: self.index[[i, 1]],
                array_col: self.index[[i, 2]],
                pixel_x: self.pixel[[i, 0]],
                pixel_y: self.pixel[[i, 1]],
                patient_id: self.patient[i].clone(),
                section_id: self.section[k].clone(),
            });
        }
        Ok(Dataset {
            genes: self.gene.clone(),
            spots,
            counts: self.count.clone(),
        })
    }
}

fn encode_u32(a: &Array2<u32>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn encode_i64(a: &Array2<i64>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn encode_str(v: &[String]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in v {
        out.extend((s.len() as u32).to_le_bytes());
        out.extend(s.as_bytes());
    }
    out
}

fn decode_str(name: &str, bytes: &[u8], n: usize) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(n);
    let mut pos = 0;
    let bad = || Error::Schema(format!("array `{name}` is truncated"));
    for _ in 0..n {
        let len = u32::from_le_bytes(bytes.get(pos..pos + 4).ok_or_else(bad)?.try_into().unwrap())
            as usize;
        pos += 4;
        let s = bytes.get(pos..pos + len).ok_or_else(bad)?;
        out.push(
            String::from_utf8(s.to_vec())
                .map_err(|_| Error::Schema(format!("array `{name}` holds invalid UTF-8")))?,
        );
        pos += len;
    }
    if pos != bytes.len() {
        return Err(Error::Schema(format!("array `{name}` has trailing bytes")));
    }
    Ok(out)
}

fn decode_fixed<T, const W: usize>(
    name: &str,
    bytes: &[u8],
    shape: &[usize],
    from: fn([u8; W]) -> T,
) -> Result<Array2<T>> {
    let [r, c] = shape else {
        return Err(Error::Schema(format!("array `{name}` must be 2-D")));
    };
    if bytes.len() != r * c * W {
        return Err(Error::Schema(format!(
            "array `{name}` size does not match its shape"
        )));
    }
    let v: Vec<T> = bytes
        .chunks_exact(W)
        .map(|ch| from(ch.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((*r, *c), v).expect("length checked"))
}

/// Write `archive` to `out`. The container is byte-for-byte deterministic.
pub fn write_archive(archive: &SpotArchive, out: &Path) -> Result<()> {
    if archive.spot.is_empty() {
        return Err(Error::EmptyDataset(
            "refusing to write an empty archive".into(),
        ));
    }
    let arrays: Vec<(&str, &str, Vec<usize>, Vec<u8>)> = vec![
        (
            "count",
            "u32",
            archive.count.shape().to_vec(),
            encode_u32(&archive.count),
        ),
        (
            "pixel",
            "u32",
            archive.pixel.shape().to_vec(),
            encode_u32(&archive.pixel),
        ),
        (
            "patient",
            "str",
            vec![archive.patient.len()],
            encode_str(&archive.patient),
        ),
        (
            "index",
            "i64",
            archive.index.shape().to_vec(),
            encode_i64(&archive.index),
        ),
        (
            "gene",
            "str",
            vec![archive.gene.len()],
            encode_str(&archive.gene),
        ),
        (
            "spot",
            "str",
            vec![archive.spot.len()],
            encode_str(&archive.spot),
        ),
        (
            "section",
            "str",
            vec![archive.section.len()],
            encode_str(&archive.section),
        ),
    ];
    let manifest = ManifestFile {
        format: FORMAT.into(),
        arrays: arrays
            .iter()
            .map(|(name, dtype, shape, bytes)| Entry {
                name: name.to_string(),
                dtype: dtype.to_string(),
                shape: shape.clone(),
                crc32: crc32fast::hash(bytes),
                bytes: bytes.len() as u64,
            })
            .collect(),
        meta: archive.meta.clone(),
    };
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut zip = zip::ZipWriter::new(file);
    let opts = SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default())
        .unix_permissions(0o644);
    zip.start_file(MANIFEST, opts)?;
    zip.write_all(&serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(out, e))?;
    for (name, _, _, bytes) in &arrays {
        zip.start_file(format!("{name}.bin"), opts)?;
        zip.write_all(bytes).map_err(|e| Error::io(out, e))?;
    }
    zip.finish()?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<SpotArchive> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut zip = zip::ZipArchive::new(file).map_err(|e| {
        Error::Integrity(format!("{}: not a readable archive ({e})", path.display()))
    })?;
    let mut read_entry = |name: &str| -> Result<Option<Vec<u8>>> {
        let mut f = match zip.by_name(name) {
            Ok(f) => f,
            Err(zip::result::ZipError::FileNotFound) => return Ok(None),
            Err(e) => return Err(Error::Integrity(format!("{name}: {e}"))),
        };
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)
            .map_err(|e| Error::Integrity(format!("{name}: {e}")))?;
        Ok(Some(buf))
    };
    let manifest: ManifestFile = match read_entry(MANIFEST)? {
        Some(b) => serde_json::from_slice(&b)
            .map_err(|e| Error::Schema(format!("unreadable manifest: {e}")))?,
        None => return Err(Error::Schema("archive has no manifest.json".into())),
    };
    if manifest.format != FORMAT {
        return Err(Error::Schema(format!(
            "unsupported format `{}`",
            manifest.format
        )));
    }
    let mut raw: BTreeMap<&str, (&Entry, Vec<u8>)> = BTreeMap::new();
    for name in REQUIRED {
        let entry = manifest
            .arrays
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Schema(format!("archive is missing the `{name}` array")))?;
        let bytes = read_entry(&format!("{name}.bin"))?
            .ok_or_else(|| Error::Schema(format!("archive is missing the `{name}` array")))?;
        if bytes.len() as u64 != entry.bytes || crc32fast::hash(&bytes) != entry.crc32 {
            return Err(Error::Integrity(format!(
                "array `{name}`: checksum mismatch"
            )));
        }
        raw.insert(name, (entry, bytes));
    }
    let strs = |name: &str| {
        let (e, b) = &raw[name];
        decode_str(name, b, e.shape.first().copied().unwrap_or(0))
    };
    let u32s = |name: &str| {
        let (e, b) = &raw[name];
        decode_fixed(name, b, &e.shape, u32::from_le_bytes)
    };
    let (ie, ib) = &raw["index"];
    let archive = SpotArchive {
        count: u32s("count")?,
        pixel: u32s("pixel")?,
        patient: strs("patient")?,
        index: decode_fixed("index", ib, &ie.shape, i64::from_le_bytes)?,
        gene: strs("gene")?,
        spot: strs("spot")?,
        section: strs("section")?,
        meta: manifest.meta,
    };
    archive.to_dataset()?;
    Ok(archive)
}
