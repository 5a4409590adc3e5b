//! Seeded synthetic datasets with a known, learnable image → expression link.
//!
//! Each section is a white slide with a block of tissue cut into one square
//! cell per spot. A cell is a random mix of nucleus-like and cytoplasm-like
//! pixels rendered with Beer–Lambert H&E absorption; the nuclear fraction is
//! drawn per spot. Main-gene counts are an affine function of the mean RGB of
//! the spot's patch (plus multiplicative noise); auxiliary genes follow the
//! same recipe at lower depth and higher noise.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_count_table, CountMatrix, Manifest, SectionRecord, SpotRecord};
use crate::rng::{self, stream};

/// Reference haematoxylin and eosin OD directions (unnormalized).
pub const HEMATOXYLIN: [f64; 3] = [0.65, 0.70, 0.29];
pub const EOSIN: [f64; 3] = [0.07, 0.99, 0.11];

/// `(c_H, c_E)` for the two tissue components.
const NUCLEUS: (f64, f64) = (1.0, 0.2);
const CYTOPLASM: (f64, f64) = (0.1, 0.6);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    /// Spots per section.
    pub spots: usize,
    pub main_genes: usize,
    pub aux_genes: usize,
    pub patients: usize,
    pub sections_per_patient: usize,
    /// Relative noise on main-gene counts.
    pub noise: f64,
    /// Relative noise on auxiliary-gene counts.
    pub aux_noise: f64,
    /// Side of the square patch the signal is defined on.
    pub patch_size: u32,
    /// Distance between neighbouring spot centres.
    pub spacing: u32,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            spots: 64,
            main_genes: 20,
            aux_genes: 30,
            patients: 1,
            sections_per_patient: 1,
            noise: 0.02,
            aux_noise: 0.5,
            patch_size: 32,
            spacing: 36,
            seed: 0,
        }
    }
}

impl FixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spots == 0
            || self.main_genes == 0
            || self.patients == 0
            || self.sections_per_patient == 0
        {
            return Err(Error::Argument(
                "spots, genes, patients and sections must all be at least 1".into(),
            ));
        }
        if self.patch_size == 0 || self.spacing < self.patch_size {
            return Err(Error::Argument(format!(
                "spacing {} must be at least the patch size {}",
                self.spacing, self.patch_size
            )));
        }
        if !(self.noise >= 0.0 && self.aux_noise >= 0.0) {
            return Err(Error::Argument("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSection {
    pub patient_id: String,
    pub section_id: String,
    pub image: RgbImage,
    pub spots: Vec<SpotRecord>,
    /// Counts keyed by Ensembl-style ids.
    pub counts: CountMatrix,
    /// Nuclear fraction used for each spot.
    pub latent: Vec<f64>,
    /// Mean RGB (in `[0, 1]`) of each spot's patch.
    pub patch_color: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub config: FixtureConfig,
    pub sections: Vec<FixtureSection>,
    /// `(ensembl id, symbol)`, main genes first.
    pub gene_map: Vec<(String, String)>,
    pub main_symbols: Vec<String>,
    pub aux_symbols: Vec<String>,
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

/// Standard normal via Box–Muller.
fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn stain_pixel(ch: f64, ce: f64) -> [f64; 3] {
    let (h, e) = (unit(HEMATOXYLIN), unit(EOSIN));
    [0, 1, 2].map(|c| 255.0 * (-(ch * h[c] + ce * e[c])).exp())
}

/// Noise-free mean colour of a cell with nuclear fraction `t`, in `[0, 1]`.
pub fn expected_color(t: f64) -> [f64; 3] {
    let n = stain_pixel(NUCLEUS.0, NUCLEUS.1);
    let c = stain_pixel(CYTOPLASM.0, CYTOPLASM.1);
    [0, 1, 2].map(|k| (t * n[k] + (1.0 - t) * c[k]) / 255.0)
}

struct GeneRecipe {
    base: f64,
    /// Colour weights; `expression ∝ 1 + a·(colour − mid)`.
    weights: [f64; 3],
    noise: f64,
}

fn recipes<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    base: (f64, f64),
    noise: f64,
) -> Vec<GeneRecipe> {
    let lo = expected_color(0.0);
    let hi = expected_color(1.0);
    let axis = [0, 1, 2].map(|k| hi[k] - lo[k]);
    let norm2: f64 = axis.iter().map(|v| v * v).sum();
    (0..n)
        .map(|_| {
            let gain = rng.random_range(0.8..1.4) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            // Mostly along the nucleus/cytoplasm colour axis, with a small
            // random component so genes are not exact copies of each other.
            let jitter = [0, 1, 2].map(|_| 0.3 * normal(rng));
            let weights = [0, 1, 2].map(|k| gain * axis[k] / norm2 + jitter[k]);
            GeneRecipe {
                base: rng.random_range(base.0..base.1),
                weights,
                noise,
            }
        })
        .collect()
}

fn express<R: Rng + ?Sized>(g: &GeneRecipe, color: &[f64; 3], mid: &[f64; 3], rng: &mut R) -> u32 {
    let s: f64 = (0..3).map(|k| g.weights[k] * (color[k] - mid[k])).sum();
    let v = g.base * (1.0 + s) + g.base * g.noise * normal(rng);
    v.round().max(1.0) as u32
}

pub fn generate(cfg: &FixtureConfig) -> Result<Fixture> {
    cfg.validate()?;
    let mut rng = rng::named(cfg.seed, stream::FIXTURE);
    let main = recipes(&mut rng, cfg.main_genes, (200.0, 600.0), cfg.noise);
    let aux = recipes(&mut rng, cfg.aux_genes, (5.0, 50.0), cfg.aux_noise);
    let n_genes = cfg.main_genes + cfg.aux_genes;
    let gene_map: Vec<(String, String)> = (0..n_genes)
        .map(|j| (format!("ENSG{:011}", 100 + j), format!("GENE{:03}", j + 1)))
        .collect();
    let main_symbols = gene_map[..cfg.main_genes]
        .iter()
        .map(|g| g.1.clone())
        .collect();
    let aux_symbols = gene_map[cfg.main_genes..]
        .iter()
        .map(|g| g.1.clone())
        .collect();
    let mid = {
        let (a, b) = (expected_color(0.0), expected_color(1.0));
        [0, 1, 2].map(|k| 0.5 * (a[k] + b[k]))
    };

    let cols = (cfg.spots as f64).sqrt().ceil() as usize;
    let rows = cfg.spots.div_ceil(cols);
    let margin = cfg.spacing;
    let (w, h) = (
        2 * margin + cols as u32 * cfg.spacing,
        2 * margin + rows as u32 * cfg.spacing,
    );

    let mut sections = Vec::new();
    for p in 0..cfg.patients {
        for s in 0..cfg.sections_per_patient {
            let patient_id = format!("P{:02}", p + 1);
            let section_id = format!("{patient_id}_S{}", s + 1);
            let mut srng = rng::substream(cfg.seed, stream::FIXTURE, &[section_id.as_bytes()]);
            let mut img = RgbImage::from_fn(w, h, |_, _| {
                let v = 255 - srng.random_range(0..8u8);
                Rgb([v, v, v])
            });
            let mut spots = Vec::with_capacity(cfg.spots);
            let mut latent = Vec::with_capacity(cfg.spots);
            let mut colors = Vec::with_capacity(cfg.spots);
            for i in 0..cfg.spots {
                let (r, c) = (i / cols, i % cols);
                let t: f64 = srng.random_range(0.1..0.9);
                let x0 = margin + c as u32 * cfg.spacing;
                let y0 = margin + r as u32 * cfg.spacing;
                for y in y0..y0 + cfg.spacing {
                    for x in x0..x0 + cfg.spacing {
                        let (ch, ce) = if srng.random::<f64>() < t {
                            NUCLEUS
                        } else {
                            CYTOPLASM
                        };
                        let jh = (1.0 + 0.1 * normal(&mut srng)).max(0.0);
                        let je = (1.0 + 0.1 * normal(&mut srng)).max(0.0);
                        let v = stain_pixel(ch * jh, ce * je);
                        img.put_pixel(x, y, Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8)));
                    }
                }
                let cx = x0 + cfg.spacing / 2;
                let cy = y0 + cfg.spacing / 2;
                spots.push(SpotRecord {
                    spot_id: format!("{r}x{c}"),
                    array_row: r as i64,
                    array_col: c as i64,
                    pixel_x: cx,
                    pixel_y: cy,
                    patient_id: patient_id.clone(),
                    section_id: section_id.clone(),
                });
                latent.push(t);
            }
            for sp in &spots {
                let (ox, oy) = (
                    sp.pixel_x - cfg.patch_size / 2,
                    sp.pixel_y - cfg.patch_size / 2,
                );
                let mut sum = [0.0f64; 3];
                for y in oy..oy + cfg.patch_size {
                    for x in ox..ox + cfg.patch_size {
                        let p = img.get_pixel(x, y);
                        for k in 0..3 {
                            sum[k] += p[k] as f64 / 255.0;
                        }
                    }
                }
                let n = (cfg.patch_size * cfg.patch_size) as f64;
                colors.push(sum.map(|v| v / n));
            }
            let mut counts = Array2::zeros((n_genes, cfg.spots));
            for (i, col) in colors.iter().enumerate() {
                for (j, g) in main.iter().chain(aux.iter()).enumerate() {
                    counts[[j, i]] = express(g, col, &mid, &mut srng);
                }
            }
            sections.push(FixtureSection {
                patient_id,
                section_id,
                image: img,
                counts: CountMatrix {
                    gene_ids: gene_map.iter().map(|g| g.0.clone()).collect(),
                    spot_ids: spots.iter().map(|s| s.spot_id.clone()).collect(),
                    counts,
                },
                spots,
                latent,
                patch_color: colors,
            });
        }
    }
    Ok(Fixture {
        config: *cfg,
        sections,
        gene_map,
        main_symbols,
        aux_symbols,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn spot_table(spots: &[SpotRecord]) -> String {
    let mut s = String::from("spot_id\tarray_row\tarray_col\tpixel_x\tpixel_y\n");
    for sp in spots {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            sp.spot_id, sp.array_row, sp.array_col, sp.pixel_x, sp.pixel_y
        ));
    }
    s
}

impl Fixture {
    /// Write `manifest.json`, `genes.tsv` and per-section image, count and
    /// spot files under `dir`. Returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let mut sections = Vec::new();
        for s in &self.sections {
            let image = PathBuf::from(format!("images/{}.png", s.section_id));
            let counts = PathBuf::from(format!("counts/{}.tsv", s.section_id));
            let spots = PathBuf::from(format!("spots/{}.tsv", s.section_id));
            let p = dir.join(&image);
            if let Some(d) = p.parent() {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            s.image.save(&p)?;
            write_file(&dir.join(&counts), write_count_table(&s.counts).as_bytes())?;
            write_file(&dir.join(&spots), spot_table(&s.spots).as_bytes())?;
            sections.push(SectionRecord {
                patient_id: s.patient_id.clone(),
                section_id: s.section_id.clone(),
                image_path: image,
                counts_path: counts,
                spots_path: spots,
            });
        }
        let mut genes = String::from("ensembl_id\tsymbol\n");
        for (e, s) in &self.gene_map {
            genes.push_str(&format!("{e}\t{s}\n"));
        }
        write_file(&dir.join("genes.tsv"), genes.as_bytes())?;
        let manifest = Manifest {
            gene_map: Some(PathBuf::from("genes.tsv")),
            sections,
        };
        let path = dir.join("manifest.json");
        write_file(&path, &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(path)
    }
}
