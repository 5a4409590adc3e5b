//! Stain normalization of H&E tissue images.
//!
//! Pixels are moved to optical density (Beer–Lambert, natural log, `i0 = 255`),
//! a two-atom stain basis is learned by sparse non-negative dictionary
//! learning over tissue pixels, and a source image is re-expressed in a
//! target image's basis with per-stain concentration rescaling.

pub mod sparse;

use image::RgbImage;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_I0: u8 = 255;
pub const MIN_TISSUE_PIXELS: usize = 100;

/// Per-pixel optical densities, row-major pixels × 3.
#[derive(Debug, Clone, PartialEq)]
pub struct ODImage {
    pub width: u32,
    pub height: u32,
    pub od: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainParams {
    /// Pixels with any channel OD above this are tissue.
    pub od_threshold: f64,
    /// ℓ1 penalty used while learning the stain basis.
    pub sparsity: f64,
    /// ℓ1 penalty used when solving concentrations against a fixed basis.
    pub concentration_sparsity: f64,
    pub dict_iters: usize,
    pub code_iters: usize,
    pub tol: f64,
    /// Tissue pixels beyond this count are subsampled (seeded) for learning.
    pub max_pixels: usize,
    pub seed: u64,
}

impl Default for StainParams {
    fn default() -> Self {
        StainParams {
            od_threshold: 0.15,
            sparsity: 0.1,
            concentration_sparsity: 0.01,
            dict_iters: 50,
            code_iters: 100,
            tol: 1e-6,
            max_pixels: 20_000,
            seed: 0,
        }
    }
}

impl StainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.od_threshold > 0.0) {
            return Err(Error::Argument("od_threshold must be positive".into()));
        }
        if !(self.sparsity >= 0.0) || !(self.concentration_sparsity >= 0.0) {
            return Err(Error::Argument("sparsity must be non-negative".into()));
        }
        if self.dict_iters == 0 || self.code_iters == 0 {
            return Err(Error::Argument(
                "iteration counts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Unit-norm H and E optical-density basis plus 99th-percentile concentrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainProfile {
    /// Row 0 hematoxylin, row 1 eosin.
    pub stain_matrix: [[f64; 3]; 2],
    pub max_concentration: [f64; 2],
}

impl StainProfile {
    pub fn matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((2, 3), |(r, c)| self.stain_matrix[r][c])
    }
}

/// Per-pixel stain concentrations (pixels × 2) and the reconstruction residual.
#[derive(Debug, Clone)]
pub struct Concentrations {
    pub values: Array2<f64>,
    pub residual: f64,
}

pub fn rgb_to_od(img: &RgbImage, i0: u8) -> ODImage {
    let i0 = i0 as f64;
    let n = (img.width() * img.height()) as usize;
    let mut od = Array2::zeros((n, 3));
    for (k, px) in img.pixels().enumerate() {
        for c in 0..3 {
            od[[k, c]] = -((px[c].max(1) as f64) / i0).ln();
        }
    }
    ODImage {
        width: img.width(),
        height: img.height(),
        od,
    }
}

fn od_to_intensity(od: f64, i0: f64) -> u8 {
    (i0 * (-od).exp()).round().clamp(0.0, 255.0) as u8
}

pub fn od_to_rgb(od: &ODImage, i0: u8) -> RgbImage {
    let i0 = i0 as f64;
    RgbImage::from_fn(od.width, od.height, |x, y| {
        let k = (y * od.width + x) as usize;
        image::Rgb([
            od_to_intensity(od.od[[k, 0]], i0),
            od_to_intensity(od.od[[k, 1]], i0),
            od_to_intensity(od.od[[k, 2]], i0),
        ])
    })
}

fn tissue_rows(od: ArrayView2<f64>, threshold: f64) -> Vec<usize> {
    od.rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().any(|&v| v > threshold))
        .map(|(i, _)| i)
        .collect()
}

/// Linear-interpolated percentile (`q` in [0, 100]) of `values`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Order rows hematoxylin-first: the H row has the larger blue OD.
fn order_rows(w: &mut Array2<f64>) {
    if w[[1, 2]] > w[[0, 2]] {
        for c in 0..3 {
            w.swap([0, c], [1, c]);
        }
    }
}

/// Learn the stain basis of `od` over its tissue pixels.
pub fn estimate_stain_profile(od: &ODImage, p: &StainParams) -> Result<StainProfile> {
    p.validate()?;
    let tissue = tissue_rows(od.od.view(), p.od_threshold);
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(Error::InsufficientTissue {
            found: tissue.len(),
            required: MIN_TISSUE_PIXELS,
        });
    }
    let sample: Vec<usize> = if tissue.len() > p.max_pixels {
        let mut r = rng::named(p.seed, rng::stream::STAIN);
        let mut picked: Vec<usize> = index::sample(&mut r, tissue.len(), p.max_pixels)
            .into_iter()
            .map(|i| tissue[i])
            .collect();
        picked.sort_unstable();
        picked
    } else {
        tissue.clone()
    };
    let v = od.od.select(Axis(0), &sample);
    let (mut w, _) = sparse::learn_dictionary(
        v.view(),
        &sparse::DictionarySettings {
            atoms: 2,
            lambda: p.sparsity,
            dict_iters: p.dict_iters,
            code_iters: p.code_iters,
            tol: p.tol,
        },
    );
    order_rows(&mut w);
    let tv = od.od.select(Axis(0), &tissue);
    let h = sparse::encode(
        tv.view(),
        w.view(),
        p.concentration_sparsity,
        p.code_iters,
        p.tol,
        None,
    );
    let max_concentration = [
        percentile(&h.column(0).to_vec(), 99.0),
        percentile(&h.column(1).to_vec(), 99.0),
    ];
    Ok(StainProfile {
        stain_matrix: [
            [w[[0, 0]], w[[0, 1]], w[[0, 2]]],
            [w[[1, 0]], w[[1, 1]], w[[1, 2]]],
        ],
        max_concentration,
    })
}

/// Solve per-pixel concentrations against a fixed profile.
pub fn get_concentrations(od: &ODImage, profile: &StainProfile, p: &StainParams) -> Concentrations {
    let w = profile.matrix();
    let values = sparse::encode(
        od.od.view(),
        w.view(),
        p.concentration_sparsity,
        p.code_iters,
        p.tol,
        None,
    );
    let r = &od.od - &values.dot(&w);
    Concentrations {
        values,
        residual: r.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// Re-express `src` in `tgt`'s stain basis with per-stain rescaling by
/// `tgt.max_concentration / src.max_concentration`.
pub fn normalize_to_target(
    src: &RgbImage,
    src_profile: &StainProfile,
    tgt_profile: &StainProfile,
    p: &StainParams,
) -> Result<RgbImage> {
    if src_profile.max_concentration.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::DegenerateStain(format!(
            "source max concentration {:?} has a zero entry",
            src_profile.max_concentration
        )));
    }
    let od = rgb_to_od(src, DEFAULT_I0);
    let mut c = get_concentrations(&od, src_profile, p).values;
    for k in 0..2 {
        let scale = tgt_profile.max_concentration[k] / src_profile.max_concentration[k];
        c.column_mut(k).mapv_inplace(|x| x * scale);
    }
    let out = ODImage {
        width: od.width,
        height: od.height,
        od: c.dot(&tgt_profile.matrix()),
    };
    Ok(od_to_rgb(&out, DEFAULT_I0))
}

// CIELAB (D65) conversions on 8-bit sRGB.

// Reference white is taken as the image of sRGB white under the matrix, so
// (255, 255, 255) lands on L = 100 exactly.
const WHITE: [f64; 3] = [
    0.412_456_4 + 0.357_576_1 + 0.180_437_5,
    0.212_672_9 + 0.715_152_2 + 0.072_175_0,
    0.019_333_9 + 0.119_192_0 + 0.950_304_1,
];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

const DELTA: f64 = 6.0 / 29.0;

fn lab_f(t: f64) -> f64 {
    if t > DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t.powi(3)
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

pub fn rgb_to_lab(px: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = px.map(|c| srgb_to_linear(c as f64 / 255.0));
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (fx, fy, fz) = (
        lab_f(x / WHITE[0]),
        lab_f(y / WHITE[1]),
        lab_f(z / WHITE[2]),
    );
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn lab_to_rgb(lab: [f64; 3]) -> [u8; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let (x, y, z) = (
        WHITE[0] * lab_f_inv(fx),
        WHITE[1] * lab_f_inv(fy),
        WHITE[2] * lab_f_inv(fz),
    );
    let r = 3.240_454_2 * x - 1.537_138_5 * y - 0.498_531_4 * z;
    let g = -0.969_266_0 * x + 1.876_010_8 * y + 0.041_556_0 * z;
    let b = 0.055_643_4 * x - 0.204_025_9 * y + 1.057_225_2 * z;
    [r, g, b].map(|c| {
        (linear_to_srgb(c.clamp(0.0, 1.0)) * 255.0)
            .round()
            .clamp(0.0, 255.0) as u8
    })
}

/// Scale lightness so its `percentile`-th value maps to full brightness.
/// Images whose percentile lightness is already maximal come back unchanged.
pub fn standardize_luminosity(img: &RgbImage, percentile_q: f64) -> RgbImage {
    let labs: Vec<[f64; 3]> = img.pixels().map(|p| rgb_to_lab(p.0)).collect();
    let ls: Vec<f64> = labs.iter().map(|l| l[0]).collect();
    if ls.is_empty() {
        return img.clone();
    }
    let p = percentile(&ls, percentile_q);
    if !(p > 0.0) {
        return img.clone();
    }
    let scale = 100.0 / p;
    if scale <= 1.0 + 1e-9 {
        return img.clone();
    }
    let mut out = img.clone();
    for (px, lab) in out.pixels_mut().zip(labs) {
        px.0 = lab_to_rgb([(lab[0] * scale).min(100.0), lab[1], lab[2]]);
    }
    out
}
