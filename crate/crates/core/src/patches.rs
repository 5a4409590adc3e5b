//! Spot-centred patches, background rejection and training tensors.

use std::fs;
use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SpotRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Width in pixels.
    pub m: u32,
    /// Height in pixels.
    pub n: u32,
    /// A pixel is white when every channel is at least this value.
    pub white_channel_min: u8,
    /// Patches with a white fraction strictly above this are rejected.
    pub white_fraction_max: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            m: 224,
            n: 224,
            white_channel_min: 200,
            white_fraction_max: 0.5,
        }
    }
}

impl PatchConfig {
    pub fn square(size: u32) -> Self {
        PatchConfig {
            m: size,
            n: size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Argument("patch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.white_fraction_max) {
            return Err(Error::Argument(
                "white_fraction_max must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub spot_id: String,
    pub section_id: String,
    pub patient_id: String,
    pub pixels: RgbImage,
    /// Top-left corner in the source image.
    pub origin: (u32, u32),
}

/// Patches cut from one image plus the spots that did not fit.
#[derive(Debug, Clone, Default)]
pub struct Extraction {
    pub patches: Vec<Patch>,
    pub out_of_bounds: Vec<String>,
}

/// Cut one `m × n` patch centred on each spot. Spots whose patch would leave
/// the image are skipped and reported.
pub fn extract_patches(image: &RgbImage, spots: &[SpotRecord], cfg: &PatchConfig) -> Extraction {
    let mut out = Extraction::default();
    for spot in spots {
        let x0 = spot.pixel_x as i64 - (cfg.m / 2) as i64;
        let y0 = spot.pixel_y as i64 - (cfg.n / 2) as i64;
        let fits = x0 >= 0
            && y0 >= 0
            && x0 + cfg.m as i64 <= image.width() as i64
            && y0 + cfg.n as i64 <= image.height() as i64;
        if !fits {
            out.out_of_bounds.push(spot.spot_id.clone());
            continue;
        }
        let (x0, y0) = (x0 as u32, y0 as u32);
        let pixels = image::imageops::crop_imm(image, x0, y0, cfg.m, cfg.n).to_image();
        out.patches.push(Patch {
            spot_id: spot.spot_id.clone(),
            section_id: spot.section_id.clone(),
            patient_id: spot.patient_id.clone(),
            pixels,
            origin: (x0, y0),
        });
    }
    out
}

pub fn white_fraction(p: &Patch, cfg: &PatchConfig) -> f64 {
    let total = (p.pixels.width() * p.pixels.height()) as usize;
    if total == 0 {
        return 0.0;
    }
    let white = p
        .pixels
        .pixels()
        .filter(|px| px.0.iter().all(|&c| c >= cfg.white_channel_min))
        .count();
    white as f64 / total as f64
}

pub fn is_informative(p: &Patch, cfg: &PatchConfig) -> bool {
    white_fraction(p, cfg) <= cfg.white_fraction_max
}

/// Split patches into accepted ones and the ids of white-rejected ones.
pub fn reject_background(patches: Vec<Patch>, cfg: &PatchConfig) -> (Vec<Patch>, Vec<String>) {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for p in patches {
        if is_informative(&p, cfg) {
            kept.push(p);
        } else {
            rejected.push(p.spot_id);
        }
    }
    (kept, rejected)
}

/// Per-channel mean and std of `pixel / 255`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Channels whose measured std was zero and replaced by 1.
    pub substituted: [bool; 3],
}

/// Pooled moments over every pixel of every training patch.
pub fn compute_channel_stats<'a, I>(train: I) -> Result<ChannelStats>
where
    I: IntoIterator<Item = &'a RgbImage>,
{
    let mut n = 0u64;
    let mut sum = [0.0f64; 3];
    let mut images = Vec::new();
    for img in train {
        for px in img.pixels() {
            for c in 0..3 {
                sum[c] += px[c] as f64 / 255.0;
            }
        }
        n += (img.width() * img.height()) as u64;
        images.push(img);
    }
    if images.is_empty() || n == 0 {
        return Err(Error::Argument(
            "channel statistics need at least one training patch".into(),
        ));
    }
    let mean = sum.map(|s| s / n as f64);
    let mut ss = [0.0f64; 3];
    for img in &images {
        for px in img.pixels() {
            for c in 0..3 {
                ss[c] += (px[c] as f64 / 255.0 - mean[c]).powi(2);
            }
        }
    }
    let raw = ss.map(|v| (v / n as f64).sqrt());
    // Constant channels can leave rounding residue around 1e-17.
    let substituted = raw.map(|s| s <= 1e-12);
    let std = [0, 1, 2].map(|c| if substituted[c] { 1.0 } else { raw[c] });
    Ok(ChannelStats {
        mean,
        std,
        substituted,
    })
}

/// Channel-major normalized patch, shape 3 × height × width.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor {
    pub values: Array3<f64>,
    pub channel_stats: ChannelStats,
}

pub fn to_tensor(p: &RgbImage, stats: &ChannelStats) -> Result<PatchTensor> {
    if stats.std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Argument(format!(
            "channel std must be positive, got {:?}",
            stats.std
        )));
    }
    let (w, h) = p.dimensions();
    let values = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        (p.get_pixel(x as u32, y as u32)[c] as f64 / 255.0 - stats.mean[c]) / stats.std[c]
    });
    Ok(PatchTensor {
        values,
        channel_stats: *stats,
    })
}

/// Which dihedral operations to apply to one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl Augmentation {
    /// Three independent fair coin flips, always drawn in the same order.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Augmentation {
        Augmentation {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            rot90: rng.random_bool(0.5),
        }
    }

    /// Apply flips, then a quarter turn. Rotation is skipped for non-square
    /// tensors, which would otherwise change shape.
    pub fn apply(&self, t: &PatchTensor) -> PatchTensor {
        let mut v = t.values.clone();
        if self.hflip {
            v = hflip(&v);
        }
        if self.vflip {
            v.invert_axis(Axis(1));
            v = v.as_standard_layout().to_owned();
        }
        if self.rot90 && v.shape()[1] == v.shape()[2] {
            v = rot90(&v);
        }
        PatchTensor {
            values: v,
            channel_stats: t.channel_stats,
        }
    }
}

pub fn hflip(v: &Array3<f64>) -> Array3<f64> {
    v.slice(s![.., .., ..;-1]).to_owned()
}

/// Counter-clockwise quarter turn of each channel: out[y][x] = in[x][w-1-y].
pub fn rot90(v: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = v.dim();
    Array3::from_shape_fn((c, w, h), |(k, y, x)| v[[k, x, w - 1 - y]])
}

pub fn augment<R: Rng + ?Sized>(t: &PatchTensor, rng: &mut R) -> PatchTensor {
    Augmentation::sample(rng).apply(t)
}

/// One stored patch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub spot_id: String,
    pub section_id: String,
    pub patient_id: String,
    pub origin: (u32, u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreIndex {
    format: String,
    width: u32,
    height: u32,
    config: PatchConfig,
    white_rejected: usize,
    out_of_bounds: usize,
    entries: Vec<PatchEntry>,
}

const STORE_FORMAT: &str = "stexpr-patches/1";

/// Directory holding `pixels.bin` (raw RGB bytes, patch after patch) and an
/// `index.json` describing each patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchStore {
    pub config: PatchConfig,
    pub entries: Vec<PatchEntry>,
    pub images: Vec<RgbImage>,
    pub white_rejected: usize,
    pub out_of_bounds: usize,
}

impl PatchStore {
    pub fn from_patches(
        config: PatchConfig,
        patches: Vec<Patch>,
        white_rejected: usize,
        out_of_bounds: usize,
    ) -> Self {
        let mut entries = Vec::with_capacity(patches.len());
        let mut images = Vec::with_capacity(patches.len());
        for p in patches {
            entries.push(PatchEntry {
                spot_id: p.spot_id,
                section_id: p.section_id,
                patient_id: p.patient_id,
                origin: p.origin,
            });
            images.push(p.pixels);
        }
        PatchStore {
            config,
            entries,
            images,
            white_rejected,
            out_of_bounds,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the patch for `(section, spot)`, if it was kept.
    pub fn position(&self, section: &str, spot: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.section_id == section && e.spot_id == spot)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let index = StoreIndex {
            format: STORE_FORMAT.into(),
            width: self.config.m,
            height: self.config.n,
            config: self.config,
            white_rejected: self.white_rejected,
            out_of_bounds: self.out_of_bounds,
            entries: self.entries.clone(),
        };
        let mut bytes =
            Vec::with_capacity(self.images.len() * (self.config.m * self.config.n * 3) as usize);
        for img in &self.images {
            bytes.extend_from_slice(img.as_raw());
        }
        let p = dir.join("pixels.bin");
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("index.json");
        fs::write(&p, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<PatchStore> {
        let p = dir.join("index.json");
        let index: StoreIndex =
            serde_json::from_slice(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
        if index.format != STORE_FORMAT {
            return Err(Error::Schema(format!(
                "unsupported patch store `{}`",
                index.format
            )));
        }
        let p = dir.join("pixels.bin");
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let per = (index.width * index.height * 3) as usize;
        if bytes.len() != per * index.entries.len() {
            return Err(Error::Integrity(format!(
                "pixels.bin holds {} bytes, index expects {}",
                bytes.len(),
                per * index.entries.len()
            )));
        }
        let images = bytes
            .chunks_exact(per.max(1))
            .take(index.entries.len())
            .map(|c| {
                RgbImage::from_raw(index.width, index.height, c.to_vec()).expect("size checked")
            })
            .collect();
        Ok(PatchStore {
            config: index.config,
            entries: index.entries,
            images,
            white_rejected: index.white_rejected,
            out_of_bounds: index.out_of_bounds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn spot(id: &str, x: u32, y: u32) -> SpotRecord {
        SpotRecord {
            spot_id: id.into(),
            array_row: 0,
            array_col: 0,
            pixel_x: x,
            pixel_y: y,
            patient_id: "P".into(),
            section_id: "S".into(),
        }
    }

    fn patch_of(img: RgbImage) -> Patch {
        Patch {
            spot_id: "s".into(),
            section_id: "S".into(),
            patient_id: "P".into(),
            pixels: img,
            origin: (0, 0),
        }
    }

    #[test]
    fn default_size_is_224() {
        let c = PatchConfig::default();
        assert_eq!(
            (c.m, c.n, c.white_channel_min, c.white_fraction_max),
            (224, 224, 200, 0.5)
        );
    }

    #[test]
    fn exact_fit_and_out_of_bounds() {
        let img = RgbImage::from_fn(224, 224, |x, y| Rgb([x as u8, y as u8, 7]));
        let cfg = PatchConfig::default();
        let e = extract_patches(&img, &[spot("a", 112, 112), spot("b", 10, 10)], &cfg);
        assert_eq!(e.patches.len(), 1);
        assert_eq!(e.patches[0].origin, (0, 0));
        assert_eq!(e.patches[0].pixels, img);
        assert_eq!(e.out_of_bounds, ["b"]);
    }

    #[test]
    fn white_fraction_rule() {
        let cfg = PatchConfig::square(4);
        let white = patch_of(RgbImage::from_pixel(4, 4, Rgb([255; 3])));
        assert_eq!(white_fraction(&white, &cfg), 1.0);
        assert!(!is_informative(&white, &cfg));
        let black = patch_of(RgbImage::from_pixel(4, 4, Rgb([0; 3])));
        assert_eq!(white_fraction(&black, &cfg), 0.0);
        assert!(is_informative(&black, &cfg));
        let half = patch_of(RgbImage::from_fn(4, 4, |x, _| {
            if x < 2 {
                Rgb([230; 3])
            } else {
                Rgb([10; 3])
            }
        }));
        assert_eq!(white_fraction(&half, &cfg), 0.5);
        assert!(is_informative(&half, &cfg));
        let almost = patch_of(RgbImage::from_fn(4, 4, |x, _| {
            if x < 2 {
                Rgb([199, 255, 255])
            } else {
                Rgb([10; 3])
            }
        }));
        assert_eq!(white_fraction(&almost, &cfg), 0.0);
    }

    #[test]
    fn channel_stats_examples() {
        let gray = RgbImage::from_pixel(3, 3, Rgb([51, 51, 51]));
        let s = compute_channel_stats([&gray]).unwrap();
        assert!((s.mean[0] - 0.2).abs() < 1e-15);
        assert_eq!(s.std, [1.0; 3]);
        assert_eq!(s.substituted, [true; 3]);

        let a = RgbImage::from_pixel(2, 2, Rgb([0; 3]));
        let b = RgbImage::from_pixel(2, 2, Rgb([255; 3]));
        let s = compute_channel_stats([&a, &b]).unwrap();
        assert_eq!(s.mean, [0.5; 3]);
        assert_eq!(s.std, [0.5; 3]);
        assert_eq!(compute_channel_stats([&b, &a]).unwrap(), s);

        assert!(compute_channel_stats(std::iter::empty::<&RgbImage>()).is_err());
    }

    #[test]
    fn tensor_normalization() {
        let img = RgbImage::from_fn(2, 2, |x, y| Rgb([(x * 100 + y * 50) as u8, 0, 255]));
        let stats = compute_channel_stats([&img]).unwrap();
        let t = to_tensor(&img, &stats).unwrap();
        for c in 0..3 {
            let ch = t.values.index_axis(Axis(0), c);
            assert!(ch.mean().unwrap().abs() < 1e-12);
        }
        let bad = ChannelStats {
            std: [1.0, 0.0, 1.0],
            ..stats
        };
        assert!(to_tensor(&img, &bad).is_err());
        let at_mean = RgbImage::from_pixel(1, 1, Rgb([51, 51, 51]));
        let s = ChannelStats {
            mean: [0.2; 3],
            std: [0.3; 3],
            substituted: [false; 3],
        };
        assert!(to_tensor(&at_mean, &s)
            .unwrap()
            .values
            .iter()
            .all(|v| v.abs() < 1e-15));
    }

    fn tensor(h: usize, w: usize) -> PatchTensor {
        PatchTensor {
            values: Array3::from_shape_fn((3, h, w), |(c, y, x)| (c * 100 + y * 10 + x) as f64),
            channel_stats: ChannelStats {
                mean: [0.0; 3],
                std: [1.0; 3],
                substituted: [false; 3],
            },
        }
    }

    #[test]
    fn augmentation_group_laws() {
        let t = tensor(4, 4);
        assert_eq!(Augmentation::default().apply(&t), t);
        let h = Augmentation {
            hflip: true,
            ..Default::default()
        };
        assert_eq!(h.apply(&h.apply(&t)), t);
        let r = Augmentation {
            rot90: true,
            ..Default::default()
        };
        let four = (0..4).fold(t.clone(), |acc, _| r.apply(&acc));
        assert_eq!(four, t);
        assert_ne!(r.apply(&t), t);
        let rect = tensor(2, 3);
        assert_eq!(r.apply(&rect), rect);
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(8, 8, |x, y| Rgb([x as u8, y as u8, 3]));
        let cfg = PatchConfig::square(4);
        let e = extract_patches(&img, &[spot("a", 4, 4), spot("b", 2, 6)], &cfg);
        let store = PatchStore::from_patches(cfg, e.patches, 0, e.out_of_bounds.len());
        store.write(dir.path()).unwrap();
        assert_eq!(PatchStore::read(dir.path()).unwrap(), store);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn augmentation_permutes_values(seed in any::<u64>(), h in 1usize..6) {
                let t = tensor(h, h);
                let a = augment(&t, &mut crate::rng::named(seed, "aug"));
                let mut x: Vec<f64> = t.values.iter().copied().collect();
                let mut y: Vec<f64> = a.values.iter().copied().collect();
                x.sort_by(f64::total_cmp);
                y.sort_by(f64::total_cmp);
                prop_assert_eq!(x, y);
            }

            #[test]
            fn extraction_accounts_for_every_spot(
                coords in proptest::collection::vec((0u32..40, 0u32..40, any::<bool>()), 1..30),
            ) {
                let img = RgbImage::from_fn(40, 40, |x, _| if x < 20 { Rgb([255; 3]) } else { Rgb([90, 40, 120]) });
                let spots: Vec<SpotRecord> = coords.iter().enumerate()
                    .map(|(i, &(x, y, _))| spot(&format!("s{i}"), x, y)).collect();
                let cfg = PatchConfig::square(8);
                let e = extract_patches(&img, &spots, &cfg);
                let oob = e.out_of_bounds.len();
                let (kept, rejected) = reject_background(e.patches.clone(), &cfg);
                prop_assert_eq!(kept.len() + rejected.len() + oob, spots.len());

                let mut reversed = spots.clone();
                reversed.reverse();
                let mut back = extract_patches(&img, &reversed, &cfg).patches;
                back.reverse();
                prop_assert_eq!(back, e.patches);
            }
        }
    }
}
