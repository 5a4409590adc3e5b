//! Spot heatmaps, tissue overlays and the summary tables behind the figures.

use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{CategoryCounts, MetricsReport};

pub const BLUE: [u8; 3] = [0, 0, 255];
pub const YELLOW: [u8; 3] = [255, 255, 0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    pub gene: String,
    pub values: Vec<f64>,
    /// Spot centres in pixels, `(x, y)`.
    pub coords: Vec<(f64, f64)>,
    pub radius: f64,
    pub low: [u8; 3],
    pub high: [u8; 3],
}

impl HeatmapSpec {
    /// Blue → yellow ramp with the default radius.
    pub fn new(gene: &str, values: Vec<f64>, coords: Vec<(f64, f64)>) -> HeatmapSpec {
        let radius = default_radius(&coords);
        HeatmapSpec {
            gene: gene.to_owned(),
            values,
            coords,
            radius,
            low: BLUE,
            high: YELLOW,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Argument(format!(
                "no values to render for {}",
                self.gene
            )));
        }
        if self.values.len() != self.coords.len() {
            return Err(Error::Argument(format!(
                "{} values for {} spot coordinates",
                self.values.len(),
                self.coords.len()
            )));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Argument(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "non-finite value for {}",
                self.gene
            )));
        }
        Ok(())
    }
}

/// Half the median nearest-neighbour distance between spot centres, so that
/// neighbouring discs touch at most. A lone spot gets radius 1.
pub fn default_radius(coords: &[(f64, f64)]) -> f64 {
    if coords.len() < 2 {
        return 1.0;
    }
    let mut nn: Vec<f64> = coords
        .iter()
        .enumerate()
        .map(|(i, a)| {
            coords
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| (a.0 - b.0).hypot(a.1 - b.1))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    let m = nn.len() / 2;
    let med = if nn.len() % 2 == 1 {
        nn[m]
    } else {
        0.5 * (nn[m - 1] + nn[m])
    };
    if med > 0.0 {
        med / 2.0
    } else {
        1.0
    }
}

/// Min–max scale to `[0, 1]`; a constant input maps to 0.5 everywhere.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
        .collect()
}

pub fn ramp(low: [u8; 3], high: [u8; 3], t: f64) -> [u8; 3] {
    [0, 1, 2].map(|k| {
        let v = (1.0 - t) * low[k] as f64 + t * high[k] as f64;
        v.round().clamp(0.0, 255.0) as u8
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub image: RgbImage,
    /// Row-major, `true` where a disc was drawn.
    pub coverage: Vec<bool>,
}

impl Heatmap {
    pub fn covered(&self, x: u32, y: u32) -> bool {
        self.coverage[(y * self.image.width() + x) as usize]
    }
}

/// Draw one filled disc per spot on a black canvas. Spots are painted in
/// input order, so a later disc wins where two overlap.
pub fn render_heatmap(spec: &HeatmapSpec, width: u32, height: u32) -> Result<Heatmap> {
    spec.validate()?;
    let mut image = RgbImage::new(width, height);
    let mut coverage = vec![false; (width * height) as usize];
    let r = spec.radius;
    for (t, &(cx, cy)) in normalize(&spec.values).into_iter().zip(&spec.coords) {
        let color = Rgb(ramp(spec.low, spec.high, t));
        let x0 = (cx - r).floor().max(0.0) as u32;
        let y0 = (cy - r).floor().max(0.0) as u32;
        let x1 = ((cx + r).ceil().max(-1.0) as i64).min(width as i64 - 1);
        let y1 = ((cy + r).ceil().max(-1.0) as i64).min(height as i64 - 1);
        for y in y0 as i64..=y1 {
            for x in x0 as i64..=x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= r * r {
                    image.put_pixel(x as u32, y as u32, color);
                    coverage[(y as u32 * width + x as u32) as usize] = true;
                }
            }
        }
    }
    Ok(Heatmap { image, coverage })
}

/// Blend the heatmap onto the tissue where discs were drawn; every other
/// pixel is copied from the tissue unchanged.
pub fn overlay(heatmap: &Heatmap, tissue: &RgbImage, alpha: f64) -> Result<RgbImage> {
    if heatmap.image.dimensions() != tissue.dimensions() {
        return Err(Error::Argument(format!(
            "heatmap is {:?} but tissue image is {:?}",
            heatmap.image.dimensions(),
            tissue.dimensions()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    let mut out = tissue.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if heatmap.covered(x, y) {
            let h = heatmap.image.get_pixel(x, y);
            for k in 0..3 {
                let v = alpha * h[k] as f64 + (1.0 - alpha) * px[k] as f64;
                px[k] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width bins over `[0, 1]` of the genes with a defined median Pcc
/// ≥ 0. The last bin is closed on the right.
pub fn histogram(report: &MetricsReport, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Argument("histogram needs at least one bin".into()));
    }
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts = vec![0; bins];
    for v in report
        .per_gene
        .iter()
        .filter_map(|g| g.median_pcc)
        .filter(|&p| p >= 0.0)
    {
        let b = ((v * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

pub fn histogram_csv(h: &Histogram) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin_start", "bin_end", "count"])?;
    for (i, c) in h.counts.iter().enumerate() {
        w.write_record([
            format!("{:.4}", h.edges[i]),
            format!("{:.4}", h.edges[i + 1]),
            c.to_string(),
        ])?;
    }
    finish(w)
}

/// Category counts per model, most strong genes first (ties by tag).
pub fn comparison_csv(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Argument(
            "comparison needs at least one report".into(),
        ));
    }
    let mut rows: Vec<(&str, CategoryCounts)> = reports
        .iter()
        .map(|r| (r.model_tag.as_str(), r.counts))
        .collect();
    rows.sort_by(|a, b| b.1.strong.cmp(&a.1.strong).then_with(|| a.0.cmp(b.0)));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model",
        "strong",
        "medium",
        "weak",
        "negligible",
        "positive_total",
    ])?;
    for (tag, c) in rows {
        w.write_record([
            tag.to_owned(),
            c.strong.to_string(),
            c.medium.to_string(),
            c.weak.to_string(),
            c.negligible.to_string(),
            c.positive.to_string(),
        ])?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(format!("csv writer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{categorize, GeneMetrics};
    use crate::filter::Split;

    fn spec(values: Vec<f64>) -> HeatmapSpec {
        let coords = (0..values.len())
            .map(|i| (10.0 + 20.0 * i as f64, 10.0))
            .collect();
        HeatmapSpec::new("B2M", values, coords)
    }

    fn report(tag: &str, pccs: &[Option<f64>]) -> MetricsReport {
        let per_gene: Vec<GeneMetrics> = pccs
            .iter()
            .enumerate()
            .map(|(i, &p)| GeneMetrics {
                gene: format!("G{i}"),
                pcc_per_section: vec![],
                median_pcc: p,
                mae: 0.0,
                rmse: 0.0,
                category: p.map(categorize),
            })
            .collect();
        let counts = CategoryCounts::from_genes(&per_gene);
        MetricsReport {
            model_tag: tag.into(),
            split: Split::Test,
            per_gene,
            a_mae: 0.0,
            a_rmse: 0.0,
            counts,
        }
    }

    #[test]
    fn endpoints_and_midpoint() {
        let s = spec(vec![0.0, 1.0]);
        assert_eq!(s.radius, 10.0);
        let h = render_heatmap(&s, 40, 20).unwrap();
        assert_eq!(h.image.get_pixel(10, 10).0, BLUE);
        assert_eq!(h.image.get_pixel(30, 10).0, YELLOW);
        let flat = render_heatmap(&spec(vec![3.0, 3.0]), 40, 20).unwrap();
        assert_eq!(flat.image.get_pixel(10, 10).0, [128, 128, 128]);
        assert_eq!(flat.image.get_pixel(30, 10).0, [128, 128, 128]);
    }

    #[test]
    fn disc_boundary_is_inclusive() {
        let mut s = spec(vec![1.0]);
        s.radius = 3.0;
        let h = render_heatmap(&s, 30, 30).unwrap();
        assert!(h.covered(13, 10) && h.covered(10, 7));
        assert!(!h.covered(13, 11) && !h.covered(14, 10));
        assert_eq!(h.coverage.iter().filter(|&&c| c).count(), 29);
    }

    #[test]
    fn overlay_alpha_extremes() {
        let tissue = RgbImage::from_fn(40, 20, |x, y| Rgb([x as u8 * 3, y as u8 * 5, 77]));
        let h = render_heatmap(&spec(vec![0.0, 1.0]), 40, 20).unwrap();
        assert_eq!(overlay(&h, &tissue, 0.0).unwrap(), tissue);
        let full = overlay(&h, &tissue, 1.0).unwrap();
        assert_eq!(full.get_pixel(30, 10).0, YELLOW);
        let part = overlay(&h, &tissue, 0.6).unwrap();
        assert_eq!(part.get_pixel(0, 0), tissue.get_pixel(0, 0));
        // Blue over (30, 50, 77): 0.4·30, 0.4·50, 0.6·255 + 0.4·77.
        assert_eq!(part.get_pixel(10, 10).0, [12, 20, 184]);
        assert!(overlay(&h, &RgbImage::new(41, 20), 0.5).is_err());
    }

    #[test]
    fn radius_from_grid() {
        let coords: Vec<(f64, f64)> = (0..9)
            .map(|i| ((i % 3) as f64 * 36.0, (i / 3) as f64 * 36.0))
            .collect();
        assert_eq!(default_radius(&coords), 18.0);
        assert_eq!(default_radius(&coords[..1]), 1.0);
    }

    #[test]
    fn histogram_partitions_non_negative_genes() {
        let r = report(
            "m",
            &[
                Some(0.0),
                Some(0.05),
                Some(0.55),
                Some(1.0),
                Some(-0.2),
                None,
            ],
        );
        let h = histogram(&r, 10).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), r.counts.positive);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[5], 1);
        assert_eq!(h.counts[9], 1);
        let neg = histogram(&report("n", &[Some(-0.1), Some(-0.9)]), 4).unwrap();
        assert_eq!(neg.counts, vec![0; 4]);
        assert!(histogram_csv(&h)
            .unwrap()
            .starts_with("bin_start,bin_end,count\n0.0000,0.1000,2\n"));
    }

    #[test]
    fn comparison_rows_sorted_by_strong() {
        let a = report("a", &[Some(0.6), Some(0.2)]);
        let b = report("b", &[Some(0.7), Some(0.8), Some(0.35), Some(0.01)]);
        assert_eq!(
            comparison_csv(&[a, b]).unwrap(),
            "model,strong,medium,weak,negligible,positive_total\nb,2,1,0,1,4\na,1,0,1,0,2\n"
        );
        assert!(comparison_csv(&[]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn affine_invariant(values in proptest::collection::vec(-5.0f64..5.0, 1..8), a in 0.5f64..4.0, b in -3.0f64..3.0) {
                let moved: Vec<f64> = values.iter().map(|v| a * v + b).collect();
                let h1 = render_heatmap(&spec(values), 170, 20).unwrap();
                let h2 = render_heatmap(&spec(moved), 170, 20).unwrap();
                // Affine maps can perturb the last bit of the scaled value;
                // allow one intensity level.
                for (p, q) in h1.image.pixels().zip(h2.image.pixels()) {
                    for k in 0..3 {
                        prop_assert!((p[k] as i32 - q[k] as i32).abs() <= 1);
                    }
                }
                prop_assert_eq!(h1.coverage, h2.coverage);
            }

            #[test]
            fn alpha_zero_is_identity(seed in any::<u8>(), alpha in 0.0f64..=1.0) {
                let tissue = RgbImage::from_fn(40, 20, |x, y| Rgb([seed ^ x as u8, y as u8, seed]));
                let h = render_heatmap(&spec(vec![0.1, 0.9]), 40, 20).unwrap();
                prop_assert_eq!(&overlay(&h, &tissue, 0.0).unwrap(), &tissue);
                let o = overlay(&h, &tissue, alpha).unwrap();
                for (x, y, p) in o.enumerate_pixels() {
                    if !h.covered(x, y) {
                        prop_assert_eq!(p, tissue.get_pixel(x, y));
                    }
                }
            }
        }
    }
}
