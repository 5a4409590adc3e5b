//! Gene and spot selection, and the regression targets for both heads.

use std::collections::HashSet;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Dataset;

pub const DEFAULT_MIN_SPOT_TOTAL: u64 = 1000;
pub const DEFAULT_PANEL_SIZE: usize = 250;

/// Drop genes whose mean count over every spot is zero.
pub fn filter_genes(d: &Dataset) -> Result<Dataset> {
    if d.n_spots() == 0 {
        return Err(Error::EmptyDataset("dataset has no spots".into()));
    }
    let keep: Vec<usize> = d
        .counts
        .columns()
        .into_iter()
        .enumerate()
        .filter(|(_, col)| col.iter().any(|&c| c > 0))
        .map(|(j, _)| j)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyDataset(
            "every gene has zero mean expression".into(),
        ));
    }
    Ok(d.select_genes(&keep))
}

/// Keep spots whose total count (over the current genes) is at least `min_total`.
pub fn filter_spots(d: &Dataset, min_total: u64) -> Result<Dataset> {
    let keep: Vec<usize> = d
        .spot_totals()
        .into_iter()
        .enumerate()
        .filter(|&(_, t)| t >= min_total)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no spot reaches {min_total} total counts"
        )));
    }
    Ok(d.select_spots(&keep))
}

/// Main genes (top-k by training mean) and the auxiliary remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenePanel {
    pub main_genes: Vec<String>,
    pub aux_genes: Vec<String>,
    /// Training-split mean count of each main gene, in panel order.
    pub main_means: Vec<f64>,
    /// Training-split mean count of each auxiliary gene, in panel order.
    pub aux_means: Vec<f64>,
}

/// Rank genes by mean count over `train` (descending, ties by ascending
/// symbol). The first `k` form the main panel; the rest, in the same order,
/// form the auxiliary panel.
pub fn select_gene_panel(d: &Dataset, k: usize, train: &[usize]) -> Result<GenePanel> {
    if k == 0 {
        return Err(Error::Argument("panel size must be positive".into()));
    }
    if train.is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    let means = column_means(&d.counts, train);
    let mut order: Vec<usize> = (0..d.n_genes()).collect();
    order.sort_by(|&a, &b| {
        means[b]
            .total_cmp(&means[a])
            .then_with(|| d.genes[a].cmp(&d.genes[b]))
    });
    let k = k.min(order.len());
    let (main, aux) = order.split_at(k);
    Ok(GenePanel {
        main_genes: main.iter().map(|&j| d.genes[j].clone()).collect(),
        aux_genes: aux.iter().map(|&j| d.genes[j].clone()).collect(),
        main_means: main.iter().map(|&j| means[j]).collect(),
        aux_means: aux.iter().map(|&j| means[j]).collect(),
    })
}

fn column_means(counts: &Array2<u32>, rows: &[usize]) -> Vec<f64> {
    let mut sums = vec![0.0f64; counts.ncols()];
    for &i in rows {
        for (s, &c) in sums.iter_mut().zip(counts.row(i)) {
            *s += c as f64;
        }
    }
    sums.iter().map(|s| s / rows.len() as f64).collect()
}

/// Per-gene `log1p` + z-score parameters fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTransform {
    pub genes: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Genes whose training variance was zero; their std was replaced by 1.
    pub zero_variance: Vec<bool>,
}

impl TargetTransform {
    pub fn fit(genes: Vec<String>, counts: &Array2<u32>, train: &[usize]) -> TargetTransform {
        let n = train.len() as f64;
        let mut mean = vec![0.0; genes.len()];
        let mut m2 = vec![0.0; genes.len()];
        for (j, (mu, var)) in mean.iter_mut().zip(m2.iter_mut()).enumerate() {
            let xs: Vec<f64> = train
                .iter()
                .map(|&i| (counts[[i, j]] as f64).ln_1p())
                .collect();
            *mu = xs.iter().sum::<f64>() / n;
            *var = xs.iter().map(|x| (x - *mu).powi(2)).sum::<f64>() / n;
        }
        let zero_variance: Vec<bool> = m2.iter().map(|&v| v <= 0.0).collect();
        let std = m2
            .iter()
            .zip(&zero_variance)
            .map(|(&v, &z)| if z { 1.0 } else { v.sqrt() })
            .collect();
        TargetTransform {
            genes,
            mean,
            std,
            zero_variance,
        }
    }

    /// Transform a spots × genes count block (columns in `self.genes` order).
    pub fn apply(&self, counts: &Array2<u32>) -> Array2<f64> {
        Array2::from_shape_fn(counts.dim(), |(i, j)| {
            ((counts[[i, j]] as f64).ln_1p() - self.mean[j]) / self.std[j]
        })
    }

    /// Map transformed values back to the count scale.
    pub fn invert(&self, values: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(values.dim(), |(i, j)| {
            (values[[i, j]] * self.std[j] + self.mean[j]).exp_m1()
        })
    }

    /// Stable fingerprint used to tie checkpoints to their target file.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for (k, g) in self.genes.iter().enumerate() {
            bytes.extend(g.as_bytes());
            bytes.push(0);
            bytes.extend(self.mean[k].to_le_bytes());
            bytes.extend(self.std[k].to_le_bytes());
        }
        crate::rng::sha256_hex(&bytes)
    }
}

/// Which split a spot belongs to in a target table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::Argument(format!("unknown split `{s}`"))),
        }
    }
}

/// Regression targets for the main and auxiliary heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTable {
    pub spot_ids: Vec<String>,
    pub section_ids: Vec<String>,
    pub patient_ids: Vec<String>,
    pub split: Vec<Split>,
    pub main_genes: Vec<String>,
    pub aux_genes: Vec<String>,
    /// spots × main genes
    pub main: Array2<f64>,
    /// spots × aux genes
    pub aux: Array2<f64>,
    pub main_transform: TargetTransform,
    pub aux_transform: TargetTransform,
}

impl TargetTable {
    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.spot_ids.len())
            .filter(|&i| self.split[i] == split)
            .collect()
    }

    pub fn fingerprint(&self) -> String {
        let joined = format!(
            "{}{}",
            self.main_transform.fingerprint(),
            self.aux_transform.fingerprint()
        );
        crate::rng::sha256_hex(joined.as_bytes())
    }

    /// Row index of each `(section, spot)` pair.
    pub fn row_of(&self, section: &str, spot: &str) -> Option<usize> {
        (0..self.spot_ids.len())
            .find(|&i| self.section_ids[i] == section && self.spot_ids[i] == spot)
    }
}

/// Fit `log1p` + z-score on `train` rows and apply it to every spot.
pub fn fit_transform_targets(
    d: &Dataset,
    panel: &GenePanel,
    train: &[usize],
) -> Result<TargetTable> {
    if train.is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    let column = |g: &String| {
        d.genes
            .iter()
            .position(|x| x == g)
            .ok_or_else(|| Error::Argument(format!("panel gene `{g}` is not in the dataset")))
    };
    let main_cols = panel
        .main_genes
        .iter()
        .map(column)
        .collect::<Result<Vec<_>>>()?;
    let aux_cols = panel
        .aux_genes
        .iter()
        .map(column)
        .collect::<Result<Vec<_>>>()?;
    let main_counts = d.counts.select(Axis(1), &main_cols);
    let aux_counts = d.counts.select(Axis(1), &aux_cols);
    let main_transform = TargetTransform::fit(panel.main_genes.clone(), &main_counts, train);
    let aux_transform = TargetTransform::fit(panel.aux_genes.clone(), &aux_counts, train);
    let train_set: HashSet<usize> = train.iter().copied().collect();
    Ok(TargetTable {
        spot_ids: d.spots.iter().map(|s| s.spot_id.clone()).collect(),
        section_ids: d.spots.iter().map(|s| s.section_id.clone()).collect(),
        patient_ids: d.spots.iter().map(|s| s.patient_id.clone()).collect(),
        split: (0..d.n_spots())
            .map(|i| {
                if train_set.contains(&i) {
                    Split::Train
                } else {
                    Split::Test
                }
            })
            .collect(),
        main_genes: panel.main_genes.clone(),
        aux_genes: panel.aux_genes.clone(),
        main: main_transform.apply(&main_counts),
        aux: aux_transform.apply(&aux_counts),
        main_transform,
        aux_transform,
    })
}

/// Column mean and population std of `m` over `rows`.
pub fn column_moments(m: &Array2<f64>, rows: &[usize]) -> (Array1<f64>, Array1<f64>) {
    let sub = m.select(Axis(0), rows);
    let mean = sub.mean_axis(Axis(0)).expect("non-empty rows");
    let std = sub.std_axis(Axis(0), 0.0);
    (mean, std)
}
