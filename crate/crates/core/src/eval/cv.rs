//! Patient-level k-fold cross-validation.

use std::collections::HashSet;

use image::RgbImage;
use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::report::{per_gene_report, MetricsReport};
use crate::error::{Error, Result};
use crate::filter::{fit_transform_targets, select_gene_panel, Split};
use crate::ingest::Dataset;
use crate::model::{predict, train, LossConfig, TrainConfig, TrainingSet, TrunkConfig};
use crate::patches::{compute_channel_stats, to_tensor};
use crate::rng::{self, stream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub heldout_patient: String,
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_sizes(&self) -> Vec<usize> {
        self.folds.iter().map(Vec::len).collect()
    }
}

/// Sort the non-held-out patients, shuffle them with the seed and deal them
/// round-robin into `k` folds.
pub fn plan_folds(patients: &[String], heldout: &str, k: usize, seed: u64) -> Result<FoldPlan> {
    if !patients.iter().any(|p| p == heldout) {
        return Err(Error::Argument(format!(
            "held-out patient `{heldout}` is not among the {} patients",
            patients.len()
        )));
    }
    let mut rest: Vec<String> = patients.iter().filter(|p| *p != heldout).cloned().collect();
    rest.sort();
    rest.dedup();
    if k == 0 || rest.len() < k {
        return Err(Error::Argument(format!(
            "cannot split {} patients into {k} folds",
            rest.len()
        )));
    }
    rest.shuffle(&mut rng::named(seed, stream::FOLDS));
    let mut folds = vec![Vec::new(); k];
    for (i, p) in rest.into_iter().enumerate() {
        folds[i % k].push(p);
    }
    Ok(FoldPlan {
        heldout_patient: heldout.to_owned(),
        folds,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvSettings {
    pub panel_size: usize,
    pub trunk: TrunkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub validation_patients: Vec<String>,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

/// Mean ± sample standard deviation of fold aMAE/aRMSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub model: String,
    pub a_mae_mean: f64,
    pub a_mae_std: f64,
    pub a_rmse_mean: f64,
    pub a_rmse_std: f64,
    pub completed_folds: usize,
    pub failed_folds: Vec<usize>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

pub fn summarize(model: &str, folds: &[FoldOutcome]) -> CvSummary {
    let done: Vec<&MetricsReport> = folds.iter().filter_map(|f| f.report.as_ref()).collect();
    let (a_mae_mean, a_mae_std) = mean_std(&done.iter().map(|r| r.a_mae).collect::<Vec<_>>());
    let (a_rmse_mean, a_rmse_std) = mean_std(&done.iter().map(|r| r.a_rmse).collect::<Vec<_>>());
    CvSummary {
        model: model.to_owned(),
        a_mae_mean,
        a_mae_std,
        a_rmse_mean,
        a_rmse_std,
        completed_folds: done.len(),
        failed_folds: folds
            .iter()
            .filter(|f| f.report.is_none())
            .map(|f| f.fold)
            .collect(),
    }
}

/// `model,aMAE,aRMSE` with `mean ± std` cells.
pub fn summary_csv(rows: &[CvSummary]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(["model", "aMAE", "aRMSE"])?;
    for s in rows {
        w.write_record([
            s.model.clone(),
            format!("{:.4} ± {:.4}", s.a_mae_mean, s.a_mae_std),
            format!("{:.4} ± {:.4}", s.a_rmse_mean, s.a_rmse_std),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(format!("csv writer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

fn run_fold(
    dataset: &Dataset,
    patches: &[Option<RgbImage>],
    train_patients: &HashSet<&str>,
    val_patients: &HashSet<&str>,
    settings: &CvSettings,
    tag: &str,
) -> Result<MetricsReport> {
    let rows_of = |set: &HashSet<&str>| -> Vec<usize> {
        (0..dataset.n_spots())
            .filter(|&i| set.contains(dataset.spots[i].patient_id.as_str()) && patches[i].is_some())
            .collect()
    };
    let train_rows = rows_of(train_patients);
    let val_rows = rows_of(val_patients);
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "fold has {} training and {} validation spots",
            train_rows.len(),
            val_rows.len()
        )));
    }
    let panel = select_gene_panel(dataset, settings.panel_size, &train_rows)?;
    let targets = fit_transform_targets(dataset, &panel, &train_rows)?;
    let stats = compute_channel_stats(
        train_rows
            .iter()
            .map(|&i| patches[i].as_ref().expect("filtered")),
    )?;
    let tensor = |i: usize| -> Result<Array3<f64>> {
        Ok(to_tensor(patches[i].as_ref().expect("filtered"), &stats)?.values)
    };
    let set = TrainingSet {
        inputs: train_rows
            .iter()
            .map(|&i| tensor(i))
            .collect::<Result<_>>()?,
        keys: train_rows
            .iter()
            .map(|&i| {
                format!(
                    "{}/{}",
                    dataset.spots[i].section_id, dataset.spots[i].spot_id
                )
            })
            .collect(),
        main: targets.main.select(Axis(0), &train_rows),
        aux: targets.aux.select(Axis(0), &train_rows),
    };
    let batch = settings.train.batch_size.min(set.len());
    let tc = TrainConfig {
        batch_size: batch,
        ..settings.train
    };
    let (state, _) = train(&set, &settings.trunk, &settings.loss, &tc)?;
    let val_inputs: Vec<Array3<f64>> =
        val_rows.iter().map(|&i| tensor(i)).collect::<Result<_>>()?;
    let (pred, _) = predict(&state, &val_inputs)?;
    let truth = targets.main.select(Axis(0), &val_rows);
    let sections: Vec<String> = val_rows
        .iter()
        .map(|&i| dataset.spots[i].section_id.clone())
        .collect();
    per_gene_report(
        &pred,
        &truth,
        &targets.main_genes,
        &sections,
        Split::Validation,
        tag,
    )
}

/// Train and validate one model per fold. Panel selection, target encoding
/// and channel statistics are fitted on each fold's training patients only.
/// A failing fold is recorded and the remaining folds still run.
///
/// `patches[i]` is the patch of `dataset.spots[i]`, if one was kept.
pub fn run_cross_validation(
    dataset: &Dataset,
    patches: &[Option<RgbImage>],
    plan: &FoldPlan,
    settings: &CvSettings,
    model_tag: &str,
) -> Result<(Vec<FoldOutcome>, CvSummary)> {
    if patches.len() != dataset.n_spots() {
        return Err(Error::Argument(format!(
            "{} patches for {} spots",
            patches.len(),
            dataset.n_spots()
        )));
    }
    let mut outcomes = Vec::with_capacity(plan.folds.len());
    for (f, val) in plan.folds.iter().enumerate() {
        let val_set: HashSet<&str> = val.iter().map(String::as_str).collect();
        let train_set: HashSet<&str> = plan
            .folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, ps)| ps.iter().map(String::as_str))
            .collect();
        let result = run_fold(dataset, patches, &train_set, &val_set, settings, model_tag);
        if let Err(e) = &result {
            log::warn!("fold {f} failed: {e}");
        }
        outcomes.push(FoldOutcome {
            fold: f,
            validation_patients: val.clone(),
            error: result.as_ref().err().map(|e| e.to_string()),
            report: result.ok(),
        });
    }
    let summary = summarize(model_tag, &outcomes);
    Ok((outcomes, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patients(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("BC{i:02}")).collect()
    }

    #[test]
    fn fold_sizes_for_22_patients() {
        let p = patients(23);
        let plan = plan_folds(&p, "BC22", 5, 7).unwrap();
        assert_eq!(plan.fold_sizes(), vec![5, 5, 4, 4, 4]);
        assert!(plan.folds.iter().all(|f| !f.contains(&"BC22".to_owned())));
        assert_eq!(plan, plan_folds(&p, "BC22", 5, 7).unwrap());
        assert!(plan_folds(&p, "nobody", 5, 7).is_err());
        assert!(plan_folds(&patients(4), "BC00", 5, 7).is_err());
    }

    #[test]
    fn identical_folds_have_zero_spread() {
        let r = MetricsReport {
            model_tag: "m".into(),
            split: Split::Validation,
            per_gene: vec![],
            a_mae: 0.7,
            a_rmse: 0.9,
            counts: Default::default(),
        };
        let folds: Vec<FoldOutcome> = (0..5)
            .map(|f| FoldOutcome {
                fold: f,
                validation_patients: vec![],
                report: Some(r.clone()),
                error: None,
            })
            .collect();
        let s = summarize("m", &folds);
        assert!((s.a_mae_mean - 0.7).abs() < 1e-15 && s.a_mae_std == 0.0);
        assert_eq!(s.completed_folds, 5);
        assert_eq!(
            summary_csv(&[s]).unwrap(),
            "model,aMAE,aRMSE\nm,0.7000 ± 0.0000,0.9000 ± 0.0000\n"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn plans_partition_patients(n in 2usize..40, k in 1usize..8, h in 0usize..40, seed in any::<u64>()) {
                let p = patients(n);
                let held = p[h % n].clone();
                match plan_folds(&p, &held, k, seed) {
                    Ok(plan) => {
                        let mut all: Vec<String> = plan.folds.concat();
                        all.sort();
                        let mut expect: Vec<String> = p.iter().filter(|x| **x != held).cloned().collect();
                        expect.sort();
                        prop_assert_eq!(all, expect);
                        let sizes = plan.fold_sizes();
                        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
                    }
                    Err(_) => prop_assert!(n - 1 < k),
                }
            }
        }
    }
}
