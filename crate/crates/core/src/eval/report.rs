use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::metrics::{categorize, mae, median, pcc, rmse, Category};
use crate::error::{Error, Result};
use crate::filter::Split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneMetrics {
    pub gene: String,
    /// Per-section correlation; `None` where it is undefined.
    pub pcc_per_section: Vec<(String, Option<f64>)>,
    /// Median over the defined section values; `None` if there are none.
    pub median_pcc: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
    pub category: Option<Category>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub positive: usize,
    pub strong: usize,
    pub medium: usize,
    pub weak: usize,
    pub negligible: usize,
    pub negative: usize,
    pub undefined: usize,
}

impl CategoryCounts {
    pub fn from_genes(genes: &[GeneMetrics]) -> CategoryCounts {
        let mut c = CategoryCounts::default();
        for g in genes {
            match g.category {
                Some(Category::Strong) => c.strong += 1,
                Some(Category::Medium) => c.medium += 1,
                Some(Category::Weak) => c.weak += 1,
                Some(Category::Negligible) => c.negligible += 1,
                Some(Category::Negative) => c.negative += 1,
                None => c.undefined += 1,
            }
        }
        c.positive = c.strong + c.medium + c.weak + c.negligible;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_tag: String,
    pub split: Split,
    pub per_gene: Vec<GeneMetrics>,
    pub a_mae: f64,
    pub a_rmse: f64,
    pub counts: CategoryCounts,
}

/// Metrics per gene (column). Correlation is taken within each section and
/// summarized by its median; MAE/RMSE pool every spot.
///
/// `sections[i]` names the section of row `i`.
pub fn per_gene_report(
    pred: &Array2<f64>,
    truth: &Array2<f64>,
    genes: &[String],
    sections: &[String],
    split: Split,
    model_tag: &str,
) -> Result<MetricsReport> {
    if pred.dim() != truth.dim() {
        return Err(Error::Argument(format!(
            "prediction shape {:?} differs from truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    if genes.len() != pred.ncols() || sections.len() != pred.nrows() {
        return Err(Error::Argument(format!(
            "{} genes / {} section labels for a {}×{} matrix",
            genes.len(),
            sections.len(),
            pred.nrows(),
            pred.ncols()
        )));
    }
    if pred.nrows() == 0 {
        return Err(Error::EmptyDataset("no spots to evaluate".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in sections.iter().enumerate() {
        groups.entry(s.as_str()).or_default().push(i);
    }
    let mut per_gene = Vec::with_capacity(genes.len());
    for (j, gene) in genes.iter().enumerate() {
        let y = truth.column(j).to_vec();
        let yhat = pred.column(j).to_vec();
        let mut per_section = Vec::with_capacity(groups.len());
        for (s, rows) in &groups {
            let r = if rows.len() < 2 {
                None
            } else {
                let a: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
                let b: Vec<f64> = rows.iter().map(|&i| yhat[i]).collect();
                pcc(&a, &b)?
            };
            per_section.push((s.to_string(), r));
        }
        let defined: Vec<f64> = per_section.iter().filter_map(|x| x.1).collect();
        let median_pcc = median(&defined);
        per_gene.push(GeneMetrics {
            gene: gene.clone(),
            pcc_per_section: per_section,
            median_pcc,
            mae: mae(&y, &yhat)?,
            rmse: rmse(&y, &yhat)?,
            category: median_pcc.map(categorize),
        });
    }
    let n = per_gene.len().max(1) as f64;
    let a_mae = per_gene.iter().map(|g| g.mae).sum::<f64>() / n;
    let a_rmse = per_gene.iter().map(|g| g.rmse).sum::<f64>() / n;
    let counts = CategoryCounts::from_genes(&per_gene);
    Ok(MetricsReport {
        model_tag: model_tag.to_owned(),
        split,
        per_gene,
        a_mae,
        a_rmse,
        counts,
    })
}

impl MetricsReport {
    /// Genes ordered by median Pcc, best first; undefined values last, ties
    /// by gene name.
    pub fn ranked(&self) -> Vec<&GeneMetrics> {
        let mut v: Vec<&GeneMetrics> = self.per_gene.iter().collect();
        v.sort_by(|a, b| {
            let key = |g: &GeneMetrics| g.median_pcc.unwrap_or(f64::NEG_INFINITY);
            key(b).total_cmp(&key(a)).then_with(|| a.gene.cmp(&b.gene))
        });
        v
    }

    pub fn top(&self, n: usize) -> Vec<&GeneMetrics> {
        self.ranked().into_iter().take(n).collect()
    }

    pub fn gene(&self, name: &str) -> Option<&GeneMetrics> {
        self.per_gene.iter().find(|g| g.gene == name)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.4}"))
}

fn csv_string(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(format!("csv writer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One row per gene, best median Pcc first.
pub fn report_csv(r: &MetricsReport) -> Result<String> {
    let mut rows = vec![
        ["gene", "median_pcc", "mae", "rmse", "category", "sections"]
            .map(String::from)
            .to_vec(),
    ];
    for g in r.ranked() {
        rows.push(vec![
            g.gene.clone(),
            fmt_opt(g.median_pcc),
            format!("{:.4}", g.mae),
            format!("{:.4}", g.rmse),
            g.category.map_or("undefined", |c| c.as_str()).to_owned(),
            g.pcc_per_section.len().to_string(),
        ]);
    }
    csv_string(rows)
}

/// Top genes by median Pcc with one column per model: genes are ranked by
/// their best value across the reports.
pub fn top_genes_table(reports: &[MetricsReport], n: usize) -> Result<String> {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for r in reports {
        for g in &r.per_gene {
            let v = g.median_pcc.unwrap_or(f64::NEG_INFINITY);
            let e = best.entry(g.gene.as_str()).or_insert(f64::NEG_INFINITY);
            *e = e.max(v);
        }
    }
    let mut genes: Vec<(&str, f64)> = best.into_iter().collect();
    genes.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut header = vec!["gene".to_owned()];
    header.extend(reports.iter().map(|r| r.model_tag.clone()));
    let mut rows = vec![header];
    for (g, _) in genes.into_iter().take(n) {
        let mut row = vec![g.to_owned()];
        row.extend(
            reports
                .iter()
                .map(|r| fmt_opt(r.gene(g).and_then(|m| m.median_pcc))),
        );
        rows.push(row);
    }
    csv_string(rows)
}

/// Average errors on training and testing data, one row per model.
pub fn error_table(rows: &[(&MetricsReport, &MetricsReport)]) -> Result<String> {
    let mut out = vec![[
        "model",
        "train_amae",
        "train_armse",
        "test_amae",
        "test_armse",
    ]
    .map(String::from)
    .to_vec()];
    for (train, test) in rows {
        out.push(vec![
            test.model_tag.clone(),
            format!("{:.4}", train.a_mae),
            format!("{:.4}", train.a_rmse),
            format!("{:.4}", test.a_mae),
            format!("{:.4}", test.a_rmse),
        ]);
    }
    csv_string(out)
}
