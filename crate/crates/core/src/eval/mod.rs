//! Error and correlation metrics, per-gene reports and cross-validation.

pub mod cv;
pub mod metrics;
pub mod report;

pub use cv::{
    plan_folds, run_cross_validation, summary_csv, CvSettings, CvSummary, FoldOutcome, FoldPlan,
};
pub use metrics::{categorize, mae, median, pcc, rmse, Category};
pub use report::{
    error_table, per_gene_report, report_csv, top_genes_table, CategoryCounts, GeneMetrics,
    MetricsReport,
};
