//! Gene-expression prediction from histology patches with spatial
//! transcriptomics supervision.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`ingest`]: count matrices, spot tables, gene symbol mapping and the
//!   per-spot archive.
//! - [`filter`]: gene/spot filtering, main/auxiliary gene panels and target
//!   encoding.
//! - [`stain`]: sparse stain deconvolution, stain normalization and
//!   luminosity standardization.
//! - [`patches`]: spot-centred patch extraction, background rejection,
//!   augmentation and tensor normalization.
//! - [`model`]: a dual-head micro-network (MLP, conv or ViT-style trunk) with
//!   hand-written backpropagation and SGD.
//! - [`eval`]: MAE/RMSE/Pearson metrics, per-gene reports and patient-level
//!   cross-validation.
//! - [`viz`]: expression heatmaps, overlays and summary tables.
//! - [`fixture`]: seeded synthetic datasets with a known learnable signal.

pub mod error;
pub mod eval;
pub mod filter;
pub mod fixture;
pub mod ingest;
pub mod model;
pub mod patches;
pub mod rng;
pub mod stain;
pub mod viz;

pub use error::{Error, Result};
pub use filter::{GenePanel, Split, TargetTable, TargetTransform};
pub use ingest::{CountMatrix, Dataset, GeneAxis, SpotArchive, SpotRecord};
pub use model::{LossConfig, ModelState, TrunkConfig, TrunkVariant};
pub use patches::{Patch, PatchConfig, PatchTensor};
pub use stain::{StainParams, StainProfile};
