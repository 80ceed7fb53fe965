//! Non-training substrate of a native-resolution vision-language pipeline:
//! resolution/aspect-ratio taxonomy, arbitrary-resolution patch budgeting
//! with 2×2 merging, Patch-n-Pack sequence packing, a desk-scale reference
//! encoder with 2D rotary positions, and an EM/ANLS evaluation protocol with
//! per-cell reporting.

pub mod budget;
pub mod encoder;
pub mod manifest;
pub mod packer;
pub mod report;
pub mod scoring;
pub mod taxonomy;

pub use budget::{BudgetConfig, BudgetError, PatchPlan};
pub use encoder::{EncodedImage, Encoder, EncoderConfig, EncoderInput, PositionGrid};
pub use manifest::{AugmentationPlan, BalanceReport, Distribution, Record, Transform};
pub use packer::{PackPolicy, PackStats, PackedBatch, PackedSequence, PatchSequence};
pub use report::{CellReport, DiffReport, ReportError, RowOrder, Sensitivity, Sigma};
pub use scoring::{AnswerType, Metric, ScoredAnswer, ScoringConfig, UnitLexicon};
pub use taxonomy::{AreaBin, GridCell, ImageDims, RatioBin};
