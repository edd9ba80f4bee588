//! Hierarchy-aware occlusal contact segmentation toolkit.
//!
//! Articulating paper is the everyday way dentists locate where opposing
//! teeth meet, but its ink marks both true contacts and false indications.
//! This crate implements the full desk-scale pipeline for telling them
//! apart:
//!
//! * [`hierarchy`] — class hierarchies as ordered levels of leaf partitions
//!   (Background / MTP / MFP with a FULL parent class).
//! * [`loss`] — hierarchical cross-entropy and hierarchical dice losses,
//!   their combination, exact analytic gradients, and a finite-difference
//!   oracle.
//! * [`mask`] — binary mask set algebra, the medically-true-positive mask
//!   generation pipeline, the grayscale multiclass codec, per-patient
//!   calibration transforms, and overlay rendering.
//! * [`metrics`] — per-class IoU/Dice/Precision/Recall, FULL-contact union
//!   evaluation, and fold-wise aggregation.
//! * [`model`] — a small dual-branch segmentation network with a
//!   hand-written backward pass, trained with the combined loss.
//! * [`data`] — a synthetic dataset generator with ground truth known by
//!   construction, dataset I/O, patient-wise k-fold splits, and training
//!   augmentation.
//! * [`cli`] — the `occuseg` command-line pipeline built from the above.
//!
//! The `examples/` directory holds one runnable walk-through per
//! capability; `cargo run --example train_eval` exercises the whole loop on
//! synthetic data.

pub mod cli;
pub mod data;
pub(crate) mod fsio;
pub mod hierarchy;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;

pub use hierarchy::{ClassHierarchy, HierarchyError, HierarchySpec};
pub use loss::{ChannelField, LossConfig, PixelReduction};
pub use mask::{BinaryMask, LabelMask, MaskError, PatientTransform};
pub use metrics::{ConfusionCounts, EvalClass, Metric, MetricsReport};
pub use model::{DualBranchNet, ModelError, TrainConfig, TrainSample};
