//! Finger-drawn digit authentication toolkit.
//!
//! The pipeline turns raw touch strokes into binary rasters ([`raster`]),
//! trains one model per enrolled user ([`models`] on top of the small
//! numeric engine in [`tensor`]), calibrates a decision threshold and
//! reports FAR / FRR / EER / ACC / AUC ([`eval`]). [`harness`] runs the
//! per-participant protocol end to end.

pub mod eval;
pub mod harness;
pub mod models;
pub mod plot;
pub mod raster;
pub mod stroke;
pub mod synth;
pub mod tensor;

pub use eval::{ConfusionCounts, EvalReport, RocCurve};
pub use models::{ModelKind, ModelSpec, TrainedModel};
pub use raster::{RasterConfig, RasterImage};
pub use stroke::{DatasetManifest, Drawing, StrokePoint};
