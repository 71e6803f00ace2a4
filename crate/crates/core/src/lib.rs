//! Part-based object detection with detectability switches.
//!
//! An object is modelled by a fully connected graph over a holistic node
//! and its body parts. Every node carries a switch: a node that cannot be
//! detected reliably is switched off and drops out of the score. Given
//! per-node hypothesis lists from external detectors, the crate learns a
//! linear max-margin model over all switch patterns, finds the best
//! configurations by exhaustive search, and post-processes them into
//! object boxes with part-level descriptions.

pub mod data;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod learning;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod postprocess;
pub mod synthetic;

pub use error::{Error, Result};
pub use geometry::{iou, union_box, BBox};
pub use model::{Configuration, DetectabilityPattern, GraphSpec, Hypothesis, HypothesisStore, ModelParams};
pub use pipeline::{Detection, TrainedModel};
