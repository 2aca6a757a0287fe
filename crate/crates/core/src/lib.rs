//! Dataset tooling for occlusion-heavy instance segmentation: court-aware
//! copy-paste augmentation, the occlusion metric, and checkpoint averaging.

pub mod color;
pub mod court;
pub mod dataset;
pub mod mask;
pub mod synth;
pub mod bank;
pub mod augment;
pub mod metric;
pub mod swa;
pub mod cli;
