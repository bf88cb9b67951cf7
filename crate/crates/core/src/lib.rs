//! Multi-epoch ECG rhythm classification with structured state-space layers.

pub mod wfdb;
pub mod autodiff;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod synth;
pub mod study;
