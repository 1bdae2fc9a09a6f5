//! 3D CT vision-language pretraining at desk scale.
//!
//! The crate covers the full pipeline: volume preprocessing, diagnosis-code
//! phenotype labeling, report sectioning, inflated-3D encoders, multi-task
//! contrastive/phenotype training, and the evaluation suite (zero-shot
//! classification, pooled retrieval, bootstrap metrics, scaling-law fits),
//! all runnable end-to-end on synthetic cohorts.

pub mod eval;
pub mod pipeline;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod phenotype;
pub mod report;
pub mod synth;
pub mod train;
pub mod volume;
