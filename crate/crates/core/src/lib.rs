//! Structured surgical scene reasoning and grounding at desk scale.
//!
//! The crate covers the closed label spaces, the `<think>`/`<answer>` output
//! grammar with `[SEG]` markers, entity-grouped residual prompt fusion, the
//! composite reasoning and grounding loss, the evaluation suite, the on-disk
//! annotation format, and a small differentiable model with a synthetic data
//! harness that exercises the whole pipeline.

pub mod dataset_io;
pub mod evaluation;
pub mod fusion;
pub mod gradcheck;
pub mod grammar;
pub mod harness;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod toy_model;
pub mod vocab;

pub use grammar::{EntityKind, FrameSemantics, SegMarker, StructuredOutput};
pub use mask::BinaryMask;
pub use vocab::{Ivt, LabelSpace};

/// Version of the config, manifest and report schemas.
pub const SCHEMA_VERSION: u32 = 1;
