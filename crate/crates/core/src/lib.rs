//! Semantic aggregation of local patch descriptors for scene recognition.
//!
//! Patches carry two signals: a descriptor `f` and a distribution `p` over
//! semantic classes. [`codebook`] turns a population of `(f, p)` pairs into a
//! per-class prior, mean and deviation; [`vsad`] encodes an image's patches
//! against that codebook; [`selection`] picks the discriminative classes.
//! [`baseline`] holds the classical encoders used for comparison and
//! [`classifier`] the one-vs-all linear SVM harness. [`pipeline`] wires the
//! stages together behind a single configuration file.

// `!(x > 0.0)` is how NaN gets rejected alongside the bound; manifests are
// vectors of ranges, so one-image manifests trip the single-range lint.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::single_range_in_vec_init)]

pub mod aggregate;
pub mod baseline;
pub mod classifier;
pub mod codebook;
pub mod data;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod sampler;
pub mod selection;
pub mod synth;
pub mod util;
pub mod vsad;

pub use classifier::{evaluate, predict, svm_train, EvalReport, LinearOvaModel, SvmOptions};
pub use codebook::{build_codebook, CodebookOptions, SemanticCodebook, SubsetPrior};
pub use data::{
    concat_blocks, normalize, validate_bundle, DescriptorMatrix, EncodedVector, Layout,
    PatchManifest, ProbabilityMatrix, ValidationReport,
};
pub use error::{Error, Result, StageContext};
pub use pipeline::{compare_encoders, run_pipeline, PipelineConfig, RunReport};
pub use sampler::{sample_grid, PatchRect};
pub use selection::{aggregate_responses, random_selection, select_codewords, ResponseTable, SelectionResult};
pub use vsad::{encode_batch, encode_vsad, VsadConfig, VsadEncoder};
