//! Decomposed channel-group quantization for transformer GEMMs.
//!
//! Activation channels are split into groups whose scales are powers of an
//! integer `α` apart, so products over all groups can share one integer
//! accumulator that is rescaled by `α` between groups. The crate provides
//! calibration, the explicit and implicit integer GEMM paths, a cycle-level
//! model of an output-stationary systolic array with per-PE rescaling, and
//! a small transformer block to exercise everything end to end.

pub mod calibrate;
pub mod error;
pub mod plan_io;
pub mod qgemm;
pub(crate) mod serde_float;
pub mod sim;
pub mod tensor;
pub mod tnsr;
pub mod transformer;

pub use calibrate::{
    bias_correction, build_ladder, build_plan, classify_channel, quantize_activation,
    quantize_weight, self_calibrate, BiasCorrection, ChunkPlan, DecompositionPlan, GroupLadder,
    PlanConfig, QuantizedActivation, QuantizedWeight,
};
pub use error::{Error, Result};
pub use qgemm::{
    compare_paths, gemm_explicit, gemm_implicit, gemm_reference, GemmResult, PathComparison,
    PlanSource, DEFAULT_ACC_BITS,
};
pub use tensor::{ErrorMetrics, FloatMatrix, Granularity, IntMatrix, QuantParams};
