//! Low-rank double-binary adapters: a sign-carrier compression format for
//! LoRA-style weight updates, with training-free ADMM compression, a
//! straight-through-estimator refinement trainer, a bit-packed inference
//! kernel, Monte-Carlo validators for the concentration guarantees, and
//! binary container formats.

pub mod adapter;
pub mod format;
pub mod kernel;
pub mod ptq;
pub mod qat;
pub mod tensor;
pub mod theory;

pub use adapter::{
    canonical_adapter, canonical_reconstruction, diagnose, gauge_fix, AdapterError, DiagnosticsReport,
    LoraFactors, LordbaAdapter, ScaleEnvelope, SignMatrix,
};
pub use format::{
    decode_adapter, decode_factors, encode_adapter, encode_factors, lba1_file_bytes,
    load_adapter, load_factors, lrf1_file_bytes, save_adapter, save_factors, FormatError,
};
pub use kernel::{
    adapter_forward, bandwidth_ratio, bench, report_csv, sign_matmul, BenchShape, KernelError,
    KernelReport, PackedAdapter,
};
pub use ptq::{
    delta_dense, penalty_update, projection_dual_step, run_admm, scale_sweep, sign_margin, svd_warm_start, u_step,
    AdmmConfig, AdmmState, CarrierBlock, PtqError,
};
pub use qat::{
    adapter_toy_loss, qat_backward, qat_forward, relaxed_loss, smooth_sign_derivative, train,
    CarrierRelaxation, QatConfig, QatError, QatGradients, QatInit, QatMode, QatState, ToyTask,
};
pub use tensor::{solve_spd, thin_svd, DenseMatrix, TensorError, ThinSvd};
pub use theory::{
    check_entry_tail, check_reconstruction_bound, check_sign_consistency, check_signal_lowerbound,
    relative_reconstruction_error, sample_factors, McReport, NoiseDist, SampledFactors, SignMode,
    SignNoiseModel, TheoryError,
};
