//! Feature-correlation statistics and the noise-cancellation oracle.

mod correlation;
mod noise;

pub use correlation::{
    correlation_histogram, pearson, BandTally, CorrelationHistogram, BAND_THRESHOLDS, HISTOGRAM_BINS,
};
pub use noise::{
    fused_kernel_eq7, make_noise_instance, make_noise_instance_shifted, random_kernel_set, reconstruct_eq6,
    run_oracle, solve_white_response, NoiseInstance, OracleSummary, Reconstruction, SolveResult,
    MIN_GAMMA_PERP, SUBSPACE_THRESHOLD,
};
