//! Reliability and throughput of delay-constrained re-transmission schemes
//! over Rayleigh block fading with short packets.
//!
//! * [`fbl`]: normal-approximation error probabilities for Chase combining and
//!   incremental redundancy.
//! * [`channel`]: seeded exponential SNR streams.
//! * [`averaging`]: fading-averaged error probabilities and their cache.
//! * [`markov`]: the D-HARQ credit chain and the fixed/HARQ baselines.
//! * [`sim`]: packet-level Monte Carlo of all three schemes.

pub mod averaging;
pub mod channel;
pub mod error;
pub mod fbl;
pub mod markov;
pub mod sim;

pub use averaging::{averaged_error, averaged_error_profile, Averager, AveragingConfig, EpsilonCache, ErrorEstimate, ErrorProfile};
pub use channel::{snr_from_db, snr_to_db, FadingSource};
pub use error::{Error, Result};
pub use fbl::{
    channel_dispersion, conditional_error, conditional_error_cc, conditional_error_ir, q_function, ApproximationMode, CodeSpec,
    CombiningScheme, SnrList,
};
pub use markov::{
    analyze_dharq, build_lambda, build_transition_matrix, dharq_per, dharq_per_m1_closed_form, dharq_throughput, dharq_throughput_exact,
    stationary_distribution, stationary_stderr, BaselineAnalysis, ChainState, DharqAnalysis, ErrorTable, LambdaMatrix, ProtocolParams, StationaryDistribution,
    TransitionMatrix,
};
pub use sim::{
    conditional_per_cdf, conditional_per_cdf_at, run_dharq, run_fixed, run_harq, run_replicated, CdfPoint, PacketOutcome, PacketStream,
    Protocol, SimConfig, SimResult,
};
