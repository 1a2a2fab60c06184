//! Covariance spectra, effective rank, distance concentration and
//! ground-truth alignment diagnostics.

mod alignment;
mod distance;
mod spectrum;

pub use alignment::{gte_alignment, hungarian, max_weight_assignment, AlignmentReport};
pub use distance::{concentration_curve, minmax_ratio, minmax_stats, ConcentrationPoint, MinMaxStats};
pub use spectrum::{
    covariance, effective_rank, log10_spectrum, symmetric_evd, EffectiveRank, Evd, SpectrumReport,
    DEFAULT_ERANK_EPS, LOG_FLOOR,
};
