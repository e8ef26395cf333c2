//! Exact tabular counterparts of the prefix backups: contraction, fixed-point
//! identity, divergence bounds and the gradient-averaging variance bound.

mod backup;
mod divergence;
mod report;
mod tables;

pub use backup::{chunk_return, expected_max, FixedPoint, LabInstance, PolicyValue};
pub use divergence::{
    best_of_n_distribution, kl_best_of_n, prefix_marginal, tv_checks, tv_distance, variance_bound,
    TvComparison,
};
pub use report::{random_lab, verify_theory, LabShape, TheoryCheck, TheoryReport, CHECK_NAMES};
pub use tables::{decode, prefix_code, random_distribution, PrefixQTable, ProposalTable};
