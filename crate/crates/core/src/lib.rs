// NaN-rejecting `!(x > 0.0)` guards and index loops over coupled arrays are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments, clippy::type_complexity)]

pub mod error;
pub mod lattice;
pub mod point_process;
pub mod sector_solver;
pub mod conductance;
pub mod corrector_cache;
pub mod diff_calculus;
pub mod estimator;
pub mod oracle;
pub mod config;
pub mod report;
pub mod acceptance;

pub use error::{Error, Result};
