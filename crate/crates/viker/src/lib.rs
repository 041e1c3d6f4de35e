//! Desk-scale laboratory for visual-guided key-token regularized
//! unlearning (ViKeR) on an exactly-reproducible toy conditional
//! autoregressive model, together with the GA / NPO / IdkPO baselines,
//! a synthetic persona QA benchmark, evaluation metrics, and numerical
//! verifiers for the token-level gradient-reweighting identities.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod grad;
pub mod io;
pub mod losses;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod reference;
pub mod train;
pub mod util;

pub use error::{Error, Result};
