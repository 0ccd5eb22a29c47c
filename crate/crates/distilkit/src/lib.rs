//! Knowledge distillation toolkit.
#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN
#![allow(clippy::needless_range_loop)]
pub mod bayes;
pub mod binio;
pub mod check;
pub mod compress;
pub mod config;
pub mod dataio;
pub mod density;
pub mod error;
pub mod gendistill;
pub mod mathx;
pub mod mcmc;
pub mod mog;
pub mod nade;
pub mod nn;
pub mod optim;
pub mod partition;
pub mod rbm;
pub mod rng;

pub use error::{Error, Result};
