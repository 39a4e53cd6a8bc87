#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
mod bundle;
pub mod data_io;
mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod networks;
mod series;
pub mod surfaces;
pub mod training;

pub use bundle::PathBundle;
pub use error::{Error, Result};
pub use series::TimeSeriesMatrix;
