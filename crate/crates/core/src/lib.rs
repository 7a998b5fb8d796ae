pub mod conv;
pub mod data;
pub mod error;
pub mod fse;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;

pub use error::{PdfnetError, Result};
