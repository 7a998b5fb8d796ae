//! Forward graph: three-branch encoder, FSE decoder, depth decoder and merging heads.

pub mod backbone;
pub mod config;
pub mod model;

pub use backbone::{Encoder, Pyramid, Pyramids};
pub use config::{BackboneConfig, NetworkConfig, STAGE_STRIDES};
pub use model::{ForwardOptions, Pdfnet, PdfnetOutputs};
