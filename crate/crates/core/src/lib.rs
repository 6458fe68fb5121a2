//! Deep merging of bracketed exposure stacks into ghost-free HDR radiance maps.
//!
//! The crate covers the whole pipeline: radiometric preprocessing
//! ([`radiance`]), background registration ([`align`]), training-patch
//! generation ([`dataset`]), the encoder/merger/decoder networks ([`net`]),
//! optimization ([`train`]), tiled inference ([`infer`]) and quality metrics
//! ([`metrics`]). File formats live in [`io`].

pub mod align;
pub mod dataset;
pub mod error;
pub mod infer;
pub mod io;
pub mod metrics;
pub mod net;
pub mod radiance;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use radiance::{CrfTable, ExposureStack, LdrImage, RadianceImage, RgbImage, TonemapParams};
