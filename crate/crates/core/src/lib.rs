//! Binary segmentation by low-rank adaptation of a frozen latent image model.
//!
//! An image goes through the frozen encoder, one conditioned U-Net pass and
//! the frozen decoder. The decoded channels are averaged into a soft mask,
//! which a per-image Otsu threshold turns binary. Training touches only the
//! low-rank factors on the U-Net attention projections ([`lora`]). It uses
//! MixUp in image space and Gaussian noise in latent space ([`augment`]).
//!
//! ```
//! use silora::backbone::{build_toy_backbone, ToyBackboneConfig};
//! use silora::data::synth_generate;
//! use silora::trainer::{predict_mask, train, TrainConfig};
//!
//! let cfg = ToyBackboneConfig { image_size: 16, calibration_images: 16, ..ToyBackboneConfig::default() };
//! let bundle = build_toy_backbone(&cfg, 0)?;
//! let data = synth_generate(4, 16, 0)?;
//! let ckpt = train(&data, &bundle, &TrainConfig { image_size: 16, epochs: 1, ..TrainConfig::default() })?;
//! let mask = predict_mask(&data[0].image, &bundle, &ckpt.adaptors, &ckpt.config.prompt)?;
//! assert_eq!((mask.height(), mask.width()), (16, 16));
//! # Ok::<(), silora::error::Error>(())
//! ```
//!
//! The `silora` binary wraps the same pieces ([`cli`]).

pub mod augment;
pub mod backbone;
pub mod cli;
pub(crate) mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod lora;
pub mod maskops;
pub mod metrics;
pub mod optim;
pub mod plot;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/adaptors.md")]
    mod adaptors {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/thresholding.md")]
    mod thresholding {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
