//! Binary neural network toolkit.
//!
//! * [`bitcore`]: bit-packed `{-1, +1}` tensors and the XNOR/popcount kernel
//! * [`netspec`]: the CNV family of layer graphs and their shapes
//! * [`train`]: latent-weight training with a straight-through estimator
//! * [`compile`]: batch-norm threshold folding and the `BCOP` model file
//! * [`engine`]: sliding window, MVTU and OR-pool execution of compiled models
//! * [`perfmodel`]: cycle/throughput model and folding search
//! * [`gradcam`]: class activation heatmaps
//! * [`data`]: images, manifests, balancing, augmentation, metrics
//!
//! Batch work runs on rayon with the default `parallel` feature; see [`par`].

pub mod bitcore;
pub mod compile;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcam;
pub mod netspec;
pub mod par;
pub mod perfmodel;
pub mod train;

pub use error::{Error, Result};
