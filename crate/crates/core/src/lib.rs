//! Learned image compression with a self-generated structure prior.
//!
//! A prior extractor distils a structure latent `s` from the image; its
//! decoded form conditions the analysis transform, the entropy model of the
//! detail latent `y`, and the synthesis transform. Both latents carry their
//! own hyperprior and are range-coded into a four-segment bitstream.

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod conv;
pub mod entropy_models;
pub mod error;
pub mod experiment;
pub mod image_io;
pub mod model;
pub mod params;
pub mod quantizer;
pub mod range_coder;
pub mod real;
pub mod tensor;
pub mod training;
pub mod transforms;

pub use error::{DcicError, Result};
pub use real::Real;
pub use model::{Model, Segment};
pub use tensor::{FeatureMap, Tensor};
pub use transforms::{ChannelPlan, ConditioningFlags};
