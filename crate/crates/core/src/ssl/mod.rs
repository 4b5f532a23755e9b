//! Multi-view self-supervised methods: encoder, heads, losses, and the EMA target.

pub mod encoder;
pub mod losses;
mod model;

pub use encoder::{Encoder, EncoderArch, EncoderSpec};
pub use model::{
    default_head, forward_bundle, ssl_loss, BranchSource, EmaState, Method, Model, Networks, RegressorSpec, RepresentationBundle,
    SslConfig, Views,
};
