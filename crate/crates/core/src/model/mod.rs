//! Online encoder and decoder, EMA target encoder, projection heads and CASA.

pub mod config;
pub mod layers;
pub mod network;
pub mod params;

pub use config::{EncoderConfig, ModelConfig, LN_EPS};
pub use network::{
    casa_align, decode_full, encode_target, encode_visible, forward_bundle, global_cls, project_head,
    Branch, CasaOutput, ForwardBundle,
};
pub use params::{Bound, ModelState, ParamSet};
