//! Entropy coding and the bitstream container.

pub mod bitstream;
pub mod cdf;
pub mod pipeline;
pub mod range;

pub use bitstream::{Bitstream, Header};
pub use cdf::{gaussian_cdf_table, CdfBank, QuantizedCdf};
pub use pipeline::{
    context_params, decode_image, decode_latents, encode_image, hyper_features, pad_to_multiple, synthesize, Encoded,
};
pub use range::{range_decode, range_encode, RangeDecoder, RangeEncoder};
