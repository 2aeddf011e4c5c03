//! Block-causal mask and the next-cluster decoder.

pub mod attention;
pub mod mask;
pub mod model;

pub use mask::{build_mask, mask_for, BlockCausalMask, MaskBuilder};
pub use model::{decode, Decoder, DecoderConfig};
