//! Learned sub-networks: the multi-scale dilated encoder, three decoders and
//! two causal entropy networks, with their parameter container.

mod checkpoint;
pub mod entropy;
mod model;
mod params;
mod pipeline;

pub use checkpoint::Checkpoint;
pub use entropy::{log2_prob, softmax_into, Context, EntropyModel};
pub use model::{decoder, encoder, entropy_logits, Bound, DecoderKind, EncoderVars};
pub use params::{Description, ModelConfig, ModelParams, DOWNSAMPLE, LEAKY_SLOPE};
pub use pipeline::{analyze, forward, synthesize, Analysis, Forward, SteOffsets};
