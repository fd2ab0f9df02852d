pub mod bitstream;
pub mod error;
pub mod grad;
pub mod harness;
pub mod image;
pub mod kv;
pub mod metrics;
pub mod networks;
pub mod quant;
pub mod tensor;
pub mod training;

pub use error::{MdcError, Result};
pub use image::Image;
pub use tensor::Tensor;

pub use bitstream::{CodingMode, EncodedDescription};
pub use harness::{ChannelConfig, Codec, DecodeMode, RdPoint};
pub use metrics::{LossBreakdown, ScaleWeights};
pub use networks::{Checkpoint, Description, ModelConfig, ModelParams};
pub use quant::{CenterVector, FeatureTensor, ImportanceMap, IndexTensor};
pub use training::{Dataset, TrainConfig};
