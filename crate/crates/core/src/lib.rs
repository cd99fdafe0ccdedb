//! Differentiable toy image-to-video diffusion stack with attention-suppression
//! immunization attacks and motion metrics.

pub mod attack;
pub mod autograd;
pub mod checkpoint;
pub mod diffusion;
pub mod dit;
pub mod error;
mod gemm;
pub mod image_io;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod vae;
pub mod video;

pub use attack::{pgd, AttackConfig, ImmunizedImage, LossKind, Pipeline};
pub use autograd::{grad_check, grad_check_coords, Tape, Var};
pub use diffusion::{NoiseSchedule, SpriteDataset};
pub use dit::{AttentionRecord, CaptionEmbedding, Dit, DitConfig};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use tensor::Tensor;
pub use vae::{TrainingLog, Vae, VaeConfig};
pub use video::{replicate_image, LatentVideo, VideoTensor};
