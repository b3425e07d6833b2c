//! Speech path: waveform -> log-Mel frames -> 8x convolutional subsampling
//! -> conformer encoder -> MLP projector emitting decoder-space audio
//! tokens at an 80ms rate.

pub mod budget;
pub mod encoder;
pub mod mel;
pub mod wav;

pub use budget::{audio_token_budget, max_duration_s, subsampled_len, AudioBudget};
pub use encoder::{AudioEncoder, ConformerConfig};
pub use mel::{log_mel, AudioFeatures, MelFrontendConfig};

use crate::error::Result;
use crate::numerics::{Graph, NodeId};
use crate::params::GraphBinder;
use crate::projector::MlpProjector;

/// The audio projector's parameter prefix.
pub const AUDIO_PROJECTOR_PREFIX: &str = "audio_projector";

/// Standard audio projector: attn_dim -> d_model with a hidden layer of
/// the encoder width.
pub fn audio_projector(attn_dim: usize, d_model: usize) -> Result<MlpProjector> {
    MlpProjector::new(AUDIO_PROJECTOR_PREFIX, attn_dim, attn_dim, d_model)
}

/// Full audio tower over mel frames already in the graph:
/// [T, n_mels] -> [ceil(T/8), d_model].
pub fn audio_tower(
    g: &mut Graph,
    binder: &mut GraphBinder,
    encoder: &AudioEncoder,
    projector: &MlpProjector,
    frames: NodeId,
) -> Result<NodeId> {
    let encoded = encoder.forward(g, binder, frames)?;
    projector.forward(g, binder, encoded)
}
