//! Toy CLIP-style dual encoder with agent-layer hook points.

mod classify;
mod config;
mod forward;
mod weights;

pub use classify::{argmax_rows, classify};
pub use config::{EncoderConfig, Modality, Position, SiteKey};
pub use forward::{AgentVars, EncoderVars, HookVars, Probe};
pub use weights::{BlockWeights, DualEncoder, EncoderWeights, LayerNormWeights, LinearWeights};
