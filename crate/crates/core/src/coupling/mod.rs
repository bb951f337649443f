//! Agent layers, cross-modal bridges and their folding into frozen weights.

mod agent;
mod fuse;
mod infer;
mod site;

pub use agent::{AgentLayer, Bridge};
pub use fuse::{fuse_layernorm, fuse_linear, fuse_model};
pub use infer::{encode_images, encode_texts, probe_layers};
pub use site::{AgentSites, CoupledAgentSite, CouplingConfig, CouplingMode, ParamClass, SiteVars};
