use crate::autodiff::Tape;
use crate::coupling::{AgentSites, CouplingConfig, CouplingMode};
use crate::error::Result;
use crate::model::{EncoderConfig, Position, SiteKey};

/// Trainable parameter total with a per-site breakdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub sites: Vec<(SiteKey, usize)>,
}

/// Closed-form count: per site, agents `2(w_v + w_t)`; per bridge
/// `r(in + out)`; a meta vector of `d_m` in bidirectional mode. Shift
/// bridges, when enabled, repeat the bridge and meta terms.
pub fn count_trainable_params(encoder: &EncoderConfig, coupling: &CouplingConfig) -> Result<ParamCount> {
    encoder.validate()?;
    coupling.validate(encoder)?;
    let r = coupling.rank;
    let d_m = coupling.d_m;
    let per_site = |position: Position| -> usize {
        let (w_v, w_t) = match position {
            Position::Proj => (encoder.d_t, encoder.d_t),
            _ => (encoder.d_v, encoder.d_t),
        };
        let agents = 2 * (w_v + w_t);
        let (bridges, meta) = match coupling.mode {
            CouplingMode::Ivlu => (0, 0),
            CouplingMode::TextToImage | CouplingMode::ImageToText => (r * (w_t + w_v), 0),
            CouplingMode::Bidirectional => (r * (d_m + w_v) + r * (d_m + w_t), d_m),
        };
        let shift_terms = if coupling.bridge_shift { bridges + meta } else { 0 };
        agents + bridges + meta + shift_terms
    };
    let sites: Vec<(SiteKey, usize)> = SiteKey::enumerate(encoder.layers, &coupling.positions)
        .into_iter()
        .map(|key| (key, per_site(key.position)))
        .collect();
    Ok(ParamCount {
        total: sites.iter().map(|(_, n)| n).sum(),
        sites,
    })
}

/// Count by building the sites and summing the sizes of the trainable
/// leaves they register on a tape.
pub fn enumerate_trainable_params(encoder: &EncoderConfig, coupling: &CouplingConfig, seed: u64) -> Result<usize> {
    let sites = AgentSites::<f32>::init(encoder, coupling, seed)?;
    let mut tape = Tape::new();
    sites.register(&mut tape, true)?;
    Ok(tape.params().into_iter().map(|v| tape.value(v).len()).sum())
}
