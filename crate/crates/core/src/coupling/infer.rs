//! Gradient-free forward passes with optional agent hooks.

use super::site::AgentSites;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{DualEncoder, EncoderVars, Probe};
use crate::tensor::{Scalar, Tensor};

fn stack<T: Scalar>(tape: &mut Tape<T>, rows: &[Var]) -> Result<Tensor<T>> {
    let v = tape.stack_rows(rows)?;
    Ok(tape.value(v).clone())
}

/// Text features `[texts, d_t]`, hooked by `sites` when given.
pub fn encode_texts<T: Scalar>(
    model: &DualEncoder<T>,
    texts: &[Vec<usize>],
    sites: Option<&AgentSites<T>>,
) -> Result<Tensor<T>> {
    if texts.is_empty() {
        return Err(Error::InvalidArgument("no texts to encode".into()));
    }
    let mut tape = Tape::new();
    let vars = EncoderVars::register(&mut tape, &model.config, &model.text)?;
    let hooks = sites.map(|s| s.register(&mut tape, false)).transpose()?;
    let rows = texts
        .iter()
        .map(|t| vars.encode_text(&mut tape, t, hooks.as_ref().map(|h| &h.hooks), None))
        .collect::<Result<Vec<_>>>()?;
    stack(&mut tape, &rows)
}

/// Image features `[images, d_t]`, hooked by `sites` when given.
pub fn encode_images<T: Scalar>(
    model: &DualEncoder<T>,
    images: &[&Tensor<T>],
    sites: Option<&AgentSites<T>>,
) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to encode".into()));
    }
    let mut tape = Tape::new();
    let vars = EncoderVars::register(&mut tape, &model.config, &model.image)?;
    let hooks = sites.map(|s| s.register(&mut tape, false)).transpose()?;
    let rows = images
        .iter()
        .map(|p| vars.encode_image(&mut tape, p, hooks.as_ref().map(|h| &h.hooks), None))
        .collect::<Result<Vec<_>>>()?;
    stack(&mut tape, &rows)
}

/// Output of every hookable layer in both encoders for one text and one
/// image, in evaluation order, followed by the two final features.
pub fn probe_layers<T: Scalar>(
    model: &DualEncoder<T>,
    tokens: &[usize],
    patches: &Tensor<T>,
    sites: Option<&AgentSites<T>>,
) -> Result<Vec<(String, Tensor<T>)>> {
    let mut tape = Tape::new();
    let text = EncoderVars::register(&mut tape, &model.config, &model.text)?;
    let image = EncoderVars::register(&mut tape, &model.config, &model.image)?;
    let hooks = sites.map(|s| s.register(&mut tape, false)).transpose()?;
    let hooks = hooks.as_ref().map(|h| &h.hooks);
    let mut probe = Probe::default();
    let t = text.encode_text(&mut tape, tokens, hooks, Some(&mut probe))?;
    let i = image.encode_image(&mut tape, patches, hooks, Some(&mut probe))?;
    probe.layers.push(("text.features".into(), t));
    probe.layers.push(("image.features".into(), i));
    Ok(probe
        .layers
        .into_iter()
        .map(|(name, v)| (name, tape.value(v).clone()))
        .collect())
}
