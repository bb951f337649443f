use crate::autodiff::Tape;
use crate::coupling::AgentSites;
use crate::error::Result;
use crate::model::{DualEncoder, EncoderVars, Modality};
use crate::rng::{stream, Stream};
use crate::tensor::{Scalar, Tensor};

/// Which encoder's output a trainable tensor receives gradient from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradientSources {
    pub name: String,
    pub from_image: bool,
    pub from_text: bool,
}

fn gradient_flags<T: Scalar>(
    model: &DualEncoder<T>,
    sites: &AgentSites<T>,
    modality: Modality,
    tokens: &[usize],
    patches: &Tensor<T>,
    seed: u64,
) -> Result<Vec<(String, bool)>> {
    let mut tape = Tape::new();
    let vars = sites.register(&mut tape, true)?;
    let feats = match modality {
        Modality::Text => EncoderVars::register(&mut tape, &model.config, &model.text)?.encode_text(
            &mut tape,
            tokens,
            Some(&vars.hooks),
            None,
        )?,
        Modality::Image => EncoderVars::register(&mut tape, &model.config, &model.image)?.encode_image(
            &mut tape,
            patches,
            Some(&vars.hooks),
            None,
        )?,
    };
    let probe = Tensor::randn(&[model.config.d_t], 1.0, &mut stream(seed, Stream::Checks));
    let probe = tape.constant(probe);
    let weighted = tape.mul(feats, probe)?;
    let objective = tape.sum(weighted)?;
    let grads = tape.backward(objective)?;
    Ok(vars
        .params
        .iter()
        .map(|(name, v)| {
            let touched = grads.get(*v).is_some_and(|g| g.data().iter().any(|x| *x != T::zero()));
            (name.clone(), touched)
        })
        .collect())
}

/// For every trainable tensor, whether a random projection of the image
/// features and of the text features has non-zero gradient with respect to
/// it.
pub fn gradient_sources<T: Scalar>(
    model: &DualEncoder<T>,
    sites: &AgentSites<T>,
    tokens: &[usize],
    patches: &Tensor<T>,
    seed: u64,
) -> Result<Vec<GradientSources>> {
    let image = gradient_flags(model, sites, Modality::Image, tokens, patches, seed)?;
    let text = gradient_flags(model, sites, Modality::Text, tokens, patches, seed)?;
    Ok(image
        .into_iter()
        .zip(text)
        .map(|((name, from_image), (_, from_text))| GradientSources {
            name,
            from_image,
            from_text,
        })
        .collect())
}
