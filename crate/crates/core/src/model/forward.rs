//! Pre-norm transformer forward passes recorded on a [`Tape`].

use std::collections::HashMap;

use super::config::{EncoderConfig, Modality, Position, SiteKey};
use super::weights::{EncoderWeights, LayerNormWeights, LinearWeights};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Effective scaling and shifting vectors for one hooked layer, already on
/// the tape.
#[derive(Debug, Clone, Copy)]
pub struct AgentVars {
    pub scale: Var,
    pub shift: Var,
}

/// Agent layers to apply during a forward pass, keyed by encoder and site.
#[derive(Debug, Default, Clone)]
pub struct HookVars {
    map: HashMap<(Modality, SiteKey), AgentVars>,
}

impl HookVars {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, modality: Modality, key: SiteKey, agent: AgentVars) {
        self.map.insert((modality, key), agent);
    }

    pub fn get(&self, modality: Modality, key: SiteKey) -> Option<AgentVars> {
        self.map.get(&(modality, key)).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Records the output of every hookable layer (after its agent, if any).
#[derive(Debug, Default)]
pub struct Probe {
    pub layers: Vec<(String, Var)>,
}

struct LnVars {
    gamma: Var,
    beta: Var,
}

struct LinVars {
    weight_t: Var,
    bias: Var,
}

struct BlockVars {
    ln1: LnVars,
    q: LinVars,
    k: LinVars,
    v: LinVars,
    attn_out: LinVars,
    ln2: LnVars,
    mlp_in: LinVars,
    mlp_out: LinVars,
}

/// Frozen encoder weights registered once on a tape as constants, so that
/// many inputs can share them.
pub struct EncoderVars<'w, T> {
    weights: &'w EncoderWeights<T>,
    modality: Modality,
    heads: usize,
    eps: T,
    blocks: Vec<BlockVars>,
    final_ln: LnVars,
    proj: LinVars,
    config: EncoderConfig,
}

fn ln_vars<T: Scalar>(tape: &mut Tape<T>, w: &LayerNormWeights<T>) -> LnVars {
    LnVars {
        gamma: tape.constant(w.gamma.clone()),
        beta: tape.constant(w.beta.clone()),
    }
}

fn lin_vars<T: Scalar>(tape: &mut Tape<T>, w: &LinearWeights<T>) -> Result<LinVars> {
    Ok(LinVars {
        weight_t: tape.constant(w.weight.transpose()?),
        bias: tape.constant(w.bias.clone()),
    })
}

impl<'w, T: Scalar> EncoderVars<'w, T> {
    pub fn register(tape: &mut Tape<T>, config: &EncoderConfig, weights: &'w EncoderWeights<T>) -> Result<Self> {
        let modality = weights.modality;
        let blocks = weights
            .blocks
            .iter()
            .map(|b| {
                Ok(BlockVars {
                    ln1: ln_vars(tape, &b.ln1),
                    q: lin_vars(tape, &b.q)?,
                    k: lin_vars(tape, &b.k)?,
                    v: lin_vars(tape, &b.v)?,
                    attn_out: lin_vars(tape, &b.attn_out)?,
                    ln2: ln_vars(tape, &b.ln2),
                    mlp_in: lin_vars(tape, &b.mlp_in)?,
                    mlp_out: lin_vars(tape, &b.mlp_out)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights,
            modality,
            heads: config.heads(modality),
            eps: T::of_f64(config.eps),
            blocks,
            final_ln: ln_vars(tape, &weights.final_ln),
            proj: lin_vars(tape, &weights.proj)?,
            config: config.clone(),
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// Text features: causal blocks, read out at the last token, then final
    /// LayerNorm and projection. Returns a `[d_t]` vector.
    pub fn encode_text(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
        hooks: Option<&HookVars>,
        probe: Option<&mut Probe>,
    ) -> Result<Var> {
        if self.modality != Modality::Text {
            return Err(Error::InvalidArgument("encode_text called on the image encoder".into()));
        }
        let n_t = self.config.n_t;
        if tokens.is_empty() || tokens.len() > n_t {
            return Err(Error::InvalidArgument(format!(
                "text length {} outside 1..={n_t}",
                tokens.len()
            )));
        }
        let table = self
            .weights
            .token_embedding
            .as_ref()
            .expect("text encoder has a token table");
        let vocab = table.shape()[0];
        let d = table.last_dim();
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok >= vocab {
                return Err(Error::OutOfVocabulary { token: tok, vocab });
            }
            let pos = self.weights.positional.row(i);
            x.extend(table.row(tok).iter().zip(pos).map(|(&e, &p)| e + p));
        }
        let x = tape.constant(Tensor::from_parts(vec![tokens.len(), d], x));
        self.run(tape, x, tokens.len() - 1, true, hooks, probe)
    }

    /// Image features from `[n_v, d_v]` patch tokens: bidirectional blocks,
    /// read out at the class token, then final LayerNorm and projection.
    /// Returns a `[d_t]` vector.
    pub fn encode_image(
        &self,
        tape: &mut Tape<T>,
        patches: &Tensor<T>,
        hooks: Option<&HookVars>,
        probe: Option<&mut Probe>,
    ) -> Result<Var> {
        if self.modality != Modality::Image {
            return Err(Error::InvalidArgument("encode_image called on the text encoder".into()));
        }
        let d = self.config.d_v;
        patches.expect_shape("encode_image", &[self.config.n_v, d])?;
        let cls = self
            .weights
            .class_token
            .as_ref()
            .expect("image encoder has a class token");
        let mut x = Vec::with_capacity((self.config.n_v + 1) * d);
        x.extend(
            cls.data()
                .iter()
                .zip(self.weights.positional.row(0))
                .map(|(&c, &p)| c + p),
        );
        for i in 0..self.config.n_v {
            let pos = self.weights.positional.row(i + 1);
            x.extend(patches.row(i).iter().zip(pos).map(|(&e, &p)| e + p));
        }
        let x = tape.constant(Tensor::from_parts(vec![self.config.n_v + 1, d], x));
        self.run(tape, x, 0, false, hooks, probe)
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        mut x: Var,
        readout: usize,
        causal: bool,
        hooks: Option<&HookVars>,
        mut probe: Option<&mut Probe>,
    ) -> Result<Var> {
        let m = self.modality;
        let hook = |tape: &mut Tape<T>, key: SiteKey, y: Var, probe: &mut Option<&mut Probe>| -> Result<Var> {
            let y = match hooks.and_then(|h| h.get(m, key)) {
                Some(agent) => {
                    let scaled = tape.mul_row(y, agent.scale)?;
                    tape.add_row(scaled, agent.shift)?
                }
                None => y,
            };
            if let Some(p) = probe.as_deref_mut() {
                p.layers.push((format!("{m}.{}", key.layer_name()), y));
            }
            Ok(y)
        };

        for (b, bw) in self.blocks.iter().enumerate() {
            let h = tape.layernorm(x, bw.ln1.gamma, bw.ln1.beta, self.eps)?;
            let h = hook(tape, SiteKey::block(b, Position::Ln1), h, &mut probe)?;
            let attn = self.attention(tape, h, bw, causal)?;
            let attn = hook(tape, SiteKey::block(b, Position::AttnOut), attn, &mut probe)?;
            x = tape.add(x, attn)?;

            let h = tape.layernorm(x, bw.ln2.gamma, bw.ln2.beta, self.eps)?;
            let h = hook(tape, SiteKey::block(b, Position::Ln2), h, &mut probe)?;
            let h = linear(tape, h, &bw.mlp_in)?;
            let h = tape.gelu(h)?;
            let h = linear(tape, h, &bw.mlp_out)?;
            let h = hook(tape, SiteKey::block(b, Position::MlpOut), h, &mut probe)?;
            x = tape.add(x, h)?;
        }

        let r = tape.select_row(x, readout)?;
        let r = tape.layernorm(r, self.final_ln.gamma, self.final_ln.beta, self.eps)?;
        let r = hook(tape, SiteKey::head(Position::FinalLn), r, &mut probe)?;
        let width = tape.value(r).len();
        let r = tape.reshape(r, &[1, width])?;
        let r = linear(tape, r, &self.proj)?;
        let out_width = tape.value(r).len();
        let r = tape.reshape(r, &[out_width])?;
        hook(tape, SiteKey::head(Position::Proj), r, &mut probe)
    }

    fn attention(&self, tape: &mut Tape<T>, h: Var, bw: &BlockVars, causal: bool) -> Result<Var> {
        let q = linear(tape, h, &bw.q)?;
        let k = linear(tape, h, &bw.k)?;
        let v = linear(tape, h, &bw.v)?;
        let width = tape.value(q).last_dim();
        let head_dim = width / self.heads;
        let scale = T::one() / T::from_usize(head_dim).expect("head width fits").sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let start = head * head_dim;
            let qh = tape.slice_cols(q, start, head_dim)?;
            let kh = tape.slice_cols(k, start, head_dim)?;
            let vh = tape.slice_cols(v, start, head_dim)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let probs = if causal {
                tape.causal_softmax(scores)?
            } else {
                tape.softmax(scores)?
            };
            outs.push(tape.matmul(probs, vh)?);
        }
        let o = tape.concat_cols(&outs)?;
        linear(tape, o, &bw.attn_out)
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: &LinVars) -> Result<Var> {
    let y = tape.matmul(x, w.weight_t)?;
    tape.add_row(y, w.bias)
}
