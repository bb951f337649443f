use std::collections::BTreeMap;

use rand::Rng;

use super::config::{EncoderConfig, Modality, Position};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormWeights<T> {
    fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let noise = Tensor::<T>::randn(&[d], 0.1, rng);
        Self {
            gamma: noise.map(|v| v + T::one()),
            beta: Tensor::randn(&[d], 0.1, rng),
        }
    }
}

/// `y = x · Wᵀ + bias` with `W` stored as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearWeights<T> {
    fn random<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            bias: Tensor::randn(&[d_out], 0.02, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1: LayerNormWeights<T>,
    pub q: LinearWeights<T>,
    pub k: LinearWeights<T>,
    pub v: LinearWeights<T>,
    /// Attention output projection `W^O`, `[width, width]`.
    pub attn_out: LinearWeights<T>,
    pub ln2: LayerNormWeights<T>,
    pub mlp_in: LinearWeights<T>,
    /// Second MLP linear, intermediate → width.
    pub mlp_out: LinearWeights<T>,
}

impl<T: Scalar> BlockWeights<T> {
    fn random<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNormWeights::random(d, rng),
            q: LinearWeights::random(d, d, rng),
            k: LinearWeights::random(d, d, rng),
            v: LinearWeights::random(d, d, rng),
            attn_out: LinearWeights::random(d, d, rng),
            ln2: LayerNormWeights::random(d, rng),
            mlp_in: LinearWeights::random(d, hidden, rng),
            mlp_out: LinearWeights::random(hidden, d, rng),
        }
    }
}

/// Frozen parameters of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T> {
    pub modality: Modality,
    /// `[vocab, d_t]` token table for text; `None` for images, whose patch
    /// tokens arrive already embedded.
    pub token_embedding: Option<Tensor<T>>,
    pub positional: Tensor<T>,
    /// Initial class token `c_0` (image only).
    pub class_token: Option<Tensor<T>>,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_ln: LayerNormWeights<T>,
    /// `d_t → d_t` for text, `d_v → d_t` for images.
    pub proj: LinearWeights<T>,
}

impl<T: Scalar> EncoderWeights<T> {
    pub fn random<R: Rng + ?Sized>(config: &EncoderConfig, modality: Modality, rng: &mut R) -> Self {
        let d = config.width(modality);
        let hidden = config.mlp_width(modality);
        let token_embedding = match modality {
            Modality::Text => Some(Tensor::randn(&[config.vocab, d], 1.0, rng)),
            Modality::Image => None,
        };
        let positional = Tensor::randn(&[config.seq_len(modality), d], 0.1, rng);
        let class_token = match modality {
            Modality::Text => None,
            Modality::Image => Some(Tensor::randn(&[d], 0.5, rng)),
        };
        let blocks = (0..config.layers)
            .map(|_| BlockWeights::random(d, hidden, rng))
            .collect();
        Self {
            modality,
            token_embedding,
            positional,
            class_token,
            blocks,
            final_ln: LayerNormWeights::random(d, rng),
            proj: LinearWeights::random(d, config.d_t, rng),
        }
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        let m = self.modality.name();
        if let Some(t) = &self.token_embedding {
            out.push((format!("{m}.token_embedding"), t));
        }
        out.push((format!("{m}.positional"), &self.positional));
        if let Some(t) = &self.class_token {
            out.push((format!("{m}.class_token"), t));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("{m}.block{i}");
            push_ln(&mut out, &format!("{p}.ln1"), &b.ln1);
            push_linear(&mut out, &format!("{p}.q"), &b.q);
            push_linear(&mut out, &format!("{p}.k"), &b.k);
            push_linear(&mut out, &format!("{p}.v"), &b.v);
            push_linear(&mut out, &format!("{p}.attn_out"), &b.attn_out);
            push_ln(&mut out, &format!("{p}.ln2"), &b.ln2);
            push_linear(&mut out, &format!("{p}.mlp_in"), &b.mlp_in);
            push_linear(&mut out, &format!("{p}.mlp_out"), &b.mlp_out);
        }
        push_ln(&mut out, &format!("{m}.final_ln"), &self.final_ln);
        push_linear(&mut out, &format!("{m}.proj"), &self.proj);
        out
    }

    /// Rebuilds weights from tensors named as in [`named_tensors`](Self::named_tensors).
    pub fn from_named(
        config: &EncoderConfig,
        modality: Modality,
        tensors: &BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let m = modality.name();
        let get = |name: String, shape: &[usize]| -> Result<Tensor<T>> {
            let t = tensors.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "tensor {name:?} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        let ln = |p: String, d: usize| -> Result<LayerNormWeights<T>> {
            Ok(LayerNormWeights {
                gamma: get(format!("{p}.gamma"), &[d])?,
                beta: get(format!("{p}.beta"), &[d])?,
            })
        };
        let lin = |p: String, d_in: usize, d_out: usize| -> Result<LinearWeights<T>> {
            Ok(LinearWeights {
                weight: get(format!("{p}.weight"), &[d_out, d_in])?,
                bias: get(format!("{p}.bias"), &[d_out])?,
            })
        };
        let d = config.width(modality);
        let hidden = config.mlp_width(modality);
        let token_embedding = match modality {
            Modality::Text => Some(get(format!("{m}.token_embedding"), &[config.vocab, d])?),
            Modality::Image => None,
        };
        let class_token = match modality {
            Modality::Text => None,
            Modality::Image => Some(get(format!("{m}.class_token"), &[d])?),
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("{m}.block{i}");
            blocks.push(BlockWeights {
                ln1: ln(format!("{p}.ln1"), d)?,
                q: lin(format!("{p}.q"), d, d)?,
                k: lin(format!("{p}.k"), d, d)?,
                v: lin(format!("{p}.v"), d, d)?,
                attn_out: lin(format!("{p}.attn_out"), d, d)?,
                ln2: ln(format!("{p}.ln2"), d)?,
                mlp_in: lin(format!("{p}.mlp_in"), d, hidden)?,
                mlp_out: lin(format!("{p}.mlp_out"), hidden, d)?,
            });
        }
        Ok(Self {
            modality,
            token_embedding,
            positional: get(format!("{m}.positional"), &[config.seq_len(modality), d])?,
            class_token,
            blocks,
            final_ln: ln(format!("{m}.final_ln"), d)?,
            proj: lin(format!("{m}.proj"), d, config.d_t)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn layernorm(&self, block: Option<usize>, position: Position) -> Option<&LayerNormWeights<T>> {
        match (block, position) {
            (Some(b), Position::Ln1) => self.blocks.get(b).map(|w| &w.ln1),
            (Some(b), Position::Ln2) => self.blocks.get(b).map(|w| &w.ln2),
            (None, Position::FinalLn) => Some(&self.final_ln),
            _ => None,
        }
    }
}

fn push_ln<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: &str, ln: &'a LayerNormWeights<T>) {
    out.push((format!("{prefix}.gamma"), &ln.gamma));
    out.push((format!("{prefix}.beta"), &ln.beta));
}

fn push_linear<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: &str, lin: &'a LinearWeights<T>) {
    out.push((format!("{prefix}.weight"), &lin.weight));
    out.push((format!("{prefix}.bias"), &lin.bias));
}

/// The frozen text and image encoders together with their shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder<T> {
    pub config: EncoderConfig,
    pub text: EncoderWeights<T>,
    pub image: EncoderWeights<T>,
}

impl<T: Scalar> DualEncoder<T> {
    pub fn random<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let text = EncoderWeights::random(&config, Modality::Text, rng);
        let image = EncoderWeights::random(&config, Modality::Image, rng);
        Ok(Self { config, text, image })
    }

    pub fn encoder(&self, modality: Modality) -> &EncoderWeights<T> {
        match modality {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }

    pub fn encoder_mut(&mut self, modality: Modality) -> &mut EncoderWeights<T> {
        match modality {
            Modality::Text => &mut self.text,
            Modality::Image => &mut self.image,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.text.named_tensors();
        out.extend(self.image.named_tensors());
        out
    }

    pub fn from_named(config: EncoderConfig, tensors: &BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let text = EncoderWeights::from_named(&config, Modality::Text, tensors)?;
        let image = EncoderWeights::from_named(&config, Modality::Image, tensors)?;
        Ok(Self { config, text, image })
    }

    pub fn param_count(&self) -> usize {
        self.text.param_count() + self.image.param_count()
    }

    /// FNV-1a digest over every weight's name, shape and bit pattern.
    pub fn fingerprint(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, t) in self.named_tensors() {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&v.bits().to_le_bytes());
            }
        }
        h
    }
}
