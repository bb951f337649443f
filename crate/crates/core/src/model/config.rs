use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Image, Modality::Text];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where an agent layer is attached.
///
/// `Ln1`/`Ln2` are the two per-block LayerNorms, `AttnOut` the attention
/// output projection, `MlpOut` the second MLP linear. `FinalLn` and `Proj`
/// sit after the last block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Position {
    #[serde(rename = "1a")]
    Ln1,
    #[serde(rename = "1b")]
    Ln2,
    #[serde(rename = "2")]
    AttnOut,
    #[serde(rename = "3")]
    MlpOut,
    #[serde(rename = "4")]
    FinalLn,
    #[serde(rename = "5")]
    Proj,
}

impl Position {
    pub const ALL: [Position; 6] = [
        Position::Ln1,
        Position::Ln2,
        Position::AttnOut,
        Position::MlpOut,
        Position::FinalLn,
        Position::Proj,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Position::Ln1 => "1a",
            Position::Ln2 => "1b",
            Position::AttnOut => "2",
            Position::MlpOut => "3",
            Position::FinalLn => "4",
            Position::Proj => "5",
        }
    }

    pub fn in_block(self) -> bool {
        !matches!(self, Position::FinalLn | Position::Proj)
    }

    pub fn is_layernorm(self) -> bool {
        matches!(self, Position::Ln1 | Position::Ln2 | Position::FinalLn)
    }

    /// Name of the hooked layer, as used in weight and probe names.
    pub fn layer_name(self) -> &'static str {
        match self {
            Position::Ln1 => "ln1",
            Position::Ln2 => "ln2",
            Position::AttnOut => "attn_out",
            Position::MlpOut => "mlp_out",
            Position::FinalLn => "final_ln",
            Position::Proj => "proj",
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Position {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Position::ALL
            .into_iter()
            .find(|p| p.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown position {s:?}")))
    }
}

/// One insertion point shared by both encoders: a block-local position in
/// block `block`, or one of the two positions after the last block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteKey {
    pub block: Option<usize>,
    pub position: Position,
}

impl SiteKey {
    pub fn block(block: usize, position: Position) -> Self {
        debug_assert!(position.in_block());
        Self {
            block: Some(block),
            position,
        }
    }

    pub fn head(position: Position) -> Self {
        debug_assert!(!position.in_block());
        Self { block: None, position }
    }

    /// All sites for `positions` in an encoder with `layers` blocks, in
    /// evaluation order.
    pub fn enumerate(layers: usize, positions: &[Position]) -> Vec<SiteKey> {
        let mut keys = Vec::new();
        for b in 0..layers {
            for p in [Position::Ln1, Position::AttnOut, Position::Ln2, Position::MlpOut] {
                if positions.contains(&p) {
                    keys.push(SiteKey::block(b, p));
                }
            }
        }
        for p in [Position::FinalLn, Position::Proj] {
            if positions.contains(&p) {
                keys.push(SiteKey::head(p));
            }
        }
        keys
    }

    /// Hooked layer name within one encoder, e.g. `block1.attn_out`.
    pub fn layer_name(&self) -> String {
        match self.block {
            Some(b) => format!("block{b}.{}", self.position.layer_name()),
            None => self.position.layer_name().to_string(),
        }
    }
}

impl fmt::Display for SiteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.block {
            Some(b) => write!(f, "b{b}.{}", self.position),
            None => write!(f, "head.{}", self.position),
        }
    }
}

impl FromStr for SiteKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed site key {s:?}"));
        let (prefix, pos) = s.split_once('.').ok_or_else(bad)?;
        let position: Position = pos.parse()?;
        if prefix == "head" && !position.in_block() {
            return Ok(SiteKey::head(position));
        }
        let block = prefix.strip_prefix('b').and_then(|n| n.parse().ok()).ok_or_else(bad)?;
        if !position.in_block() {
            return Err(bad());
        }
        Ok(SiteKey::block(block, position))
    }
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_eps() -> f64 {
    1e-5
}

/// Shape of both encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Transformer blocks per encoder.
    pub layers: usize,
    pub d_t: usize,
    pub d_v: usize,
    pub text_heads: usize,
    pub image_heads: usize,
    /// Maximum text sequence length.
    pub n_t: usize,
    /// Patch tokens per image; the class token is prepended on top.
    pub n_v: usize,
    pub vocab: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl EncoderConfig {
    /// A small model that runs quickly in tests.
    pub fn toy() -> Self {
        Self {
            layers: 2,
            d_t: 16,
            d_v: 24,
            text_heads: 2,
            image_heads: 2,
            n_t: 6,
            n_v: 4,
            vocab: 48,
            mlp_ratio: 4,
            eps: 1e-5,
        }
    }

    /// ViT-B/16-sized CLIP dimensions, for parameter counting.
    pub fn clip_b16() -> Self {
        Self {
            layers: 12,
            d_t: 512,
            d_v: 768,
            text_heads: 8,
            image_heads: 12,
            n_t: 77,
            n_v: 196,
            vocab: 49408,
            mlp_ratio: 4,
            eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("d_t", self.d_t),
            ("d_v", self.d_v),
            ("text_heads", self.text_heads),
            ("image_heads", self.image_heads),
            ("n_t", self.n_t),
            ("n_v", self.n_v),
            ("vocab", self.vocab),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !self.d_t.is_multiple_of(self.text_heads) {
            return Err(Error::config(
                "text_heads",
                format!("d_t = {} is not divisible by {}", self.d_t, self.text_heads),
            ));
        }
        if !self.d_v.is_multiple_of(self.image_heads) {
            return Err(Error::config(
                "image_heads",
                format!("d_v = {} is not divisible by {}", self.d_v, self.image_heads),
            ));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("eps", "must be a positive finite number"));
        }
        Ok(())
    }

    /// Residual-stream width of one encoder.
    pub fn width(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => self.d_t,
            Modality::Image => self.d_v,
        }
    }

    pub fn heads(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => self.text_heads,
            Modality::Image => self.image_heads,
        }
    }

    /// Output width of the layer hooked at `position`. Everything inside the
    /// image encoder is `d_v` wide except the final projection, which maps
    /// into the shared `d_t` embedding space.
    pub fn site_width(&self, modality: Modality, position: Position) -> usize {
        match position {
            Position::Proj => self.d_t,
            _ => self.width(modality),
        }
    }

    pub fn mlp_width(&self, modality: Modality) -> usize {
        self.mlp_ratio * self.width(modality)
    }

    /// Token count seen by the blocks of one encoder.
    pub fn seq_len(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => self.n_t,
            Modality::Image => self.n_v + 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_keys_round_trip_through_strings() {
        for key in SiteKey::enumerate(3, &Position::ALL) {
            assert_eq!(key.to_string().parse::<SiteKey>().unwrap(), key);
        }
        assert!("b0.4".parse::<SiteKey>().is_err());
        assert!("head.2".parse::<SiteKey>().is_err());
    }

    #[test]
    fn enumerate_counts_sites() {
        assert_eq!(SiteKey::enumerate(12, &Position::ALL).len(), 50);
        assert_eq!(SiteKey::enumerate(2, &[Position::AttnOut]).len(), 2);
    }

    #[test]
    fn projection_site_lives_in_text_space() {
        let c = EncoderConfig::toy();
        assert_eq!(c.site_width(Modality::Image, Position::Proj), c.d_t);
        assert_eq!(c.site_width(Modality::Image, Position::FinalLn), c.d_v);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut c = EncoderConfig::toy();
        c.image_heads = 5;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("image_heads"));
    }
}
