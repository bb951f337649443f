use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::agent::{AgentLayer, Bridge};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{AgentVars, EncoderConfig, HookVars, Modality, Position, SiteKey};
use crate::rng::{stream, Stream};
use crate::tensor::{Scalar, Tensor};

/// Direction of information flow between the two agents at a site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    /// Independent updating: no bridges.
    Ivlu,
    /// The text scale feeds the image scale.
    TextToImage,
    /// The image scale feeds the text scale.
    ImageToText,
    /// A shared meta-scaling vector feeds both scales.
    Bidirectional,
}

impl CouplingMode {
    pub const ALL: [CouplingMode; 4] = [
        CouplingMode::Ivlu,
        CouplingMode::TextToImage,
        CouplingMode::ImageToText,
        CouplingMode::Bidirectional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CouplingMode::Ivlu => "ivlu",
            CouplingMode::TextToImage => "text_to_image",
            CouplingMode::ImageToText => "image_to_text",
            CouplingMode::Bidirectional => "bidirectional",
        }
    }

    fn bridges(self) -> (bool, bool) {
        match self {
            CouplingMode::Ivlu => (false, false),
            CouplingMode::TextToImage => (true, false),
            CouplingMode::ImageToText => (false, true),
            CouplingMode::Bidirectional => (true, true),
        }
    }
}

impl fmt::Display for CouplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CouplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CouplingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown coupling mode {s:?}")))
    }
}

fn default_rank() -> usize {
    4
}

fn default_positions() -> Vec<Position> {
    Position::ALL.to_vec()
}

/// Which sites carry agents and how they are coupled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    pub mode: CouplingMode,
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Meta-scaling dimension (bidirectional mode only).
    pub d_m: usize,
    #[serde(default = "default_positions")]
    pub positions: Vec<Position>,
    /// Also bridge the shifting vectors, through separate bridges.
    #[serde(default)]
    pub bridge_shift: bool,
}

impl CouplingConfig {
    pub fn new(mode: CouplingMode, rank: usize, d_m: usize) -> Self {
        Self {
            mode,
            rank,
            d_m,
            positions: default_positions(),
            bridge_shift: false,
        }
    }

    pub fn with_mode(&self, mode: CouplingMode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.d_m == 0 {
            return Err(Error::config("d_m", "must be positive"));
        }
        if self.positions.is_empty() {
            return Err(Error::config("positions", "at least one position is required"));
        }
        let mut seen = self.positions.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.positions.len() {
            return Err(Error::config("positions", "duplicate position"));
        }
        if self.bridge_shift && self.mode == CouplingMode::Ivlu {
            return Err(Error::config("bridge_shift", "independent updating has no bridges"));
        }
        if self.mode != CouplingMode::Ivlu {
            for &p in &self.positions {
                let (v_in, v_out, t_in, t_out) = self.bridge_dims(encoder, p);
                let max = match self.mode {
                    CouplingMode::TextToImage => v_in.min(v_out),
                    CouplingMode::ImageToText => t_in.min(t_out),
                    _ => v_in.min(v_out).min(t_in.min(t_out)),
                };
                if self.rank == 0 || self.rank > max {
                    return Err(Error::config(
                        "rank",
                        format!("must be in 1..={max} at position {p}, got {}", self.rank),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `(image bridge in, image bridge out, text bridge in, text bridge out)`
    /// at `position` under this mode.
    fn bridge_dims(&self, encoder: &EncoderConfig, position: Position) -> (usize, usize, usize, usize) {
        let w_v = encoder.site_width(Modality::Image, position);
        let w_t = encoder.site_width(Modality::Text, position);
        match self.mode {
            CouplingMode::Bidirectional => (self.d_m, w_v, self.d_m, w_t),
            _ => (w_t, w_v, w_v, w_t),
        }
    }
}

/// Class of a trainable tensor, for per-class reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamClass {
    Scale,
    Shift,
    BridgeUp,
    BridgeDown,
    Meta,
    MetaShift,
}

impl ParamClass {
    pub const ALL: [ParamClass; 6] = [
        ParamClass::Scale,
        ParamClass::Shift,
        ParamClass::BridgeUp,
        ParamClass::BridgeDown,
        ParamClass::Meta,
        ParamClass::MetaShift,
    ];

    pub fn of(name: &str) -> Option<Self> {
        let suffix = name.rsplit('.').next()?;
        Some(match suffix {
            "scale" => ParamClass::Scale,
            "shift" => ParamClass::Shift,
            "up" => ParamClass::BridgeUp,
            "down" => ParamClass::BridgeDown,
            "meta" => ParamClass::Meta,
            "meta_shift" => ParamClass::MetaShift,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Scale => "a",
            ParamClass::Shift => "b",
            ParamClass::BridgeUp => "W_up",
            ParamClass::BridgeDown => "W_down",
            ParamClass::Meta => "a_m",
            ParamClass::MetaShift => "b_m",
        }
    }
}

/// The image and text agents at one site plus whatever couples them.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledAgentSite<T> {
    pub mode: CouplingMode,
    pub image: AgentLayer<T>,
    pub text: AgentLayer<T>,
    /// Bridge into the image scale.
    pub bridge_v: Option<Bridge<T>>,
    /// Bridge into the text scale.
    pub bridge_t: Option<Bridge<T>>,
    pub meta: Option<Tensor<T>>,
    /// Bridges into the shifts, present only when shift bridging is on.
    pub shift_bridge_v: Option<Bridge<T>>,
    pub shift_bridge_t: Option<Bridge<T>>,
    /// Meta vector feeding the shift bridges (bidirectional with shift
    /// bridging).
    pub meta_shift: Option<Tensor<T>>,
}

impl<T: Scalar> CoupledAgentSite<T> {
    pub fn init<R: Rng + ?Sized>(
        encoder: &EncoderConfig,
        coupling: &CouplingConfig,
        position: Position,
        rng: &mut R,
    ) -> Result<Self> {
        let w_v = encoder.site_width(Modality::Image, position);
        let w_t = encoder.site_width(Modality::Text, position);
        let mode = coupling.mode;
        let (to_v, to_t) = mode.bridges();
        let (v_in, v_out, t_in, t_out) = coupling.bridge_dims(encoder, position);
        let r = coupling.rank;
        let bridge_v = to_v.then(|| Bridge::init(v_in, v_out, r, rng)).transpose()?;
        let bridge_t = to_t.then(|| Bridge::init(t_in, t_out, r, rng)).transpose()?;
        let meta = (mode == CouplingMode::Bidirectional).then(|| Tensor::ones(&[coupling.d_m]));
        let shift = coupling.bridge_shift;
        let shift_bridge_v = (shift && to_v).then(|| Bridge::init(v_in, v_out, r, rng)).transpose()?;
        let shift_bridge_t = (shift && to_t).then(|| Bridge::init(t_in, t_out, r, rng)).transpose()?;
        let meta_shift = (shift && mode == CouplingMode::Bidirectional).then(|| Tensor::ones(&[coupling.d_m]));
        Ok(Self {
            mode,
            image: AgentLayer::identity(w_v),
            text: AgentLayer::identity(w_t),
            bridge_v,
            bridge_t,
            meta,
            shift_bridge_v,
            shift_bridge_t,
            meta_shift,
        })
    }

    pub fn bridge_shift(&self) -> bool {
        self.shift_bridge_v.is_some() || self.shift_bridge_t.is_some()
    }

    pub fn agent(&self, modality: Modality) -> &AgentLayer<T> {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    /// Checks that the optional fields match the coupling mode.
    pub fn validate(&self) -> Result<()> {
        let (to_v, to_t) = self.mode.bridges();
        let bidi = self.mode == CouplingMode::Bidirectional;
        let fail = |what: &str| Err(Error::Coupling(format!("{} site {what}", self.mode)));
        if self.bridge_v.is_some() != to_v {
            return fail(if to_v {
                "lacks an image bridge"
            } else {
                "has an unexpected image bridge"
            });
        }
        if self.bridge_t.is_some() != to_t {
            return fail(if to_t {
                "lacks a text bridge"
            } else {
                "has an unexpected text bridge"
            });
        }
        if self.meta.is_some() != bidi {
            return fail(if bidi {
                "lacks a meta-scaling vector"
            } else {
                "has an unexpected meta-scaling vector"
            });
        }
        if (self.shift_bridge_v.is_some() && !to_v) || (self.shift_bridge_t.is_some() && !to_t) {
            return fail("has a shift bridge without the matching scale bridge");
        }
        if self.bridge_shift() && (self.shift_bridge_v.is_some() != to_v || self.shift_bridge_t.is_some() != to_t) {
            return fail("has an incomplete set of shift bridges");
        }
        let wants_meta_shift = bidi && self.bridge_shift();
        if self.meta_shift.is_some() != wants_meta_shift {
            return fail(if wants_meta_shift {
                "lacks a meta-shifting vector"
            } else {
                "has an unexpected meta-shifting vector"
            });
        }
        let check = |b: &Option<Bridge<T>>, src: usize, dst: usize, name: &str| -> Result<()> {
            if let Some(b) = b {
                if b.in_dim() != src || b.out_dim() != dst || b.up.shape()[1] != b.rank() {
                    return Err(Error::Coupling(format!(
                        "{name} maps {}->{}, expected {src}->{dst}",
                        b.in_dim(),
                        b.out_dim()
                    )));
                }
            }
            Ok(())
        };
        let (w_v, w_t) = (self.image.width(), self.text.width());
        let (v_src, t_src) = match (&self.meta, self.mode) {
            (Some(m), _) => (m.len(), m.len()),
            _ => (w_t, w_v),
        };
        check(&self.bridge_v, v_src, w_v, "image bridge")?;
        check(&self.bridge_t, t_src, w_t, "text bridge")?;
        let (sv_src, st_src) = match &self.meta_shift {
            Some(m) => (m.len(), m.len()),
            None => (w_t, w_v),
        };
        check(&self.shift_bridge_v, sv_src, w_v, "image shift bridge")?;
        check(&self.shift_bridge_t, st_src, w_t, "text shift bridge")?;
        Ok(())
    }

    /// Scales actually applied by the two agents:
    /// image-side `a_v + up·down·src_v`, text-side `a_t + up·down·src_t`, where
    /// the sources are fixed by the mode (`a_t`, `a_v` or the meta vector).
    pub fn effective_scalings(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        self.validate()?;
        let a_v = self.bridged(&self.image.scale, &self.bridge_v, self.scale_source(Modality::Image))?;
        let a_t = self.bridged(&self.text.scale, &self.bridge_t, self.scale_source(Modality::Text))?;
        Ok((a_v, a_t))
    }

    /// Shifts actually applied; equal to the raw shifts unless shift
    /// bridging is on.
    pub fn effective_shifts(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        self.validate()?;
        let b_v = self.bridged(
            &self.image.shift,
            &self.shift_bridge_v,
            self.shift_source(Modality::Image),
        )?;
        let b_t = self.bridged(
            &self.text.shift,
            &self.shift_bridge_t,
            self.shift_source(Modality::Text),
        )?;
        Ok((b_v, b_t))
    }

    /// Effective `(scale, shift)` for one side.
    pub fn effective(&self, modality: Modality) -> Result<(Tensor<T>, Tensor<T>)> {
        let (a_v, a_t) = self.effective_scalings()?;
        let (b_v, b_t) = self.effective_shifts()?;
        Ok(match modality {
            Modality::Image => (a_v, b_v),
            Modality::Text => (a_t, b_t),
        })
    }

    fn scale_source(&self, target: Modality) -> &Tensor<T> {
        match (&self.meta, target) {
            (Some(m), _) => m,
            (None, Modality::Image) => &self.text.scale,
            (None, Modality::Text) => &self.image.scale,
        }
    }

    fn shift_source(&self, target: Modality) -> &Tensor<T> {
        match (&self.meta_shift, target) {
            (Some(m), _) => m,
            (None, Modality::Image) => &self.text.shift,
            (None, Modality::Text) => &self.image.shift,
        }
    }

    fn bridged(&self, raw: &Tensor<T>, bridge: &Option<Bridge<T>>, source: &Tensor<T>) -> Result<Tensor<T>> {
        match bridge {
            Some(b) => raw.zip_map(&b.project(source)?, "effective_scalings", |x, y| x + y),
            None => Ok(raw.clone()),
        }
    }

    /// `(100/√d)·‖up·down·a_m‖` for one side of a bidirectional site, where
    /// `d` is that side's width.
    pub fn bridge_norm(&self, side: Modality) -> Result<T> {
        let meta = self
            .meta
            .as_ref()
            .ok_or_else(|| Error::Coupling(format!("{} site has no meta-scaling vector", self.mode)))?;
        let bridge = match side {
            Modality::Image => &self.bridge_v,
            Modality::Text => &self.bridge_t,
        }
        .as_ref()
        .ok_or_else(|| Error::Coupling(format!("site lacks the {side} bridge")))?;
        let d = self.agent(side).width();
        let scale = T::of_f64(100.0 / (d as f64).sqrt());
        Ok(scale * bridge.project(meta)?.l2_norm())
    }

    /// Trainable tensors with their local names, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![
            ("image.scale", &self.image.scale),
            ("image.shift", &self.image.shift),
            ("text.scale", &self.text.scale),
            ("text.shift", &self.text.shift),
        ];
        let bridges = [
            ("bridge_v", &self.bridge_v),
            ("bridge_t", &self.bridge_t),
            ("shift_bridge_v", &self.shift_bridge_v),
            ("shift_bridge_t", &self.shift_bridge_t),
        ];
        for (name, b) in bridges {
            if let Some(b) = b {
                let (down, up) = bridge_names(name);
                out.push((down, &b.down));
                out.push((up, &b.up));
            }
        }
        if let Some(m) = &self.meta {
            out.push(("meta", m));
        }
        if let Some(m) = &self.meta_shift {
            out.push(("meta_shift", m));
        }
        out
    }

    /// Mutable view of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = vec![
            ("image.scale", &mut self.image.scale),
            ("image.shift", &mut self.image.shift),
            ("text.scale", &mut self.text.scale),
            ("text.shift", &mut self.text.shift),
        ];
        let bridges = [
            ("bridge_v", &mut self.bridge_v),
            ("bridge_t", &mut self.bridge_t),
            ("shift_bridge_v", &mut self.shift_bridge_v),
            ("shift_bridge_t", &mut self.shift_bridge_t),
        ];
        for (name, b) in bridges {
            if let Some(b) = b {
                let (down, up) = bridge_names(name);
                out.push((down, &mut b.down));
                out.push((up, &mut b.up));
            }
        }
        if let Some(m) = &mut self.meta {
            out.push(("meta", m));
        }
        if let Some(m) = &mut self.meta_shift {
            out.push(("meta_shift", m));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Moves every trainable tensor away from its initial value with
    /// Gaussian noise of the given std (scales and the meta vector around 1).
    pub fn perturb<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for (_, t) in self.tensors_mut() {
            let noise = Tensor::<T>::randn(t.shape(), std, rng);
            *t = t.zip_map(&noise, "perturb", |a, b| a + b).expect("same shape");
        }
    }
}

fn bridge_names(name: &str) -> (&'static str, &'static str) {
    match name {
        "bridge_v" => ("bridge_v.down", "bridge_v.up"),
        "bridge_t" => ("bridge_t.down", "bridge_t.up"),
        "shift_bridge_v" => ("shift_bridge_v.down", "shift_bridge_v.up"),
        _ => ("shift_bridge_t.down", "shift_bridge_t.up"),
    }
}

/// Tape handles for all sites: hooks for the forward pass and the named
/// trainable leaves.
pub struct SiteVars {
    pub hooks: HookVars,
    pub params: Vec<(String, Var)>,
}

/// Every site of a model, one per configured insertion point.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSites<T> {
    pub mode: CouplingMode,
    sites: BTreeMap<SiteKey, CoupledAgentSite<T>>,
}

impl<T: Scalar> AgentSites<T> {
    /// Fresh sites: identity agents, zero `up` matrices, Gaussian `down`
    /// matrices from the bridge stream of `seed`.
    pub fn init(encoder: &EncoderConfig, coupling: &CouplingConfig, seed: u64) -> Result<Self> {
        coupling.validate(encoder)?;
        let mut rng = stream(seed, Stream::Bridges);
        let mut sites = BTreeMap::new();
        for key in SiteKey::enumerate(encoder.layers, &coupling.positions) {
            sites.insert(key, CoupledAgentSite::init(encoder, coupling, key.position, &mut rng)?);
        }
        Ok(Self {
            mode: coupling.mode,
            sites,
        })
    }

    pub fn from_sites(mode: CouplingMode, sites: BTreeMap<SiteKey, CoupledAgentSite<T>>) -> Result<Self> {
        for (key, site) in &sites {
            if site.mode != mode {
                return Err(Error::Coupling(format!(
                    "site {key} has mode {}, expected {mode}",
                    site.mode
                )));
            }
            site.validate()?;
        }
        Ok(Self { mode, sites })
    }

    /// Sites shaped by the configs, with tensors taken from `tensors` (named
    /// as in [`named_tensors`](Self::named_tensors)).
    pub fn from_named(
        encoder: &EncoderConfig,
        coupling: &CouplingConfig,
        tensors: &BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let mut sites = Self::init(encoder, coupling, 0)?;
        for (key, site) in sites.sites.iter_mut() {
            for (local, t) in site.tensors_mut() {
                let name = format!("agent.{key}.{local}");
                let src = tensors.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
                if src.shape() != t.shape() {
                    return Err(Error::Format(format!(
                        "tensor {name:?} has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    )));
                }
                *t = src.clone();
            }
        }
        Ok(sites)
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn get(&self, key: &SiteKey) -> Option<&CoupledAgentSite<T>> {
        self.sites.get(key)
    }

    pub fn get_mut(&mut self, key: &SiteKey) -> Option<&mut CoupledAgentSite<T>> {
        self.sites.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SiteKey, &CoupledAgentSite<T>)> {
        self.sites.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&SiteKey, &mut CoupledAgentSite<T>)> {
        self.sites.iter_mut()
    }

    /// Every trainable tensor as `agent.<site>.<local name>`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.sites
            .iter()
            .flat_map(|(key, site)| {
                site.tensors()
                    .into_iter()
                    .map(move |(local, t)| (format!("agent.{key}.{local}"), t))
            })
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.sites
            .iter_mut()
            .flat_map(|(key, site)| {
                let key = *key;
                site.tensors_mut()
                    .into_iter()
                    .map(move |(local, t)| (format!("agent.{key}.{local}"), t))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.sites.values().map(|s| s.param_count()).sum()
    }

    pub fn perturb<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for site in self.sites.values_mut() {
            site.perturb(std, rng);
        }
    }

    /// Records every trainable tensor on the tape (as a trainable leaf when
    /// `trainable`, otherwise as a constant) and builds the effective
    /// scale/shift vectors each hooked layer will use.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Result<SiteVars> {
        let mut hooks = HookVars::new();
        let mut params = Vec::new();
        for (key, site) in &self.sites {
            site.validate()?;
            let mut leaf = |tape: &mut Tape<T>, local: &str, t: &Tensor<T>| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                params.push((format!("agent.{key}.{local}"), v));
                v
            };
            let a_v = leaf(tape, "image.scale", &site.image.scale);
            let b_v = leaf(tape, "image.shift", &site.image.shift);
            let a_t = leaf(tape, "text.scale", &site.text.scale);
            let b_t = leaf(tape, "text.shift", &site.text.shift);
            let mut bridge = |tape: &mut Tape<T>, name: &str, b: &Option<Bridge<T>>| {
                b.as_ref().map(|b| {
                    let (down, up) = bridge_names(name);
                    (leaf(tape, down, &b.down), leaf(tape, up, &b.up))
                })
            };
            let br_v = bridge(tape, "bridge_v", &site.bridge_v);
            let br_t = bridge(tape, "bridge_t", &site.bridge_t);
            let sbr_v = bridge(tape, "shift_bridge_v", &site.shift_bridge_v);
            let sbr_t = bridge(tape, "shift_bridge_t", &site.shift_bridge_t);
            let meta = site.meta.as_ref().map(|m| leaf(tape, "meta", m));
            let meta_shift = site.meta_shift.as_ref().map(|m| leaf(tape, "meta_shift", m));

            let (src_av, src_at) = match meta {
                Some(m) => (m, m),
                None => (a_t, a_v),
            };
            let (src_bv, src_bt) = match meta_shift {
                Some(m) => (m, m),
                None => (b_t, b_v),
            };
            let eff_av = bridged_on_tape(tape, a_v, br_v, src_av)?;
            let eff_at = bridged_on_tape(tape, a_t, br_t, src_at)?;
            let eff_bv = bridged_on_tape(tape, b_v, sbr_v, src_bv)?;
            let eff_bt = bridged_on_tape(tape, b_t, sbr_t, src_bt)?;
            hooks.insert(
                Modality::Image,
                *key,
                AgentVars {
                    scale: eff_av,
                    shift: eff_bv,
                },
            );
            hooks.insert(
                Modality::Text,
                *key,
                AgentVars {
                    scale: eff_at,
                    shift: eff_bt,
                },
            );
        }
        Ok(SiteVars { hooks, params })
    }
}

fn bridged_on_tape<T: Scalar>(tape: &mut Tape<T>, raw: Var, bridge: Option<(Var, Var)>, source: Var) -> Result<Var> {
    let Some((down, up)) = bridge else {
        return Ok(raw);
    };
    let n = tape.value(source).len();
    let col = tape.reshape(source, &[n, 1])?;
    let hidden = tape.matmul(down, col)?;
    let out = tape.matmul(up, hidden)?;
    let width = tape.value(out).len();
    let out = tape.reshape(out, &[width])?;
    tape.add(raw, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Tensor<f64> {
        Tensor::from_vec(vec![x])
    }

    fn mat(x: f64) -> Tensor<f64> {
        Tensor::new(vec![1, 1], vec![x]).unwrap()
    }

    fn scalar_site(mode: CouplingMode) -> CoupledAgentSite<f64> {
        CoupledAgentSite {
            mode,
            image: AgentLayer::identity(1),
            text: AgentLayer::identity(1),
            bridge_v: None,
            bridge_t: None,
            meta: None,
            shift_bridge_v: None,
            shift_bridge_t: None,
            meta_shift: None,
        }
    }

    #[test]
    fn text_to_image_scalar_case() {
        let mut s = scalar_site(CouplingMode::TextToImage);
        s.text.scale = scalar(3.0);
        s.bridge_v = Some(Bridge {
            down: mat(0.5),
            up: mat(2.0),
        });
        let (a_v, a_t) = s.effective_scalings().unwrap();
        assert_eq!(a_v.data(), &[4.0]);
        assert_eq!(a_t.data(), &[3.0]);
    }

    #[test]
    fn bidirectional_scalar_case() {
        let mut s = scalar_site(CouplingMode::Bidirectional);
        s.meta = Some(scalar(2.0));
        s.bridge_v = Some(Bridge {
            down: mat(0.5),
            up: mat(1.0),
        });
        s.bridge_t = Some(Bridge {
            down: mat(1.0),
            up: mat(0.25),
        });
        let (a_v, a_t) = s.effective_scalings().unwrap();
        assert_eq!(a_v.data(), &[2.0]);
        assert_eq!(a_t.data(), &[1.5]);
    }

    #[test]
    fn fresh_sites_have_raw_effective_scalings() {
        let enc = EncoderConfig::toy();
        for mode in CouplingMode::ALL {
            let mut cfg = CouplingConfig::new(mode, 2, 5);
            cfg.bridge_shift = mode != CouplingMode::Ivlu;
            let sites = AgentSites::<f64>::init(&enc, &cfg, 9).unwrap();
            for (_, site) in sites.iter() {
                let (a_v, a_t) = site.effective_scalings().unwrap();
                assert!(a_v.bitwise_eq(&site.image.scale));
                assert!(a_t.bitwise_eq(&site.text.scale));
                let (b_v, b_t) = site.effective_shifts().unwrap();
                assert_eq!(b_v, site.image.shift);
                assert_eq!(b_t, site.text.shift);
            }
        }
    }

    #[test]
    fn mode_field_inconsistency_is_an_error() {
        let s = scalar_site(CouplingMode::Bidirectional);
        assert!(s.effective_scalings().is_err());
        let mut s = scalar_site(CouplingMode::Ivlu);
        s.meta = Some(scalar(1.0));
        assert!(s.effective_scalings().is_err());
    }

    #[test]
    fn bridge_norm_examples() {
        let mut s = scalar_site(CouplingMode::Bidirectional);
        s.meta = Some(scalar(1.0));
        s.bridge_v = Some(Bridge {
            down: mat(0.5),
            up: mat(0.0),
        });
        s.bridge_t = Some(Bridge {
            down: mat(1.0),
            up: mat(1.0),
        });
        assert_eq!(s.bridge_norm(Modality::Image).unwrap(), 0.0);
        s.bridge_v.as_mut().unwrap().up = mat(1.0);
        assert_eq!(s.bridge_norm(Modality::Image).unwrap(), 50.0);
        assert!(scalar_site(CouplingMode::TextToImage)
            .bridge_norm(Modality::Image)
            .is_err());
    }

    #[test]
    fn tape_and_plain_effective_scalings_agree_bitwise() {
        let enc = EncoderConfig::toy();
        let mut cfg = CouplingConfig::new(CouplingMode::Bidirectional, 3, 6);
        cfg.bridge_shift = true;
        let mut sites = AgentSites::<f64>::init(&enc, &cfg, 1).unwrap();
        sites.perturb(0.3, &mut stream(4, Stream::Checks));
        let mut tape = Tape::new();
        let vars = sites.register(&mut tape, true).unwrap();
        for (key, site) in sites.iter() {
            for m in Modality::BOTH {
                let (a, b) = site.effective(m).unwrap();
                let hv = vars.hooks.get(m, *key).unwrap();
                assert!(tape.value(hv.scale).bitwise_eq(&a));
                assert!(tape.value(hv.shift).bitwise_eq(&b));
            }
        }
        assert_eq!(vars.params.len(), sites.named_tensors().len());
    }

    #[test]
    fn named_round_trip() {
        let enc = EncoderConfig::toy();
        let cfg = CouplingConfig::new(CouplingMode::TextToImage, 2, 4);
        let mut sites = AgentSites::<f32>::init(&enc, &cfg, 2).unwrap();
        sites.perturb(0.1, &mut stream(5, Stream::Checks));
        let map: BTreeMap<_, _> = sites.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(AgentSites::from_named(&enc, &cfg, &map).unwrap(), sites);
    }

    #[test]
    fn rank_validation_names_key() {
        let enc = EncoderConfig::toy();
        let cfg = CouplingConfig::new(CouplingMode::Bidirectional, 7, 6);
        let err = AgentSites::<f64>::init(&enc, &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("rank"), "{err}");
    }
}
