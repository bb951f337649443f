use rand::Rng;

use super::report::CheckReport;
use crate::coupling::{fuse_model, probe_layers, AgentSites, CouplingConfig, CouplingMode};
use crate::error::Result;
use crate::model::{DualEncoder, EncoderConfig};
use crate::rng::{substream, Stream};
use crate::tensor::{Scalar, Tensor};

/// One random text (length in `1..=n_t`) and one random image per input.
pub fn random_inputs<T: Scalar>(config: &EncoderConfig, n: usize, seed: u64) -> Vec<(Vec<usize>, Tensor<T>)> {
    (0..n)
        .map(|i| {
            let mut rng = substream(seed, Stream::Checks, i as u64);
            let len = rng.gen_range(1..=config.n_t);
            let tokens = (0..len).map(|_| rng.gen_range(0..config.vocab)).collect();
            (tokens, Tensor::randn(&[config.n_v, config.d_v], 1.0, &mut rng))
        })
        .collect()
}

/// `‖a − b‖∞ / ‖a‖∞`.
fn layer_error<T: Scalar>(reference: &Tensor<T>, other: &Tensor<T>) -> f64 {
    if reference.shape() != other.shape() {
        return f64::INFINITY;
    }
    let diff = reference
        .data()
        .iter()
        .zip(other.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .fold(0.0, f64::max);
    let scale = reference.max_abs().as_f64();
    if diff == 0.0 {
        0.0
    } else if scale > 0.0 {
        diff / scale
    } else {
        f64::INFINITY
    }
}

/// Hooked `model` against `fused` (un-hooked) on `n_inputs` random inputs,
/// layer by layer. The detail names the worst layer and, on failure, the
/// first layer in evaluation order whose error exceeds `tol`.
pub fn compare_fused<T: Scalar>(
    model: &DualEncoder<T>,
    sites: &AgentSites<T>,
    fused: &DualEncoder<T>,
    n_inputs: usize,
    tol: f64,
    seed: u64,
) -> CheckReport {
    const NAME: &str = "fusion_equivalence";
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut first_bad: Option<String> = None;
    for (i, (tokens, patches)) in random_inputs::<T>(&model.config, n_inputs, seed)
        .into_iter()
        .enumerate()
    {
        let hooked = match probe_layers(model, &tokens, &patches, Some(sites)) {
            Ok(v) => v,
            Err(e) => return CheckReport::aborted(NAME, tol, i, seed, e),
        };
        let plain = match probe_layers(fused, &tokens, &patches, None) {
            Ok(v) => v,
            Err(e) => return CheckReport::aborted(NAME, tol, i, seed, e),
        };
        for ((name, a), (_, b)) in hooked.iter().zip(&plain) {
            let err = layer_error(a, b);
            if err > worst || worst_at.is_empty() {
                worst = worst.max(err);
                worst_at = name.clone();
            }
            if !(err <= tol) && first_bad.is_none() {
                first_bad = Some(name.clone());
            }
        }
    }
    let mut detail = if worst_at.is_empty() {
        String::new()
    } else {
        format!("worst at {worst_at}")
    };
    if let Some(layer) = first_bad {
        detail.push_str(&format!("; first divergence at {layer}"));
    }
    CheckReport::new(NAME, worst, tol, n_inputs, seed, detail)
}

/// Folds `sites` into `model` and compares both paths on random inputs.
pub fn check_fusion_equivalence<T: Scalar>(
    model: &DualEncoder<T>,
    sites: &AgentSites<T>,
    n_inputs: usize,
    tol: f64,
    seed: u64,
) -> CheckReport {
    match fuse_model(model, sites) {
        Ok(fused) => compare_fused(model, sites, &fused, n_inputs, tol, seed),
        Err(e) => CheckReport::aborted("fusion_equivalence", tol, 0, seed, e),
    }
}

/// Default std of the Gaussian noise added to every agent tensor in a sweep.
pub const SWEEP_AGENT_STD: f64 = 0.2;

/// `trials` independent settings, each a fresh random model and sites
/// perturbed by `agent_std` noise, cycling through the coupling modes,
/// checked on one random input each.
pub fn fusion_sweep<T: Scalar>(
    encoder: &EncoderConfig,
    coupling: &CouplingConfig,
    trials: usize,
    agent_std: f64,
    tol: f64,
    seed: u64,
) -> CheckReport {
    let name = format!("fusion_sweep.{}", T::DTYPE);
    let mut worst = 0.0f64;
    let mut worst_detail = String::new();
    for i in 0..trials {
        let trial_seed = seed.wrapping_add(i as u64);
        let mode = CouplingMode::ALL[i % CouplingMode::ALL.len()];
        let setup = || -> Result<(DualEncoder<T>, AgentSites<T>)> {
            let model = DualEncoder::random(encoder.clone(), &mut substream(seed, Stream::FrozenWeights, i as u64))?;
            let mut sites = AgentSites::init(encoder, &coupling.with_mode(mode), trial_seed)?;
            sites.perturb(agent_std, &mut substream(seed, Stream::Bridges, i as u64));
            Ok((model, sites))
        };
        let (model, sites) = match setup() {
            Ok(s) => s,
            Err(e) => return CheckReport::aborted(name, tol, i, seed, e),
        };
        let r = check_fusion_equivalence(&model, &sites, 1, tol, trial_seed);
        if r.detail.starts_with("aborted") {
            return CheckReport::aborted(name, tol, i, seed, r.detail);
        }
        if r.worst_error > worst || worst_detail.is_empty() {
            worst = worst.max(r.worst_error);
            worst_detail = format!("trial {i} ({mode}) {}", r.detail);
        }
    }
    CheckReport::new(name, worst, tol, trials, seed, worst_detail)
}
