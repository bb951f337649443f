use super::fusion::random_inputs;
use super::report::CheckReport;
use crate::coupling::{probe_layers, AgentSites, CouplingConfig, CouplingMode};
use crate::model::DualEncoder;
use crate::tensor::Scalar;

const NAME: &str = "identity_at_init";

/// Hooked outputs under each site set against the frozen model, required
/// to agree bit for bit at every hooked layer and at both features.
pub fn check_identity_with<T: Scalar>(
    model: &DualEncoder<T>,
    site_sets: &[AgentSites<T>],
    n_inputs: usize,
    seed: u64,
) -> CheckReport {
    let inputs = random_inputs::<T>(&model.config, n_inputs, seed);
    let mut worst = 0.0f64;
    let mut first_mismatch: Option<String> = None;
    let mut trials = 0;
    for (i, (tokens, patches)) in inputs.iter().enumerate() {
        let frozen = match probe_layers(model, tokens, patches, None) {
            Ok(v) => v,
            Err(e) => return CheckReport::aborted(NAME, 0.0, trials, seed, e),
        };
        for sites in site_sets {
            let hooked = match probe_layers(model, tokens, patches, Some(sites)) {
                Ok(v) => v,
                Err(e) => return CheckReport::aborted(NAME, 0.0, trials, seed, e),
            };
            trials += 1;
            for ((name, a), (_, b)) in frozen.iter().zip(&hooked) {
                if a.bitwise_eq(b) {
                    continue;
                }
                let diff = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
                    .fold(f64::MIN_POSITIVE, f64::max);
                worst = worst.max(diff);
                first_mismatch.get_or_insert_with(|| format!("first mismatch: {} mode, input {i}, {name}", sites.mode));
            }
        }
    }
    CheckReport::new(NAME, worst, 0.0, trials, seed, first_mismatch.unwrap_or_default())
}

/// Fresh sites for every mode in `modes`, checked against the frozen model.
pub fn check_identity_at_init<T: Scalar>(
    model: &DualEncoder<T>,
    coupling: &CouplingConfig,
    modes: &[CouplingMode],
    n_inputs: usize,
    seed: u64,
) -> CheckReport {
    let mut sets = Vec::with_capacity(modes.len());
    for &mode in modes {
        match AgentSites::init(&model.config, &coupling.with_mode(mode), seed) {
            Ok(s) => sets.push(s),
            Err(e) => return CheckReport::aborted(NAME, 0.0, 0, seed, e),
        }
    }
    check_identity_with(model, &sets, n_inputs, seed)
}
