use std::collections::BTreeMap;

use rand::Rng;

use super::report::{rel_error, CheckReport};
use crate::autodiff::Tape;
use crate::coupling::{encode_images, encode_texts, AgentSites, CouplingConfig, ParamClass};
use crate::error::{Error, Result};
use crate::model::{DualEncoder, EncoderConfig};
use crate::rng::{stream, substream, Stream};
use crate::tensor::Tensor;
use crate::training::{build_loss, loss_and_gradients, Batch};

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        point[i] = x[i] + h;
        let plus = f(&point)?;
        point[i] = x[i] - h;
        let minus = f(&point)?;
        point[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_grad" });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub h: f64,
    pub tolerance: f64,
    pub lambda: f64,
    pub temperature: f64,
    /// Entries checked per tensor, drawn at random; `None` checks all.
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            lambda: 1.0,
            temperature: 0.07,
            max_entries_per_tensor: None,
            seed: 0,
        }
    }
}

fn loss_value(
    model: &DualEncoder<f64>,
    sites: &AgentSites<f64>,
    batch: &Batch<'_, f64>,
    opts: &GradcheckOptions,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = sites.register(&mut tape, false)?;
    let loss = build_loss(&mut tape, model, &vars, batch, opts.lambda, opts.temperature)?;
    tape.value(loss.total).scalar_value()
}

/// Backward gradients of the total loss against central differences, one
/// report per trainable parameter class present in `sites`.
pub fn gradcheck_sites(
    model: &DualEncoder<f64>,
    sites: &AgentSites<f64>,
    batch: &Batch<'_, f64>,
    opts: &GradcheckOptions,
) -> Result<Vec<CheckReport>> {
    let (_, grads) = loss_and_gradients(model, sites, batch, opts.lambda, opts.temperature)?;
    compare_gradients(model, sites, batch, &grads, opts)
}

/// Compares the given analytic gradients (keyed by tensor name) against
/// central differences of the total loss.
pub fn compare_gradients(
    model: &DualEncoder<f64>,
    sites: &AgentSites<f64>,
    batch: &Batch<'_, f64>,
    grads: &BTreeMap<String, Tensor<f64>>,
    opts: &GradcheckOptions,
) -> Result<Vec<CheckReport>> {
    let mut rng = stream(opts.seed, Stream::Checks);
    // (worst error, location, entries checked) per class.
    let mut per_class: BTreeMap<ParamClass, (f64, String, usize)> = BTreeMap::new();
    let names: Vec<String> = sites.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut probe = sites.clone();
    for name in names {
        let class =
            ParamClass::of(&name).ok_or_else(|| Error::InvalidArgument(format!("unclassified tensor {name}")))?;
        let analytic = grads
            .get(&name)
            .ok_or_else(|| Error::MissingTensor(format!("gradient of {name}")))?;
        let len = analytic.len();
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(m) if m < len => rand::seq::index::sample(&mut rng, len, m).into_vec(),
            _ => (0..len).collect(),
        };
        let original: Vec<f64> = sites
            .named_tensors()
            .into_iter()
            .find(|(n, _)| *n == name)
            .expect("named")
            .1
            .data()
            .to_vec();
        let slot = per_class.entry(class).or_insert((0.0, String::new(), 0));
        for &i in &entries {
            let numeric = finite_diff_grad(
                |x| {
                    set_entry(&mut probe, &name, i, x[0]);
                    loss_value(model, &probe, batch, opts)
                },
                &[original[i]],
                opts.h,
            )?[0];
            set_entry(&mut probe, &name, i, original[i]);
            let err = rel_error(analytic.data()[i], numeric);
            if slot.1.is_empty() || err > slot.0 {
                slot.0 = err;
                slot.1 = format!("{name}[{i}]");
            }
            slot.2 += 1;
        }
    }
    Ok(per_class
        .into_iter()
        .map(|(class, (worst, at, n))| {
            CheckReport::new(
                format!("gradcheck.{}", class.name()),
                worst,
                opts.tolerance,
                n,
                opts.seed,
                format!("worst at {at}"),
            )
        })
        .collect())
}

fn set_entry(sites: &mut AgentSites<f64>, name: &str, index: usize, value: f64) {
    let (_, t) = sites
        .named_tensors_mut()
        .into_iter()
        .find(|(n, _)| n == name)
        .expect("tensor exists");
    let mut data = t.data().to_vec();
    data[index] = value;
    *t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
}

/// A random model, perturbed sites and a small random batch (three class
/// texts, three images) for gradient checking.
pub struct GradcheckFixture {
    pub model: DualEncoder<f64>,
    pub sites: AgentSites<f64>,
    pub texts: Vec<Vec<usize>>,
    pub images: Vec<Tensor<f64>>,
}

impl GradcheckFixture {
    pub fn batch(&self) -> Result<Batch<'_, f64>> {
        let image_refs: Vec<&Tensor<f64>> = self.images.iter().collect();
        Ok(Batch {
            frozen_text: encode_texts(&self.model, &self.texts, None)?,
            frozen_image: encode_images(&self.model, &image_refs, None)?,
            texts: self.texts.clone(),
            labels: (0..self.images.len()).map(|i| i % self.texts.len()).collect(),
            images: image_refs,
        })
    }
}

pub fn gradcheck_fixture(encoder: &EncoderConfig, coupling: &CouplingConfig, seed: u64) -> Result<GradcheckFixture> {
    encoder.validate()?;
    coupling.validate(encoder)?;
    let model = DualEncoder::<f64>::random(encoder.clone(), &mut stream(seed, Stream::FrozenWeights))?;
    let mut sites = AgentSites::init(encoder, coupling, seed)?;
    let mut rng = substream(seed, Stream::Checks, 1);
    sites.perturb(0.3, &mut rng);
    let classes = 3;
    let texts: Vec<Vec<usize>> = (0..classes)
        .map(|_| {
            let len = rng.gen_range(1..=encoder.n_t);
            (0..len).map(|_| rng.gen_range(0..encoder.vocab)).collect()
        })
        .collect();
    let images: Vec<Tensor<f64>> = (0..classes)
        .map(|_| Tensor::randn(&[encoder.n_v, encoder.d_v], 1.0, &mut rng))
        .collect();
    Ok(GradcheckFixture {
        model,
        sites,
        texts,
        images,
    })
}

/// Gradient check of every parameter class on a [`GradcheckFixture`].
pub fn gradcheck_random(
    encoder: &EncoderConfig,
    coupling: &CouplingConfig,
    opts: &GradcheckOptions,
) -> Result<Vec<CheckReport>> {
    let fixture = gradcheck_fixture(encoder, coupling, opts.seed)?;
    let batch = fixture.batch()?;
    gradcheck_sites(&fixture.model, &fixture.sites, &batch, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::CouplingMode;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|x| Ok(x[0] * x[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn linear_function_recovers_coefficients() {
        let c = [0.5, -2.0, 3.25];
        let g = finite_diff_grad(
            |x| Ok(x.iter().zip(&c).map(|(a, b)| a * b).sum()),
            &[1.0, 2.0, -1.0],
            1e-5,
        )
        .unwrap();
        for (gi, ci) in g.iter().zip(c) {
            assert!((gi - ci).abs() < 1e-9);
        }
    }

    #[test]
    fn bad_step_and_non_finite_values() {
        assert!(finite_diff_grad(|x| Ok(x[0]), &[0.0], 0.0).is_err());
        let err = finite_diff_grad(|_| Ok(f64::NAN), &[0.0], 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn toy_model_sampled_entries() {
        let enc = EncoderConfig::toy();
        let coupling = CouplingConfig::new(CouplingMode::Bidirectional, 2, 4);
        let opts = GradcheckOptions {
            max_entries_per_tensor: Some(2),
            ..Default::default()
        };
        let reports = gradcheck_random(&enc, &coupling, &opts).unwrap();
        assert_eq!(reports.len(), 5);
        for r in reports {
            assert!(r.pass, "{r}");
        }
    }

    #[test]
    fn shift_bridges_with_meta_shift() {
        let enc = EncoderConfig::toy();
        let mut coupling = CouplingConfig::new(CouplingMode::Bidirectional, 2, 4);
        coupling.bridge_shift = true;
        let opts = GradcheckOptions {
            max_entries_per_tensor: Some(1),
            ..Default::default()
        };
        let reports = gradcheck_random(&enc, &coupling, &opts).unwrap();
        assert_eq!(reports.len(), 6);
        assert!(reports.iter().all(|r| r.pass));
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let enc = EncoderConfig::toy();
        let coupling = CouplingConfig::new(CouplingMode::TextToImage, 2, 4);
        let fx = gradcheck_fixture(&enc, &coupling, 3).unwrap();
        let batch = fx.batch().unwrap();
        let (_, mut grads) = loss_and_gradients(&fx.model, &fx.sites, &batch, 1.0, 0.07).unwrap();
        let name = "agent.b0.2.image.shift".to_string();
        let g = grads[&name].map(|v| v + 1e-2);
        grads.insert(name, g);
        let opts = GradcheckOptions {
            max_entries_per_tensor: Some(1),
            ..Default::default()
        };
        let reports = compare_gradients(&fx.model, &fx.sites, &batch, &grads, &opts).unwrap();
        let shift = reports.iter().find(|r| r.name == "gradcheck.b").unwrap();
        assert!(!shift.pass, "{shift}");
        assert!(shift.detail.contains("image.shift"));
        assert!(reports.iter().filter(|r| r.name != "gradcheck.b").all(|r| r.pass));
    }
}
