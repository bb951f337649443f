//! Episodic training of agent, bridge and meta parameters against a frozen
//! dual encoder.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adamw::{AdamWConfig, AdamWState};
use super::data::{Episode, Item, Split, SyntheticDataset};
use super::loss::{ce_from_logits, logits_on_tape, reg_losses, reg_on_tape, total_on_tape};
use crate::autodiff::{Tape, Var};
use crate::coupling::{encode_images, encode_texts, AgentSites, SiteVars};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, DualEncoder, EncoderVars};
use crate::rng::{stream, Stream};
use crate::tensor::{Scalar, Tensor};

fn default_shots() -> usize {
    4
}
fn default_batch_size() -> usize {
    32
}
fn default_steps() -> usize {
    300
}
fn default_lr() -> f64 {
    AdamWConfig::default().lr
}
fn default_weight_decay() -> f64 {
    AdamWConfig::default().weight_decay
}
fn default_beta1() -> f64 {
    AdamWConfig::default().beta1
}
fn default_beta2() -> f64 {
    AdamWConfig::default().beta2
}
fn default_eps() -> f64 {
    AdamWConfig::default().eps
}
fn default_lambda() -> f64 {
    1.0
}
fn default_temperature() -> f64 {
    0.07
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Training images per base class.
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub cosine_decay: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            shots: default_shots(),
            batch_size: default_batch_size(),
            steps: default_steps(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            lambda: default_lambda(),
            temperature: default_temperature(),
            cosine_decay: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error as E;
        if self.shots == 0 {
            return Err(E::config("shots", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(E::config("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(E::config("lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(E::config("weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(E::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(E::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(E::config("eps", "must be positive"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(E::config("lambda", "must be non-negative"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(E::config("temperature", "must be positive"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if !self.cosine_decay || self.steps <= 1 {
            return self.lr;
        }
        let progress = step as f64 / (self.steps - 1) as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// One row of the metric log. `acc` is the accuracy of the step's batch
/// before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub ce: f64,
    pub reg_v: f64,
    pub reg_t: f64,
    pub total: f64,
    pub acc: f64,
}

pub const LOG_HEADER: &str = "step,L_ce,L_reg_v,L_reg_t,L,acc";

/// The metric log as CSV with [`LOG_HEADER`].
pub fn log_csv(log: &[StepLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in log {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.step, r.ce, r.reg_v, r.reg_t, r.total, r.acc);
    }
    out
}

/// Trainable state: the sites, the optimizer moments and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedState<T> {
    pub sites: AgentSites<T>,
    pub optimizer: AdamWState<T>,
    pub step: u64,
}

impl<T: Scalar> TrainedState<T> {
    pub fn new(sites: AgentSites<T>) -> Self {
        Self {
            sites,
            optimizer: AdamWState::new(),
            step: 0,
        }
    }
}

/// Inputs for one loss evaluation. Frozen features are the un-hooked
/// encoder outputs for the same texts and images.
#[derive(Debug, Clone)]
pub struct Batch<'a, T> {
    pub texts: Vec<Vec<usize>>,
    pub images: Vec<&'a Tensor<T>>,
    pub labels: Vec<usize>,
    pub frozen_text: Tensor<T>,
    pub frozen_image: Tensor<T>,
}

/// Tape variables of the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub ce: Var,
    pub reg_v: Var,
    pub reg_t: Var,
    pub total: Var,
    pub logits: Var,
}

/// Builds the full objective on `tape`, with both encoders hooked by `sites`.
pub fn build_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &DualEncoder<T>,
    sites: &SiteVars,
    batch: &Batch<'_, T>,
    lambda: T,
    temperature: T,
) -> Result<LossVars> {
    let text = EncoderVars::register(tape, &model.config, &model.text)?;
    let image = EncoderVars::register(tape, &model.config, &model.image)?;
    let txt_rows = batch
        .texts
        .iter()
        .map(|t| text.encode_text(tape, t, Some(&sites.hooks), None))
        .collect::<Result<Vec<_>>>()?;
    let img_rows = batch
        .images
        .iter()
        .map(|p| image.encode_image(tape, p, Some(&sites.hooks), None))
        .collect::<Result<Vec<_>>>()?;
    let txt = tape.stack_rows(&txt_rows)?;
    let img = tape.stack_rows(&img_rows)?;
    let logits = logits_on_tape(tape, img, txt, temperature)?;
    let ce = ce_from_logits(tape, logits, &batch.labels)?;
    let frozen_img = tape.constant(batch.frozen_image.clone());
    let frozen_txt = tape.constant(batch.frozen_text.clone());
    let reg_v = reg_on_tape(tape, img, frozen_img)?;
    let reg_t = reg_on_tape(tape, txt, frozen_txt)?;
    let total = total_on_tape(tape, ce, reg_v, reg_t, lambda)?;
    Ok(LossVars {
        ce,
        reg_v,
        reg_t,
        total,
        logits,
    })
}

/// Loss terms and the gradient of the total with respect to every site
/// tensor, keyed by its checkpoint name.
pub fn loss_and_gradients<T: Scalar>(
    model: &DualEncoder<T>,
    sites: &AgentSites<T>,
    batch: &Batch<'_, T>,
    lambda: T,
    temperature: T,
) -> Result<(StepLog, BTreeMap<String, Tensor<T>>)> {
    let mut tape = Tape::new();
    let vars = sites.register(&mut tape, true)?;
    let loss = build_loss(&mut tape, model, &vars, batch, lambda, temperature)?;
    let scalar = |tape: &Tape<T>, v: Var| -> Result<f64> { Ok(tape.value(v).scalar_value()?.as_f64()) };
    let predicted = argmax_rows(tape.value(loss.logits))?;
    let correct = predicted.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    let row = StepLog {
        step: 0,
        ce: scalar(&tape, loss.ce)?,
        reg_v: scalar(&tape, loss.reg_v)?,
        reg_t: scalar(&tape, loss.reg_t)?,
        total: scalar(&tape, loss.total)?,
        acc: correct as f64 / batch.labels.len() as f64,
    };
    let grads = tape.backward(loss.total)?;
    let named = vars
        .params
        .iter()
        .map(|(name, v)| {
            (
                name.clone(),
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape())),
            )
        })
        .collect();
    Ok((row, named))
}

/// Frozen features and labels of an episode's training set, computed once.
struct Prepared<'a, T> {
    texts: Vec<Vec<usize>>,
    frozen_text: Tensor<T>,
    images: Vec<&'a Tensor<T>>,
    frozen_image: Tensor<T>,
    labels: Vec<usize>,
}

fn prepare<'a, T: Scalar>(
    model: &DualEncoder<T>,
    dataset: &'a SyntheticDataset<T>,
    episode: &Episode,
    items: &[Item],
    split: Split,
) -> Result<Prepared<'a, T>> {
    let texts = dataset.texts(episode.classes(split));
    let images: Vec<&Tensor<T>> = items.iter().map(|&i| &dataset.image(i).patches).collect();
    Ok(Prepared {
        frozen_text: encode_texts(model, &texts, None)?,
        frozen_image: encode_images(model, &images, None)?,
        labels: episode.labels(split, items),
        texts,
        images,
    })
}

fn gather_rows<T: Scalar>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let d = t.last_dim();
    let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
    Tensor::new(vec![rows.len(), d], data).expect("rows of a matrix")
}

/// Runs `config.steps` optimizer steps on the episode's training set,
/// continuing from `state`. Batches are drawn without replacement from a
/// reshuffled training set each epoch; the class texts of every base class
/// are encoded at each step.
pub fn train<T: Scalar>(
    model: &DualEncoder<T>,
    mut state: TrainedState<T>,
    config: &TrainingConfig,
    dataset: &SyntheticDataset<T>,
    episode: &Episode,
    seed: u64,
) -> Result<(TrainedState<T>, Vec<StepLog>)> {
    config.validate()?;
    if episode.train.is_empty() {
        return Err(Error::InvalidArgument("episode has no training items".into()));
    }
    let prepared = prepare(model, dataset, episode, &episode.train, Split::Base)?;
    let adamw = config.adamw();
    let lambda = T::of_f64(config.lambda);
    let temperature = T::of_f64(config.temperature);
    let mut rng = stream(seed, Stream::Batches);
    let n = episode.train.len();
    let batch = config.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let mut rows = order[cursor..cursor + batch].to_vec();
        rows.sort_unstable();
        cursor += batch;
        let b = Batch {
            texts: prepared.texts.clone(),
            images: rows.iter().map(|&r| prepared.images[r]).collect(),
            labels: rows.iter().map(|&r| prepared.labels[r]).collect(),
            frozen_text: prepared.frozen_text.clone(),
            frozen_image: gather_rows(&prepared.frozen_image, &rows),
        };
        let global_step = state.step as usize;
        let (mut row, grads) =
            loss_and_gradients(model, &state.sites, &b, lambda, temperature).map_err(|e| match e {
                Error::NonFinite { op } => Error::NonFiniteLoss {
                    step: global_step,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
        row.step = global_step;
        if ![row.ce, row.reg_v, row.reg_t, row.total].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: global_step,
                detail: format!("L_ce={} L_reg_v={} L_reg_t={}", row.ce, row.reg_v, row.reg_t),
            });
        }
        log.push(row);
        let params = state.sites.named_tensors_mut();
        state
            .optimizer
            .step(&adamw, config.lr_at(step), params, &grads)
            .map_err(|e| Error::NonFiniteLoss {
                step: global_step,
                detail: e.to_string(),
            })?;
        state.step += 1;
    }
    Ok((state, log))
}

/// Top-1 accuracy of cosine-similarity classification on `items`, against
/// the class names of `split`.
pub fn accuracy<T: Scalar>(
    model: &DualEncoder<T>,
    sites: Option<&AgentSites<T>>,
    dataset: &SyntheticDataset<T>,
    episode: &Episode,
    split: Split,
    items: &[Item],
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no items to evaluate".into()));
    }
    let texts = dataset.texts(episode.classes(split));
    let images: Vec<&Tensor<T>> = items.iter().map(|&i| &dataset.image(i).patches).collect();
    let txt = encode_texts(model, &texts, sites)?;
    let img = encode_images(model, &images, sites)?;
    let mut tape = Tape::new();
    let (i, t) = (tape.constant(img), tape.constant(txt));
    let logits = logits_on_tape(&mut tape, i, t, T::one())?;
    let predicted = argmax_rows(tape.value(logits))?;
    let labels = episode.labels(split, items);
    let correct = predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / items.len() as f64)
}

/// Accuracy on the evaluation set of `split`.
pub fn evaluate<T: Scalar>(
    model: &DualEncoder<T>,
    sites: Option<&AgentSites<T>>,
    dataset: &SyntheticDataset<T>,
    episode: &Episode,
    split: Split,
) -> Result<f64> {
    accuracy(model, sites, dataset, episode, split, episode.eval_items(split))
}

/// Mean feature drift `(image, text)`: `1 − cos` between hooked and frozen
/// features over the training images and the base class names.
pub fn feature_drift<T: Scalar>(
    model: &DualEncoder<T>,
    sites: &AgentSites<T>,
    dataset: &SyntheticDataset<T>,
    episode: &Episode,
) -> Result<(f64, f64)> {
    let prepared = prepare(model, dataset, episode, &episode.train, Split::Base)?;
    let img = encode_images(model, &prepared.images, Some(sites))?;
    let txt = encode_texts(model, &prepared.texts, Some(sites))?;
    let (v, t) = reg_losses(&img, &prepared.frozen_image, &txt, &prepared.frozen_text)?;
    Ok((v.as_f64(), t.as_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{CouplingConfig, CouplingMode};
    use crate::model::EncoderConfig;
    use crate::rng::stream;
    use crate::training::data::{gen_synthetic, sample_few_shot, DataConfig};

    fn setup(mode: CouplingMode) -> (DualEncoder<f64>, AgentSites<f64>, SyntheticDataset<f64>, Episode) {
        let enc = EncoderConfig::toy();
        let model = DualEncoder::random(enc.clone(), &mut stream(1, Stream::FrozenWeights)).unwrap();
        let coupling = CouplingConfig::new(mode, 2, 8);
        let sites = AgentSites::init(&enc, &coupling, 1).unwrap();
        let data = DataConfig {
            classes: 4,
            pool_per_class: 4,
            noise: 0.1,
            latent_dim: 8,
            name_len: 2,
        };
        let ds = gen_synthetic(&data, &enc, 1).unwrap();
        let ep = sample_few_shot(&ds, 2, 1).unwrap();
        (model, sites, ds, ep)
    }

    fn quick() -> TrainingConfig {
        TrainingConfig {
            steps: 3,
            batch_size: 3,
            lr: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let (model, sites, ds, ep) = setup(CouplingMode::Bidirectional);
        let cfg = TrainingConfig {
            steps: 0,
            ..Default::default()
        };
        let (state, log) = train(&model, TrainedState::new(sites.clone()), &cfg, &ds, &ep, 0).unwrap();
        assert!(log.is_empty());
        assert_eq!(state.sites, sites);
        let frozen = evaluate(&model, None, &ds, &ep, Split::Base).unwrap();
        let hooked = evaluate(&model, Some(&state.sites), &ds, &ep, Split::Base).unwrap();
        assert_eq!(frozen, hooked);
    }

    #[test]
    fn training_is_deterministic_and_leaves_weights_alone() {
        let (model, sites, ds, ep) = setup(CouplingMode::TextToImage);
        let before = model.fingerprint();
        let (a, log_a) = train(&model, TrainedState::new(sites.clone()), &quick(), &ds, &ep, 9).unwrap();
        let (b, log_b) = train(&model, TrainedState::new(sites), &quick(), &ds, &ep, 9).unwrap();
        assert_eq!(model.fingerprint(), before);
        assert_eq!(log_csv(&log_a), log_csv(&log_b));
        assert_eq!(a, b);
        assert_eq!(a.step, 3);
        assert_eq!(log_a.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn first_step_regularization_vanishes() {
        let (model, sites, ds, ep) = setup(CouplingMode::Ivlu);
        let (_, log) = train(&model, TrainedState::new(sites), &quick(), &ds, &ep, 0).unwrap();
        assert!(log[0].reg_v.abs() < 1e-12 && log[0].reg_t.abs() < 1e-12);
        assert!((log[0].total - log[0].ce).abs() < 1e-12);
    }

    #[test]
    fn csv_header() {
        let row = StepLog {
            step: 2,
            ce: 0.5,
            reg_v: 0.0,
            reg_t: 0.25,
            total: 0.75,
            acc: 1.0,
        };
        assert_eq!(
            log_csv(&[row]),
            "step,L_ce,L_reg_v,L_reg_t,L,acc\n2,0.5,0,0.25,0.75,1\n"
        );
    }

    #[test]
    fn invalid_config_names_key() {
        let cfg = TrainingConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("lambda"));
        let cfg = TrainingConfig {
            shots: 0,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("shots"));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainingConfig {
            steps: 11,
            lr: 1.0,
            cosine_decay: true,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert!(cfg.lr_at(10).abs() < 1e-15);
        assert!((cfg.lr_at(5) - 0.5).abs() < 1e-15);
    }
}
