//! Synthetic two-modality classification data and few-shot episodes.
//!
//! Each class has an orthonormal latent prototype. An image sample is the
//! prototype plus isotropic Gaussian noise, lifted into `n_v` patch tokens by
//! fixed random matrices. A class "name" is a template prefix followed by
//! class-specific token ids.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::rng::{stream, Stream};
use crate::tensor::{Scalar, Tensor};

/// Token ids shared by every class name, before the class-specific part.
pub const TEMPLATE: [usize; 3] = [1, 2, 3];
const FIRST_NAME_TOKEN: usize = 4;

fn default_name_len() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    /// Image samples generated per class.
    pub pool_per_class: usize,
    /// Std of the latent noise added to each sample.
    pub noise: f64,
    pub latent_dim: usize,
    #[serde(default = "default_name_len")]
    pub name_len: usize,
}

impl DataConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        if self.pool_per_class == 0 {
            return Err(Error::config("pool_per_class", "must be positive"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::config("noise", "must be a non-negative number"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be positive"));
        }
        if self.classes > self.latent_dim {
            return Err(Error::config(
                "classes",
                format!(
                    "{} orthogonal prototypes do not fit in latent_dim = {}",
                    self.classes, self.latent_dim
                ),
            ));
        }
        if self.name_len == 0 {
            return Err(Error::config("name_len", "must be positive"));
        }
        if TEMPLATE.len() + self.name_len > encoder.n_t {
            return Err(Error::config(
                "name_len",
                format!(
                    "text of length {} exceeds n_t = {}",
                    TEMPLATE.len() + self.name_len,
                    encoder.n_t
                ),
            ));
        }
        let needed = FIRST_NAME_TOKEN + self.classes * self.name_len;
        if needed > encoder.vocab {
            return Err(Error::config(
                "classes",
                format!("class names need {needed} token ids, vocab is {}", encoder.vocab),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample<T> {
    /// `[n_v, d_v]` patch tokens.
    pub patches: Tensor<T>,
    /// The latent point the patches were lifted from.
    pub latent: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassData<T> {
    pub tokens: Vec<usize>,
    pub prototype: Tensor<T>,
    pub images: Vec<ImageSample<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset<T> {
    pub config: DataConfig,
    pub seed: u64,
    pub classes: Vec<ClassData<T>>,
}

/// Orthonormal prototypes by Gram–Schmidt on Gaussian draws.
fn orthonormal_prototypes<R: rand::Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = Tensor::<f64>::randn(&[dim], 1.0, rng).into_data();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Generates a dataset deterministically from `seed`.
pub fn gen_synthetic<T: Scalar>(
    config: &DataConfig,
    encoder: &EncoderConfig,
    seed: u64,
) -> Result<SyntheticDataset<T>> {
    config.validate(encoder)?;
    let mut rng = stream(seed, Stream::Data);
    let dim = config.latent_dim;
    let prototypes = orthonormal_prototypes(config.classes, dim, &mut rng);
    // One lift matrix per patch position, [d_v, latent_dim] with unit-variance
    // entries so unit-norm latents give O(1) token entries.
    let lifts: Vec<Tensor<f64>> = (0..encoder.n_v)
        .map(|_| Tensor::randn(&[encoder.d_v, dim], 1.0, &mut rng))
        .collect();

    let mut classes = Vec::with_capacity(config.classes);
    for (c, proto) in prototypes.iter().enumerate() {
        let mut tokens = TEMPLATE.to_vec();
        tokens.extend((0..config.name_len).map(|j| FIRST_NAME_TOKEN + c * config.name_len + j));
        let mut images = Vec::with_capacity(config.pool_per_class);
        for _ in 0..config.pool_per_class {
            let noise = Tensor::<f64>::randn(&[dim], config.noise, &mut rng);
            let latent: Vec<f64> = proto.iter().zip(noise.data()).map(|(p, n)| p + n).collect();
            let col = Tensor::new(vec![dim, 1], latent.clone())?;
            let mut patches = Vec::with_capacity(encoder.n_v * encoder.d_v);
            for lift in &lifts {
                patches.extend(lift.matmul(&col)?.data().iter().map(|&v| T::of_f64(v)));
            }
            images.push(ImageSample {
                patches: Tensor::new(vec![encoder.n_v, encoder.d_v], patches)?,
                latent: Tensor::from_vec(latent.into_iter().map(T::of_f64).collect()),
            });
        }
        classes.push(ClassData {
            tokens,
            prototype: Tensor::from_vec(proto.iter().map(|&v| T::of_f64(v)).collect()),
            images,
        });
    }
    Ok(SyntheticDataset {
        config: config.clone(),
        seed,
        classes,
    })
}

impl<T: Scalar> SyntheticDataset<T> {
    pub fn image(&self, item: Item) -> &ImageSample<T> {
        &self.classes[item.class].images[item.index]
    }

    pub fn texts(&self, classes: &[usize]) -> Vec<Vec<usize>> {
        classes.iter().map(|&c| self.classes[c].tokens.clone()).collect()
    }
}

/// One image of the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Item {
    pub class: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "novel" => Ok(Split::Novel),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?} (base|novel)"))),
        }
    }
}

/// A k-shot task: train on `k` images per base class, evaluate on the rest
/// of the base images and on all images of the held-out novel classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub shots: usize,
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub train: Vec<Item>,
    pub base_eval: Vec<Item>,
    pub novel_eval: Vec<Item>,
}

impl Episode {
    pub fn classes(&self, split: Split) -> &[usize] {
        match split {
            Split::Base => &self.base_classes,
            Split::Novel => &self.novel_classes,
        }
    }

    pub fn eval_items(&self, split: Split) -> &[Item] {
        match split {
            Split::Base => &self.base_eval,
            Split::Novel => &self.novel_eval,
        }
    }

    /// Position of the item's class within its split's class list.
    pub fn label(&self, split: Split, item: Item) -> usize {
        self.classes(split)
            .iter()
            .position(|&c| c == item.class)
            .expect("item belongs to the split")
    }

    pub fn labels(&self, split: Split, items: &[Item]) -> Vec<usize> {
        items.iter().map(|&i| self.label(split, i)).collect()
    }
}

/// Splits the classes in half (base gets the extra class when odd) and
/// draws `k` training images per base class, all from the episode stream of
/// `seed`.
pub fn sample_few_shot<T: Scalar>(dataset: &SyntheticDataset<T>, k: usize, seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidArgument("shots must be at least 1".into()));
    }
    let mut rng = stream(seed, Stream::Episode);
    let mut order: Vec<usize> = (0..dataset.classes.len()).collect();
    order.shuffle(&mut rng);
    let n_base = order.len().div_ceil(2);
    let mut base_classes = order[..n_base].to_vec();
    let mut novel_classes = order[n_base..].to_vec();
    base_classes.sort_unstable();
    novel_classes.sort_unstable();

    let mut train = Vec::new();
    let mut base_eval = Vec::new();
    for &c in &base_classes {
        let available = dataset.classes[c].images.len();
        if available < k {
            return Err(Error::InsufficientSamples {
                class: c,
                available,
                needed: k,
            });
        }
        let mut idx: Vec<usize> = (0..available).collect();
        idx.shuffle(&mut rng);
        let (shots, rest) = idx.split_at(k);
        train.extend(shots.iter().map(|&i| Item { class: c, index: i }));
        let mut rest = rest.to_vec();
        rest.sort_unstable();
        base_eval.extend(rest.into_iter().map(|i| Item { class: c, index: i }));
    }
    let novel_eval = novel_classes
        .iter()
        .flat_map(|&c| (0..dataset.classes[c].images.len()).map(move |i| Item { class: c, index: i }))
        .collect();
    Ok(Episode {
        shots: k,
        base_classes,
        novel_classes,
        train,
        base_eval,
        novel_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(classes: usize, pool: usize, noise: f64) -> DataConfig {
        DataConfig {
            classes,
            pool_per_class: pool,
            noise,
            latent_dim: 8,
            name_len: 2,
        }
    }

    #[test]
    fn zero_noise_makes_class_samples_identical() {
        let d = gen_synthetic::<f64>(&cfg(3, 4, 0.0), &EncoderConfig::toy(), 1).unwrap();
        for class in &d.classes {
            assert!(class.images.windows(2).all(|w| w[0] == w[1]));
        }
        assert_ne!(d.classes[0].images[0], d.classes[1].images[0]);
    }

    #[test]
    fn same_seed_same_dataset() {
        let enc = EncoderConfig::toy();
        let a = gen_synthetic::<f32>(&cfg(4, 3, 0.1), &enc, 5).unwrap();
        let b = gen_synthetic::<f32>(&cfg(4, 3, 0.1), &enc, 5).unwrap();
        let c = gen_synthetic::<f32>(&cfg(4, 3, 0.1), &enc, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn prototypes_are_orthonormal_and_names_distinct() {
        let d = gen_synthetic::<f64>(&cfg(6, 1, 0.0), &EncoderConfig::toy(), 2).unwrap();
        for (i, a) in d.classes.iter().enumerate() {
            for (j, b) in d.classes.iter().enumerate() {
                let dot: f64 = a
                    .prototype
                    .data()
                    .iter()
                    .zip(b.prototype.data())
                    .map(|(x, y)| x * y)
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
                if i != j {
                    assert_ne!(a.tokens, b.tokens);
                }
            }
        }
    }

    #[test]
    fn too_many_classes_is_an_error() {
        let err = gen_synthetic::<f64>(&cfg(9, 1, 0.0), &EncoderConfig::toy(), 0).unwrap_err();
        assert!(err.to_string().contains("classes"));
    }

    #[test]
    fn episode_contract() {
        let d = gen_synthetic::<f64>(&cfg(6, 5, 0.1), &EncoderConfig::toy(), 3).unwrap();
        let e = sample_few_shot(&d, 1, 7).unwrap();
        assert_eq!(e.train.len(), e.base_classes.len());
        assert_eq!(e.base_classes.len(), 3);
        assert!(e.base_classes.iter().all(|c| !e.novel_classes.contains(c)));
        assert_eq!(e, sample_few_shot(&d, 1, 7).unwrap());
        assert_eq!(e.base_eval.len(), 3 * 4);
        assert_eq!(e.novel_eval.len(), 3 * 5);
        assert!(e.train.iter().all(|t| !e.base_eval.contains(t)));
        assert!(matches!(
            sample_few_shot(&d, 6, 7),
            Err(Error::InsufficientSamples { needed: 6, .. })
        ));
    }
}
