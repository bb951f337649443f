//! Dataset files: the synthetic dataset in the checkpoint container.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Container, StoredTensor};
use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::tensor::{DType, Scalar};
use crate::training::{ClassData, DataConfig, ImageSample, SyntheticDataset};

pub const DATASET_FILE: &str = "dataset.mail";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    kind: String,
    seed: u64,
    precision: DType,
    n_v: usize,
    d_v: usize,
    data: DataConfig,
    tokens: Vec<Vec<usize>>,
}

pub fn dataset_to_container<T: Scalar>(ds: &SyntheticDataset<T>) -> Result<Container> {
    let mut tensors = Vec::new();
    for (c, class) in ds.classes.iter().enumerate() {
        tensors.push((format!("class{c}.prototype"), StoredTensor::of(&class.prototype)));
        for (i, img) in class.images.iter().enumerate() {
            tensors.push((format!("class{c}.image{i}.patches"), StoredTensor::of(&img.patches)));
            tensors.push((format!("class{c}.image{i}.latent"), StoredTensor::of(&img.latent)));
        }
    }
    let first = &ds.classes[0].images[0].patches;
    let meta = DatasetMeta {
        kind: "dataset".into(),
        seed: ds.seed,
        precision: T::DTYPE,
        n_v: first.shape()[0],
        d_v: first.shape()[1],
        data: ds.config.clone(),
        tokens: ds.classes.iter().map(|c| c.tokens.clone()).collect(),
    };
    Ok(Container {
        tensors,
        document: serde_json::to_string(&meta)?,
    })
}

pub fn dataset_from_container<T: Scalar>(c: &Container) -> Result<SyntheticDataset<T>> {
    let meta: DatasetMeta = serde_json::from_str(&c.document)?;
    if meta.kind != "dataset" {
        return Err(Error::Format(format!(
            "expected a dataset file, found kind {:?}",
            meta.kind
        )));
    }
    let map: BTreeMap<&str, &StoredTensor> = c.map();
    let get = |name: String| -> Result<_> {
        map.get(name.as_str())
            .ok_or_else(|| Error::MissingTensor(name.clone()))?
            .typed::<T>(&name)
    };
    let classes = meta
        .tokens
        .iter()
        .enumerate()
        .map(|(c, tokens)| {
            let images = (0..meta.data.pool_per_class)
                .map(|i| {
                    Ok(ImageSample {
                        patches: get(format!("class{c}.image{i}.patches"))?,
                        latent: get(format!("class{c}.image{i}.latent"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ClassData {
                tokens: tokens.clone(),
                prototype: get(format!("class{c}.prototype"))?,
                images,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        config: meta.data,
        seed: meta.seed,
        classes,
    })
}

/// Loads `dir/dataset.mail` and checks it fits `encoder`.
pub fn load_dataset<T: Scalar>(dir: &Path, encoder: &EncoderConfig) -> Result<SyntheticDataset<T>> {
    let ds = dataset_from_container::<T>(&Container::load(&dir.join(DATASET_FILE))?)?;
    ds.config.validate(encoder)?;
    let patches = &ds.classes[0].images[0].patches;
    if patches.shape() != [encoder.n_v, encoder.d_v] {
        return Err(Error::Format(format!(
            "dataset images are {:?}, the encoder expects [{}, {}]",
            patches.shape(),
            encoder.n_v,
            encoder.d_v
        )));
    }
    Ok(ds)
}
