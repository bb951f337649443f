use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-channel scale and shift appended after a frozen layer:
/// `y ↦ y ⊙ scale + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentLayer<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

impl<T: Scalar> AgentLayer<T> {
    /// All-ones scale, all-zeros shift: the identity map.
    pub fn identity(width: usize) -> Self {
        Self {
            scale: Tensor::ones(&[width]),
            shift: Tensor::zeros(&[width]),
        }
    }

    pub fn width(&self) -> usize {
        self.scale.len()
    }

    /// `y ⊙ a + b` along the last axis of `y`, where `a` is `effective_scale`
    /// when given and the agent's own scale otherwise.
    pub fn apply(&self, y: &Tensor<T>, effective_scale: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let a = effective_scale.unwrap_or(&self.scale);
        let d = y.last_dim();
        if a.shape() != [d] || self.shift.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "agent_apply",
                expected: vec![d],
                got: a.shape().to_vec(),
            });
        }
        let data = y
            .data()
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(a.data())
                    .zip(self.shift.data())
                    .map(|((&v, &s), &b)| v * s + b)
            })
            .collect();
        Tensor::new(y.shape().to_vec(), data)
    }
}

/// Low-rank map `up · down` carrying a source vector into a target
/// modality's channel space.
#[derive(Debug, Clone, PartialEq)]
pub struct Bridge<T> {
    /// `[rank, in_dim]`, Gaussian at init.
    pub down: Tensor<T>,
    /// `[out_dim, rank]`, zero at init.
    pub up: Tensor<T>,
}

impl<T: Scalar> Bridge<T> {
    /// `down ~ N(0, 1/in_dim)`, `up = 0`.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > in_dim.min(out_dim) {
            return Err(Error::Coupling(format!(
                "bridge rank {rank} must be in 1..={} for a {in_dim}->{out_dim} bridge",
                in_dim.min(out_dim)
            )));
        }
        Ok(Self {
            down: Tensor::randn(&[rank, in_dim], 1.0 / (in_dim as f64).sqrt(), rng),
            up: Tensor::zeros(&[out_dim, rank]),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.up.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.down.len() + self.up.len()
    }

    /// `up · (down · source)`.
    pub fn project(&self, source: &Tensor<T>) -> Result<Tensor<T>> {
        let col = source.reshape(&[source.len(), 1])?;
        let hidden = self.down.matmul(&col)?;
        let out = self.up.matmul(&hidden)?;
        out.reshape(&[self.out_dim()])
    }
}
