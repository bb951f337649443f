//! Folding trained agents into the frozen layers they follow.
//!
//! After a LayerNorm, `(x̂ ⊙ γ + β) ⊙ a + b = x̂ ⊙ (γ ⊙ a) + (β ⊙ a + b)`.
//! After a linear layer, `(x·Wᵀ + c) ⊙ a + b = x·(Λ(a)·W)ᵀ + (c ⊙ a + b)`,
//! i.e. row `i` of `W` is scaled by `a[i]`.

use super::agent::AgentLayer;
use super::site::AgentSites;
use crate::error::{Error, Result};
use crate::model::{DualEncoder, LayerNormWeights, LinearWeights, Modality, Position};
use crate::tensor::{Scalar, Tensor};

fn check_width<T: Scalar>(op: &'static str, want: usize, v: &Tensor<T>) -> Result<()> {
    if v.shape() != [want] {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![want],
            got: v.shape().to_vec(),
        });
    }
    Ok(())
}

/// `γ' = γ ⊙ a`, `β' = β ⊙ a + b`, with `a` the effective scale when given.
pub fn fuse_layernorm<T: Scalar>(
    ln: &LayerNormWeights<T>,
    agent: &AgentLayer<T>,
    effective_scale: Option<&Tensor<T>>,
) -> Result<LayerNormWeights<T>> {
    let a = effective_scale.unwrap_or(&agent.scale);
    let d = ln.gamma.len();
    check_width("fuse_layernorm", d, a)?;
    check_width("fuse_layernorm", d, &agent.shift)?;
    check_width("fuse_layernorm", d, &ln.beta)?;
    let gamma = ln.gamma.zip_map(a, "fuse_layernorm", |g, s| g * s)?;
    let beta = Tensor::from_parts(
        vec![d],
        ln.beta
            .data()
            .iter()
            .zip(a.data())
            .zip(agent.shift.data())
            .map(|((&b, &s), &t)| b * s + t)
            .collect(),
    );
    Ok(LayerNormWeights { gamma, beta })
}

/// `W' = Λ(a)·W` (row `i` scaled by `a[i]`), `bias' = bias ⊙ a + b`.
pub fn fuse_linear<T: Scalar>(
    lin: &LinearWeights<T>,
    agent: &AgentLayer<T>,
    effective_scale: Option<&Tensor<T>>,
) -> Result<LinearWeights<T>> {
    let a = effective_scale.unwrap_or(&agent.scale);
    let (d_out, d_in) = lin.weight.dims2()?;
    check_width("fuse_linear", d_out, a)?;
    check_width("fuse_linear", d_out, &agent.shift)?;
    check_width("fuse_linear", d_out, &lin.bias)?;
    let weight = Tensor::from_parts(
        vec![d_out, d_in],
        lin.weight
            .data()
            .chunks(d_in)
            .zip(a.data())
            .flat_map(|(row, &s)| row.iter().map(move |&w| w * s))
            .collect(),
    );
    let bias = Tensor::from_parts(
        vec![d_out],
        lin.bias
            .data()
            .iter()
            .zip(a.data())
            .zip(agent.shift.data())
            .map(|((&c, &s), &t)| c * s + t)
            .collect(),
    );
    Ok(LinearWeights { weight, bias })
}

/// Folds every site's effective agents into a copy of the frozen model.
/// The result has the backbone's exact structure and parameter count.
pub fn fuse_model<T: Scalar>(model: &DualEncoder<T>, sites: &AgentSites<T>) -> Result<DualEncoder<T>> {
    let mut fused = model.clone();
    for (key, site) in sites.iter() {
        for modality in Modality::BOTH {
            let (scale, shift) = site.effective(modality)?;
            let agent = AgentLayer { scale, shift };
            let enc = fused.encoder_mut(modality);
            let layer = format!("{modality}.{}", key.layer_name());
            let block = match key.block {
                Some(b) => Some(enc.blocks.get_mut(b).ok_or_else(|| {
                    Error::Fusion(format!(
                        "no foldable layer {layer}: model has {} blocks",
                        model.config.layers
                    ))
                })?),
                None => None,
            };
            let wrap = |e: Error| Error::Fusion(format!("{layer}: {e}"));
            match (block, key.position) {
                (Some(b), Position::Ln1) => b.ln1 = fuse_layernorm(&b.ln1, &agent, None).map_err(wrap)?,
                (Some(b), Position::Ln2) => b.ln2 = fuse_layernorm(&b.ln2, &agent, None).map_err(wrap)?,
                (Some(b), Position::AttnOut) => b.attn_out = fuse_linear(&b.attn_out, &agent, None).map_err(wrap)?,
                (Some(b), Position::MlpOut) => b.mlp_out = fuse_linear(&b.mlp_out, &agent, None).map_err(wrap)?,
                (None, Position::FinalLn) => {
                    enc.final_ln = fuse_layernorm(&enc.final_ln, &agent, None).map_err(wrap)?
                }
                (None, Position::Proj) => enc.proj = fuse_linear(&enc.proj, &agent, None).map_err(wrap)?,
                _ => return Err(Error::Fusion(format!("no foldable layer at {key}"))),
            }
        }
    }
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng::{stream, Stream};

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(x.to_vec())
    }

    #[test]
    fn layernorm_fold_arithmetic() {
        let ln = LayerNormWeights {
            gamma: v(&[1.0, 1.0]),
            beta: v(&[0.5, 0.0]),
        };
        let agent = AgentLayer {
            scale: v(&[2.0, 3.0]),
            shift: v(&[1.0, 1.0]),
        };
        let f = fuse_layernorm(&ln, &agent, None).unwrap();
        assert_eq!(f.gamma.data(), &[2.0, 3.0]);
        assert_eq!(f.beta.data(), &[2.0, 1.0]);
        assert_eq!(fuse_layernorm(&ln, &AgentLayer::identity(2), None).unwrap(), ln);
    }

    #[test]
    fn linear_fold_arithmetic() {
        let lin = LinearWeights {
            weight: Tensor::from_f64_slice(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(),
            bias: v(&[1.0, 1.0]),
        };
        let agent = AgentLayer {
            scale: v(&[2.0, 0.5]),
            shift: v(&[0.0, 1.0]),
        };
        let f = fuse_linear(&lin, &agent, None).unwrap();
        assert_eq!(f.weight.data(), &[2.0, 4.0, 1.5, 2.0]);
        assert_eq!(f.bias.data(), &[2.0, 1.5]);
        assert_eq!(fuse_linear(&lin, &AgentLayer::identity(2), None).unwrap(), lin);
        assert!(fuse_linear(&lin, &AgentLayer::identity(3), None).is_err());
    }

    #[test]
    fn random_folds_match_unfused_path_f32() {
        let mut rng = stream(11, Stream::Checks);
        let d = 8;
        let x = Tensor::<f32>::randn(&[5, d], 1.0, &mut rng);
        let ln = LayerNormWeights {
            gamma: Tensor::randn(&[d], 1.0, &mut rng),
            beta: Tensor::randn(&[d], 1.0, &mut rng),
        };
        let lin = LinearWeights {
            weight: Tensor::randn(&[d, d], 0.5, &mut rng),
            bias: Tensor::randn(&[d], 1.0, &mut rng),
        };
        let agent = AgentLayer {
            scale: Tensor::randn(&[d], 1.0, &mut rng),
            shift: Tensor::randn(&[d], 1.0, &mut rng),
        };
        let run_ln = |w: &LayerNormWeights<f32>| {
            let mut t = Tape::new();
            let (xv, g, b) = (
                t.constant(x.clone()),
                t.constant(w.gamma.clone()),
                t.constant(w.beta.clone()),
            );
            let y = t.layernorm(xv, g, b, 1e-5).unwrap();
            t.value(y).clone()
        };
        let unfused = agent.apply(&run_ln(&ln), None).unwrap();
        let fused = run_ln(&fuse_layernorm(&ln, &agent, None).unwrap());
        let err = unfused.zip_map(&fused, "t", |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(err <= 1e-6 * unfused.max_abs().max(1.0), "layernorm fold error {err}");

        let run_lin = |w: &LinearWeights<f32>| {
            let y = x.matmul(&w.weight.transpose().unwrap()).unwrap();
            AgentLayer {
                scale: Tensor::ones(&[d]),
                shift: w.bias.clone(),
            }
            .apply(&y, None)
            .unwrap()
        };
        let unfused = agent.apply(&run_lin(&lin), None).unwrap();
        let fused = run_lin(&fuse_linear(&lin, &agent, None).unwrap());
        let err = unfused.zip_map(&fused, "t", |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(err <= 1e-6 * unfused.max_abs().max(1.0), "linear fold error {err}");
    }

    #[test]
    fn row_scaling_is_local() {
        let mut rng = stream(12, Stream::Checks);
        let lin = LinearWeights::<f64> {
            weight: Tensor::randn(&[4, 3], 1.0, &mut rng),
            bias: Tensor::randn(&[4], 1.0, &mut rng),
        };
        let base = AgentLayer::<f64>::identity(4);
        let mut bumped = base.clone();
        bumped.scale = v(&[1.0, 1.0, 7.0, 1.0]);
        let a = fuse_linear(&lin, &base, None).unwrap();
        let b = fuse_linear(&lin, &bumped, None).unwrap();
        for i in 0..4 {
            assert_eq!(a.weight.row(i) == b.weight.row(i), i != 2);
        }
    }
}
