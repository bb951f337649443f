//! Image–text matching loss and the feature-anchoring regularizers, both as
//! tape operations (for training) and as plain functions.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_temperature<T: Scalar>(temperature: T) -> Result<()> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

/// `[B, C]` cosine similarities between image and class features divided
/// by `temperature`.
pub fn logits_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    image_feats: Var,
    class_feats: Var,
    temperature: T,
) -> Result<Var> {
    check_temperature(temperature)?;
    let img = tape.normalize_rows(image_feats)?;
    let txt = tape.normalize_rows(class_feats)?;
    let txt_t = tape.transpose(txt)?;
    let sims = tape.matmul(img, txt_t)?;
    tape.scale(sims, T::one() / temperature)
}

/// Mean over the batch of `−log p(y_j | I_j)`.
pub fn ce_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    image_feats: Var,
    class_feats: Var,
    labels: &[usize],
    temperature: T,
) -> Result<Var> {
    let logits = logits_on_tape(tape, image_feats, class_feats, temperature)?;
    ce_from_logits(tape, logits, labels)
}

pub(crate) fn ce_from_logits<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick_per_row(logp, labels)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -T::one())
}

/// `1 − mean_j cos(adapted_j, frozen_j)` over matching rows.
pub fn reg_on_tape<T: Scalar>(tape: &mut Tape<T>, adapted: Var, frozen: Var) -> Result<Var> {
    let sims = tape.cosine_rows(adapted, frozen)?;
    let mean = tape.mean(sims)?;
    tape.affine(mean, -T::one(), T::one())
}

/// `ce + λ·(reg_v + reg_t)`.
pub fn total_on_tape<T: Scalar>(tape: &mut Tape<T>, ce: Var, reg_v: Var, reg_t: Var, lambda: T) -> Result<Var> {
    check_lambda(lambda)?;
    let reg = tape.add(reg_v, reg_t)?;
    let reg = tape.scale(reg, lambda)?;
    tape.add(ce, reg)
}

fn check_lambda<T: Scalar>(lambda: T) -> Result<()> {
    if !(lambda >= T::zero()) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    Ok(())
}

/// Cross-entropy of the cosine-similarity classifier, averaged over the batch.
pub fn ce_loss<T: Scalar>(
    image_feats: &Tensor<T>,
    class_feats: &Tensor<T>,
    labels: &[usize],
    temperature: T,
) -> Result<T> {
    let mut tape = Tape::new();
    let i = tape.constant(image_feats.clone());
    let c = tape.constant(class_feats.clone());
    let loss = ce_on_tape(&mut tape, i, c, labels, temperature)?;
    tape.value(loss).scalar_value()
}

/// `(L_reg_v, L_reg_t)`, each `1 − mean cosine` between adapted and frozen
/// features, so each lies in `[0, 2]`.
pub fn reg_losses<T: Scalar>(
    adapted_img: &Tensor<T>,
    frozen_img: &Tensor<T>,
    adapted_txt: &Tensor<T>,
    frozen_txt: &Tensor<T>,
) -> Result<(T, T)> {
    let mut tape = Tape::new();
    let mut reg = |a: &Tensor<T>, f: &Tensor<T>| -> Result<T> {
        let a = tape.constant(a.clone());
        let f = tape.constant(f.clone());
        let r = reg_on_tape(&mut tape, a, f)?;
        tape.value(r).scalar_value()
    };
    Ok((reg(adapted_img, frozen_img)?, reg(adapted_txt, frozen_txt)?))
}

/// `ce + λ·(reg_v + reg_t)`; `λ` must be non-negative.
pub fn total_loss<T: Scalar>(ce: T, reg_v: T, reg_t: T, lambda: T) -> Result<T> {
    check_lambda(lambda)?;
    Ok(ce + lambda * (reg_v + reg_t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn uniform_similarities_give_ln2() {
        let img = m(&[1, 2], &[1.0, 0.0]);
        let cls = m(&[2, 2], &[1.0, 0.0, 1.0, 0.0]);
        let l = ce_loss(&img, &cls, &[0], 0.07).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_softplus() {
        // sim = [1, 0] with temperature 0.1 gives logits [10, 0].
        let img = m(&[1, 2], &[1.0, 0.0]);
        let cls = m(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let l = ce_loss(&img, &cls, &[0], 0.1).unwrap();
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn duplicated_batch_has_same_mean() {
        let cls = m(&[2, 2], &[1.0, 0.3, -0.2, 1.0]);
        let one = ce_loss(&m(&[1, 2], &[0.4, 0.9]), &cls, &[1], 0.5).unwrap();
        let two = ce_loss(&m(&[2, 2], &[0.4, 0.9, 0.4, 0.9]), &cls, &[1, 1], 0.5).unwrap();
        assert!((one - two).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range() {
        let cls = m(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let err = ce_loss(&m(&[1, 2], &[1.0, 0.0]), &cls, &[2], 1.0).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, classes: 2 }));
    }

    #[test]
    fn regularizer_extremes() {
        let f = m(&[2, 2], &[1.0, 2.0, -3.0, 0.5]);
        let neg = f.map(|v| -v);
        let perp = m(&[2, 2], &[-2.0, 1.0, 0.5, 3.0]);
        assert_eq!(reg_losses(&f, &f, &f, &f).unwrap(), (0.0, 0.0));
        let (a, b) = reg_losses(&neg, &f, &neg, &f).unwrap();
        assert!((a - 2.0).abs() < 1e-15 && (b - 2.0).abs() < 1e-15);
        let (a, b) = reg_losses(&perp, &f, &perp, &f).unwrap();
        assert!((a - 1.0).abs() < 1e-15 && (b - 1.0).abs() < 1e-15);
        assert!(reg_losses(&Tensor::zeros(&[2, 2]), &f, &f, &f).is_err());
    }

    #[test]
    fn total_loss_contract() {
        assert_eq!(total_loss(0.7, 0.3, 0.2, 0.0).unwrap(), 0.7);
        assert!((total_loss(1.0f64, 0.1, 0.2, 2.0).unwrap() - 1.6).abs() < 1e-15);
        assert!(total_loss(1.0, 0.1, 0.2, -1.0).is_err());
    }
}
