use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, Scalar, Tensor};

/// Class probabilities: softmax over `cos(image, class_c) / temperature`.
pub fn classify<T: Scalar>(image_feat: &Tensor<T>, class_feats: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (classes, width) = class_feats.dims2()?;
    image_feat.expect_shape("classify", &[width])?;
    let logits = (0..classes)
        .map(|c| {
            let class = Tensor::from_vec(class_feats.row(c).to_vec());
            Ok(cosine_similarity(image_feat, &class)? / temperature)
        })
        .collect::<Result<Vec<T>>>()?;
    Tensor::from_vec(logits).softmax()
}

/// Index of the largest entry of each row; ties resolve to the first.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    let (rows, _) = scores.dims2()?;
    Ok((0..rows)
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn identical_classes_are_uniform() {
        let p = classify(
            &m(&[2], &[0.3, -1.0]),
            &m(&[3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]),
            0.07,
        )
        .unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_class_analytic() {
        let p = classify(&m(&[2], &[1.0, 0.0]), &m(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn small_temperature_is_one_hot() {
        let p = classify(&m(&[2], &[1.0, 0.2]), &m(&[2, 2], &[0.0, 1.0, 1.0, 0.0]), 1e-4).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0]);
    }

    #[test]
    fn contract_errors() {
        let cls = m(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert!(classify(&m(&[2], &[0.0, 0.0]), &cls, 1.0).is_err());
        assert!(classify(&m(&[2], &[1.0, 0.0]), &cls, 0.0).is_err());
        assert!(classify(&m(&[3], &[1.0, 0.0, 0.0]), &cls, 1.0).is_err());
    }

    #[test]
    fn argmax_first_on_ties() {
        assert_eq!(
            argmax_rows(&m(&[2, 3], &[1.0, 3.0, 3.0, -1.0, -2.0, -3.0])).unwrap(),
            vec![1, 0]
        );
    }
}
