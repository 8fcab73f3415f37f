//! Linear classification head over mean-pooled encoder features.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::math::Scalar;
use crate::model::encoder::TokenSequence;
use crate::model::params::ClassifierParams;

/// Mean over all token rows; the pooled feature fed to the classifier.
pub fn mean_pool<F: Scalar>(features: &TokenSequence<F>) -> Array1<F> {
    let inv = F::of(1.0 / features.len() as f64);
    features.tokens.t().dot(&Array1::from_elem(features.len(), inv))
}

fn check_width<F: Scalar>(features: &TokenSequence<F>, params: &ClassifierParams<F>) -> Result<()> {
    if features.tokens.ncols() != params.weight.ncols() {
        return Err(Error::Config(format!(
            "pooled feature width {} does not match classifier width {}",
            features.tokens.ncols(),
            params.weight.ncols()
        )));
    }
    Ok(())
}

/// Logits over all seen classes, one per classifier row.
pub fn classify<F: Scalar>(
    features: &TokenSequence<F>,
    params: &ClassifierParams<F>,
) -> Result<Array1<F>> {
    check_width(features, params)?;
    let pooled = mean_pool(features);
    Ok(params.weight.dot(&pooled) + &params.bias)
}

pub(crate) fn classify_cached<F: Scalar>(
    features: &TokenSequence<F>,
    params: &ClassifierParams<F>,
) -> Result<(Array1<F>, Array1<F>)> {
    check_width(features, params)?;
    let pooled = mean_pool(features);
    let logits = params.weight.dot(&pooled) + &params.bias;
    Ok((logits, pooled))
}

/// Gradients w.r.t. the classifier and the token features.
pub(crate) fn classify_backward<F: Scalar>(
    params: &ClassifierParams<F>,
    pooled: &Array1<F>,
    seq_len: usize,
    d_logits: &Array1<F>,
) -> (ClassifierParams<F>, Array2<F>) {
    let classes = params.num_classes();
    let dim = params.weight.ncols();
    let mut d_weight = Array2::zeros((classes, dim));
    for c in 0..classes {
        for d in 0..dim {
            d_weight[[c, d]] = d_logits[c] * pooled[d];
        }
    }
    let d_pooled = params.weight.t().dot(d_logits);
    let inv = F::of(1.0 / seq_len as f64);
    let mut d_tokens = Array2::zeros((seq_len, dim));
    for r in 0..seq_len {
        for d in 0..dim {
            d_tokens[[r, d]] = d_pooled[d] * inv;
        }
    }
    (
        ClassifierParams {
            weight: d_weight,
            bias: d_logits.clone(),
        },
        d_tokens,
    )
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax_class<F: Scalar>(logits: &Array1<F>) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform_f64};

    fn feature_seq(rows: usize, dim: usize, seed: u64) -> TokenSequence<f64> {
        let mut rng = stream(seed, &[]);
        TokenSequence {
            tokens: Array2::from_shape_fn((rows, dim), |_| uniform_f64(&mut rng, -1.0, 1.0)),
            positions: (0..rows).collect(),
        }
    }

    #[test]
    fn zero_classifier_gives_zero_logits_argmax_zero() {
        let features = feature_seq(4, 6, 1);
        let clf = ClassifierParams::<f64>::zeros(3, 6);
        let logits = classify(&features, &clf).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        assert_eq!(argmax_class(&logits), 0);
    }

    #[test]
    fn one_hot_rows_pick_feature_coordinates() {
        let features = feature_seq(5, 4, 2);
        let pooled = mean_pool(&features);
        let mut clf = ClassifierParams::<f64>::zeros(4, 4);
        for c in 0..4 {
            clf.weight[[c, c]] = 1.0;
        }
        let logits = classify(&features, &clf).unwrap();
        for c in 0..4 {
            assert!((logits[c] - pooled[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn random_classifier_matches_dot_product_oracle() {
        let features = feature_seq(7, 5, 3);
        let mut rng = stream(4, &[]);
        let clf = ClassifierParams::<f64> {
            weight: Array2::from_shape_fn((6, 5), |_| uniform_f64(&mut rng, -2.0, 2.0)),
            bias: Array1::from_shape_fn(6, |_| uniform_f64(&mut rng, -1.0, 1.0)),
        };
        let logits = classify(&features, &clf).unwrap();
        // naive oracle: explicit loops
        let mut pooled = vec![0.0f64; 5];
        for r in 0..7 {
            for d in 0..5 {
                pooled[d] += features.tokens[[r, d]] / 7.0;
            }
        }
        for c in 0..6 {
            let mut expect = clf.bias[c];
            for d in 0..5 {
                expect += clf.weight[[c, d]] * pooled[d];
            }
            let rel = (logits[c] - expect).abs() / expect.abs().max(1e-9);
            assert!(rel < 1e-6);
        }
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let features = feature_seq(3, 4, 5);
        let clf = ClassifierParams::<f64>::zeros(2, 7);
        assert!(matches!(classify(&features, &clf), Err(Error::Config(_))));
    }

    #[test]
    fn argmax_ties_break_low() {
        let logits = Array1::from_vec(vec![1.0f64, 3.0, 3.0, 0.0]);
        assert_eq!(argmax_class(&logits), 1);
    }
}
