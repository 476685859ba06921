//! Binary cross-entropy losses for the classification and segmentation
//! heads, and their convex blend.
//!
//! Cross-entropy is the negated log-likelihood
//! `-(y ln p + (1 - y) ln(1 - p))`, so all losses are minimised. Log
//! arguments are floored at [`PROB_FLOOR`] so saturated predictions still
//! give finite losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the segmentation term; `1 - lambda` weighs classification.
    pub lambda: f64,
    /// Pixel targets become `y (1 - s) + s / 2`. Zero disables smoothing.
    pub pixel_label_smoothing: f64,
    /// Multiplier on positive-sample classification terms. `None` disables
    /// class weighting.
    pub positive_weight: Option<f64>,
    /// Multiplier on foreground-pixel segmentation terms. `None` disables
    /// pixel weighting.
    pub mask_positive_weight: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.5,
            pixel_label_smoothing: 0.0,
            positive_weight: None,
            mask_positive_weight: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(0.0..=1.0).contains(&self.pixel_label_smoothing) {
            return Err(Error::config(format!(
                "pixel_label_smoothing must lie in [0, 1], got {}",
                self.pixel_label_smoothing
            )));
        }
        for (name, w) in [
            ("positive_weight", self.positive_weight),
            ("mask_positive_weight", self.mask_positive_weight),
        ] {
            if let Some(w) = w {
                if !(w > 0.0 && w.is_finite()) {
                    return Err(Error::config(format!("{name} must be positive, got {w}")));
                }
            }
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::invalid(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

/// Mean binary cross-entropy over every element of `probs`, optionally
/// weighting each element.
pub fn binary_cross_entropy<T: Element>(
    g: &mut Graph<T>,
    targets: &Tensor<T>,
    probs: Var,
    weights: Option<&Tensor<T>>,
) -> Result<Var> {
    if targets.shape() != g.shape(probs) {
        return Err(Error::ShapeMismatch {
            op: "binary_cross_entropy",
            lhs: targets.shape().to_vec(),
            rhs: g.shape(probs).to_vec(),
        });
    }
    let floor = T::from_f64(PROB_FLOOR);
    let y = g.input(targets.clone());
    let not_y = g.input(targets.map(|v| T::one() - v));
    let log_p = g.log_clamped(probs, floor);
    let q = g.affine(probs, -T::one(), T::one());
    let log_q = g.log_clamped(q, floor);
    let pos = g.mul(y, log_p)?;
    let neg = g.mul(not_y, log_q)?;
    let mut ll = g.add(pos, neg)?;
    if let Some(w) = weights {
        if w.shape() != targets.shape() {
            return Err(Error::ShapeMismatch {
                op: "binary_cross_entropy weights",
                lhs: w.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let w = g.input(w.clone());
        ll = g.mul(w, ll)?;
    }
    let mean = g.mean(ll);
    Ok(g.scale(mean, -T::one()))
}

/// `1/m * sum_i CE(y_i, p_i)` over per-sample probabilities.
pub fn classification_loss<T: Element>(
    g: &mut Graph<T>,
    labels: &[T],
    probs: Var,
    config: &LossConfig,
) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.iter().product::<usize>() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "classification_loss",
            lhs: vec![labels.len()],
            rhs: shape,
        });
    }
    let targets = Tensor::new(shape, labels.to_vec())?;
    let weights = config.positive_weight.map(|w| positive_weights(&targets, w));
    binary_cross_entropy(g, &targets, probs, weights.as_ref())
}

fn positive_weights<T: Element>(targets: &Tensor<T>, w: f64) -> Tensor<T> {
    let w = T::from_f64(w);
    targets.map(|y| if y > T::from_f64(0.5) { w } else { T::one() })
}

/// `1/(m h w) * sum_ijk CE(y_ijk, p_ijk)`; `masks` and `probs` must have the
/// same shape.
pub fn segmentation_loss<T: Element>(
    g: &mut Graph<T>,
    masks: &Tensor<T>,
    probs: Var,
    config: &LossConfig,
) -> Result<Var> {
    let weights = config.mask_positive_weight.map(|w| positive_weights(masks, w));
    let s = config.pixel_label_smoothing;
    if s > 0.0 {
        let (keep, half) = (T::from_f64(1.0 - s), T::from_f64(s / 2.0));
        let smoothed = masks.map(|y| y * keep + half);
        binary_cross_entropy(g, &smoothed, probs, weights.as_ref())
    } else {
        binary_cross_entropy(g, masks, probs, weights.as_ref())
    }
}

/// `(1 - lambda) * l_cls + lambda * l_seg`.
pub fn combined_loss<T: Element>(
    g: &mut Graph<T>,
    l_cls: Var,
    l_seg: Var,
    lambda: f64,
) -> Result<Var> {
    check_lambda(lambda)?;
    let a = g.scale(l_cls, T::from_f64(1.0 - lambda));
    let b = g.scale(l_seg, T::from_f64(lambda));
    g.add(a, b)
}

/// Value-level [`classification_loss`] with the default configuration.
pub fn classification_loss_value(labels: &[f64], probs: &[f64]) -> Result<f64> {
    if labels.len() != probs.len() {
        return Err(Error::ShapeMismatch {
            op: "classification_loss",
            lhs: vec![labels.len()],
            rhs: vec![probs.len()],
        });
    }
    if probs.is_empty() {
        return Err(Error::invalid("classification loss of an empty batch"));
    }
    let mut g = Graph::new();
    let p = g.input(Tensor::new(vec![probs.len()], probs.to_vec())?);
    let l = classification_loss(&mut g, labels, p, &LossConfig::default())?;
    Ok(g.value(l).data()[0])
}

/// Value-level [`segmentation_loss`] with the default configuration.
pub fn segmentation_loss_value(masks: &Tensor<f64>, probs: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(probs.clone());
    let l = segmentation_loss(&mut g, masks, p, &LossConfig::default())?;
    Ok(g.value(l).data()[0])
}

pub fn combined_loss_value(l_cls: f64, l_seg: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok((1.0 - lambda) * l_cls + lambda * l_seg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn perfect_prediction_is_zero() {
        assert!(classification_loss_value(&[1.0], &[1.0]).unwrap().abs() < 1e-11);
        assert!(classification_loss_value(&[1.0, 0.0], &[1.0 - 1e-15, 0.0]).unwrap() < 1e-11);
        let mask = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(segmentation_loss_value(&mask, &mask).unwrap().abs() < 1e-11);
    }

    #[test]
    fn half_probability_is_ln2() {
        assert!((classification_loss_value(&[1.0], &[0.5]).unwrap() - LN2).abs() < 1e-15);
        let mask = Tensor::new(vec![2, 2, 2], vec![1., 0., 0., 1., 1., 1., 0., 0.]).unwrap();
        let half = Tensor::full(vec![2, 2, 2], 0.5);
        assert!((segmentation_loss_value(&mask, &half).unwrap() - LN2).abs() < 1e-15);
    }

    #[test]
    fn two_sample_batch() {
        let got = classification_loss_value(&[1.0, 0.0], &[0.9, 0.2]).unwrap();
        let oracle = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.164252).abs() < 1e-6);
    }

    #[test]
    fn saturated_wrong_prediction_is_finite() {
        let l = classification_loss_value(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(l.is_finite());
        assert!((l - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn combined_endpoints() {
        assert_eq!(combined_loss_value(0.2, 0.6, 0.0).unwrap(), 0.2);
        assert_eq!(combined_loss_value(0.2, 0.6, 1.0).unwrap(), 0.6);
        assert!((combined_loss_value(0.2, 0.6, 0.5).unwrap() - 0.4).abs() < 1e-15);
        assert!(combined_loss_value(0.2, 0.6, 1.5).is_err());
        assert!(combined_loss_value(0.2, 0.6, -0.1).is_err());
    }

    #[test]
    fn mismatched_shapes_rejected() {
        assert!(classification_loss_value(&[1.0, 0.0], &[0.5]).is_err());
        let a = Tensor::<f64>::zeros(vec![1, 2, 2]);
        let b = Tensor::<f64>::zeros(vec![1, 4]);
        assert!(segmentation_loss_value(&a, &b).is_err());
    }

    #[test]
    fn positive_weighting() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap());
        let config = LossConfig {
            positive_weight: Some(3.0),
            ..Default::default()
        };
        let l = classification_loss(&mut g, &[1.0, 0.0], p, &config).unwrap();
        assert!((g.value(l).data()[0] - 2.0 * LN2).abs() < 1e-15);
    }

    #[test]
    fn smoothing_moves_targets_inward() {
        let mut g = Graph::<f64>::new();
        let mask = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let p = g.input(Tensor::new(vec![1, 1, 2], vec![0.95, 0.05]).unwrap());
        let config = LossConfig {
            pixel_label_smoothing: 0.1,
            ..Default::default()
        };
        let l = segmentation_loss(&mut g, &mask, p, &config).unwrap();
        let expected = -(0.95 * 0.95f64.ln() + 0.05 * 0.05f64.ln());
        assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn combined_is_between_terms(a in 0.0f64..10.0, b in 0.0f64..10.0, lambda in 0.0f64..=1.0) {
            let c = combined_loss_value(a, b, lambda).unwrap();
            prop_assert!(c >= a.min(b) - 1e-12 && c <= a.max(b) + 1e-12);
        }

        #[test]
        fn losses_nonnegative_and_finite(
            pairs in proptest::collection::vec((0u8..=1, 0.0f64..=1.0), 1..20)
        ) {
            let labels: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let probs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let l = classification_loss_value(&labels, &probs).unwrap();
            prop_assert!(l >= 0.0 && l.is_finite());
        }

        #[test]
        fn degenerate_segmentation_equals_classification(
            pairs in proptest::collection::vec((0u8..=1, 0.001f64..0.999), 1..16)
        ) {
            let labels: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let probs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let m = labels.len();
            let cls = classification_loss_value(&labels, &probs).unwrap();
            let seg = segmentation_loss_value(
                &Tensor::new(vec![m, 1, 1], labels).unwrap(),
                &Tensor::new(vec![m, 1, 1], probs).unwrap(),
            ).unwrap();
            prop_assert_eq!(cls, seg);
        }
    }
}
