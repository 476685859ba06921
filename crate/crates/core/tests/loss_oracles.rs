//! Loss functions against scalar-loop reference implementations.

use bloodnet::loss::{classification_loss_value, combined_loss_value, segmentation_loss_value};
use bloodnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ce(y: f64, p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0);
    let q = (1.0 - p).max(1e-12);
    -(y * p.ln() + (1.0 - y) * q.ln())
}

fn cls_oracle(labels: &[f64], probs: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..labels.len() {
        total += ce(labels[i], probs[i]);
    }
    total / labels.len() as f64
}

fn seg_oracle(m: usize, h: usize, w: usize, masks: &[f64], probs: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..h {
            for k in 0..w {
                let at = (i * h + j) * w + k;
                total += ce(masks[at], probs[at]);
            }
        }
    }
    total / (m * h * w) as f64
}

fn prob(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        2 => rng.random_range(0.0..1e-6),
        _ => rng.random_range(0.0..1.0),
    }
}

#[test]
fn classification_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let m = rng.random_range(1..40);
        let labels: Vec<f64> = (0..m).map(|_| rng.random_range(0..2) as f64).collect();
        let probs: Vec<f64> = (0..m).map(|_| prob(&mut rng)).collect();
        let got = classification_loss_value(&labels, &probs).unwrap();
        let want = cls_oracle(&labels, &probs);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn segmentation_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let (m, h, w) = (rng.random_range(1..4), rng.random_range(1..9), rng.random_range(1..9));
        let n = m * h * w;
        let masks: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let probs: Vec<f64> = (0..n).map(|_| prob(&mut rng)).collect();
        let got = segmentation_loss_value(
            &Tensor::new(vec![m, h, w], masks.clone()).unwrap(),
            &Tensor::new(vec![m, h, w], probs.clone()).unwrap(),
        )
        .unwrap();
        let want = seg_oracle(m, h, w, &masks, &probs);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn combined_matches_convex_combination() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let (a, b, lambda) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.0..=1.0));
        let got = combined_loss_value(a, b, lambda).unwrap();
        assert!((got - ((1.0 - lambda) * a + lambda * b)).abs() <= 1e-12);
    }
    assert_eq!(combined_loss_value(0.2, 0.6, 0.0).unwrap(), 0.2);
    assert_eq!(combined_loss_value(0.2, 0.6, 1.0).unwrap(), 0.6);
    assert!((combined_loss_value(0.2, 0.6, 0.5).unwrap() - 0.4).abs() < 1e-15);
    assert!(combined_loss_value(0.2, 0.6, 1.5).is_err());
}

#[test]
fn analytic_anchors() {
    let ln2 = std::f64::consts::LN_2;
    assert!((classification_loss_value(&[1.0], &[0.5]).unwrap() - ln2).abs() < 1e-15);
    let two = classification_loss_value(&[1.0, 0.0], &[0.9, 0.2]).unwrap();
    assert!((two - 0.164252033486018).abs() < 1e-12, "{two}");
    // Perfect predictions leave only the clamp residue -ln(1 - 1e-12).
    assert!(classification_loss_value(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1.1e-12);
    let masks = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(segmentation_loss_value(&masks, &masks).unwrap() < 1.1e-12);
    let half = Tensor::full(vec![1, 2, 2], 0.5);
    assert!((segmentation_loss_value(&masks, &half).unwrap() - ln2).abs() < 1e-15);
}
