//! Network-level contracts: volume feature, gradient routing, checkpoints
//! and study aggregation.

use bloodnet::autodiff::Graph;
use bloodnet::data::{generate_studies, make_slice_windows, BrainWindow, PhantomConfig, WindowBatch};
use bloodnet::eval::{study_probability, window_probabilities};
use bloodnet::loss::{self, LossConfig};
use bloodnet::model::{blood_volume_feature, checkpoint, volume_feature_graph, ArchConfig, Model, Variant};
use bloodnet::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch(variant: Variant) -> ArchConfig {
    ArchConfig {
        variant,
        input_slices: 5,
        height: 16,
        width: 16,
        encoder_channels: vec![3, 4],
        bottleneck_channels: 6,
        decoder_channels: vec![4, 3],
        head_hidden: 5,
        skip_connections: false,
        volume_scale_mm3: Some(40.0),
        seg_prior: 0.05,
    }
}

fn phantom() -> PhantomConfig {
    PhantomConfig {
        height: 16,
        width: 16,
        slices_per_study: 7,
        ..PhantomConfig::default()
    }
}

#[test]
fn hard_masks_give_voxel_count_times_volume() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..100 {
        let n = rng.random_range(1..2000);
        let mask: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let count = mask.iter().filter(|&&m| m == 1.0).count();
        let voxel = [0.25, 0.5, 1.25, 2.0, 0.125][rng.random_range(0..5)];
        assert_eq!(blood_volume_feature(&mask, voxel).unwrap(), count as f64 * voxel);

        let t = Tensor::new(vec![1, n], mask.clone()).unwrap();
        let mut g = Graph::new();
        let v = g.input(t);
        let out = volume_feature_graph(&mut g, v, &[voxel]).unwrap();
        assert_eq!(g.value(out).data()[0], count as f64 * voxel);
    }
}

proptest! {
    #[test]
    fn volume_feature_is_linear(
        probs in proptest::collection::vec(0.0f64..=1.0, 1..300),
        a in 0.0f64..=1.0,
        voxel in 0.01f64..10.0,
    ) {
        let base = blood_volume_feature(&probs, voxel).unwrap();
        let scaled: Vec<f64> = probs.iter().map(|p| a * p).collect();
        let got = blood_volume_feature(&scaled, voxel).unwrap();
        prop_assert!((got - a * base).abs() <= 1e-12 * base.max(1.0));
    }
}

#[test]
fn head_width_and_parameter_sets() {
    let names = |v| -> Vec<String> {
        Model::<f64>::new(&arch(v), 0).unwrap().param_names().map(String::from).collect()
    };
    let single = names(Variant::SingleTask);
    let multi = names(Variant::MultiTask);
    let dependent = names(Variant::TaskDependent);
    assert!(single.iter().all(|n| multi.contains(n)));
    assert!(single.iter().all(|n| !n.starts_with("dec.")));
    assert!(multi.iter().any(|n| n.starts_with("dec.")));
    assert_eq!(multi, dependent);
    let a = arch(Variant::TaskDependent);
    assert_eq!(a.head_input_width(), a.bottleneck_channels + 1);
    assert_eq!(arch(Variant::MultiTask).head_input_width(), a.bottleneck_channels);
}

/// Largest absolute decoder gradient of the classification loss alone.
fn decoder_grad_of_cls(variant: Variant) -> f64 {
    let studies = generate_studies(&phantom(), 0..3).unwrap();
    let windows: Vec<_> = studies
        .iter()
        .flat_map(|s| make_slice_windows(s, 5, BrainWindow::default()).unwrap())
        .collect();
    let refs: Vec<_> = windows.iter().take(6).collect();
    let batch = WindowBatch::<f64>::from_windows(&refs).unwrap();
    let model = Model::<f64>::new(&arch(variant), 2).unwrap();
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &batch.images, &batch.voxel_volumes, |_| true).unwrap();
    let cfg = LossConfig {
        lambda: 0.0,
        ..LossConfig::default()
    };
    let l_cls = loss::classification_loss(&mut g, &batch.labels, out.cls, &cfg).unwrap();
    let l_seg = loss::segmentation_loss(&mut g, &batch.masks, out.seg.unwrap(), &cfg).unwrap();
    let total = loss::combined_loss(&mut g, l_cls, l_seg, 0.0).unwrap();
    let grads = g.backward(total).unwrap();
    grads
        .named()
        .iter()
        .filter(|(n, _)| n.starts_with("dec."))
        .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
}

#[test]
fn classification_reaches_the_decoder_only_through_the_volume_feature() {
    assert_eq!(decoder_grad_of_cls(Variant::MultiTask), 0.0);
    assert!(decoder_grad_of_cls(Variant::TaskDependent) > 0.0);
}

#[test]
fn checkpoint_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let studies = generate_studies(&phantom(), 0..2).unwrap();
    let windows = make_slice_windows(&studies[0], 5, BrainWindow::default()).unwrap();
    for variant in Variant::ALL {
        let model = Model::<f32>::new(&arch(variant), 8).unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        checkpoint::save(&model, &a).unwrap();
        let loaded = checkpoint::load::<f32>(&a).unwrap();
        checkpoint::save(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let refs: Vec<_> = windows.iter().collect();
        let batch = WindowBatch::from_windows(&refs).unwrap();
        assert_eq!(model.forward_batch(&batch).unwrap(), loaded.forward_batch(&batch).unwrap());
    }
}

#[test]
fn study_probability_is_the_window_maximum() {
    let studies = generate_studies(&phantom(), 0..60).unwrap();
    let model = Model::<f64>::new(&arch(Variant::TaskDependent), 6).unwrap();
    for study in &studies {
        let p = study_probability(&model, study, BrainWindow::default(), 4).unwrap();
        // independent enumeration: one forward pass per window
        let mut best = f64::NEG_INFINITY;
        for w in make_slice_windows(study, 5, BrainWindow::default()).unwrap() {
            let batch = WindowBatch::from_windows(&[&w]).unwrap();
            best = best.max(model.forward_batch(&batch).unwrap().cls_probs[0]);
        }
        assert_eq!(p, best, "{}", study.study_id);

        let probs = window_probabilities(&model, study, BrainWindow::default(), 3).unwrap();
        let mut reversed = probs.clone();
        reversed.reverse();
        assert_eq!(bloodnet::eval::max_probability(&reversed).unwrap(), p);
        let mut extended = probs;
        extended.push(0.0);
        assert!(bloodnet::eval::max_probability(&extended).unwrap() >= p);
    }
}
