//! Generated studies: mask geometry, labels, windows and storage.

use bloodnet::data::{
    generate_studies, generate_study_with_truth, load_dataset, make_slice_windows, write_study,
    BrainWindow, PhantomConfig,
};
use bloodnet::eval::roc_auc;

fn config() -> PhantomConfig {
    PhantomConfig {
        height: 32,
        width: 32,
        slices_per_study: 12,
        ..PhantomConfig::default()
    }
}

#[test]
fn bleed_volume_stays_within_configured_radii() {
    let cfg = PhantomConfig {
        bleed_probability: 1.0,
        ..config()
    };
    let (r_min, r_max) = cfg.bleed_radius_range_mm;
    let (s_min, s_max) = cfg.bleed_slice_span;
    for i in 0..40 {
        let (study, truth) = generate_study_with_truth(&cfg, i).unwrap();
        let pixel_area = cfg.pixel_spacing_mm.0 * cfg.pixel_spacing_mm.1;
        // per-slice cross sections are ellipses no larger than the
        // ellipsoid's equator and one pixel of rasterisation slack
        let max_per_bleed = s_max as f64
            * cfg.slice_spacing_mm
            * std::f64::consts::PI
            * (r_max + cfg.pixel_spacing_mm.0).powi(2);
        let measured = study.mask_voxels() as f64 * study.voxel_volume();
        assert!(measured > 0.0);
        assert!(measured <= truth.bleeds.len() as f64 * max_per_bleed, "{measured}");
        let min_single = pixel_area * cfg.slice_spacing_mm * s_min as f64;
        assert!(measured >= min_single);
        assert!(truth.bleeds.iter().all(|b| b.radius_rows * cfg.pixel_spacing_mm.0 <= r_max + 1e-9));
        assert!(truth.bleeds.iter().all(|b| b.radius_rows * cfg.pixel_spacing_mm.0 >= r_min - 1e-9));
    }
}

#[test]
fn labels_agree_across_masks_slices_and_windows() {
    for study in generate_studies(&config(), 0..30).unwrap() {
        study.validate().unwrap();
        let windows = make_slice_windows(&study, 5, BrainWindow::default()).unwrap();
        assert_eq!(windows.len(), study.num_slices());
        let labels: Vec<u8> = windows.iter().map(|w| w.label).collect();
        assert_eq!(labels, study.slice_labels);
        assert_eq!(labels.iter().copied().max().unwrap(), study.study_label);
        assert!(windows.iter().flat_map(|w| &w.context).all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn global_intensity_threshold_does_not_solve_the_task() {
    let cfg = config();
    let studies = generate_studies(&cfg, 0..200).unwrap();
    // Sweeping one HU threshold over "any brain pixel above it" ranks
    // studies by their brightest non-skull pixel.
    let skull_floor = (cfg.skull_hu / 2.0) as i16;
    let scores: Vec<f64> = studies
        .iter()
        .map(|s| {
            s.slices
                .iter()
                .flatten()
                .copied()
                .filter(|&v| v < skull_floor)
                .max()
                .unwrap() as f64
        })
        .collect();
    let labels: Vec<bool> = studies.iter().map(|s| s.study_label == 1).collect();
    let auc = roc_auc(&labels, &scores).unwrap();
    assert!(auc < 0.95, "threshold AUC {auc}");
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let studies = generate_studies(&config(), 5..9).unwrap();
    for s in &studies {
        write_study(dir.path(), s).unwrap();
    }
    assert_eq!(load_dataset(dir.path()).unwrap(), studies);
}
