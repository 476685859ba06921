use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const AIR_HU: f64 = -1000.0;
const CSF_HU: f64 = 8.0;
const HU_MIN: f64 = -1024.0;
const HU_MAX: f64 = 3071.0;

/// Generator settings. Every field has a documented default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub slices_per_study: usize,
    /// Probability that a study contains hemorrhage.
    pub bleed_probability: f64,
    pub bleeds_per_positive: (usize, usize),
    pub bleed_hu_range: (f64, f64),
    /// In-plane semi-axis range of a bleed ellipsoid.
    pub bleed_radius_range_mm: (f64, f64),
    /// Number of consecutive slices a bleed spans (at least 2).
    pub bleed_slice_span: (usize, usize),
    /// Probability that a study contains calcification-like dots.
    pub confounder_rate: f64,
    pub confounders_per_study: (usize, usize),
    pub confounder_hu_range: (f64, f64),
    pub confounder_radius_range_mm: (f64, f64),
    pub skull_hu: f64,
    pub brain_hu_mean: f64,
    pub brain_hu_std: f64,
    pub pixel_spacing_mm: (f64, f64),
    pub slice_spacing_mm: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 64,
            width: 64,
            slices_per_study: 20,
            bleed_probability: 0.5,
            bleeds_per_positive: (1, 2),
            bleed_hu_range: (50.0, 85.0),
            bleed_radius_range_mm: (1.0, 3.5),
            bleed_slice_span: (2, 4),
            confounder_rate: 0.5,
            confounders_per_study: (1, 3),
            confounder_hu_range: (60.0, 300.0),
            confounder_radius_range_mm: (0.5, 1.0),
            skull_hu: 1000.0,
            brain_hu_mean: 32.0,
            brain_hu_std: 5.0,
            pixel_spacing_mm: (0.5, 0.5),
            slice_spacing_mm: 5.0,
            seed: 0,
        }
    }
}

fn range_ok(r: (f64, f64)) -> bool {
    r.0.is_finite() && r.1.is_finite() && r.0 <= r.1
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.height < 8 || self.width < 8 {
            return fail(format!("phantom must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if self.slices_per_study == 0 {
            return fail("slices_per_study must be positive".into());
        }
        for (name, p) in [
            ("bleed_probability", self.bleed_probability),
            ("confounder_rate", self.confounder_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, r) in [
            ("bleed_hu_range", self.bleed_hu_range),
            ("bleed_radius_range_mm", self.bleed_radius_range_mm),
            ("confounder_hu_range", self.confounder_hu_range),
            ("confounder_radius_range_mm", self.confounder_radius_range_mm),
        ] {
            if !range_ok(r) {
                return fail(format!("{name} must be a finite (min, max) pair, got {r:?}"));
            }
        }
        if self.bleed_hu_range.1.ceil() < self.bleed_hu_range.0.floor()
            || self.bleed_hu_range.0.ceil() > self.bleed_hu_range.1.floor()
        {
            return fail("bleed_hu_range must contain an integer HU value".into());
        }
        if self.bleed_radius_range_mm.0 <= 0.0 || self.confounder_radius_range_mm.0 <= 0.0 {
            return fail("radii must be positive".into());
        }
        let (s0, s1) = self.bleed_slice_span;
        if s0 < 2 || s0 > s1 {
            return fail(format!("bleed_slice_span must satisfy 2 <= min <= max, got {s0}..{s1}"));
        }
        if self.bleed_probability > 0.0 && s0 > self.slices_per_study {
            return fail("bleed_slice_span exceeds slices_per_study".into());
        }
        let (b0, b1) = self.bleeds_per_positive;
        if b0 == 0 || b0 > b1 {
            return fail("bleeds_per_positive must satisfy 1 <= min <= max".into());
        }
        let (c0, c1) = self.confounders_per_study;
        if c0 > c1 {
            return fail("confounders_per_study must satisfy min <= max".into());
        }
        let (px, py) = self.pixel_spacing_mm;
        if !(px > 0.0 && py > 0.0 && self.slice_spacing_mm > 0.0) {
            return fail("spacings must be positive".into());
        }
        if !(self.brain_hu_std >= 0.0) {
            return fail("brain_hu_std must be non-negative".into());
        }
        Ok(())
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.pixel_spacing_mm.0 * self.pixel_spacing_mm.1 * self.slice_spacing_mm
    }
}

/// One CT study: HU slices with pixel-exact hemorrhage masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub study_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major `height x width` HU values per axial slice.
    pub slices: Vec<Vec<i16>>,
    /// Binary masks, same layout as `slices`.
    pub masks: Vec<Vec<u8>>,
    pub slice_labels: Vec<u8>,
    pub study_label: u8,
    /// `(row, column)` spacing in mm.
    pub pixel_spacing: (f64, f64),
    pub slice_spacing: f64,
}

impl Study {
    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn voxel_volume(&self) -> f64 {
        self.pixel_spacing.0 * self.pixel_spacing.1 * self.slice_spacing
    }

    /// Number of hemorrhage voxels over the whole study.
    pub fn mask_voxels(&self) -> usize {
        self.masks
            .iter()
            .map(|m| m.iter().filter(|&&v| v != 0).count())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::format("study", format!("{}: {m}", self.study_id)));
        let plane = self.height * self.width;
        if self.slices.is_empty() || plane == 0 {
            return bad("empty study".into());
        }
        if self.masks.len() != self.slices.len() || self.slice_labels.len() != self.slices.len() {
            return bad("slice, mask and label counts differ".into());
        }
        if self.slices.iter().any(|s| s.len() != plane)
            || self.masks.iter().any(|m| m.len() != plane)
        {
            return bad("slice extents differ from height x width".into());
        }
        for (i, (mask, &label)) in self.masks.iter().zip(&self.slice_labels).enumerate() {
            if mask.iter().any(|&v| v > 1) || label > 1 {
                return bad(format!("slice {i} has non-binary mask or label"));
            }
            let nonempty = mask.contains(&1);
            if nonempty != (label == 1) {
                return bad(format!("slice {i} label {label} disagrees with its mask"));
            }
        }
        let max_label = self.slice_labels.iter().copied().max().unwrap_or(0);
        if self.study_label != max_label {
            return bad("study label differs from max slice label".into());
        }
        let (a, b) = self.pixel_spacing;
        if !(a > 0.0 && b > 0.0 && self.slice_spacing > 0.0) {
            return bad("spacings must be positive".into());
        }
        Ok(())
    }
}

/// Ellipsoidal bleed as placed by the generator, in pixel/slice units.
#[derive(Clone, Debug, PartialEq)]
pub struct BleedTruth {
    pub center_row: f64,
    pub center_col: f64,
    pub radius_rows: f64,
    pub radius_cols: f64,
    pub first_slice: usize,
    pub span: usize,
    pub hu: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfounderTruth {
    pub slice: usize,
    pub center_row: f64,
    pub center_col: f64,
    pub radius_px: f64,
    pub hu: f64,
}

/// Generator-side ground truth that is not part of the stored study.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhantomTruth {
    pub bleeds: Vec<BleedTruth>,
    pub confounders: Vec<ConfounderTruth>,
}

pub fn study_id(index: u64) -> String {
    format!("s{index:03}")
}

pub fn generate_study(config: &PhantomConfig, index: u64) -> Result<Study> {
    generate_study_with_truth(config, index).map(|(s, _)| s)
}

/// Studies `indices` in order; generated in parallel, each from its own
/// `(seed, index)` stream.
pub fn generate_studies(
    config: &PhantomConfig,
    indices: std::ops::Range<u64>,
) -> Result<Vec<Study>> {
    config.validate()?;
    indices
        .into_par_iter()
        .map(|i| generate_study(config, i))
        .collect()
}

struct Ellipse {
    row: f64,
    col: f64,
    a_rows: f64,
    a_cols: f64,
}

impl Ellipse {
    fn contains(&self, r: f64, c: f64) -> bool {
        let dr = (r - self.row) / self.a_rows;
        let dc = (c - self.col) / self.a_cols;
        dr * dr + dc * dc <= 1.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn uniform_count(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

// Uniform point inside an ellipse by rejection.
fn point_in(rng: &mut ChaCha8Rng, e: &Ellipse) -> (f64, f64) {
    loop {
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random_range(-1.0..1.0);
        if u * u + v * v <= 1.0 {
            return (e.row + u * e.a_rows, e.col + v * e.a_cols);
        }
    }
}

/// Deterministic in `(config.seed, index)`.
pub fn generate_study_with_truth(
    config: &PhantomConfig,
    index: u64,
) -> Result<(Study, PhantomTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);

    let (h, w, n) = (config.height, config.width, config.slices_per_study);
    let (hf, wf) = (h as f64, w as f64);
    let (row_mm, col_mm) = config.pixel_spacing_mm;
    let noise = Normal::new(0.0, config.brain_hu_std).expect("validated std");
    let skull_noise = Normal::new(0.0, 40.0).expect("constant std");

    let head = Ellipse {
        row: hf / 2.0 + uniform(&mut rng, (-0.03, 0.03)) * hf,
        col: wf / 2.0 + uniform(&mut rng, (-0.03, 0.03)) * wf,
        a_rows: uniform(&mut rng, (0.42, 0.47)) * hf,
        a_cols: uniform(&mut rng, (0.38, 0.45)) * wf,
    };
    let skull = (0.05 * hf.min(wf)).max(1.5);
    let brain = Ellipse {
        a_rows: head.a_rows - skull,
        a_cols: head.a_cols - skull,
        ..head
    };
    let ventricle = Ellipse {
        a_rows: brain.a_rows * uniform(&mut rng, (0.12, 0.2)),
        a_cols: brain.a_cols * uniform(&mut rng, (0.08, 0.14)),
        ..brain
    };
    let ventricle_slices = (n / 3)..(n - n / 3).max(n / 3 + 1);

    let positive = rng.random_bool(config.bleed_probability);

    // Background anatomy.
    let mut hu = vec![vec![AIR_HU; h * w]; n];
    for (z, slice) in hu.iter_mut().enumerate() {
        for r in 0..h {
            for c in 0..w {
                let (rc, cc) = (r as f64 + 0.5, c as f64 + 0.5);
                let v = &mut slice[r * w + c];
                if brain.contains(rc, cc) {
                    *v = if ventricle_slices.contains(&z) && ventricle.contains(rc, cc) {
                        CSF_HU + noise.sample(&mut rng)
                    } else {
                        config.brain_hu_mean + noise.sample(&mut rng)
                    };
                } else if head.contains(rc, cc) {
                    *v = config.skull_hu + skull_noise.sample(&mut rng);
                }
            }
        }
    }

    let mut masks = vec![vec![0u8; h * w]; n];
    let mut truth = PhantomTruth::default();
    let hu_lo = config.bleed_hu_range.0.ceil();
    let hu_hi = config.bleed_hu_range.1.floor();

    if positive {
        let count = uniform_count(&mut rng, config.bleeds_per_positive);
        for _ in 0..count {
            let mut rr = (uniform(&mut rng, config.bleed_radius_range_mm) / row_mm).max(1.0);
            let mut rc = (uniform(&mut rng, config.bleed_radius_range_mm) / col_mm).max(1.0);
            // Shrink until the bleed fits inside the brain with a one-pixel margin.
            while rr + 1.0 >= brain.a_rows || rc + 1.0 >= brain.a_cols {
                rr *= 0.8;
                rc *= 0.8;
                if rr < 0.5 || rc < 0.5 {
                    return Err(Error::config("brain region too small to hold a bleed"));
                }
            }
            let room = Ellipse {
                a_rows: brain.a_rows - rr - 1.0,
                a_cols: brain.a_cols - rc - 1.0,
                ..brain
            };
            let (br, bc) = point_in(&mut rng, &room);
            let max_span = config.bleed_slice_span.1.min(n);
            let span = uniform_count(&mut rng, (config.bleed_slice_span.0, max_span));
            let first = rng.random_range(0..=n - span);
            let base_hu = uniform(&mut rng, config.bleed_hu_range);
            let half = span as f64 / 2.0;
            let mid = first as f64 + (span as f64 - 1.0) / 2.0;
            for z in first..first + span {
                let dz = (z as f64 - mid) / half;
                let f = (1.0 - dz * dz).sqrt();
                let section = Ellipse {
                    row: br,
                    col: bc,
                    a_rows: rr * f,
                    a_cols: rc * f,
                };
                let mut painted = false;
                for r in 0..h {
                    for c in 0..w {
                        if section.contains(r as f64 + 0.5, c as f64 + 0.5) {
                            masks[z][r * w + c] = 1;
                            painted = true;
                        }
                    }
                }
                if !painted {
                    // cross-section thinner than a pixel: keep the voxel under the centre
                    let (r, c) = (br.floor() as usize, bc.floor() as usize);
                    masks[z][r * w + c] = 1;
                }
            }
            truth.bleeds.push(BleedTruth {
                center_row: br,
                center_col: bc,
                radius_rows: rr,
                radius_cols: rc,
                first_slice: first,
                span,
                hu: base_hu,
            });
        }
        for (z, mask) in masks.iter().enumerate() {
            let base = truth
                .bleeds
                .iter()
                .rev()
                .find(|b| (b.first_slice..b.first_slice + b.span).contains(&z))
                .map(|b| b.hu);
            if let Some(base) = base {
                for (v, &m) in hu[z].iter_mut().zip(mask) {
                    if m == 1 {
                        *v = (base + 0.6 * noise.sample(&mut rng)).round().clamp(hu_lo, hu_hi);
                    }
                }
            }
        }
    }

    if rng.random_bool(config.confounder_rate) {
        let count = uniform_count(&mut rng, config.confounders_per_study);
        for _ in 0..count {
            let radius = (uniform(&mut rng, config.confounder_radius_range_mm) / row_mm.min(col_mm))
                .max(0.6);
            let value = uniform(&mut rng, config.confounder_hu_range);
            let z = rng.random_range(0..n);
            let room = Ellipse {
                a_rows: (brain.a_rows - radius - 1.0).max(0.5),
                a_cols: (brain.a_cols - radius - 1.0).max(0.5),
                ..brain
            };
            // Keep dots clear of hemorrhage so masks stay exact.
            let clearance = radius + 2.0;
            let placed = (0..32).find_map(|_| {
                let (cr, cc) = point_in(&mut rng, &room);
                let clear = (0..h).all(|r| {
                    (0..w).all(|c| {
                        let d = ((r as f64 + 0.5 - cr).powi(2) + (c as f64 + 0.5 - cc).powi(2)).sqrt();
                        d > clearance || masks[z][r * w + c] == 0
                    })
                });
                clear.then_some((cr, cc))
            });
            let Some((cr, cc)) = placed else { continue };
            let dot = Ellipse {
                row: cr,
                col: cc,
                a_rows: radius,
                a_cols: radius,
            };
            let mut painted = false;
            for r in 0..h {
                for c in 0..w {
                    if dot.contains(r as f64 + 0.5, c as f64 + 0.5) {
                        hu[z][r * w + c] = value;
                        painted = true;
                    }
                }
            }
            if !painted {
                hu[z][cr.floor() as usize * w + cc.floor() as usize] = value;
            }
            truth.confounders.push(ConfounderTruth {
                slice: z,
                center_row: cr,
                center_col: cc,
                radius_px: radius,
                hu: value,
            });
        }
    }

    let slices: Vec<Vec<i16>> = hu
        .into_iter()
        .map(|s| s.into_iter().map(|v| v.round().clamp(HU_MIN, HU_MAX) as i16).collect())
        .collect();
    let slice_labels: Vec<u8> = masks.iter().map(|m| u8::from(m.contains(&1))).collect();
    let study_label = slice_labels.iter().copied().max().unwrap_or(0);
    let study = Study {
        study_id: study_id(index),
        height: h,
        width: w,
        slices,
        masks,
        slice_labels,
        study_label,
        pixel_spacing: config.pixel_spacing_mm,
        slice_spacing: config.slice_spacing_mm,
    };
    study.validate()?;
    Ok((study, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig {
            height: 32,
            width: 32,
            slices_per_study: 10,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn deterministic_per_index() {
        let c = small();
        assert_eq!(generate_study(&c, 7).unwrap(), generate_study(&c, 7).unwrap());
        assert_ne!(generate_study(&c, 7).unwrap(), generate_study(&c, 8).unwrap());
    }

    #[test]
    fn forced_negative() {
        let c = PhantomConfig {
            bleed_probability: 0.0,
            ..small()
        };
        for i in 0..10 {
            let s = generate_study(&c, i).unwrap();
            assert_eq!(s.study_label, 0);
            assert_eq!(s.mask_voxels(), 0);
        }
    }

    #[test]
    fn bleeds_span_adjacent_slices_with_hu_in_range() {
        let c = PhantomConfig {
            bleed_probability: 1.0,
            ..small()
        };
        for i in 0..20 {
            let (s, truth) = generate_study_with_truth(&c, i).unwrap();
            assert_eq!(s.study_label, 1);
            for b in &truth.bleeds {
                assert!(b.span >= 2);
                for z in b.first_slice..b.first_slice + b.span {
                    assert_eq!(s.slice_labels[z], 1);
                }
            }
            for (slice, mask) in s.slices.iter().zip(&s.masks) {
                for (&v, &m) in slice.iter().zip(mask) {
                    if m == 1 {
                        assert!((50..=85).contains(&v), "bleed HU {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn confounders_never_masked() {
        let c = PhantomConfig {
            confounder_rate: 1.0,
            ..small()
        };
        let mut seen = 0;
        for i in 0..20 {
            let (s, truth) = generate_study_with_truth(&c, i).unwrap();
            for dot in &truth.confounders {
                let (r, col) = (dot.center_row.floor() as usize, dot.center_col.floor() as usize);
                assert_eq!(s.masks[dot.slice][r * s.width + col], 0);
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            PhantomConfig { bleed_probability: 1.5, ..small() },
            PhantomConfig { bleed_radius_range_mm: (3.0, 1.0), ..small() },
            PhantomConfig { bleed_slice_span: (1, 3), ..small() },
            PhantomConfig { slice_spacing_mm: 0.0, ..small() },
            PhantomConfig { height: 4, ..small() },
        ];
        for c in bad {
            assert!(generate_study(&c, 0).is_err(), "{c:?}");
        }
    }

    #[test]
    fn oversized_bleed_radius_is_shrunk_not_mislabelled() {
        let c = PhantomConfig {
            bleed_probability: 1.0,
            bleed_radius_range_mm: (40.0, 50.0),
            ..small()
        };
        let (s, truth) = generate_study_with_truth(&c, 3).unwrap();
        assert_eq!(s.study_label, 1);
        assert!(truth.bleeds.iter().all(|b| b.radius_rows < 16.0));
        s.validate().unwrap();
    }
}
