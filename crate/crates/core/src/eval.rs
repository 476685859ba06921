//! Study-level aggregation, ROC analysis and bootstrap confidence intervals.

use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_slice_windows, BrainWindow, SliceWindow, Study};
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::tensor::Element;
use crate::train::write_csv;

pub const DEFAULT_BOOTSTRAP: usize = 10_000;

/// Validation-slice AUCs reported for the original clinical data, shown
/// next to synthetic results for orientation only.
pub fn reference_auc(variant: Variant) -> f64 {
    match variant {
        Variant::SingleTask => 0.9453,
        Variant::MultiTask => 0.9411,
        Variant::TaskDependent => 0.9658,
    }
}

/// A study is as suspicious as its most suspicious window.
pub fn max_probability(window_probs: &[f64]) -> Result<f64> {
    window_probs
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::invalid("study has no windows"))
}

/// Per-window classification probabilities of every slice-centred window.
pub fn window_probabilities<T: Element>(
    model: &Model<T>,
    study: &Study,
    window: BrainWindow,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let windows = make_slice_windows(study, model.arch().input_slices, window)?;
    Ok(model
        .predict_windows(&windows, batch_size)?
        .into_iter()
        .map(Element::to_f64)
        .collect())
}

pub fn study_probability<T: Element>(
    model: &Model<T>,
    study: &Study,
    window: BrainWindow,
    batch_size: usize,
) -> Result<f64> {
    max_probability(&window_probabilities(model, study, window, batch_size)?)
}

fn class_counts(labels: &[bool]) -> (u64, u64) {
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    (pos, labels.len() as u64 - pos)
}

/// Area under the ROC curve by the rank-sum method, ties at half credit.
///
/// Ranks are kept doubled so the statistic stays an exact integer up to
/// the final division.
pub fn roc_auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::ShapeMismatch {
            op: "roc_auc",
            lhs: vec![labels.len()],
            rhs: vec![scores.len()],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("roc_auc scores contain NaN"));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "roc_auc needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based positions i+1..=j+1 share the midrank (i + j + 2) / 2
        let midrank2 = (i + j + 2) as u64;
        let group_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        rank_sum2 += group_pos * midrank2;
        i = j + 1;
    }
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Items scoring at or above this are called positive.
    pub threshold: f64,
}

/// ROC curve vertices from `(0, 0)` to `(1, 1)`, one per distinct score.
pub fn roc_points(labels: &[bool], scores: &[f64]) -> Result<Vec<RocPoint>> {
    roc_auc(labels, scores)?;
    let (pos, neg) = class_counts(labels);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (n, &k) in order.iter().enumerate() {
        if labels[k] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(n + 1).is_none_or(|&next| scores[next] != scores[k]);
        if last_of_group {
            points.push(RocPoint {
                fpr: fp as f64 / neg as f64,
                tpr: tp as f64 / pos as f64,
                threshold: scores[k],
            });
        }
    }
    Ok(points)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
    pub n: usize,
    pub seed: u64,
}

/// Linear interpolation between closest ranks of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// AUC of one bootstrap resample. Resample `index` draws from its own
/// stream, and single-class draws are redrawn from that stream.
fn resample_auc(labels: &[bool], scores: &[f64], seed: u64, index: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = labels.len();
    let mut l = vec![false; n];
    let mut s = vec![0.0; n];
    loop {
        for slot in 0..n {
            let k = rng.random_range(0..n);
            l[slot] = labels[k];
            s[slot] = scores[k];
        }
        let (pos, neg) = class_counts(&l);
        if pos > 0 && neg > 0 {
            return roc_auc(&l, &s);
        }
    }
}

/// Percentile interval [2.5%, 97.5%] over `n` resampled AUCs.
pub fn bootstrap_ci(labels: &[bool], scores: &[f64], n: usize, seed: u64) -> Result<BootstrapCi> {
    if n == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    roc_auc(labels, scores)?;
    let mut aucs = (0..n as u64)
        .into_par_iter()
        .map(|i| resample_auc(labels, scores, seed, i))
        .collect::<Result<Vec<f64>>>()?;
    let mean = aucs.iter().sum::<f64>() / n as f64;
    aucs.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        mean,
        low: quantile(&aucs, 0.025),
        high: quantile(&aucs, 0.975),
        n,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// One item per slice-centred window.
    Slice,
    /// One item per study, scored by its maximum window.
    Study,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Slice => "slice",
            Level::Study => "study",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub label: u8,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub level: Level,
    pub items: Vec<Item>,
    pub auc: f64,
    pub ci: BootstrapCi,
    pub roc: Vec<RocPoint>,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    level: &'a str,
    items: usize,
    positives: usize,
    auc: f64,
    bootstrap_mean: f64,
    ci_low: f64,
    ci_high: f64,
    n_bootstrap: usize,
    seed: u64,
}

impl EvalReport {
    pub fn new(level: Level, items: Vec<Item>, n_bootstrap: usize, seed: u64) -> Result<Self> {
        let labels: Vec<bool> = items.iter().map(|i| i.label == 1).collect();
        let scores: Vec<f64> = items.iter().map(|i| i.score).collect();
        Ok(EvalReport {
            level,
            auc: roc_auc(&labels, &scores)?,
            ci: bootstrap_ci(&labels, &scores, n_bootstrap, seed)?,
            roc: roc_points(&labels, &scores)?,
            items,
        })
    }

    pub fn write_items_csv(&self, w: impl Write) -> Result<()> {
        write_csv(w, &self.items)
    }

    pub fn write_roc_csv(&self, w: impl Write) -> Result<()> {
        write_csv(w, &self.roc)
    }

    pub fn write_summary_csv(&self, w: impl Write) -> Result<()> {
        let row = SummaryRow {
            level: self.level.as_str(),
            items: self.items.len(),
            positives: self.items.iter().filter(|i| i.label == 1).count(),
            auc: self.auc,
            bootstrap_mean: self.ci.mean,
            ci_low: self.ci.low,
            ci_high: self.ci.high,
            n_bootstrap: self.ci.n,
            seed: self.ci.seed,
        };
        write_csv(w, &[row])
    }

    /// Writes `{level}_items.csv`, `{level}_roc.csv` and `{level}_summary.csv`.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let name = |suffix: &str| dir.join(format!("{}_{suffix}.csv", self.level.as_str()));
        self.write_items_csv(std::fs::File::create(name("items"))?)?;
        self.write_roc_csv(std::fs::File::create(name("roc"))?)?;
        self.write_summary_csv(std::fs::File::create(name("summary"))?)?;
        Ok(())
    }
}

pub fn window_id(w: &SliceWindow) -> String {
    format!("{}:{:03}", w.study_id, w.center_index)
}

/// Score every slice-centred window and every study of `studies`.
pub fn score_studies<T: Element>(
    model: &Model<T>,
    studies: &[Study],
    window: BrainWindow,
    batch_size: usize,
) -> Result<(Vec<Item>, Vec<Item>)> {
    let mut slices = Vec::new();
    let mut study_items = Vec::with_capacity(studies.len());
    for study in studies {
        let windows = make_slice_windows(study, model.arch().input_slices, window)?;
        let probs: Vec<f64> = model
            .predict_windows(&windows, batch_size)?
            .into_iter()
            .map(Element::to_f64)
            .collect();
        for (w, &p) in windows.iter().zip(&probs) {
            slices.push(Item {
                id: window_id(w),
                label: w.label,
                score: p,
            });
        }
        study_items.push(Item {
            id: study.study_id.clone(),
            label: study.study_label,
            score: max_probability(&probs)?,
        });
    }
    Ok((slices, study_items))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub auc: f64,
    pub bootstrap_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub reference_auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub level: Level,
    pub rows: Vec<ComparisonRow>,
}

/// Side-by-side AUCs of several variants evaluated on the same items.
pub fn compare_variants(reports: &[(Variant, &EvalReport)]) -> Result<ComparisonTable> {
    let (_, first) = reports
        .first()
        .ok_or_else(|| Error::invalid("no reports to compare"))?;
    let key = |r: &EvalReport| {
        let mut k: Vec<(String, u8)> = r.items.iter().map(|i| (i.id.clone(), i.label)).collect();
        k.sort();
        k
    };
    let reference = key(first);
    for (variant, r) in reports {
        if r.level != first.level {
            return Err(Error::invalid(format!(
                "{variant} was evaluated per {}, others per {}",
                r.level.as_str(),
                first.level.as_str()
            )));
        }
        if key(r) != reference {
            return Err(Error::invalid(format!(
                "{variant} was evaluated on a different item set"
            )));
        }
    }
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|(variant, r)| ComparisonRow {
            variant: *variant,
            auc: r.auc,
            bootstrap_mean: r.ci.mean,
            ci_low: r.ci.low,
            ci_high: r.ci.high,
            reference_auc: reference_auc(*variant),
        })
        .collect();
    rows.sort_by_key(|r| Variant::ALL.iter().position(|v| *v == r.variant));
    Ok(ComparisonTable {
        level: first.level,
        rows,
    })
}

impl ComparisonTable {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        write_csv(w, &self.rows)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<16} {:>8} {:>19} {:>10}\n",
            "variant",
            "auc",
            "95% ci",
            "reference"
        );
        for r in &self.rows {
            let ci = format!("[{:.4}, {:.4}]", r.ci_low, r.ci_high);
            let _ = writeln!(
                out,
                "{:<16} {:>8.4} {:>19} {:>10.4}",
                r.variant.as_str(),
                r.auc,
                ci,
                r.reference_auc
            );
        }
        let _ = writeln!(
            out,
            "{} level; reference column is the clinical result, not reproduced here",
            self.level.as_str()
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_rule() {
        assert_eq!(max_probability(&[0.1, 0.9, 0.3]).unwrap(), 0.9);
        assert_eq!(max_probability(&[0.42]).unwrap(), 0.42);
        assert!(max_probability(&[]).is_err());
    }

    #[test]
    fn auc_anchors() {
        let labels = [true, false, true, false];
        assert_eq!(roc_auc(&labels, &[0.8, 0.7, 0.6, 0.2]).unwrap(), 0.75);
        assert_eq!(roc_auc(&labels, &[0.9, 0.1, 0.8, 0.2]).unwrap(), 1.0);
        assert_eq!(roc_auc(&labels, &[0.5; 4]).unwrap(), 0.5);
        let err = roc_auc(&[true, true], &[0.1, 0.2]).unwrap_err().to_string();
        assert!(err.contains("both classes"), "{err}");
        assert!(roc_auc(&labels, &[0.1, f64::NAN, 0.2, 0.3]).is_err());
        assert!(roc_auc(&labels, &[0.1]).is_err());
    }

    #[test]
    fn roc_points_walk_the_square() {
        let labels = [true, false, true, false];
        let pts = roc_points(&labels, &[0.8, 0.7, 0.6, 0.2]).unwrap();
        let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(xy, [(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]);
        let tied = roc_points(&labels, &[0.5; 4]).unwrap();
        assert_eq!(tied.len(), 2);
    }

    #[test]
    fn bootstrap_is_seeded() {
        let labels: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let scores: Vec<f64> = (0..40).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
        let a = bootstrap_ci(&labels, &scores, 500, 3).unwrap();
        let b = bootstrap_ci(&labels, &scores, 500, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, bootstrap_ci(&labels, &scores, 500, 4).unwrap());
        assert!(a.low <= a.mean && a.mean <= a.high);
        assert!(bootstrap_ci(&labels, &scores, 0, 3).is_err());
    }

    #[test]
    fn bootstrap_redraws_single_class_resamples() {
        // with one positive among three items, many resamples lack it
        let ci = bootstrap_ci(&[true, false, false], &[0.9, 0.1, 0.2], 200, 0).unwrap();
        assert_eq!(ci.n, 200);
        assert_eq!(ci.mean, 1.0);
    }

    fn report(scores: &[f64]) -> EvalReport {
        let items = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| Item {
                id: format!("s{i:03}"),
                label: (i % 2) as u8,
                score: s,
            })
            .collect();
        EvalReport::new(Level::Study, items, 100, 0).unwrap()
    }

    #[test]
    fn comparison_rows_follow_variant_order() {
        let a = report(&[0.1, 0.9, 0.2, 0.7]);
        let b = report(&[0.3, 0.4, 0.5, 0.6]);
        let t = compare_variants(&[(Variant::TaskDependent, &a), (Variant::SingleTask, &b)]).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].variant, Variant::SingleTask);
        assert_eq!(t.rows[1].reference_auc, 0.9658);
        let same = compare_variants(&[(Variant::MultiTask, &a), (Variant::MultiTask, &a)]).unwrap();
        assert_eq!(same.rows[0], same.rows[1]);
        let text = t.to_text();
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn comparison_rejects_different_items() {
        let a = report(&[0.1, 0.9, 0.2, 0.7]);
        let b = report(&[0.1, 0.9, 0.2, 0.7, 0.3, 0.4]);
        assert!(compare_variants(&[(Variant::SingleTask, &a), (Variant::MultiTask, &b)]).is_err());
        assert!(compare_variants(&[]).is_err());
    }
}
