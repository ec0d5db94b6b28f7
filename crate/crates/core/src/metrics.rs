//! Evaluation metrics.
//!
//! Heatmap metrics (KLD, SIM, NSS) follow the usual saliency-benchmark
//! conventions: KLD and SIM compare the maps after normalising each to unit
//! sum; NSS standardises the prediction and averages it over fixation pixels.
//! Dense segmentation uses per-class IoU from confusion counts accumulated
//! over a whole split, and the harmonic mean of seen and unseen mIoU.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AffordanceTarget, KeypointAnnotation, LoadedItem, TargetKind};
use crate::decoder::Prediction;
use crate::error::{Error, Result};
use crate::model::Model;

pub const METRIC_EPS: f64 = 1e-12;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn normalize(map: &[f64], what: &str) -> Result<Vec<f64>> {
    if let Some(v) = map.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{what} has invalid value {v}")));
    }
    let sum: f64 = map.iter().sum();
    if sum <= 0.0 {
        return Err(Error::InvalidArgument(format!("{what} is all zero")));
    }
    Ok(map.iter().map(|v| v / sum).collect())
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("maps have {} and {} pixels", a.len(), b.len())));
    }
    Ok(())
}

/// `Σ g·ln(g/(p+ε) + ε)` over the unit-sum maps. Not symmetric.
pub fn kld(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(pred, gt)?;
    let p = normalize(pred, "prediction")?;
    let g = normalize(gt, "ground truth")?;
    Ok(p.iter()
        .zip(&g)
        .map(|(p, g)| g * (g / (p + METRIC_EPS) + METRIC_EPS).ln())
        .sum())
}

/// Histogram intersection `Σ min(p, g)` of the unit-sum maps.
pub fn sim(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(pred, gt)?;
    let p = normalize(pred, "prediction")?;
    let g = normalize(gt, "ground truth")?;
    Ok(p.iter().zip(&g).map(|(p, g)| p.min(*g)).sum())
}

/// Mean standardised prediction over fixation pixels. A prediction with
/// standard deviation below `1e-12` scores 0.
pub fn nss(pred: &[f64], fixations: &[bool]) -> Result<f64> {
    if pred.len() != fixations.len() {
        return Err(Error::shape("prediction and fixation map differ in size"));
    }
    let count = fixations.iter().filter(|f| **f).count();
    if count == 0 {
        return Err(Error::InvalidArgument("empty fixation set".into()));
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction map".into()));
    }
    let n = pred.len() as f64;
    let mean = pred.iter().sum::<f64>() / n;
    let std = (pred.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-12 {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(fixations)
        .filter(|(_, f)| **f)
        .map(|(v, _)| (v - mean) / std)
        .sum();
    Ok(total / count as f64)
}

/// Pixels at or above half the map's maximum.
pub fn fixations_from_map(gt: &[f64]) -> Vec<bool> {
    let max = gt.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![false; gt.len()];
    }
    gt.iter().map(|&v| v >= 0.5 * max).collect()
}

/// Keypoints rounded to the nearest pixel.
pub fn fixations_from_keypoints(points: &[(f64, f64)], height: usize, width: usize) -> Vec<bool> {
    let mut out = vec![false; height * width];
    for &(x, y) in points {
        let c = (x.round() as usize).min(width - 1);
        let r = (y.round() as usize).min(height - 1);
        out[r * width + c] = true;
    }
    out
}

/// Intersection and union pixel counts for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

/// Per-class counts for one image, prediction binarised at `threshold`.
pub fn iou_counts(pred: &Prediction, gt: &AffordanceTarget, threshold: f64) -> Result<Vec<IouCounts>> {
    if gt.kind != TargetKind::DenseBinary {
        return Err(Error::InvalidArgument("IoU needs dense-binary ground truth".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    let n = gt.n_classes;
    if pred.upsampled.len() != gt.values.len() || pred.n_classes() != n {
        return Err(Error::shape("prediction and ground truth differ in shape"));
    }
    let mut counts = vec![IouCounts::default(); n];
    for (i, (&s, &y)) in pred.upsampled.iter().zip(&gt.values).enumerate() {
        let p = s > threshold;
        let g = y == 1.0;
        let c = &mut counts[i % n];
        if p && g {
            c.intersection += 1;
        }
        if p || g {
            c.union += 1;
        }
    }
    Ok(counts)
}

pub fn iou_per_class(pred: &Prediction, gt: &AffordanceTarget, threshold: f64) -> Result<Vec<Option<f64>>> {
    Ok(iou_counts(pred, gt, threshold)?.iter().map(IouCounts::iou).collect())
}

/// Mean over classes with a non-empty union; `None` when no class qualifies.
pub fn miou(per_class: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Harmonic mean `2su/(s+u)`, 0 when both are 0.
pub fn hiou(seen: f64, unseen: f64) -> Result<f64> {
    if seen < 0.0 || unseen < 0.0 || !seen.is_finite() || !unseen.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "hIoU inputs must be non-negative, got ({seen}, {unseen})"
        )));
    }
    if seen + unseen == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * seen * unseen / (seen + unseen))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Heatmap,
    Dense,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heatmap" => Ok(EvalMode::Heatmap),
            "dense" => Ok(EvalMode::Dense),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ImageRecord {
    /// Means over the item's classes with non-empty ground truth.
    Heatmap {
        id: String,
        kld: Option<f64>,
        sim: Option<f64>,
        nss: Option<f64>,
    },
    Dense {
        id: String,
        iou: Vec<Option<f64>>,
        counts: Vec<IouCounts>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapAggregate {
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
}

/// Results over one evaluation set. Aggregates are `None` (serialised as
/// `null`) when undefined, e.g. for an empty set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub n_items: usize,
    pub class_names: Vec<String>,
    pub records: Vec<ImageRecord>,
    pub heatmap: Option<HeatmapAggregate>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
}

/// Seen/unseen pair with the harmonic mIoU when both sides have one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub seen: MetricsReport,
    pub unseen: MetricsReport,
    pub hiou: Option<f64>,
}

impl SplitReport {
    pub fn new(seen: MetricsReport, unseen: MetricsReport) -> Result<Self> {
        let hiou = match (seen.miou, unseen.miou) {
            (Some(s), Some(u)) => Some(hiou(s, u)?),
            _ => None,
        };
        Ok(SplitReport { seen, unseen, hiou })
    }

    /// Aligned plain-text table: `KLD↓ SIM↑ NSS↑` per split for heatmaps,
    /// `Seen Unseen hIoU` (percent) for dense masks.
    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>, scale: f64, digits: usize| match v {
            Some(x) => format!("{:.*}", digits, x * scale),
            None => "-".to_string(),
        };
        match self.seen.mode {
            EvalMode::Heatmap => {
                let agg = |r: &MetricsReport| {
                    let h = r.heatmap;
                    [
                        f(h.map(|a| a.kld), 1.0, 3),
                        f(h.map(|a| a.sim), 1.0, 3),
                        f(h.map(|a| a.nss), 1.0, 3),
                    ]
                };
                let s = agg(&self.seen);
                let u = agg(&self.unseen);
                let mut out = format!("{:<8}{:>9}{:>9}{:>9}\n", "split", "KLD↓", "SIM↑", "NSS↑");
                out.push_str(&format!("{:<8}{:>9}{:>9}{:>9}\n", "seen", s[0], s[1], s[2]));
                out.push_str(&format!("{:<8}{:>9}{:>9}{:>9}\n", "unseen", u[0], u[1], u[2]));
                out
            }
            EvalMode::Dense => {
                let mut out = format!("{:>8}{:>8}{:>8}\n", "Seen", "Unseen", "hIoU");
                out.push_str(&format!(
                    "{:>8}{:>8}{:>8}\n",
                    f(self.seen.miou, 100.0, 1),
                    f(self.unseen.miou, 100.0, 1),
                    f(self.hiou, 100.0, 1)
                ));
                out
            }
        }
    }
}

fn heatmap_record(item: &LoadedItem, pred: &Prediction) -> Result<ImageRecord> {
    let t = &item.target;
    let (mut k_sum, mut s_sum, mut n_sum, mut count) = (0.0, 0.0, 0.0, 0usize);
    for k in 0..t.n_classes {
        let gt = t.channel(k);
        if gt.iter().all(|&v| v == 0.0) {
            continue;
        }
        let p = pred.channel(k);
        let fix = match &item.keypoints {
            Some(KeypointAnnotation { points }) if !points[k].is_empty() => {
                fixations_from_keypoints(&points[k], t.height, t.width)
            }
            _ => fixations_from_map(&gt),
        };
        k_sum += kld(&p, &gt)?;
        s_sum += sim(&p, &gt)?;
        n_sum += nss(&p, &fix)?;
        count += 1;
    }
    let mean = |s: f64| (count > 0).then(|| s / count as f64);
    Ok(ImageRecord::Heatmap {
        id: item.id.clone(),
        kld: mean(k_sum),
        sim: mean(s_sum),
        nss: mean(n_sum),
    })
}

/// Evaluates predictions produced by `predictor` over `items`, using up to
/// `threads` workers (`0` = rayon default). The aggregate is a fold in item
/// order, so results do not depend on the thread count.
pub fn evaluate_with<F>(
    items: &[LoadedItem],
    mode: EvalMode,
    class_names: &[String],
    threshold: f64,
    threads: usize,
    predictor: F,
) -> Result<MetricsReport>
where
    F: Fn(&LoadedItem) -> Result<Prediction> + Sync,
{
    let run = || -> Result<Vec<ImageRecord>> {
        items
            .par_iter()
            .map(|item| {
                let pred = predictor(item)?;
                match mode {
                    EvalMode::Heatmap => heatmap_record(item, &pred),
                    EvalMode::Dense => {
                        let counts = iou_counts(&pred, &item.target, threshold)?;
                        Ok(ImageRecord::Dense {
                            id: item.id.clone(),
                            iou: counts.iter().map(IouCounts::iou).collect(),
                            counts,
                        })
                    }
                }
            })
            .collect()
    };
    let records = if threads == 0 {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(run)?
    };
    Ok(aggregate(mode, class_names, records))
}

pub fn aggregate(mode: EvalMode, class_names: &[String], records: Vec<ImageRecord>) -> MetricsReport {
    let n = class_names.len();
    let mut heat = (0.0, 0.0, 0.0, 0usize);
    let mut totals = vec![IouCounts::default(); n];
    for r in &records {
        match r {
            ImageRecord::Heatmap {
                kld: Some(k),
                sim: Some(s),
                nss: Some(ns),
                ..
            } => {
                heat.0 += k;
                heat.1 += s;
                heat.2 += ns;
                heat.3 += 1;
            }
            ImageRecord::Heatmap { .. } => {}
            ImageRecord::Dense { counts, .. } => {
                for (t, c) in totals.iter_mut().zip(counts) {
                    t.intersection += c.intersection;
                    t.union += c.union;
                }
            }
        }
    }
    let heatmap = (mode == EvalMode::Heatmap && heat.3 > 0).then(|| {
        let d = heat.3 as f64;
        HeatmapAggregate {
            kld: heat.0 / d,
            sim: heat.1 / d,
            nss: heat.2 / d,
        }
    });
    let per_class_iou: Vec<Option<f64>> = if mode == EvalMode::Dense {
        totals.iter().map(IouCounts::iou).collect()
    } else {
        Vec::new()
    };
    let miou = miou(&per_class_iou);
    MetricsReport {
        mode,
        n_items: records.len(),
        class_names: class_names.to_vec(),
        records,
        heatmap,
        per_class_iou,
        miou,
    }
}

pub fn evaluate(model: &Model, items: &[LoadedItem], mode: EvalMode, threads: usize) -> Result<MetricsReport> {
    evaluate_with(
        items,
        mode,
        model.text.names(),
        DEFAULT_THRESHOLD,
        threads,
        |item| model.forward(&item.stack),
    )
}
