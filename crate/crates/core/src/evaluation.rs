//! Detection metrics (AP, mAP over IoU grids, band averages) and the binary
//! AUC/ACC used to score the order and regularity discriminators.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datamodel::{GroundTruthInstance, Proposal};
use crate::error::{Error, Result};
use crate::inference::temporal_iou;

/// Named threshold bands, each averaged at step 0.1.
pub const BANDS: [(&str, f64, f64); 3] = [("0.1:0.5", 0.1, 0.5), ("0.3:0.7", 0.3, 0.7), ("0.1:0.7", 0.1, 0.7)];

/// Confidence descending, ties by `(video_id, s, e)`.
pub fn detection_order(a: &Proposal, b: &Proposal) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| (&a.video_id, a.s, a.e).cmp(&(&b.video_id, b.s, b.e)))
}

/// True-positive flags of `class` proposals in detection order, plus the
/// number of ground-truth instances of that class.
///
/// Each proposal claims the unmatched same-video ground truth with the
/// highest IoU (lowest index on ties) when that IoU is positive and at least
/// `iou_thr`.
pub fn greedy_match(proposals: &[Proposal], gt: &[GroundTruthInstance], iou_thr: f64, class: usize) -> (Vec<bool>, usize) {
    let mut props: Vec<&Proposal> = proposals.iter().filter(|p| p.class == class).collect();
    props.sort_by(|a, b| detection_order(a, b));
    let targets: Vec<&GroundTruthInstance> = gt.iter().filter(|g| g.y == class).collect();
    let mut matched = vec![false; targets.len()];
    let flags = props
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in targets.iter().enumerate() {
                if matched[k] || g.video_id != p.video_id {
                    continue;
                }
                let iou = temporal_iou((p.s, p.e), (g.s, g.e));
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            match best {
                Some((k, iou)) if iou > 0.0 && iou >= iou_thr => {
                    matched[k] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    (flags, targets.len())
}

/// All-point interpolated AP from TP flags in rank order.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    for (i, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// AP of `class` at `iou_thr`; `None` when the class has no ground truth.
pub fn match_and_ap(proposals: &[Proposal], gt: &[GroundTruthInstance], iou_thr: f64, class: usize) -> Option<f64> {
    let (flags, num_gt) = greedy_match(proposals, gt, iou_thr, class);
    (num_gt > 0).then(|| average_precision(&flags, num_gt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
    pub bands: BTreeMap<String, f64>,
}

impl MapResult {
    /// The `0.1:0.7` band average.
    pub fn avg(&self) -> f64 {
        self.bands["0.1:0.7"]
    }
}

fn band_thresholds(lo: f64, hi: f64) -> Vec<f64> {
    let n = ((hi - lo) / 0.1).round() as usize;
    (0..=n).map(|i| ((lo + 0.1 * i as f64) * 10.0).round() / 10.0).collect()
}

/// Mean over classes with ground truth of AP at `iou_thr`.
pub fn map_at(proposals: &[Proposal], gt: &[GroundTruthInstance], iou_thr: f64) -> Result<f64> {
    let classes: BTreeSet<usize> = gt.iter().map(|g| g.y).collect();
    if classes.is_empty() {
        return Err(Error::Validation("no ground-truth instances to evaluate against".into()));
    }
    let total: f64 = classes
        .iter()
        .map(|&c| match_and_ap(proposals, gt, iou_thr, c).expect("class has ground truth"))
        .sum();
    Ok(total / classes.len() as f64)
}

/// mAP at every threshold of `iou_grid` plus the three band averages.
pub fn mean_ap(proposals: &[Proposal], gt: &[GroundTruthInstance], iou_grid: &[f64]) -> Result<MapResult> {
    if iou_grid.is_empty() {
        return Err(Error::Usage("IoU grid is empty".into()));
    }
    let mut cache: BTreeMap<u64, f64> = BTreeMap::new();
    let mut at = |thr: f64| -> Result<f64> {
        if let Some(v) = cache.get(&thr.to_bits()) {
            return Ok(*v);
        }
        let v = map_at(proposals, gt, thr)?;
        cache.insert(thr.to_bits(), v);
        Ok(v)
    };
    let map = iou_grid.iter().map(|&t| at(t)).collect::<Result<Vec<_>>>()?;
    let mut bands = BTreeMap::new();
    for (name, lo, hi) in BANDS {
        let ts = band_thresholds(lo, hi);
        let vals = ts.iter().map(|&t| at(t)).collect::<Result<Vec<_>>>()?;
        bands.insert(name.to_string(), vals.iter().sum::<f64>() / vals.len() as f64);
    }
    Ok(MapResult {
        thresholds: iou_grid.to_vec(),
        map,
        bands,
    })
}

/// Parses `lo:hi:step` (inclusive) into a grid of IoU thresholds.
pub fn parse_iou_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Usage(format!("bad IoU grid {spec:?}, expected lo:hi:step")))?;
    let grid = match nums.as_slice() {
        [single] => vec![*single],
        [lo, hi, step] if *step > 0.0 && lo <= hi => {
            let n = ((hi - lo) / step + 1e-9).floor() as usize;
            (0..=n).map(|i| ((lo + step * i as f64) * 1e6).round() / 1e6).collect()
        }
        _ => return Err(Error::Usage(format!("bad IoU grid {spec:?}, expected lo:hi:step"))),
    };
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Usage(format!("IoU thresholds in {spec:?} must lie in [0, 1]")));
    }
    Ok(grid)
}

/// AUC and accuracy of a binary scorer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub auc: f64,
    pub acc: f64,
}

/// Pairwise AUC `P(s⁺ > s⁻) + ½P(s⁺ = s⁻)` and accuracy at threshold 0.5,
/// where a score of exactly 0.5 counts as negative. `None` if either side
/// is empty.
pub fn binary_auc_acc(pos: &[f64], neg: &[f64]) -> Option<BinaryMetrics> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut sorted = neg.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Twice the pairwise score keeps the count integral.
    let mut twice = 0u64;
    for &s in pos {
        let below = sorted.partition_point(|&n| n < s) as u64;
        let not_above = sorted.partition_point(|&n| n <= s) as u64;
        twice += 2 * below + (not_above - below);
    }
    let auc = twice as f64 / (2.0 * pos.len() as f64 * neg.len() as f64);
    let correct = pos.iter().filter(|&&s| s > 0.5).count() + neg.iter().filter(|&&s| s <= 0.5).count();
    let acc = correct as f64 / (pos.len() + neg.len()) as f64;
    Some(BinaryMetrics { auc, acc })
}

/// Fixed-width table of per-threshold mAP and band averages, in percent.
pub fn format_table(result: &MapResult) -> String {
    let mut header = String::new();
    let mut row = String::new();
    for (t, m) in result.thresholds.iter().zip(&result.map) {
        header.push_str(&format!("{:>8}", format!("@{t:.2}")));
        row.push_str(&format!("{:>8.2}", 100.0 * m));
    }
    for (name, _, _) in BANDS {
        header.push_str(&format!("{:>13}", format!("AVG {name}")));
        row.push_str(&format!("{:>13.2}", 100.0 * result.bands[name]));
    }
    format!("{header}\n{row}\n")
}
