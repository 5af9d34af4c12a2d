//! Proposal generation from fused scores and class-wise Gaussian Soft-NMS.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Proposal};
use crate::error::{Error, Result};
use crate::network::{score_video, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub thresholds: Vec<f64>,
    pub softnms_sigma: f64,
    pub softnms_min_score: f64,
    pub top_k: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            thresholds: (0..10).map(|i| 0.1 + 0.05 * i as f64).collect(),
            softnms_sigma: 0.3,
            softnms_min_score: 0.001,
            top_k: 200,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Config("at least one proposal threshold is required".into()));
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config("proposal thresholds must lie in (0, 1)".into()));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("proposal thresholds must be strictly ascending".into()));
        }
        if !(self.softnms_sigma > 0.0) {
            return Err(Error::Config("soft-NMS sigma must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        Ok(())
    }
}

/// Maximal runs `[s, e]` of `column[t] >= threshold`.
pub fn threshold_runs(column: impl IntoIterator<Item = f64>, threshold: f64) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    let mut last = 0;
    for (t, v) in column.into_iter().enumerate() {
        last = t;
        match (v >= threshold, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                runs.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, last));
    }
    runs
}

/// Multi-threshold proposals for every class, scored by mean `P̂` over the
/// segment; segments found at several thresholds are kept once.
pub fn generate_proposals(video_id: &str, p_hat: &Array2<f64>, config: &InferConfig) -> Vec<Proposal> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (c, column) in p_hat.columns().into_iter().enumerate() {
        for &theta in &config.thresholds {
            for (s, e) in threshold_runs(column.iter().copied(), theta) {
                if !seen.insert((c, s, e)) {
                    continue;
                }
                let confidence = column.slice(ndarray::s![s..=e]).mean().expect("nonempty run");
                out.push(Proposal {
                    video_id: video_id.to_string(),
                    s,
                    e,
                    class: c,
                    confidence,
                });
            }
        }
    }
    out
}

/// IoU of inclusive snippet segments.
pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if lo > hi {
        return 0.0;
    }
    let inter = (hi - lo + 1) as f64;
    let union = ((a.1 - a.0 + 1) + (b.1 - b.0 + 1)) as f64 - inter;
    inter / union
}

/// Higher confidence first, then `(s, e, class)` ascending.
fn rank(a: &Proposal, b: &Proposal) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| (a.s, a.e, a.class).cmp(&(b.s, b.e, b.class)))
}

/// Gaussian Soft-NMS within each class: the best remaining proposal is kept
/// and every same-class rival decays by `exp(−IoU²/sigma)`; proposals below
/// `min_score` are dropped and at most `top_k` are kept.
pub fn soft_nms(proposals: &[Proposal], sigma: f64, min_score: f64, top_k: usize) -> Vec<Proposal> {
    let mut remaining: Vec<Proposal> = proposals.iter().filter(|p| p.confidence >= min_score).cloned().collect();
    let mut kept = Vec::new();
    while kept.len() < top_k && !remaining.is_empty() {
        let best = (0..remaining.len())
            .min_by(|&i, &j| rank(&remaining[i], &remaining[j]))
            .expect("nonempty");
        let p = remaining.swap_remove(best);
        for q in remaining.iter_mut().filter(|q| q.class == p.class) {
            let iou = temporal_iou((p.s, p.e), (q.s, q.e));
            q.confidence *= (-iou * iou / sigma).exp();
        }
        remaining.retain(|q| q.confidence >= min_score);
        kept.push(p);
    }
    kept.sort_by(rank);
    kept
}

pub fn infer_video(video_id: &str, features: &Array2<f64>, params: &ModelParams, config: &InferConfig) -> Result<Vec<Proposal>> {
    let maps = score_video(features, params)?;
    let props = generate_proposals(video_id, maps.p_hat(), config);
    Ok(soft_nms(&props, config.softnms_sigma, config.softnms_min_score, config.top_k))
}

/// Proposals for every video, in dataset order.
pub fn infer_dataset(dataset: &Dataset, params: &ModelParams, config: &InferConfig) -> Result<Vec<(String, Vec<Proposal>)>> {
    config.validate()?;
    dataset
        .videos
        .iter()
        .map(|v| Ok((v.id().to_string(), infer_video(v.id(), v.features.values(), params, config)?)))
        .collect()
}
