//! Case generators and brute-force oracles shared by the property suites and
//! the acceptance target. Generators take a seed so proptest can drive them.

#![allow(dead_code)]

pub mod checks;
pub mod grad;

use ndarray::Array2;
use ptal::datamodel::{FeatureSequence, GroundTruthInstance, Point, PointAnnotationSet, Proposal, PseudoLabelSet, Video};
use ptal::gradcheck::{central_difference, relative_error};
use ptal::network::{init_params, NetConfig};
use ptal::supervision::{non_reversed_permutation, LossWeights};
use ptal::trainer::{objective_and_gradients, StepPlan};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

// ---------------------------------------------------------------------------
// Mining

/// Background scores drawn from a palette that hits both thresholds, exact
/// ties and values between them.
pub fn mining_case(seed: u64) -> (Vec<Point>, Vec<f64>) {
    let mut r = rng(seed);
    let t_len = r.random_range(1..=50);
    let palette = [0.0, 0.05, 0.0999, 0.1, 0.5, 0.95, 0.96, 1.0];
    let q: Vec<f64> = (0..t_len)
        .map(|_| {
            if r.random_bool(0.7) {
                palette[r.random_range(0..palette.len())]
            } else {
                r.random::<f64>()
            }
        })
        .collect();
    let k = r.random_range(0..=t_len.min(6));
    let mut ts = sample(&mut r, t_len, k).into_vec();
    ts.sort();
    let points = ts.into_iter().map(|t| Point { t, y: r.random_range(0..3) }).collect();
    (points, q)
}

/// Decides each snippet independently from the definitions.
pub fn mining_oracle(points: &[Point], q: &[f64]) -> PseudoLabelSet {
    let t_len = q.len();
    let claim = |t: usize| -> Option<usize> {
        for (k, p) in points.iter().enumerate() {
            let lo = if k == 0 { 0 } else { (points[k - 1].t + p.t) / 2 + 1 };
            let hi = if k + 1 == points.len() { t_len - 1 } else { (p.t + points[k + 1].t) / 2 };
            if t < lo || t > hi {
                continue;
            }
            let between: Vec<usize> = if t < p.t { (t..p.t).collect() } else { (p.t + 1..=t).collect() };
            if between.iter().all(|&u| q[u] < 0.1) {
                return Some(p.y);
            }
        }
        None
    };
    let mut action = Vec::new();
    let mut background = Vec::new();
    for t in 0..t_len {
        if let Some(y) = claim(t) {
            action.push((t, y));
            continue;
        }
        let is_point = points.iter().any(|p| p.t == t);
        let gap_max = points.windows(2).any(|w| {
            let gap: Vec<usize> = (w[0].t + 1..w[1].t).collect();
            let best = gap.iter().copied().fold(None, |b: Option<usize>, u| match b {
                Some(b) if q[b] >= q[u] => Some(b),
                _ => Some(u),
            });
            best == Some(t)
        });
        if (!is_point && q[t] > 0.95) || gap_max {
            background.push(t);
        }
    }
    PseudoLabelSet {
        action_snippets: action,
        background_snippets: background,
    }
}

// ---------------------------------------------------------------------------
// Detection

pub fn proposal(video: &str, s: usize, e: usize, class: usize, confidence: f64) -> Proposal {
    Proposal {
        video_id: video.into(),
        s,
        e,
        class,
        confidence,
    }
}

fn segment(r: &mut ChaCha8Rng, t_len: usize) -> (usize, usize) {
    let s = r.random_range(0..t_len);
    let e = r.random_range(s..(s + 6).min(t_len));
    (s, e)
}

/// Small two-video, two-class instances; confidences come from a coarse grid
/// so ties occur.
pub fn detection_case(seed: u64) -> (Vec<Proposal>, Vec<GroundTruthInstance>) {
    let mut r = rng(seed);
    let t_len = 20;
    let videos = ["a", "b"];
    let mut gt = Vec::new();
    for class in 0..2 {
        for _ in 0..r.random_range(1..=3) {
            let (s, e) = segment(&mut r, t_len);
            gt.push(GroundTruthInstance {
                video_id: videos[r.random_range(0..2)].into(),
                s,
                e,
                y: class,
            });
        }
    }
    let props = (0..r.random_range(0..=10))
        .map(|_| {
            let (s, e) = segment(&mut r, t_len);
            let conf = r.random_range(1..=8) as f64 / 8.0;
            proposal(videos[r.random_range(0..2)], s, e, r.random_range(0..2), conf)
        })
        .collect();
    (props, gt)
}

fn overlap_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = (a.1.min(b.1) + 1).saturating_sub(a.0.max(b.0)) as f64;
    let union = (a.1 + 1 - a.0 + b.1 + 1 - b.0) as f64 - inter;
    inter / union
}

/// AP from the precision-recall list: interpolated precision is read off at
/// each of the `G` recall steps.
pub fn ap_oracle(props: &[Proposal], gt: &[GroundTruthInstance], thr: f64, class: usize) -> f64 {
    let mut ranked: Vec<&Proposal> = props.iter().filter(|p| p.class == class).collect();
    ranked.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.video_id.cmp(&b.video_id))
            .then(a.s.cmp(&b.s))
            .then(a.e.cmp(&b.e))
    });
    let targets: Vec<&GroundTruthInstance> = gt.iter().filter(|g| g.y == class).collect();
    let g = targets.len();
    let mut used = vec![false; g];
    let mut pr = Vec::new();
    let mut tp = 0;
    for (k, p) in ranked.iter().enumerate() {
        let mut best: Option<usize> = None;
        for j in 0..g {
            if used[j] || targets[j].video_id != p.video_id {
                continue;
            }
            let iou = overlap_iou((p.s, p.e), (targets[j].s, targets[j].e));
            if best.is_none_or(|b| iou > overlap_iou((p.s, p.e), (targets[b].s, targets[b].e))) {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            let iou = overlap_iou((p.s, p.e), (targets[j].s, targets[j].e));
            if iou > 0.0 && iou >= thr {
                used[j] = true;
                tp += 1;
            }
        }
        pr.push((tp as f64 / (k + 1) as f64, tp as f64 / g as f64));
    }
    (1..=g)
        .map(|step| {
            let level = step as f64 / g as f64;
            pr.iter()
                .filter(|(_, rec)| *rec >= level - 1e-12)
                .map(|(prec, _)| *prec)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / g as f64
}

pub fn map_oracle(props: &[Proposal], gt: &[GroundTruthInstance], thr: f64) -> f64 {
    let mut classes: Vec<usize> = gt.iter().map(|g| g.y).collect();
    classes.sort();
    classes.dedup();
    classes.iter().map(|&c| ap_oracle(props, gt, thr, c)).sum::<f64>() / classes.len() as f64
}

/// Single-video proposals with confidences in `[0.01, 1]` over up to three classes.
pub fn nms_case(seed: u64) -> Vec<Proposal> {
    let mut r = rng(seed);
    (0..r.random_range(0..=15))
        .map(|_| {
            let (s, e) = segment(&mut r, 30);
            let conf = if r.random_bool(0.3) {
                r.random_range(1..=4) as f64 / 4.0
            } else {
                r.random_range(0.01..1.0)
            };
            proposal("v", s, e, r.random_range(0..3), conf)
        })
        .collect()
}

/// Greedy hard NMS: keep a proposal unless it overlaps a kept one of its class.
pub fn hard_nms_oracle(props: &[Proposal], min_score: f64, top_k: usize) -> Vec<Proposal> {
    let mut sorted: Vec<Proposal> = props.iter().filter(|p| p.confidence >= min_score).cloned().collect();
    sorted.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then((a.s, a.e, a.class).cmp(&(b.s, b.e, b.class)))
    });
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        if kept.len() == top_k {
            break;
        }
        let clash = kept.iter().any(|k| k.class == p.class && k.s <= p.e && p.s <= k.e);
        if !clash {
            kept.push(p);
        }
    }
    kept
}

// ---------------------------------------------------------------------------
// Binary scores

/// Positive and negative score lists with frequent ties.
pub fn score_case(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let mut draw = |n: usize, shift: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                if r.random_bool(0.5) {
                    r.random_range(0..=10) as f64 / 10.0
                } else {
                    (r.random::<f64>() + shift).min(1.0)
                }
            })
            .collect()
    };
    let np = 1 + (seed % 17) as usize;
    let nn = 1 + (seed / 17 % 13) as usize;
    (draw(np, 0.2), draw(nn, 0.0))
}

/// Area under the ROC polyline, sweeping thresholds over distinct scores.
pub fn trapezoid_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    all.sort_by(|a, b| b.partial_cmp(a).unwrap());
    all.dedup();
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut tpr, mut fpr, mut area) = (0.0, 0.0, 0.0);
    for v in all {
        let ntpr = tpr + pos.iter().filter(|&&s| s == v).count() as f64 / np;
        let nfpr = fpr + neg.iter().filter(|&&s| s == v).count() as f64 / nn;
        area += (nfpr - fpr) * (tpr + ntpr) / 2.0;
        tpr = ntpr;
        fpr = nfpr;
    }
    area
}

// ---------------------------------------------------------------------------
// End-to-end gradient check

pub fn tiny_net(seed: u64) -> NetConfig {
    NetConfig {
        input_dim: 8,
        embed_dim: 8,
        adapter_dim: 8,
        disc_hidden: 8,
        ff_dim: 8,
        heads: 2,
        encoder_layers: 2,
        kernel: 3,
        half_window: 2,
        num_classes: 2,
        seed,
    }
}

pub fn video(id: &str, features: Array2<f64>, points: &[(usize, usize)], num_classes: usize) -> Video {
    let t_len = features.nrows();
    let pts = points.iter().map(|&(t, y)| Point { t, y }).collect();
    Video {
        features: FeatureSequence::new(id, features).unwrap(),
        points: Some(PointAnnotationSet::new(id, t_len, pts, num_classes).unwrap()),
        ground_truth: Vec::new(),
    }
}

pub struct GradReport {
    /// Largest per-tensor relative error among tensors with a meaningful gradient.
    pub worst_rel: f64,
    pub worst_name: String,
    pub tensors: usize,
}

/// Gradient of the full objective against central differences on every
/// parameter tensor, with pseudo-labels and shuffles fixed. Tensors whose
/// gradients are both below `1e-8` in norm are compared by absolute error.
pub fn end_to_end_gradcheck(draw: u64) -> GradReport {
    let mut r = rng(1000 + draw);
    let params = init_params(&tiny_net(draw)).unwrap();
    let v1 = video("a", normal_matrix(&mut r, 12, 8), &[(3, 0), (8, 1)], 2);
    let v2 = video("b", normal_matrix(&mut r, 10, 8), &[(5, 1)], 2);
    let batch = [&v1, &v2];
    let labels = vec![
        PseudoLabelSet {
            action_snippets: vec![(2, 0), (3, 0), (4, 0), (7, 1), (8, 1)],
            background_snippets: vec![0, 5, 6, 11],
        },
        PseudoLabelSet {
            action_snippets: vec![(4, 1), (5, 1), (6, 1)],
            background_snippets: vec![0, 1, 9],
        },
    ];
    let shuffles = vec![
        vec![non_reversed_permutation(5, &mut r).unwrap(), non_reversed_permutation(5, &mut r).unwrap()],
        vec![non_reversed_permutation(5, &mut r).unwrap()],
    ];
    let plan = StepPlan {
        labels: Some(labels),
        shuffles,
    };
    let w = LossWeights::default();
    let (_, _, grads, _) = objective_and_gradients(&params, &batch, &plan, &w);

    let mut worst_rel = 0.0f64;
    let mut worst_name = String::new();
    for i in 0..params.len() {
        let f = |x: &Array2<f64>| {
            let mut p = params.clone();
            *p.tensor_mut(i) = x.clone();
            objective_and_gradients(&p, &batch, &plan, &w).0
        };
        let numeric = central_difference(f, params.tensor(i), 1e-5);
        let analytic = grads[i].clone().unwrap_or_else(|| Array2::zeros(numeric.dim()));
        let norm = |a: &Array2<f64>| a.mapv(|v| v * v).sum().sqrt();
        let err = if norm(&analytic).max(norm(&numeric)) < 1e-8 {
            norm(&(&analytic - &numeric))
        } else {
            relative_error(&analytic, &numeric)
        };
        if err > worst_rel {
            worst_rel = err;
            worst_name = params.name(i).to_string();
        }
    }
    GradReport {
        worst_rel,
        worst_name,
        tensors: params.len(),
    }
}
