//! Invariant checks, one function per property, each driven by a seed. The
//! property suites run them under proptest and the acceptance target runs
//! them over fixed seed ranges.

use std::collections::BTreeSet;
use std::io::Write;

use ndarray::{Array1, Array2};
use ptal::datamodel::{
    decode_features, encode_features, fuse_scores, read_annotations, FeatureSequence, GroundTruthInstance, Point,
    Proposal, PseudoLabelSet, ScoreMaps,
};
use ptal::evaluation::{binary_auc_acc, detection_order, greedy_match, map_at, match_and_ap};
use ptal::inference::{generate_proposals, soft_nms, threshold_runs, InferConfig};
use ptal::network::{adapt, ac_predict, discriminate, embed, init_params, score_video, Discriminator, NetConfig, Task};
use ptal::supervision::{
    loss_ac, loss_act_with_background, loss_aou, loss_aru, loss_bkg, loss_contrastive, mine_pseudo_labels,
    window_is_valid, LossWeights,
};
use ptal::synthgen::{generate_dataset, sample_points, PointStrategy, SynthSpec};
use ptal::trainer::{evaluate_proxy, objective_and_gradients, StepPlan};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr) => {
        if !$cond {
            return Err(format!("{} (line {})", stringify!($cond), line!()));
        }
    };
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn sigmoid_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    normal_matrix(r, rows, cols).mapv(|v| 1.0 / (1.0 + (-3.0 * v).exp()))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

fn overlaps(p: &Proposal, g: &GroundTruthInstance) -> bool {
    g.y == p.class && g.video_id == p.video_id && g.s <= p.e && p.s <= g.e
}

// ---------------------------------------------------------------------------
// Data model

pub fn feature_roundtrip(seed: u64) -> Check {
    let mut r = rng(seed);
    let (t, d) = (r.random_range(1..=64), r.random_range(1..=32));
    let values = normal_matrix(&mut r, t, d).mapv(|v| v * 10f64.powi(r.random_range(-3..4)));
    let seq = FeatureSequence::new("v", values).unwrap();
    let back = decode_features(&encode_features(&seq), std::path::Path::new("mem")).map_err(|e| e.to_string())?;
    ensure!(back == seq.to_f32_precision(), "roundtrip changed values at T={t} D={d}");
    Ok(())
}

pub fn annotations_sorted_or_rejected(seed: u64) -> Check {
    let mut r = rng(seed);
    let t_len = r.random_range(1..30);
    let pts: Vec<Point> = (0..r.random_range(0..8))
        .map(|_| Point {
            t: r.random_range(0..t_len + 2),
            y: r.random_range(0..4),
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("points.jsonl");
    let line = serde_json::json!({"video_id": "v", "T": t_len, "points": pts});
    writeln!(std::fs::File::create(&path).unwrap(), "{line}").unwrap();

    let distinct = pts.iter().map(|p| p.t).collect::<BTreeSet<_>>().len() == pts.len();
    let in_range = pts.iter().all(|p| p.t < t_len && p.y < 3);
    match read_annotations(&path, 3) {
        Ok(sets) => {
            ensure!(distinct && in_range, "invalid points were accepted: {pts:?}");
            let got = sets[0].points();
            ensure!(got.windows(2).all(|w| w[0].t < w[1].t));
            ensure!(got.len() == pts.len());
        }
        Err(_) => ensure!(!(distinct && in_range), "valid points were rejected: {pts:?}"),
    }
    Ok(())
}

pub fn score_maps_fuse_exactly(seed: u64) -> Check {
    let mut r = rng(seed);
    let (t, c) = (r.random_range(1..20), r.random_range(1..5));
    let p = sigmoid_matrix(&mut r, t, c);
    let q = Array1::from_iter((0..t).map(|_| r.random::<f64>()));
    let maps = ScoreMaps::new(p.clone(), q.clone()).unwrap();
    for ((i, j), v) in maps.p_hat().indexed_iter() {
        ensure!(*v == p[[i, j]] * (1.0 - q[i]));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic data

fn small_spec(seed: u64, num_videos: usize) -> SynthSpec {
    SynthSpec {
        num_videos,
        seed,
        ..SynthSpec::default()
    }
}

pub fn points_inside_instances(seed: u64) -> Check {
    let kind = (seed % 3) as usize;
    let strategy = [PointStrategy::Uniform, PointStrategy::Center, PointStrategy::gaussian()][kind].clone();
    for v in generate_dataset(&small_spec(seed, 3)).unwrap() {
        let set = sample_points(v.features.video_id(), v.features.len(), 3, &v.ground_truth, &strategy, seed).unwrap();
        ensure!(set.len() == v.ground_truth.len());
        // Instances are disjoint and sorted, so points pair up in order.
        for (p, g) in set.points().iter().zip(&v.ground_truth) {
            ensure!(g.s <= p.t && p.t <= g.e, "point {} outside [{}, {}]", p.t, g.s, g.e);
            ensure!(p.y == g.y);
        }
    }
    Ok(())
}

pub fn vanishing_sigma_is_center(seed: u64) -> Check {
    let mut r = rng(seed);
    let s = r.random_range(0..40);
    let g = GroundTruthInstance {
        video_id: "v".into(),
        s,
        e: s + r.random_range(0..20),
        y: 0,
    };
    let tiny = PointStrategy::Gaussian { sigma_fraction: 1e-12 };
    let a = sample_points("v", 80, 1, std::slice::from_ref(&g), &tiny, seed).unwrap();
    let b = sample_points("v", 80, 1, std::slice::from_ref(&g), &PointStrategy::Center, seed).unwrap();
    ensure!(a == b);
    Ok(())
}

pub fn generation_is_deterministic(seed: u64) -> Check {
    let spec = small_spec(seed, 2);
    let bytes = |s: &SynthSpec| -> Vec<Vec<u8>> {
        generate_dataset(s).unwrap().iter().map(|v| encode_features(&v.features)).collect()
    };
    ensure!(bytes(&spec) == bytes(&spec));
    Ok(())
}

// ---------------------------------------------------------------------------
// Network

pub fn network_outputs_finite(seed: u64) -> Check {
    let params = init_params(&tiny_net(seed)).unwrap();
    let mut r = rng(seed);
    let t = r.random_range(1..16);
    let scale = r.random_range(0.0..50.0);
    let f = normal_matrix(&mut r, t, 8) * scale;
    let x = embed(&f, &params).unwrap();
    ensure!(x.iter().all(|v| v.is_finite()));
    let maps = score_video(&f, &params).unwrap();
    ensure!(maps.p_hat().iter().chain(maps.q().iter()).all(|v| v.is_finite()));
    let a = adapt(&x, Task::Ac, &params).unwrap();
    ensure!(a.iter().all(|v| v.is_finite()));
    let ctx = normal_matrix(&mut r, 2, 8) * scale;
    ensure!(ac_predict(&ctx, &ctx, &params).unwrap().iter().all(|v| v.is_finite()));
    let w = normal_matrix(&mut r, 5, 8) * scale;
    ensure!(discriminate(&w, Discriminator::Order, &params).unwrap().is_finite());
    Ok(())
}

pub fn fusion_monotone(seed: u64) -> Check {
    let mut r = rng(seed);
    let t = r.random_range(1..10);
    let bump: f64 = r.random();
    let p = sigmoid_matrix(&mut r, t, 3);
    let q = Array1::from_iter((0..t).map(|_| r.random::<f64>()));
    let q2 = q.mapv(|v| v + (1.0 - v) * bump);
    let (a, b) = (fuse_scores(&p, &q), fuse_scores(&p, &q2));
    ensure!(a.iter().zip(b.iter()).all(|(x, y)| y <= x));
    Ok(())
}

pub fn discriminators_see_order(seed: u64) -> Check {
    let params = init_params(&tiny_net(seed)).unwrap();
    let mut r = rng(seed);
    let found = (0..10).any(|_| {
        let w = normal_matrix(&mut r, 5, 8);
        let rev = Array2::from_shape_fn((5, 8), |(i, j)| w[[4 - i, j]]);
        [Discriminator::Order, Discriminator::Regularity]
            .iter()
            .all(|&d| discriminate(&w, d, &params).unwrap() != discriminate(&rev, d, &params).unwrap())
    });
    ensure!(found, "no window scored differently from its reverse");
    Ok(())
}

// ---------------------------------------------------------------------------
// Supervision

fn random_pseudo(r: &mut ChaCha8Rng, t_len: usize, c: usize) -> PseudoLabelSet {
    let mut idx: Vec<usize> = (0..t_len).collect();
    idx.shuffle(r);
    let na = r.random_range(1..=t_len.min(6));
    let nb = r.random_range(0..=(t_len - na).min(6));
    PseudoLabelSet {
        action_snippets: idx[..na].iter().map(|&t| (t, r.random_range(0..c))).collect(),
        background_snippets: idx[na..na + nb].to_vec(),
    }
}

pub fn mined_sets_disjoint(seed: u64) -> Check {
    let (points, q) = mining_case(seed);
    let m = mine_pseudo_labels(&points, &q);
    let act: BTreeSet<usize> = m.action_snippets.iter().map(|a| a.0).collect();
    ensure!(m.background_snippets.iter().all(|t| !act.contains(t)));
    ensure!(points.iter().all(|p| m.action_snippets.contains(&(p.t, p.y))));
    Ok(())
}

pub fn losses_nonnegative_and_order_free(seed: u64) -> Check {
    let mut r = rng(seed);
    let (t_len, c) = (r.random_range(2..20), 3);
    let mut p = sigmoid_matrix(&mut r, t_len, c);
    let mut q = Array1::from_iter((0..t_len).map(|_| r.random::<f64>()));
    // Saturated entries exercise the clamping.
    p[[0, 0]] = 1.0;
    q[t_len - 1] = 0.0;
    let x = normal_matrix(&mut r, t_len, 4);
    let norms = x.map_axis(ndarray::Axis(1), |row| row.dot(&row).sqrt()).insert_axis(ndarray::Axis(1));
    let x = &x / &norms;
    let pseudo = random_pseudo(&mut r, t_len, c);
    let mut shuffled = pseudo.clone();
    shuffled.action_snippets.shuffle(&mut r);
    shuffled.background_snippets.shuffle(&mut r);
    let w = LossWeights::default();

    let pairs = [
        ("act", loss_act_with_background(&p, &q, &pseudo, &w), loss_act_with_background(&p, &q, &shuffled, &w)),
        ("bkg", loss_bkg(&q, &pseudo, &w), loss_bkg(&q, &shuffled, &w)),
        ("contra", loss_contrastive(&x, &pseudo, &w), loss_contrastive(&x, &shuffled, &w)),
    ];
    for (name, a, b) in pairs {
        ensure!(a.is_finite() && a >= 0.0, "{name} loss {a}");
        ensure!(close(a, b), "{name} loss changed under reordering: {a} vs {b}");
    }

    let m = r.random_range(1..6);
    let row = |r: &mut ChaCha8Rng| normal_matrix(r, 1, 4).row(0).to_owned();
    let preds: Vec<Array1<f64>> = (0..m).map(|_| row(&mut r)).collect();
    let targets: Vec<Array1<f64>> = (0..m).map(|_| row(&mut r)).collect();
    let fwd: Vec<f64> = (0..m).map(|_| r.random()).collect();
    let rev: Vec<f64> = (0..m).map(|_| r.random()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut r);
    let perm = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let perm_a = |v: &[Array1<f64>]| order.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();

    let ac = loss_ac(&preds, &targets);
    ensure!(ac.is_finite() && ac >= 0.0);
    ensure!(close(ac, loss_ac(&perm_a(&preds), &perm_a(&targets))));
    for f in [loss_aou, loss_aru] {
        let v = f(&fwd, &rev);
        ensure!(v.is_finite() && v >= 0.0);
        ensure!(close(v, f(&perm(&fwd), &perm(&rev))));
    }
    ensure!(loss_aou(&[0.0, 1.0], &[1.0, 0.0]).is_finite());
    Ok(())
}

pub fn completion_loss_scale_free(seed: u64) -> Check {
    let mut r = rng(seed);
    let (a, b) = (r.random_range(0.01..100.0), r.random_range(0.01..100.0));
    let row = |r: &mut ChaCha8Rng| normal_matrix(r, 1, 5).row(0).to_owned();
    let preds: Vec<Array1<f64>> = (0..3).map(|_| row(&mut r)).collect();
    let targets: Vec<Array1<f64>> = (0..3).map(|_| row(&mut r)).collect();
    let scaled_p: Vec<_> = preds.iter().map(|v| v * a).collect();
    let scaled_t: Vec<_> = targets.iter().map(|v| v * b).collect();
    ensure!((loss_ac(&preds, &targets) - loss_ac(&scaled_p, &scaled_t)).abs() < 1e-12);
    Ok(())
}

pub fn boundary_windows_counted(seed: u64) -> Check {
    let mut r = rng(seed);
    let half = r.random_range(1..3);
    let t_len = r.random_range(1..16);
    let k = r.random_range(1..=t_len.min(4));
    let mut ts = rand::seq::index::sample(&mut r, t_len, k).into_vec();
    ts.sort();
    let points: Vec<(usize, usize)> = ts.iter().map(|&t| (t, r.random_range(0..2))).collect();
    let v = video("v", normal_matrix(&mut r, t_len, 8), &points, 2);
    let params = init_params(&NetConfig {
        half_window: half,
        ..tiny_net(seed)
    })
    .unwrap();
    let plan = StepPlan::draw(&[&v], half, &mut r);
    let (total, _, _, obj) = objective_and_gradients(&params, &[&v], &plan, &LossWeights::default());
    let valid = ts.iter().filter(|&&t| window_is_valid(t_len, t, half)).count();
    ensure!(total.is_finite());
    ensure!(obj.windows == valid, "{} windows used, {valid} valid", obj.windows);
    ensure!(obj.windows + obj.skipped_windows == k);
    Ok(())
}

// ---------------------------------------------------------------------------
// Trainer

pub fn cosine_pair_sums_to_one(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut videos = Vec::new();
    for i in 0..3 {
        let t_len = r.random_range(8..20);
        let s = r.random_range(0..t_len - 6);
        let mut v = video(&format!("v{i}"), normal_matrix(&mut r, t_len, 8), &[(s + 2, 0)], 2);
        v.ground_truth = vec![GroundTruthInstance {
            video_id: v.id().to_string(),
            s,
            e: s + 5,
            y: 0,
        }];
        videos.push(v);
    }
    let ds = ptal::datamodel::Dataset {
        num_classes: 2,
        videos,
    };
    let params = init_params(&tiny_net(seed)).unwrap();
    let m = evaluate_proxy(&params, &ds, &PointStrategy::Uniform, 2, seed).map_err(|e| e.to_string())?;
    if let (Some(s), Some(d)) = (m.ac_cos_sim, m.ac_cos_dist) {
        ensure!(s + d == 1.0, "{s} + {d} != 1");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Inference

pub fn soft_nms_only_decays(seed: u64) -> Check {
    let mut r = rng(seed ^ 0x5EED);
    let sigma = r.random_range(0.01..2.0);
    let top_k = r.random_range(1..20);
    let props = nms_case(seed);
    for out in soft_nms(&props, sigma, 0.001, top_k) {
        let src = props
            .iter()
            .filter(|p| (p.s, p.e, p.class) == (out.s, out.e, out.class))
            .map(|p| p.confidence)
            .fold(f64::NEG_INFINITY, f64::max);
        ensure!(src.is_finite(), "output segment not among inputs");
        ensure!(out.confidence <= src);
    }
    Ok(())
}

pub fn proposals_are_maximal_runs(seed: u64) -> Check {
    let mut r = rng(seed);
    let t_len = r.random_range(1..40);
    let p_hat = sigmoid_matrix(&mut r, t_len, 2);
    let cfg = InferConfig::default();
    for c in 0..2 {
        let col: Vec<f64> = p_hat.column(c).to_vec();
        for &theta in &cfg.thresholds {
            let runs = threshold_runs(col.iter().copied(), theta);
            // Independent scan: a run starts where the mask rises and ends where it falls.
            let mask: Vec<bool> = col.iter().map(|&v| v >= theta).collect();
            let mut expect = Vec::new();
            for t in 0..t_len {
                if mask[t] && (t == 0 || !mask[t - 1]) {
                    let mut e = t;
                    while e + 1 < t_len && mask[e + 1] {
                        e += 1;
                    }
                    expect.push((t, e));
                }
            }
            ensure!(runs == expect, "runs {runs:?} vs scan {expect:?}");
            ensure!(runs.windows(2).all(|w| w[1].0 > w[0].1 + 1));
        }
        for pair in cfg.thresholds.windows(2) {
            let low = threshold_runs(col.iter().copied(), pair[0]);
            for (s, e) in threshold_runs(col.iter().copied(), pair[1]) {
                let nested = low.iter().any(|(ls, le)| *ls <= s && e <= *le);
                ensure!(nested, "run ({s},{e}) at a higher threshold is not nested");
            }
        }
    }
    let props = generate_proposals("v", &p_hat, &cfg);
    let keys: BTreeSet<_> = props.iter().map(|p| (p.class, p.s, p.e)).collect();
    ensure!(keys.len() == props.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation

fn threshold_of(seed: u64) -> f64 {
    (seed % 8) as f64 / 10.0
}

pub fn ap_is_ranking_statistic(seed: u64) -> Check {
    let (props, gt) = detection_case(seed);
    let thr = threshold_of(seed);
    let squashed: Vec<_> = props
        .iter()
        .map(|p| Proposal {
            confidence: (3.0 * p.confidence).exp() / 100.0,
            ..p.clone()
        })
        .collect();
    for class in 0..2 {
        let ap = match_and_ap(&props, &gt, thr, class).unwrap();
        ensure!((0.0..=1.0).contains(&ap));
        ensure!(ap == match_and_ap(&squashed, &gt, thr, class).unwrap());
    }
    Ok(())
}

pub fn duplicates_never_raise_ap(seed: u64) -> Check {
    let (props, gt) = detection_case(seed);
    let thr = threshold_of(seed);
    // A copy of a proposal that overlaps two instances may match the second
    // one, so only proposals touching at most one are copied.
    let single: Vec<_> = props
        .iter()
        .filter(|p| gt.iter().filter(|g| overlaps(p, g)).count() <= 1)
        .collect();
    if single.is_empty() {
        return Ok(());
    }
    let mut r = rng(seed ^ 0xD0B1E);
    let mut dup = props.clone();
    for _ in 0..r.random_range(1..4) {
        dup.push(single[r.random_range(0..single.len())].clone());
    }
    for class in 0..2 {
        let a = match_and_ap(&props, &gt, thr, class).unwrap();
        let b = match_and_ap(&dup, &gt, thr, class).unwrap();
        ensure!(b <= a + 1e-12, "AP rose from {a} to {b}");
    }
    Ok(())
}

pub fn zero_threshold_counts_overlaps(seed: u64) -> Check {
    let (props, gt) = detection_case(seed);
    for class in 0..2 {
        let (flags, n) = greedy_match(&props, &gt, 0.0, class);
        let mut ranked: Vec<_> = props.iter().filter(|p| p.class == class).collect();
        ranked.sort_by(|a, b| detection_order(a, b));
        for (p, hit) in ranked.iter().zip(&flags) {
            ensure!(!hit || gt.iter().any(|g| overlaps(p, g)));
        }
        ensure!(flags.iter().filter(|f| **f).count() <= n);
    }
    ensure!((map_at(&props, &gt, 0.0).unwrap() - map_oracle(&props, &gt, 0.0)).abs() < 1e-12);
    Ok(())
}

pub fn auc_bounds_and_symmetry(seed: u64) -> Check {
    let (pos, neg) = score_case(seed);
    let a = binary_auc_acc(&pos, &neg).unwrap();
    let b = binary_auc_acc(&neg, &pos).unwrap();
    ensure!((0.0..=1.0).contains(&a.auc) && (0.0..=1.0).contains(&a.acc));
    ensure!((a.auc + b.auc - 1.0).abs() < 1e-12);
    Ok(())
}

/// Every check with its case count.
pub fn all() -> Vec<(&'static str, fn(u64) -> Check, u64)> {
    vec![
        ("feature_roundtrip", feature_roundtrip, 100),
        ("annotations_sorted_or_rejected", annotations_sorted_or_rejected, 100),
        ("score_maps_fuse_exactly", score_maps_fuse_exactly, 100),
        ("points_inside_instances", points_inside_instances, 100),
        ("vanishing_sigma_is_center", vanishing_sigma_is_center, 100),
        ("generation_is_deterministic", generation_is_deterministic, 100),
        ("network_outputs_finite", network_outputs_finite, 100),
        ("fusion_monotone", fusion_monotone, 100),
        ("discriminators_see_order", discriminators_see_order, 100),
        ("mined_sets_disjoint", mined_sets_disjoint, 200),
        ("losses_nonnegative_and_order_free", losses_nonnegative_and_order_free, 200),
        ("completion_loss_scale_free", completion_loss_scale_free, 200),
        ("boundary_windows_counted", boundary_windows_counted, 100),
        ("cosine_pair_sums_to_one", cosine_pair_sums_to_one, 100),
        ("soft_nms_only_decays", soft_nms_only_decays, 200),
        ("proposals_are_maximal_runs", proposals_are_maximal_runs, 200),
        ("ap_is_ranking_statistic", ap_is_ranking_statistic, 200),
        ("duplicates_never_raise_ap", duplicates_never_raise_ap, 200),
        ("zero_threshold_counts_overlaps", zero_threshold_counts_overlaps, 200),
        ("auc_bounds_and_symmetry", auc_bounds_and_symmetry, 200),
    ]
}
