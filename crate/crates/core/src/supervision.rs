//! Pseudo-label mining, temporal windows and the loss terms.
//!
//! Losses are built on a [`Tape`] from row-gathered inputs so one
//! implementation serves both training (batched across videos) and the
//! value-level functions below.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datamodel::{Point, PseudoLabelSet};

/// Snippets next to a point with `Q` below this are pseudo-action.
pub const ACTION_THRESHOLD: f64 = 0.1;
/// Snippets between points with `Q` above this are pseudo-background.
pub const BACKGROUND_THRESHOLD: f64 = 0.95;
/// Probability clamp for every logarithm.
pub const PROB_EPS: f64 = 1e-7;
/// Norm clamp for cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

/// How the two fractions of the prototype contrastive loss are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveForm {
    /// `−log f₁ − log f₂`.
    SeparateLogs,
    /// `−log(f₁ + f₂)`.
    JointLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub act: f64,
    pub bkg: f64,
    pub contra: f64,
    pub ac: f64,
    pub aou: f64,
    pub aru: f64,
    pub temperature: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub contrastive_form: ContrastiveForm,
    /// Supervise the background channel with target 0 on pseudo-action
    /// snippets as part of the action loss.
    pub act_background_negative: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            act: 0.5,
            bkg: 1.0,
            contra: 1.0,
            ac: 0.5,
            aou: 0.5,
            aru: 0.5,
            temperature: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.5,
            contrastive_form: ContrastiveForm::SeparateLogs,
            act_background_negative: true,
        }
    }
}

impl LossWeights {
    /// Same weights with every auxiliary task set to `lambda`.
    pub fn with_shared_aux(&self, lambda: f64) -> Self {
        Self {
            ac: lambda,
            aou: lambda,
            aru: lambda,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let lambdas = [self.act, self.bkg, self.contra, self.ac, self.aou, self.aru];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(crate::Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(crate::Error::Config("temperature must be positive".into()));
        }
        if !(self.focal_gamma >= 0.0) || !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return Err(crate::Error::Config("focal gamma must be >= 0 and alpha in (0, 1]".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pseudo-label mining

/// Mines pseudo-action and pseudo-background snippets from sorted points and
/// background scores `q`.
///
/// Each point expands outward while `q < 0.1`, never past the midpoint
/// toward a neighbouring point (the left point keeps `⌊(a+b)/2⌋`). Background
/// is every non-action snippet outside the points with `q > 0.95`, plus the
/// `q`-argmax of each gap between consecutive points (lowest index on ties).
pub fn mine_pseudo_labels(points: &[Point], q: &[f64]) -> PseudoLabelSet {
    let t_len = q.len();
    let mut action: Vec<(usize, usize)> = Vec::new();
    let mut is_action = vec![false; t_len];
    for (k, p) in points.iter().enumerate() {
        let lo = if k == 0 {
            0
        } else {
            (points[k - 1].t + p.t) / 2 + 1
        };
        let hi = match points.get(k + 1) {
            Some(next) => (p.t + next.t) / 2,
            None => t_len - 1,
        };
        let mut start = p.t;
        while start > lo && q[start - 1] < ACTION_THRESHOLD {
            start -= 1;
        }
        let mut end = p.t;
        while end < hi && q[end + 1] < ACTION_THRESHOLD {
            end += 1;
        }
        for t in start..=end {
            action.push((t, p.y));
            is_action[t] = true;
        }
    }

    let mut background: BTreeSet<usize> = BTreeSet::new();
    for (t, &qt) in q.iter().enumerate() {
        let at_point = points.binary_search_by_key(&t, |p| p.t).is_ok();
        if !at_point && qt > BACKGROUND_THRESHOLD {
            background.insert(t);
        }
    }
    for w in points.windows(2) {
        let gap = w[0].t + 1..w[1].t;
        if gap.is_empty() {
            continue;
        }
        let mut best = gap.start;
        for t in gap {
            if q[t] > q[best] {
                best = t;
            }
        }
        background.insert(best);
    }
    let background_snippets = background.into_iter().filter(|&t| !is_action[t]).collect();
    PseudoLabelSet {
        action_snippets: action,
        background_snippets,
    }
}

// ---------------------------------------------------------------------------
// Temporal windows

/// The labelled snippet and `half` neighbours on each side.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalWindow {
    pub center: usize,
    pub half: usize,
    /// Source indices in window order; empty when invalid.
    pub indices: Vec<usize>,
    /// `(2·half+1)×D` rows matching `indices`; empty when invalid.
    pub features: Array2<f64>,
    pub valid: bool,
}

impl TemporalWindow {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Features flattened in window order.
    pub fn flattened(&self) -> Vec<f64> {
        self.features.iter().copied().collect()
    }

    fn permuted(&self, order: &[usize]) -> Self {
        let indices: Vec<usize> = order.iter().map(|&k| self.indices[k]).collect();
        let mut features = Array2::zeros(self.features.dim());
        for (dst, &k) in order.iter().enumerate() {
            features.row_mut(dst).assign(&self.features.row(k));
        }
        Self {
            center: self.center,
            half: self.half,
            indices,
            features,
            valid: self.valid,
        }
    }
}

pub fn window_is_valid(num_snippets: usize, center: usize, half: usize) -> bool {
    center >= half && center + half < num_snippets
}

pub fn build_window(x: &Array2<f64>, center: usize, half: usize) -> TemporalWindow {
    let valid = window_is_valid(x.nrows(), center, half);
    if !valid {
        return TemporalWindow {
            center,
            half,
            indices: Vec::new(),
            features: Array2::zeros((0, x.ncols())),
            valid,
        };
    }
    let indices: Vec<usize> = (center - half..=center + half).collect();
    let mut features = Array2::zeros((indices.len(), x.ncols()));
    for (row, &i) in indices.iter().enumerate() {
        features.row_mut(row).assign(&x.row(i));
    }
    TemporalWindow {
        center,
        half,
        indices,
        features,
        valid,
    }
}

pub fn reverse_window(w: &TemporalWindow) -> TemporalWindow {
    let order: Vec<usize> = (0..w.len()).rev().collect();
    w.permuted(&order)
}

/// A uniformly drawn permutation of `0..n` that is neither the identity nor
/// the full reversal; `None` when `n < 3` (no such permutation exists).
pub fn non_reversed_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Option<Vec<usize>> {
    if n < 3 {
        return None;
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        let identity = perm.iter().enumerate().all(|(i, &p)| p == i);
        let reversed = perm.iter().enumerate().all(|(i, &p)| p == n - 1 - i);
        if !identity && !reversed {
            return Some(perm);
        }
    }
}

pub fn shuffle_window_non_reversed<R: Rng + ?Sized>(w: &TemporalWindow, rng: &mut R) -> Option<TemporalWindow> {
    non_reversed_permutation(w.len(), rng).map(|order| w.permuted(&order))
}

/// Action-completion context indices: `[i−t … i−1]` then `[i+t … i+1]`.
pub fn ac_context_indices(center: usize, half: usize) -> Vec<usize> {
    let left = center - half..center;
    let right = (center + 1..=center + half).rev();
    left.chain(right).collect()
}

// ---------------------------------------------------------------------------
// Loss terms on the tape

fn one_hot(labels: &[usize], width: usize) -> Array2<f64> {
    let mut m = Array2::zeros((labels.len(), width));
    for (i, &c) in labels.iter().enumerate() {
        m[[i, c]] = 1.0;
    }
    m
}

/// Summed focal loss of probabilities `probs` against 0/1 `targets`:
/// `−α(1−p)^γ log p` where the target is 1 and `−(1−α)p^γ log(1−p)` where it
/// is 0.
pub fn focal_sum(tape: &mut Tape, probs: Var, targets: &Array2<f64>, alpha: f64, gamma: f64) -> Var {
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let one_minus_p = tape.one_minus(p);
    let log_p = tape.ln(p);
    let log_one_minus_p = tape.ln(one_minus_p);

    let pos_w = tape.powf(one_minus_p, gamma);
    let pos = tape.mul(pos_w, log_p);
    let target_pos = tape.leaf(targets.clone());
    let pos = tape.mul(pos, target_pos);
    let pos = tape.scale(pos, -alpha);

    let neg_w = tape.powf(p, gamma);
    let neg = tape.mul(neg_w, log_one_minus_p);
    let target_neg = tape.leaf(targets.mapv(|v| 1.0 - v));
    let neg = tape.mul(neg, target_neg);
    let neg = tape.scale(neg, -(1.0 - alpha));

    let total = tape.add(pos, neg);
    tape.sum_all(total)
}

/// Foreground focal loss over pseudo-action rows. `p_rows` is `N×C` with the
/// class of each row in `labels`; `q_rows` (`N×1`) adds the background
/// channel with target 0. Normalized by `N`.
pub fn act_loss_rows(tape: &mut Tape, p_rows: Var, q_rows: Option<Var>, labels: &[usize], w: &LossWeights) -> Var {
    let n = labels.len();
    if n == 0 {
        return tape.constant_scalar(0.0);
    }
    let c = tape.value(p_rows).ncols();
    let mut total = focal_sum(tape, p_rows, &one_hot(labels, c), w.focal_alpha, w.focal_gamma);
    if let Some(q) = q_rows {
        let bkg = focal_sum(tape, q, &Array2::zeros((n, 1)), w.focal_alpha, w.focal_gamma);
        total = tape.add(total, bkg);
    }
    tape.scale(total, 1.0 / n as f64)
}

/// Background focal loss with target 1 over pseudo-background rows of `Q`.
pub fn bkg_loss_rows(tape: &mut Tape, q_rows: Var, w: &LossWeights) -> Var {
    let n = tape.value(q_rows).nrows();
    if n == 0 {
        return tape.constant_scalar(0.0);
    }
    let total = focal_sum(tape, q_rows, &Array2::ones((n, 1)), w.focal_alpha, w.focal_gamma);
    tape.scale(total, 1.0 / n as f64)
}

/// Prototype contrastive loss.
///
/// `act_rows` (`N×D`, L2-normalized) are pseudo-action features with classes
/// `labels`; `bkg_rows` (`K×D`, L2-normalized) are pseudo-background features.
/// Prototypes are class means of `act_rows`, re-normalized. Each action row
/// contributes `−log f₁ − log f₂` (or `−log(f₁+f₂)`), where `f₁` contrasts its
/// own prototype against the other classes' and `f₂` against the background
/// rows' similarity to its prototype. Rows are averaged within a class, then
/// over the classes present.
pub fn contrastive_loss_rows(
    tape: &mut Tape,
    act_rows: Var,
    labels: &[usize],
    bkg_rows: Option<Var>,
    w: &LossWeights,
) -> Var {
    if labels.is_empty() {
        return tape.constant_scalar(0.0);
    }
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let slot: Vec<usize> = labels
        .iter()
        .map(|c| classes.binary_search(c).expect("present class"))
        .collect();
    let counts: Vec<usize> = (0..classes.len())
        .map(|k| slot.iter().filter(|&&s| s == k).count())
        .collect();

    let protos: Vec<Var> = (0..classes.len())
        .map(|k| {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| slot[i] == k).collect();
            let rows = tape.gather_rows(act_rows, &members);
            let sum = tape.sum_rows(rows);
            tape.scale(sum, 1.0 / members.len() as f64)
        })
        .collect();
    let protos = tape.concat_rows(&protos);
    let protos = tape.l2_normalize_rows(protos, NORM_EPS);
    let protos_t = tape.transpose(protos);
    let inv_tau = 1.0 / w.temperature;

    let sims = tape.matmul(act_rows, protos_t);
    let sims = tape.scale(sims, inv_tau);
    let own_mask = tape.leaf(one_hot(&slot, classes.len()));

    let log_f1 = tape.log_softmax_rows(sims);
    let log_f1 = tape.mul(log_f1, own_mask);
    let log_f1 = tape.row_sums(log_f1);

    let log_f2 = bkg_rows.filter(|&b| tape.value(b).nrows() > 0).map(|b| {
        let own = tape.mul(sims, own_mask);
        let own = tape.row_sums(own);
        let bsims = tape.matmul(b, protos_t);
        let bsims = tape.scale(bsims, inv_tau);
        let bsims_t = tape.transpose(bsims);
        let per_row = tape.gather_rows(bsims_t, &slot);
        let logits = tape.concat_cols(&[own, per_row]);
        let lsm = tape.log_softmax_rows(logits);
        tape.slice_cols(lsm, 0, 1)
    });

    let per_row = match (w.contrastive_form, log_f2) {
        (_, None) => tape.scale(log_f1, -1.0),
        (ContrastiveForm::SeparateLogs, Some(l2)) => {
            let s = tape.add(log_f1, l2);
            tape.scale(s, -1.0)
        }
        (ContrastiveForm::JointLog, Some(l2)) => {
            let f1 = tape.exp(log_f1);
            let f2 = tape.exp(l2);
            let s = tape.add(f1, f2);
            let l = tape.ln(s);
            tape.scale(l, -1.0)
        }
    };
    let n_classes = classes.len() as f64;
    let row_weights = Array2::from_shape_fn((labels.len(), 1), |(i, _)| 1.0 / (n_classes * counts[slot[i]] as f64));
    let row_weights = tape.leaf(row_weights);
    let weighted = tape.mul(per_row, row_weights);
    tape.sum_all(weighted)
}

/// `1 − mean cos(pred_j, target_j)` over rows.
pub fn ac_loss_rows(tape: &mut Tape, pred: Var, target: Var) -> Var {
    let m = tape.value(pred).nrows();
    if m == 0 {
        return tape.constant_scalar(0.0);
    }
    let a = tape.l2_normalize_rows(pred, NORM_EPS);
    let b = tape.l2_normalize_rows(target, NORM_EPS);
    let prod = tape.mul(a, b);
    let total = tape.sum_all(prod);
    let mean = tape.scale(total, 1.0 / m as f64);
    tape.one_minus(mean)
}

/// `−(1/M) Σ [log pos_j + log(1 − neg_j)]` with probabilities clamped.
pub fn paired_bce_rows(tape: &mut Tape, pos: Var, neg: Var) -> Var {
    let m = tape.value(pos).nrows();
    if m == 0 {
        return tape.constant_scalar(0.0);
    }
    let pos = tape.clamp(pos, PROB_EPS, 1.0 - PROB_EPS);
    let neg = tape.clamp(neg, PROB_EPS, 1.0 - PROB_EPS);
    let lp = tape.ln(pos);
    let one_minus_neg = tape.one_minus(neg);
    let ln_neg = tape.ln(one_minus_neg);
    let s = tape.add(lp, ln_neg);
    let total = tape.sum_all(s);
    tape.scale(total, -1.0 / m as f64)
}

/// The six loss terms of one objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub act: f64,
    pub bkg: f64,
    pub contra: f64,
    pub ac: f64,
    pub aou: f64,
    pub aru: f64,
}

impl LossParts {
    pub fn as_array(&self) -> [f64; 6] {
        [self.act, self.bkg, self.contra, self.ac, self.aou, self.aru]
    }

    pub fn all_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

fn lambdas(w: &LossWeights) -> [f64; 6] {
    [w.act, w.bkg, w.contra, w.ac, w.aou, w.aru]
}

/// `λ₁L_act + λ₂L_bkg + λ₃L_contra + λ_ac L_ac + λ_aou L_aou + λ_aru L_aru`.
pub fn loss_total(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.as_array().iter().zip(lambdas(w)).map(|(p, l)| p * l).sum()
}

/// Weighted total on the tape; terms with zero weight are left out of the
/// graph so they contribute no gradient.
pub fn loss_total_on(tape: &mut Tape, parts: [Option<Var>; 6], w: &LossWeights) -> Var {
    let mut total = tape.constant_scalar(0.0);
    for (part, lambda) in parts.into_iter().zip(lambdas(w)) {
        if let Some(v) = part {
            if lambda != 0.0 {
                let scaled = tape.scale(v, lambda);
                total = tape.add(total, scaled);
            }
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Value-level wrappers for a single video

fn column(q: &Array1<f64>) -> Array2<f64> {
    q.clone().into_shape_with_order((q.len(), 1)).expect("column shape")
}

fn action_rows(pseudo: &PseudoLabelSet) -> (Vec<usize>, Vec<usize>) {
    pseudo.action_snippets.iter().map(|&(t, y)| (t, y)).unzip()
}

/// Foreground focal loss over the `C` class channels of `P`.
pub fn loss_act(p: &Array2<f64>, pseudo: &PseudoLabelSet, w: &LossWeights) -> f64 {
    let (rows, labels) = action_rows(pseudo);
    let mut tape = Tape::new();
    let pv = tape.leaf(p.clone());
    let pr = tape.gather_rows(pv, &rows);
    let l = act_loss_rows(&mut tape, pr, None, &labels, w);
    tape.scalar(l)
}

/// Foreground focal loss including the background channel (target 0) when
/// `w.act_background_negative` is set; this is the form used in training.
pub fn loss_act_with_background(p: &Array2<f64>, q: &Array1<f64>, pseudo: &PseudoLabelSet, w: &LossWeights) -> f64 {
    let (rows, labels) = action_rows(pseudo);
    let mut tape = Tape::new();
    let pv = tape.leaf(p.clone());
    let pr = tape.gather_rows(pv, &rows);
    let qr = w.act_background_negative.then(|| {
        let qv = tape.leaf(column(q));
        tape.gather_rows(qv, &rows)
    });
    let l = act_loss_rows(&mut tape, pr, qr, &labels, w);
    tape.scalar(l)
}

pub fn loss_bkg(q: &Array1<f64>, pseudo: &PseudoLabelSet, w: &LossWeights) -> f64 {
    let mut tape = Tape::new();
    let qv = tape.leaf(column(q));
    let qr = tape.gather_rows(qv, &pseudo.background_snippets);
    let l = bkg_loss_rows(&mut tape, qr, w);
    tape.scalar(l)
}

/// Prototype contrastive loss on L2-normalized features `x_norm`.
pub fn loss_contrastive(x_norm: &Array2<f64>, pseudo: &PseudoLabelSet, w: &LossWeights) -> f64 {
    let (rows, labels) = action_rows(pseudo);
    let mut tape = Tape::new();
    let xv = tape.leaf(x_norm.clone());
    let act = tape.gather_rows(xv, &rows);
    let bkg = tape.gather_rows(xv, &pseudo.background_snippets);
    let l = contrastive_loss_rows(&mut tape, act, &labels, Some(bkg), w);
    tape.scalar(l)
}

fn stack(rows: &[Array1<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    m
}

pub fn loss_ac(pred: &[Array1<f64>], target: &[Array1<f64>]) -> f64 {
    assert_eq!(pred.len(), target.len(), "prediction and target counts differ");
    let mut tape = Tape::new();
    let p = tape.leaf(stack(pred));
    let t = tape.leaf(stack(target));
    let l = ac_loss_rows(&mut tape, p, t);
    tape.scalar(l)
}

fn paired_bce(pos: &[f64], neg: &[f64]) -> f64 {
    assert_eq!(pos.len(), neg.len(), "positive and negative counts differ");
    let mut tape = Tape::new();
    let p = tape.leaf(Array2::from_shape_vec((pos.len(), 1), pos.to_vec()).expect("shape"));
    let n = tape.leaf(Array2::from_shape_vec((neg.len(), 1), neg.to_vec()).expect("shape"));
    let l = paired_bce_rows(&mut tape, p, n);
    tape.scalar(l)
}

/// Order loss: forward windows labelled 1, reversed windows labelled 0.
pub fn loss_aou(pred_fwd: &[f64], pred_rev: &[f64]) -> f64 {
    paired_bce(pred_fwd, pred_rev)
}

/// Regularity loss: in-order windows labelled 1, shuffled windows labelled 0.
pub fn loss_aru(pred_reg: &[f64], pred_shuf: &[f64]) -> f64 {
    paired_bce(pred_reg, pred_shuf)
}
