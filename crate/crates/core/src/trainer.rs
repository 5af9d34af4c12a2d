//! Multi-task training loop: forward, pseudo-label mining, losses, AdamW
//! updates, checkpoints and proxy-task evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::datamodel::{Dataset, PseudoLabelSet, Video};
use crate::error::{Error, Result};
use crate::evaluation::{binary_auc_acc, BinaryMetrics};
use crate::network::{init_params, write_checkpoint, Checkpoint, Discriminator, ModelParams, Net, NetConfig, Task};
use crate::seeding::{self, derive_seed, streams};
use crate::supervision::{
    ac_context_indices, act_loss_rows, ac_loss_rows, bkg_loss_rows, contrastive_loss_rows, loss_total_on,
    mine_pseudo_labels, non_reversed_permutation, paired_bce_rows, window_is_valid, LossParts, LossWeights, NORM_EPS,
};
use crate::synthgen::{sample_points, PointStrategy};

pub const REPORT_FILE: &str = "report.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Master seed; overrides `net.seed`.
    pub seed: u64,
    pub log_every: usize,
    /// Writes `step_N.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            steps: 2000,
            seed: 0,
            log_every: 1,
            checkpoint_every: 0,
            loss: LossWeights::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.loss.validate()?;
        self.net_config().validate()
    }

    /// Network config with the master seed applied.
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            seed: self.seed,
            ..self.net.clone()
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with decoupled weight decay applied to weights only. Parameters
/// without a gradient in a step are left untouched, moments included.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        let zeros: Vec<Array2<f64>> = params.tensors().iter().map(|t| Array2::zeros(t.dim())).collect();
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Array2<f64>>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (b1, b2) = (self.beta1, self.beta2);
            self.m[i].zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            self.v[i].zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let decay = if params.decays(i) { self.lr * self.weight_decay } else { 0.0 };
            let (lr, eps) = (self.lr, self.eps);
            let w = params.tensor_mut(i);
            ndarray::Zip::from(w).and(&self.m[i]).and(&self.v[i]).for_each(|w, &m, &v| {
                *w -= decay * *w;
                *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Objective

/// Randomness and (optionally) labels fixed for one objective evaluation.
#[derive(Debug, Clone, Default)]
pub struct StepPlan {
    /// Pseudo-labels per batch video; mined from the current `Q` when `None`.
    pub labels: Option<Vec<PseudoLabelSet>>,
    /// Shuffle order of each valid window, per batch video.
    pub shuffles: Vec<Vec<Vec<usize>>>,
}

/// Points of `video` whose window fits inside the sequence.
pub fn window_centers(video: &Video, half: usize) -> Vec<usize> {
    let t_len = video.features.len();
    video
        .points
        .iter()
        .flat_map(|p| p.points())
        .map(|p| p.t)
        .filter(|&t| window_is_valid(t_len, t, half))
        .collect()
}

impl StepPlan {
    pub fn draw<R: Rng + ?Sized>(batch: &[&Video], half: usize, rng: &mut R) -> Self {
        let n = 2 * half + 1;
        let shuffles = batch
            .iter()
            .map(|v| {
                window_centers(v, half)
                    .iter()
                    .map(|_| non_reversed_permutation(n, rng).expect("windows have length >= 3"))
                    .collect()
            })
            .collect();
        Self { labels: None, shuffles }
    }
}

/// Graph handles and bookkeeping of one objective evaluation.
pub struct Objective {
    pub total: Var,
    /// `act, bkg, contra, ac, aou, aru`; `None` when the term is not in the graph.
    pub parts: [Option<Var>; 6],
    pub labels: Vec<PseudoLabelSet>,
    pub windows: usize,
    pub skipped_windows: usize,
}

impl Objective {
    pub fn loss_parts(&self, tape: &Tape) -> LossParts {
        let v = |p: Option<Var>| p.map_or(0.0, |p| tape.scalar(p));
        LossParts {
            act: v(self.parts[0]),
            bkg: v(self.parts[1]),
            contra: v(self.parts[2]),
            ac: v(self.parts[3]),
            aou: v(self.parts[4]),
            aru: v(self.parts[5]),
        }
    }
}

fn concat_nonempty(tape: &mut Tape, parts: &[Var], cols: usize) -> Var {
    let kept: Vec<Var> = parts.iter().copied().filter(|&v| tape.value(v).nrows() > 0).collect();
    if kept.is_empty() {
        return tape.leaf(Array2::zeros((0, cols)));
    }
    tape.concat_rows(&kept)
}

/// Gathers `(2t+1)`-row or `2t`-row windows flattened to one row each.
fn gather_windows(tape: &mut Tape, x: Var, windows: &[Vec<usize>]) -> Var {
    let width = tape.value(x).ncols();
    let per = windows.first().map_or(0, |w| w.len());
    let flat: Vec<usize> = windows.iter().flatten().copied().collect();
    let rows = tape.gather_rows(x, &flat);
    tape.reshape(rows, windows.len(), per * width)
}

#[derive(Default)]
struct Collected {
    p_act: Vec<Var>,
    q_act: Vec<Var>,
    q_bkg: Vec<Var>,
    x_act: Vec<Var>,
    x_bkg: Vec<Var>,
    labels: Vec<usize>,
    ac_ctx: Vec<Var>,
    ac_target: Vec<Var>,
    aou_fwd: Vec<Var>,
    aou_rev: Vec<Var>,
    aru_reg: Vec<Var>,
    aru_shuf: Vec<Var>,
}

/// Builds the total loss of a batch on `tape`. Heads and adapters of tasks
/// with zero weight are never run.
pub fn batch_objective(tape: &mut Tape, net: &Net<'_>, batch: &[&Video], plan: &StepPlan, w: &LossWeights) -> Objective {
    let cfg = net.params().config().clone();
    let half = cfg.half_window;
    let mut c = Collected::default();
    let mut all_labels = Vec::with_capacity(batch.len());
    let mut windows = 0;
    let mut skipped = 0;

    for (vi, video) in batch.iter().enumerate() {
        let f = tape.leaf(video.features.values().clone());
        let x = net.embed(tape, f);
        let (p, q) = net.classify(tape, x);
        let labels = match &plan.labels {
            Some(l) => l[vi].clone(),
            None => {
                let qv: Vec<f64> = tape.value(q).column(0).to_vec();
                let points = video.points.as_ref().map_or(&[][..], |p| p.points());
                mine_pseudo_labels(points, &qv)
            }
        };
        let (rows, classes): (Vec<usize>, Vec<usize>) = labels.action_snippets.iter().copied().unzip();
        c.p_act.push(tape.gather_rows(p, &rows));
        if w.act_background_negative {
            c.q_act.push(tape.gather_rows(q, &rows));
        }
        c.q_bkg.push(tape.gather_rows(q, &labels.background_snippets));
        if w.contra != 0.0 {
            let xn = tape.l2_normalize_rows(x, NORM_EPS);
            c.x_act.push(tape.gather_rows(xn, &rows));
            c.x_bkg.push(tape.gather_rows(xn, &labels.background_snippets));
        }
        c.labels.extend(classes);
        all_labels.push(labels);

        let centers = window_centers(video, half);
        let num_points = video.points.as_ref().map_or(0, |p| p.len());
        skipped += num_points - centers.len();
        windows += centers.len();
        if centers.is_empty() {
            continue;
        }
        let forward: Vec<Vec<usize>> = centers.iter().map(|&i| (i - half..=i + half).collect()).collect();
        if w.ac != 0.0 {
            let xa = net.adapt(tape, x, Task::Ac);
            let ctx: Vec<Vec<usize>> = centers.iter().map(|&i| ac_context_indices(i, half)).collect();
            c.ac_ctx.push(gather_windows(tape, xa, &ctx));
            c.ac_target.push(tape.gather_rows(xa, &centers));
        }
        if w.aou != 0.0 {
            let xo = net.adapt(tape, x, Task::Aou);
            let reversed: Vec<Vec<usize>> = forward.iter().map(|f| f.iter().rev().copied().collect()).collect();
            c.aou_fwd.push(gather_windows(tape, xo, &forward));
            c.aou_rev.push(gather_windows(tape, xo, &reversed));
        }
        if w.aru != 0.0 {
            let xr = net.adapt(tape, x, Task::Aru);
            let shuffled: Vec<Vec<usize>> = forward
                .iter()
                .zip(&plan.shuffles[vi])
                .map(|(f, perm)| perm.iter().map(|&k| f[k]).collect())
                .collect();
            c.aru_reg.push(gather_windows(tape, xr, &forward));
            c.aru_shuf.push(gather_windows(tape, xr, &shuffled));
        }
    }

    let nc = cfg.num_classes;
    let da = cfg.adapter_dim;
    let wl = cfg.window_len();
    let p_act = concat_nonempty(tape, &c.p_act, nc);
    let q_act = w.act_background_negative.then(|| concat_nonempty(tape, &c.q_act, 1));
    let act = act_loss_rows(tape, p_act, q_act, &c.labels, w);
    let q_bkg = concat_nonempty(tape, &c.q_bkg, 1);
    let bkg = bkg_loss_rows(tape, q_bkg, w);
    let contra = (w.contra != 0.0).then(|| {
        let xa = concat_nonempty(tape, &c.x_act, cfg.embed_dim);
        let xb = concat_nonempty(tape, &c.x_bkg, cfg.embed_dim);
        contrastive_loss_rows(tape, xa, &c.labels, Some(xb), w)
    });
    let ac = (w.ac != 0.0 && windows > 0).then(|| {
        let ctx = concat_nonempty(tape, &c.ac_ctx, 2 * half * da);
        let target = concat_nonempty(tape, &c.ac_target, da);
        let pred = net.ac_predict(tape, ctx);
        ac_loss_rows(tape, pred, target)
    });
    let disc_loss = |tape: &mut Tape, pos: &[Var], neg: &[Var], which| {
        let pos = concat_nonempty(tape, pos, wl * da);
        let neg = concat_nonempty(tape, neg, wl * da);
        let pp = net.discriminate(tape, pos, which);
        let pn = net.discriminate(tape, neg, which);
        paired_bce_rows(tape, pp, pn)
    };
    let aou = (w.aou != 0.0 && windows > 0).then(|| disc_loss(tape, &c.aou_fwd, &c.aou_rev, Discriminator::Order));
    let aru = (w.aru != 0.0 && windows > 0).then(|| disc_loss(tape, &c.aru_reg, &c.aru_shuf, Discriminator::Regularity));

    let parts = [Some(act), Some(bkg), contra, ac, aou, aru];
    let total = loss_total_on(tape, parts, w);
    Objective {
        total,
        parts,
        labels: all_labels,
        windows,
        skipped_windows: skipped,
    }
}

/// Loss value and per-parameter gradients (`None` where a parameter is not
/// reached from the loss).
pub fn objective_and_gradients(
    params: &ModelParams,
    batch: &[&Video],
    plan: &StepPlan,
    w: &LossWeights,
) -> (f64, LossParts, Vec<Option<Array2<f64>>>, Objective) {
    let mut tape = Tape::new();
    let net = params.bind(&mut tape);
    let obj = batch_objective(&mut tape, &net, batch, plan, w);
    let parts = obj.loss_parts(&tape);
    let total = tape.scalar(obj.total);
    let mut grads: Gradients = tape.backward(obj.total);
    let per_param = net.vars().iter().map(|&v| grads.take(v)).collect();
    (total, parts, per_param, obj)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub parts: LossParts,
    pub total: f64,
    pub n_act: usize,
    pub n_bkg: usize,
    pub windows: usize,
    pub skipped_windows: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub proxy: Vec<(usize, ProxyMetrics)>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
    /// Steps with no pseudo-action snippet in the batch.
    pub empty_action_steps: usize,
}

impl TrainReport {
    /// Mean total loss over the first and last `fraction` of steps.
    pub fn head_tail_means(&self, fraction: f64) -> Option<(f64, f64)> {
        let n = self.steps.len();
        let k = ((n as f64 * fraction).ceil() as usize).max(1);
        if n < 2 * k {
            return None;
        }
        let mean = |s: &[StepRecord]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
        Some((mean(&self.steps[..k]), mean(&self.steps[n - k..])))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

fn check_dataset(dataset: &Dataset, net: &NetConfig) -> Result<Vec<usize>> {
    if dataset.num_classes != net.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the network is configured for {}",
            dataset.num_classes, net.num_classes
        )));
    }
    for v in &dataset.videos {
        if v.features.dim() != net.input_dim {
            return Err(Error::Config(format!(
                "video {} has feature dimension {} but the network expects {}",
                v.id(),
                v.features.dim(),
                net.input_dim
            )));
        }
    }
    let usable: Vec<usize> = (0..dataset.videos.len()).filter(|&i| dataset.videos[i].points.is_some()).collect();
    if !usable.iter().any(|&i| dataset.videos[i].points.as_ref().is_some_and(|p| !p.is_empty())) {
        return Err(Error::Validation("training needs at least one video with a point annotation".into()));
    }
    Ok(usable)
}

/// Epoch-wise batches: every usable video once per epoch, in seeded order.
struct BatchSampler {
    usable: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(usable: Vec<usize>, batch_size: usize, seed: u64) -> Self {
        Self {
            usable,
            batch_size,
            seed: derive_seed(seed, streams::BATCHES),
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order = self.usable.clone();
            self.order.shuffle(&mut seeding::rng(self.seed, self.epoch));
            self.epoch += 1;
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

struct ReportWriter {
    file: Option<(PathBuf, fs::File)>,
}

impl ReportWriter {
    fn open(out: Option<&Path>) -> Result<Self> {
        let file = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(REPORT_FILE);
                let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                Some((path, f))
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn write(&mut self, value: &impl Serialize) -> Result<()> {
        if let Some((path, f)) = &mut self.file {
            let line = serde_json::to_string(value).map_err(|e| Error::json("report line", e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

/// Trains from `init_params(seed)` for `config.steps` steps. With `out`,
/// writes `report.jsonl`, `model.ckpt`, `summary.json` and periodic
/// checkpoints there.
pub fn train(dataset: &Dataset, config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let net_cfg = config.net_config();
    let usable = check_dataset(dataset, &net_cfg)?;
    let started = Instant::now();
    let mut params = init_params(&net_cfg)?;
    let mut opt = AdamW::new(&params, config);
    let mut sampler = BatchSampler::new(usable, config.batch_size, config.seed);
    let shuffle_seed = derive_seed(config.seed, streams::SHUFFLES);
    let mut writer = ReportWriter::open(out)?;
    let mut report = TrainReport::default();

    for step in 0..config.steps {
        let batch_idx = sampler.next_batch();
        let batch: Vec<&Video> = batch_idx.iter().map(|&i| &dataset.videos[i]).collect();
        let plan = StepPlan::draw(&batch, net_cfg.half_window, &mut seeding::rng(shuffle_seed, step as u64));
        let (total, parts, grads, obj) = objective_and_gradients(&params, &batch, &plan, &config.loss);

        let grads_finite = grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
        if !total.is_finite() || !parts.all_finite() || !grads_finite {
            let last_good = match out {
                Some(dir) => {
                    let path = dir.join(LAST_GOOD_FILE);
                    write_checkpoint(&Checkpoint { params, step, seed: config.seed }, &path)?;
                    path.display().to_string()
                }
                None => "not written".to_string(),
            };
            return Err(Error::Divergence {
                step,
                message: format!("non-finite loss or gradient (total = {total}, parts = {parts:?})"),
                last_good,
            });
        }

        let n_act: usize = obj.labels.iter().map(|l| l.num_action()).sum();
        if n_act == 0 {
            report.empty_action_steps += 1;
        }
        let record = StepRecord {
            step,
            parts,
            total,
            n_act,
            n_bkg: obj.labels.iter().map(|l| l.num_background()).sum(),
            windows: obj.windows,
            skipped_windows: obj.skipped_windows,
        };
        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps) {
            writer.write(&record)?;
        }
        report.steps.push(record);

        opt.step(&mut params, &grads);

        if let Some(dir) = out {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                let ck = Checkpoint {
                    params: params.clone(),
                    step: step + 1,
                    seed: config.seed,
                };
                write_checkpoint(&ck, dir.join(format!("step_{}.ckpt", step + 1)))?;
            }
        }
    }

    let checkpoint = Checkpoint {
        params,
        step: config.steps,
        seed: config.seed,
    };
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = out {
        let path = dir.join(CHECKPOINT_FILE);
        write_checkpoint(&checkpoint, &path)?;
        report.checkpoint = Some(path);
        let summary = serde_json::json!({
            "steps": config.steps,
            "wall_clock_secs": report.wall_clock_secs,
            "empty_action_steps": report.empty_action_steps,
            "checkpoint": report.checkpoint,
        });
        let summary_path = dir.join(SUMMARY_FILE);
        fs::write(&summary_path, format!("{summary:#}\n")).map_err(|e| Error::io(&summary_path, e))?;
    }
    Ok(TrainOutcome { checkpoint, report })
}

// ---------------------------------------------------------------------------
// Proxy-task evaluation

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProxyMetrics {
    pub ac_cos_sim: Option<f64>,
    pub ac_cos_dist: Option<f64>,
    pub aou_auc: Option<f64>,
    pub aou_acc: Option<f64>,
    pub aru_auc: Option<f64>,
    pub aru_acc: Option<f64>,
    pub windows: usize,
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt().max(NORM_EPS);
    let nb = b.dot(&b).sqrt().max(NORM_EPS);
    a.dot(&b) / (na * nb)
}

/// Scores the three proxy tasks on windows around points drawn from each
/// ground-truth instance with `strategy` (`repeats` draws per instance).
pub fn evaluate_proxy(
    params: &ModelParams,
    dataset: &Dataset,
    strategy: &PointStrategy,
    repeats: usize,
    seed: u64,
) -> Result<ProxyMetrics> {
    let cfg = params.config();
    let half = cfg.half_window;
    let point_seed = derive_seed(seed, streams::PROXY);
    let mut shuffle_rng = seeding::rng(seed, streams::PROXY + 1);
    let mut cos = Vec::new();
    let (mut aou_pos, mut aou_neg, mut aru_pos, mut aru_neg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());

    for (vi, video) in dataset.videos.iter().enumerate() {
        if video.ground_truth.is_empty() {
            continue;
        }
        let t_len = video.features.len();
        let mut centers = Vec::new();
        for r in 0..repeats {
            let s = derive_seed(derive_seed(point_seed, vi as u64), r as u64);
            let set = sample_points(video.id(), t_len, dataset.num_classes, &video.ground_truth, strategy, s)?;
            centers.extend(set.points().iter().map(|p| p.t).filter(|&t| window_is_valid(t_len, t, half)));
        }
        if centers.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let net = params.bind(&mut tape);
        let f = tape.leaf(video.features.values().clone());
        let x = net.embed(&mut tape, f);
        let forward: Vec<Vec<usize>> = centers.iter().map(|&i| (i - half..=i + half).collect()).collect();

        let xa = net.adapt(&mut tape, x, Task::Ac);
        let ctx: Vec<Vec<usize>> = centers.iter().map(|&i| ac_context_indices(i, half)).collect();
        let ctx = gather_windows(&mut tape, xa, &ctx);
        let pred = net.ac_predict(&mut tape, ctx);
        let target = tape.gather_rows(xa, &centers);
        for (p, t) in tape.value(pred).rows().into_iter().zip(tape.value(target).rows()) {
            cos.push(cosine(p, t));
        }

        let xo = net.adapt(&mut tape, x, Task::Aou);
        let reversed: Vec<Vec<usize>> = forward.iter().map(|f| f.iter().rev().copied().collect()).collect();
        let fwd = gather_windows(&mut tape, xo, &forward);
        let rev = gather_windows(&mut tape, xo, &reversed);
        let pf = net.discriminate(&mut tape, fwd, Discriminator::Order);
        let pr = net.discriminate(&mut tape, rev, Discriminator::Order);
        aou_pos.extend(tape.value(pf).iter().copied());
        aou_neg.extend(tape.value(pr).iter().copied());

        let xr = net.adapt(&mut tape, x, Task::Aru);
        let shuffled: Vec<Vec<usize>> = forward
            .iter()
            .map(|f| {
                let perm = non_reversed_permutation(f.len(), &mut shuffle_rng).expect("windows have length >= 3");
                perm.iter().map(|&k| f[k]).collect()
            })
            .collect();
        let reg = gather_windows(&mut tape, xr, &forward);
        let shuf = gather_windows(&mut tape, xr, &shuffled);
        let pg = net.discriminate(&mut tape, reg, Discriminator::Regularity);
        let ps = net.discriminate(&mut tape, shuf, Discriminator::Regularity);
        aru_pos.extend(tape.value(pg).iter().copied());
        aru_neg.extend(tape.value(ps).iter().copied());
    }

    let mean_sim = (!cos.is_empty()).then(|| Array1::from(cos.clone()).mean().expect("nonempty"));
    // Re-deriving the similarity from the distance makes their sum exactly 1
    // in floating point (both subtractions are exact by Sterbenz's lemma).
    let ac_cos_dist = mean_sim.map(|s| 1.0 - s);
    let ac_cos_sim = ac_cos_dist.map(|d| 1.0 - d);
    let aou = binary_auc_acc(&aou_pos, &aou_neg);
    let aru = binary_auc_acc(&aru_pos, &aru_neg);
    Ok(ProxyMetrics {
        ac_cos_sim,
        ac_cos_dist,
        aou_auc: aou.map(|m: BinaryMetrics| m.auc),
        aou_acc: aou.map(|m| m.acc),
        aru_auc: aru.map(|m| m.auc),
        aru_acc: aru.map(|m| m.acc),
        windows: cos.len(),
    })
}
