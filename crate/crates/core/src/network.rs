//! Trainable computation: embedder, snippet classifier, task adapters, the
//! action-completion head and the two window discriminators.
//!
//! Parameters live in a flat list of named matrices. [`ModelParams::bind`]
//! places them on a [`Tape`] as leaves; the returned [`Net`] builds forward
//! passes whose gradients come from [`Tape::backward`].

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datamodel::ScoreMaps;
use crate::error::{Error, Result};
use crate::seeding::{self, streams};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"PTCK1\n";
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub adapter_dim: usize,
    pub disc_hidden: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub kernel: usize,
    pub half_window: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            embed_dim: 64,
            adapter_dim: 64,
            disc_hidden: 64,
            ff_dim: 128,
            heads: 4,
            encoder_layers: 2,
            kernel: 3,
            half_window: 2,
            num_classes: 3,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.kernel % 2 == 0 {
            return bad("conv kernel must be odd");
        }
        if self.half_window == 0 {
            return bad("half window must be at least 1");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be a positive multiple of heads");
        }
        if [
            self.input_dim,
            self.embed_dim,
            self.adapter_dim,
            self.disc_hidden,
            self.ff_dim,
            self.num_classes,
        ]
        .contains(&0)
        {
            return bad("all dimensions must be positive");
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        2 * self.half_window + 1
    }
}

/// The three auxiliary tasks, each with its own adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ac,
    Aou,
    Aru,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Ac, Task::Aou, Task::Aru];

    fn index(self) -> usize {
        match self {
            Task::Ac => 0,
            Task::Aou => 1,
            Task::Aru => 2,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ac => "ac",
            Task::Aou => "aou",
            Task::Aru => "aru",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ac" => Ok(Task::Ac),
            "aou" => Ok(Task::Aou),
            "aru" => Ok(Task::Aru),
            other => Err(Error::Usage(format!("unknown task {other:?}; expected ac, aou or aru"))),
        }
    }
}

/// Which window discriminator: order (forward vs reversed) or regularity
/// (in-order vs shuffled).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discriminator {
    Order,
    Regularity,
}

impl Discriminator {
    fn index(self) -> usize {
        match self {
            Discriminator::Order => 0,
            Discriminator::Regularity => 1,
        }
    }
}

/// Parameter groups; used to reason about which heads a step touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Embedder,
    Classifier,
    Adapter(Task),
    AcHead,
    Discriminator(usize),
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    first: Affine,
    second: Affine,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    qkv: Affine,
    out: Affine,
    ln1_gain: usize,
    ln1_bias: usize,
    ff1: Affine,
    ff2: Affine,
    ln2_gain: usize,
    ln2_bias: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    input: Affine,
    layers: Vec<EncoderLayer>,
    embed_conv: Affine,
    classifier: Affine,
    adapters: [Mlp; 3],
    ac_head: Mlp,
    discriminators: [Mlp; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct TensorSpec {
    name: String,
    shape: (usize, usize),
    init: InitKind,
    decay: bool,
    group: Group,
}

struct LayoutBuilder {
    specs: Vec<TensorSpec>,
}

impl LayoutBuilder {
    fn tensor(&mut self, name: String, shape: (usize, usize), init: InitKind, decay: bool, group: Group) -> usize {
        self.specs.push(TensorSpec {
            name,
            shape,
            init,
            decay,
            group,
        });
        self.specs.len() - 1
    }

    fn affine(&mut self, name: &str, fan_in: usize, out: usize, group: Group) -> Affine {
        self.affine_with_fan_in(name, fan_in, fan_in, out, group)
    }

    fn affine_with_fan_in(&mut self, name: &str, rows: usize, fan_in: usize, out: usize, group: Group) -> Affine {
        let w = self.tensor(format!("{name}.weight"), (rows, out), InitKind::FanIn(fan_in), true, group);
        let b = self.tensor(format!("{name}.bias"), (1, out), InitKind::Zeros, false, group);
        Affine { w, b }
    }

    fn mlp(&mut self, name: &str, input: usize, hidden: usize, out: usize, group: Group) -> Mlp {
        Mlp {
            first: self.affine(&format!("{name}.fc1"), input, hidden, group),
            second: self.affine(&format!("{name}.fc2"), hidden, out, group),
        }
    }
}

fn build_layout(cfg: &NetConfig) -> (Layout, Vec<TensorSpec>) {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let de = cfg.embed_dim;
    let da = cfg.adapter_dim;
    let w = cfg.half_window;
    let input = b.affine("embed.input", cfg.input_dim, de, Group::Embedder);
    let layers = (0..cfg.encoder_layers)
        .map(|l| {
            let p = format!("embed.encoder{l}");
            EncoderLayer {
                qkv: b.affine(&format!("{p}.attn.qkv"), de, 3 * de, Group::Embedder),
                out: b.affine(&format!("{p}.attn.out"), de, de, Group::Embedder),
                ln1_gain: b.tensor(format!("{p}.norm1.gain"), (1, de), InitKind::Ones, false, Group::Embedder),
                ln1_bias: b.tensor(format!("{p}.norm1.bias"), (1, de), InitKind::Zeros, false, Group::Embedder),
                ff1: b.affine(&format!("{p}.ff1"), de, cfg.ff_dim, Group::Embedder),
                ff2: b.affine(&format!("{p}.ff2"), cfg.ff_dim, de, Group::Embedder),
                ln2_gain: b.tensor(format!("{p}.norm2.gain"), (1, de), InitKind::Ones, false, Group::Embedder),
                ln2_bias: b.tensor(format!("{p}.norm2.bias"), (1, de), InitKind::Zeros, false, Group::Embedder),
            }
        })
        .collect();
    let embed_conv = b.affine("embed.conv", cfg.kernel * de, de, Group::Embedder);
    let classifier = b.affine("classifier.conv", cfg.kernel * de, cfg.num_classes + 1, Group::Classifier);
    let adapters = Task::ALL.map(|t| b.mlp(&format!("adapter.{t}"), de, da, da, Group::Adapter(t)));
    let ac_head = b.mlp("head.ac", 2 * w * da, da, da, Group::AcHead);
    let discriminators = ["disc.aou", "disc.aru"]
        .into_iter()
        .enumerate()
        .map(|(i, n)| b.mlp(n, (2 * w + 1) * da, cfg.disc_hidden, 1, Group::Discriminator(i)))
        .collect::<Vec<_>>();
    let layout = Layout {
        input,
        layers,
        embed_conv,
        classifier,
        adapters,
        ac_head,
        discriminators: [discriminators[0], discriminators[1]],
    };
    (layout, b.specs)
}

/// All trainable tensors of the model, in a fixed order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: NetConfig,
    layout: Layout,
    specs: Vec<TensorSpec>,
    tensors: Vec<Array2<f64>>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

/// Deterministic initialization: weights uniform on `±sqrt(3 / fan_in)`
/// (standard deviation `1/sqrt(fan_in)`), zero biases, unit norm gains.
pub fn init_params(config: &NetConfig) -> Result<ModelParams> {
    config.validate()?;
    let (layout, specs) = build_layout(config);
    let mut rng = seeding::rng(config.seed, streams::INIT);
    let tensors = specs
        .iter()
        .map(|s| match s.init {
            InitKind::Zeros => Array2::zeros(s.shape),
            InitKind::Ones => Array2::ones(s.shape),
            InitKind::FanIn(fan_in) => {
                let bound = (3.0 / fan_in as f64).sqrt();
                Array2::from_shape_fn(s.shape, |_| rng.random_range(-bound..bound))
            }
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        layout,
        specs,
        tensors,
    })
}

impl ModelParams {
    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.specs[i].name
    }

    pub fn tensor(&self, i: usize) -> &Array2<f64> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Whether weight decay applies (affine/conv weights only).
    pub fn decays(&self, i: usize) -> bool {
        self.specs[i].decay
    }

    pub fn group(&self, i: usize) -> Group {
        self.specs[i].group
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value through `f32`, matching a checkpoint roundtrip.
    pub fn to_f32_precision(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.mapv_inplace(|v| v as f32 as f64);
        }
        out
    }

    /// Places every tensor on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Net<'_> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Net { params: self, vars }
    }

    /// Sets both layers of a task adapter to identity weights and zero biases;
    /// requires `adapter_dim == embed_dim`.
    pub fn set_adapter_identity(&mut self, task: Task) -> Result<()> {
        if self.config.adapter_dim != self.config.embed_dim {
            return Err(Error::Config("identity adapter needs adapter_dim == embed_dim".into()));
        }
        let mlp = self.layout.adapters[task.index()];
        for a in [mlp.first, mlp.second] {
            let n = self.tensors[a.w].nrows();
            self.tensors[a.w] = Array2::eye(n);
            self.tensors[a.b].fill(0.0);
        }
        Ok(())
    }

    pub fn zero_group(&mut self, group: Group) {
        for (spec, t) in self.specs.iter().zip(&mut self.tensors) {
            if spec.group == group {
                t.fill(0.0);
            }
        }
    }

    pub fn set_ac_head_output_bias(&mut self, bias: &[f64]) {
        let b = self.layout.ac_head.second.b;
        self.tensors[b] = Array2::from_shape_vec((1, bias.len()), bias.to_vec()).expect("bias shape");
    }

    pub fn set_classifier_bias(&mut self, channel: usize, value: f64) {
        let b = self.layout.classifier.b;
        self.tensors[b][[0, channel]] = value;
    }
}

/// Model parameters bound to a tape.
pub struct Net<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

/// Sinusoidal position signal, `T×D`.
pub fn positional_encoding(t_len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((t_len, d), |(t, j)| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl<'a> Net<'a> {
    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn config(&self) -> &NetConfig {
        &self.params.config
    }

    fn affine(&self, tape: &mut Tape, x: Var, a: Affine) -> Var {
        let y = tape.matmul(x, self.vars[a.w]);
        tape.add_row(y, self.vars[a.b])
    }

    fn mlp(&self, tape: &mut Tape, x: Var, m: Mlp) -> Var {
        let h = self.affine(tape, x, m.first);
        let h = tape.relu(h);
        self.affine(tape, h, m.second)
    }

    fn norm(&self, tape: &mut Tape, x: Var, gain: usize, bias: usize) -> Var {
        let n = tape.layer_norm(x, LAYER_NORM_EPS);
        let n = tape.mul_row(n, self.vars[gain]);
        tape.add_row(n, self.vars[bias])
    }

    fn self_attention(&self, tape: &mut Tape, x: Var, layer: &EncoderLayer) -> Var {
        let de = self.config().embed_dim;
        let heads = self.config().heads;
        let dh = de / heads;
        let qkv = self.affine(tape, x, layer.qkv);
        let scale = 1.0 / (dh as f64).sqrt();
        let outputs: Vec<Var> = (0..heads)
            .map(|h| {
                let q = tape.slice_cols(qkv, h * dh, (h + 1) * dh);
                let k = tape.slice_cols(qkv, de + h * dh, de + (h + 1) * dh);
                let v = tape.slice_cols(qkv, 2 * de + h * dh, 2 * de + (h + 1) * dh);
                let kt = tape.transpose(k);
                let scores = tape.matmul(q, kt);
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores);
                tape.matmul(attn, v)
            })
            .collect();
        let joined = if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.concat_cols(&outputs)
        };
        self.affine(tape, joined, layer.out)
    }

    /// Post-norm encoder layer: `x ← LN(x + MHA(x))`, `x ← LN(x + FF(x))`.
    fn encoder_layer(&self, tape: &mut Tape, x: Var, layer: &EncoderLayer) -> Var {
        let attn = self.self_attention(tape, x, layer);
        let x = tape.add(x, attn);
        let x = self.norm(tape, x, layer.ln1_gain, layer.ln1_bias);
        let h = self.affine(tape, x, layer.ff1);
        let h = tape.relu(h);
        let h = self.affine(tape, h, layer.ff2);
        let x = tape.add(x, h);
        self.norm(tape, x, layer.ln2_gain, layer.ln2_bias)
    }

    /// `X = ReLU(Conv(Encoder(Encoder(F·W + b + PE))))`, `T×D_e`.
    pub fn embed(&self, tape: &mut Tape, features: Var) -> Var {
        let layout = &self.params.layout;
        let t_len = tape.value(features).nrows();
        let x = self.affine(tape, features, layout.input);
        let pe = tape.leaf(positional_encoding(t_len, self.config().embed_dim));
        let mut x = tape.add(x, pe);
        for layer in &layout.layers {
            x = self.encoder_layer(tape, x, layer);
        }
        let u = tape.unfold(x, self.config().kernel);
        let y = self.affine(tape, u, layout.embed_conv);
        tape.relu(y)
    }

    /// Sigmoid scores of the `C+1`-channel classifier conv; returns `(P, Q)`
    /// with `P` of shape `T×C` and `Q` of shape `T×1`.
    pub fn classify(&self, tape: &mut Tape, x: Var) -> (Var, Var) {
        let c = self.config().num_classes;
        let u = tape.unfold(x, self.config().kernel);
        let logits = self.affine(tape, u, self.params.layout.classifier);
        let scores = tape.sigmoid(logits);
        let p = tape.slice_cols(scores, 0, c);
        let q = tape.slice_cols(scores, c, c + 1);
        (p, q)
    }

    pub fn adapt(&self, tape: &mut Tape, x: Var, task: Task) -> Var {
        self.mlp(tape, x, self.params.layout.adapters[task.index()])
    }

    /// Action-completion head on flattened contexts, one window per row
    /// (`M × 2t·D_a`), returning `M × D_a` predictions.
    pub fn ac_predict(&self, tape: &mut Tape, contexts: Var) -> Var {
        self.mlp(tape, contexts, self.params.layout.ac_head)
    }

    /// Discriminator on flattened windows (`M × (2t+1)·D_a`), returning
    /// `M×1` probabilities.
    pub fn discriminate(&self, tape: &mut Tape, windows: Var, which: Discriminator) -> Var {
        let logits = self.mlp(tape, windows, self.params.layout.discriminators[which.index()]);
        tape.sigmoid(logits)
    }
}

// ---------------------------------------------------------------------------
// Value-level entry points

fn check_width(what: &str, actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(Error::Config(format!("{what} has width {actual}, expected {expected}")));
    }
    Ok(())
}

pub fn embed(features: &Array2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    check_width("feature sequence", features.ncols(), params.config.input_dim)?;
    let mut tape = Tape::new();
    let net = params.bind(&mut tape);
    let f = tape.leaf(features.clone());
    let x = net.embed(&mut tape, f);
    Ok(tape.value(x).clone())
}

pub fn classify(x: &Array2<f64>, params: &ModelParams) -> Result<ScoreMaps> {
    check_width("embedded sequence", x.ncols(), params.config.embed_dim)?;
    let mut tape = Tape::new();
    let net = params.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let (p, q) = net.classify(&mut tape, xv);
    let q: Array1<f64> = tape.value(q).column(0).to_owned();
    ScoreMaps::new(tape.value(p).clone(), q)
}

/// Embeds and classifies one feature sequence.
pub fn score_video(features: &Array2<f64>, params: &ModelParams) -> Result<ScoreMaps> {
    let x = embed(features, params)?;
    classify(&x, params)
}

pub fn adapt(x: &Array2<f64>, task: Task, params: &ModelParams) -> Result<Array2<f64>> {
    check_width("embedded sequence", x.ncols(), params.config.embed_dim)?;
    let mut tape = Tape::new();
    let net = params.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let y = net.adapt(&mut tape, xv, task);
    Ok(tape.value(y).clone())
}

/// Predicts the middle snippet from `left = [X_{i−t} … X_{i−1}]` and
/// `right = [X_{i+t} … X_{i+1}]`; the head sees left then right, flattened.
pub fn ac_predict(left: &Array2<f64>, right: &Array2<f64>, params: &ModelParams) -> Result<Array1<f64>> {
    let cfg = &params.config;
    let expected = (cfg.half_window, cfg.adapter_dim);
    if left.dim() != expected || right.dim() != expected {
        return Err(Error::Usage(format!(
            "context halves must be {}x{}, got {:?} and {:?}",
            expected.0,
            expected.1,
            left.dim(),
            right.dim()
        )));
    }
    let flat: Vec<f64> = left.iter().chain(right.iter()).copied().collect();
    let mut tape = Tape::new();
    let net = params.bind(&mut tape);
    let ctx = tape.leaf(Array2::from_shape_vec((1, flat.len()), flat).expect("context shape"));
    let y = net.ac_predict(&mut tape, ctx);
    Ok(tape.value(y).row(0).to_owned())
}

/// Probability that a `(2t+1)×D_a` window is a positive sample.
pub fn discriminate(window: &Array2<f64>, which: Discriminator, params: &ModelParams) -> Result<f64> {
    let cfg = &params.config;
    if window.dim() != (cfg.window_len(), cfg.adapter_dim) {
        return Err(Error::Usage(format!(
            "window must be {}x{}, got {:?}",
            cfg.window_len(),
            cfg.adapter_dim,
            window.dim()
        )));
    }
    let flat: Vec<f64> = window.iter().copied().collect();
    let mut tape = Tape::new();
    let net = params.bind(&mut tape);
    let w = tape.leaf(Array2::from_shape_vec((1, flat.len()), flat).expect("window shape"));
    let p = net.discriminate(&mut tape, w, which);
    Ok(tape.scalar(p))
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetConfig,
    step: usize,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: usize,
    pub seed: u64,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let header = CheckpointHeader {
        config: ck.params.config.clone(),
        step: ck.step,
        seed: ck.seed,
        tensors: ck
            .params
            .specs
            .iter()
            .map(|s| TensorEntry {
                name: s.name.clone(),
                rows: s.shape.0,
                cols: s.shape.1,
            })
            .collect(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
    out.push(b'\n');
    for t in &ck.params.tensors {
        for &v in t.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&encode_checkpoint(ck)).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let m = CHECKPOINT_MAGIC.len();
    if bytes.len() < m || &bytes[..m] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected PTCK1"));
    }
    let header_end = bytes[m..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| m + p)
        .ok_or_else(|| Error::format(path, bytes.len() as u64, "unterminated header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[m..header_end])
        .map_err(|e| Error::format(path, m as u64, format!("bad header: {e}")))?;
    let mut params = init_params(&header.config)?;
    if params.specs.len() != header.tensors.len() {
        return Err(Error::format(path, m as u64, "tensor list does not match the configuration"));
    }
    let mut offset = header_end + 1;
    for (i, entry) in header.tensors.iter().enumerate() {
        let spec = &params.specs[i];
        if spec.name != entry.name || spec.shape != (entry.rows, entry.cols) {
            return Err(Error::format(
                path,
                m as u64,
                format!("tensor {} does not match layout entry {}", entry.name, spec.name),
            ));
        }
        let n = entry.rows * entry.cols * 4;
        let Some(chunk) = bytes.get(offset..offset + n) else {
            return Err(Error::format(path, bytes.len() as u64, format!("truncated tensor {}", entry.name)));
        };
        let vals: Vec<f64> = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.tensors[i] = Array2::from_shape_vec((entry.rows, entry.cols), vals).expect("tensor shape");
        offset += n;
    }
    if offset != bytes.len() {
        return Err(Error::format(path, offset as u64, "trailing bytes after last tensor"));
    }
    Ok(Checkpoint {
        params,
        step: header.step,
        seed: header.seed,
    })
}
