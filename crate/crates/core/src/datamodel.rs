//! Domain types and on-disk formats for features, annotations, ground truth,
//! predictions and dataset manifests.
//!
//! Snippet indices are integers and segment ends are inclusive throughout.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 6] = b"PTFT1\n";

/// A `T×D` matrix of snippet features for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    video_id: String,
    values: Array2<f64>,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, values: Array2<f64>) -> Result<Self> {
        let video_id = video_id.into();
        let (t, d) = values.dim();
        if t == 0 || d == 0 {
            return Err(Error::Validation(format!(
                "feature sequence {video_id} has empty shape {t}x{d}"
            )));
        }
        if let Some(((row, col), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "feature sequence {video_id} has non-finite value {v} at ({row}, {col})"
            )));
        }
        Ok(Self { video_id, values })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Copy with every value rounded through `f32`, i.e. what a write/read
    /// cycle returns.
    pub fn to_f32_precision(&self) -> Self {
        Self {
            video_id: self.video_id.clone(),
            values: self.values.mapv(|v| v as f32 as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Point {
    pub t: usize,
    pub y: usize,
}

/// Point annotations of one video, strictly increasing in `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointAnnotationSet {
    video_id: String,
    num_snippets: usize,
    points: Vec<Point>,
}

impl PointAnnotationSet {
    /// Sorts the points and validates them against the sequence length and
    /// class count.
    pub fn new(
        video_id: impl Into<String>,
        num_snippets: usize,
        mut points: Vec<Point>,
        num_classes: usize,
    ) -> Result<Self> {
        let video_id = video_id.into();
        points.sort();
        for p in &points {
            if p.t >= num_snippets {
                return Err(Error::Validation(format!(
                    "video {video_id}: point (t={}, y={}) outside [0, {num_snippets})",
                    p.t, p.y
                )));
            }
            if p.y >= num_classes {
                return Err(Error::Validation(format!(
                    "video {video_id}: point (t={}, y={}) has class outside [0, {num_classes})",
                    p.t, p.y
                )));
            }
        }
        if let Some(w) = points.windows(2).find(|w| w[0].t == w[1].t) {
            return Err(Error::Validation(format!(
                "video {video_id}: duplicate point at t={}",
                w[0].t
            )));
        }
        Ok(Self {
            video_id,
            num_snippets,
            points,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn num_snippets(&self) -> usize {
        self.num_snippets
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub video_id: String,
    pub s: usize,
    pub e: usize,
    pub y: usize,
}

impl GroundTruthInstance {
    pub fn len(&self) -> usize {
        self.e - self.s + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub video_id: String,
    pub s: usize,
    pub e: usize,
    pub class: usize,
    pub confidence: f64,
}

/// Class activations `P`, background scores `Q` and the fused `P̂ = P·(1−Q)`.
///
/// `P̂` is always derived from `P` and `Q`; it cannot be set independently.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMaps {
    p: Array2<f64>,
    q: Array1<f64>,
    p_hat: Array2<f64>,
}

impl ScoreMaps {
    pub fn new(p: Array2<f64>, q: Array1<f64>) -> Result<Self> {
        if p.nrows() != q.len() {
            return Err(Error::Validation(format!(
                "score maps: P has {} rows but Q has {} entries",
                p.nrows(),
                q.len()
            )));
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !p.iter().all(in_unit) || !q.iter().all(in_unit) {
            return Err(Error::Validation("score maps: entries must lie in [0, 1]".into()));
        }
        let p_hat = fuse_scores(&p, &q);
        Ok(Self { p, q, p_hat })
    }

    pub fn p(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn q(&self) -> &Array1<f64> {
        &self.q
    }

    pub fn p_hat(&self) -> &Array2<f64> {
        &self.p_hat
    }

    pub fn num_classes(&self) -> usize {
        self.p.ncols()
    }
}

/// `P̂[t,c] = P[t,c]·(1 − Q[t])`.
pub fn fuse_scores(p: &Array2<f64>, q: &Array1<f64>) -> Array2<f64> {
    let mut out = p.clone();
    for (mut row, &qt) in out.rows_mut().into_iter().zip(q.iter()) {
        row *= 1.0 - qt;
    }
    out
}

/// Mined pseudo-action snippets (with classes) and pseudo-background snippets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PseudoLabelSet {
    pub action_snippets: Vec<(usize, usize)>,
    pub background_snippets: Vec<usize>,
}

impl PseudoLabelSet {
    pub fn num_action(&self) -> usize {
        self.action_snippets.len()
    }

    pub fn num_background(&self) -> usize {
        self.background_snippets.len()
    }
}

// ---------------------------------------------------------------------------
// Feature files

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    video_id: String,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "D")]
    d: usize,
}

/// Encodes a feature sequence as magic, JSON header line, then `T·D`
/// little-endian `f32` values in row-major order.
pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let header = FeatureHeader {
        video_id: seq.video_id.clone(),
        t: seq.len(),
        d: seq.dim(),
    };
    let mut out = Vec::with_capacity(64 + seq.values.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
    out.push(b'\n');
    for &v in seq.values.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureSequence> {
    let magic_len = FEATURE_MAGIC.len();
    if bytes.len() < magic_len || &bytes[..magic_len] != FEATURE_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected PTFT1"));
    }
    let header_end = bytes[magic_len..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| magic_len + p)
        .ok_or_else(|| Error::format(path, bytes.len() as u64, "unterminated header line"))?;
    let header: FeatureHeader = serde_json::from_slice(&bytes[magic_len..header_end])
        .map_err(|e| Error::format(path, magic_len as u64, format!("bad header: {e}")))?;
    let payload = &bytes[header_end + 1..];
    let expected = header.t * header.d * 4;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!(
                "payload is {} bytes but header T={} D={} requires {expected}",
                payload.len(),
                header.t,
                header.d
            ),
        ));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let values = Array2::from_shape_vec((header.t, header.d), values)
        .map_err(|e| Error::format(path, (header_end + 1) as u64, e.to_string()))?;
    FeatureSequence::new(header.video_id, values)
}

// ---------------------------------------------------------------------------
// Line-delimited JSON

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationLine {
    video_id: String,
    #[serde(rename = "T")]
    t: usize,
    points: Vec<Point>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GtSegment {
    s: usize,
    e: usize,
    y: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroundTruthLine {
    video_id: String,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    t: Option<usize>,
    instances: Vec<GtSegment>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictedSegment {
    s: usize,
    e: usize,
    y: usize,
    confidence: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionLine {
    video_id: String,
    instances: Vec<PredictedSegment>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let len = line.len() as u64 + 1;
        if !line.trim().is_empty() {
            let item = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, offset, format!("bad JSON line: {e}")))?;
            out.push(item);
        }
        offset += len;
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| Error::json(path.display().to_string(), e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads point annotations; points are returned sorted by `t`.
pub fn read_annotations(path: impl AsRef<Path>, num_classes: usize) -> Result<Vec<PointAnnotationSet>> {
    let lines: Vec<AnnotationLine> = read_jsonl(path.as_ref())?;
    lines
        .into_iter()
        .map(|l| PointAnnotationSet::new(l.video_id, l.t, l.points, num_classes))
        .collect()
}

pub fn write_annotations(path: impl AsRef<Path>, sets: &[PointAnnotationSet]) -> Result<()> {
    write_jsonl(
        path.as_ref(),
        sets.iter().map(|s| AnnotationLine {
            video_id: s.video_id.clone(),
            t: s.num_snippets,
            points: s.points.clone(),
        }),
    )
}

/// Ground truth grouped by video, in file order.
pub type GroundTruth = Vec<(String, Vec<GroundTruthInstance>)>;

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let lines: Vec<GroundTruthLine> = read_jsonl(path)?;
    lines
        .into_iter()
        .map(|l| {
            let instances = l
                .instances
                .into_iter()
                .map(|g| {
                    if g.s > g.e || l.t.is_some_and(|t| g.e >= t) {
                        return Err(Error::Validation(format!(
                            "video {}: ground-truth segment ({}, {}) is invalid",
                            l.video_id, g.s, g.e
                        )));
                    }
                    Ok(GroundTruthInstance {
                        video_id: l.video_id.clone(),
                        s: g.s,
                        e: g.e,
                        y: g.y,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((l.video_id, instances))
        })
        .collect()
}

/// Writes one line per video; `lengths` supplies the optional `T` field.
pub fn write_ground_truth(
    path: impl AsRef<Path>,
    gt: &GroundTruth,
    lengths: Option<&BTreeMap<String, usize>>,
) -> Result<()> {
    write_jsonl(
        path.as_ref(),
        gt.iter().map(|(vid, inst)| GroundTruthLine {
            video_id: vid.clone(),
            t: lengths.and_then(|m| m.get(vid).copied()),
            instances: inst
                .iter()
                .map(|g| GtSegment {
                    s: g.s,
                    e: g.e,
                    y: g.y,
                })
                .collect(),
        }),
    )
}

/// Predictions grouped by video in the given order.
pub fn write_predictions(path: impl AsRef<Path>, per_video: &[(String, Vec<Proposal>)]) -> Result<()> {
    write_jsonl(
        path.as_ref(),
        per_video.iter().map(|(vid, props)| PredictionLine {
            video_id: vid.clone(),
            instances: props
                .iter()
                .map(|p| PredictedSegment {
                    s: p.s,
                    e: p.e,
                    y: p.class,
                    confidence: p.confidence,
                })
                .collect(),
        }),
    )
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Proposal>> {
    let path = path.as_ref();
    let lines: Vec<PredictionLine> = read_jsonl(path)?;
    let mut out = Vec::new();
    for l in lines {
        for p in l.instances {
            if p.s > p.e || !(0.0..=1.0).contains(&p.confidence) {
                return Err(Error::Validation(format!(
                    "video {}: prediction ({}, {}, conf {}) is invalid",
                    l.video_id, p.s, p.e, p.confidence
                )));
            }
            out.push(Proposal {
                video_id: l.video_id.clone(),
                s: p.s,
                e: p.e,
                class: p.y,
                confidence: p.confidence,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dataset directories

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(rename = "C")]
    pub num_classes: usize,
    pub videos: Vec<String>,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub splits: BTreeMap<String, Vec<String>>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Video ids of a named split, or every video when the split is absent.
    pub fn split(&self, name: Option<&str>) -> Result<Vec<String>> {
        match name {
            None => Ok(self.videos.clone()),
            Some(n) => self
                .splits
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Usage(format!("manifest has no split named {n:?}"))),
        }
    }
}

/// One video with its features and (optionally) annotations.
#[derive(Debug, Clone)]
pub struct Video {
    pub features: FeatureSequence,
    pub points: Option<PointAnnotationSet>,
    pub ground_truth: Vec<GroundTruthInstance>,
}

impl Video {
    pub fn id(&self) -> &str {
        self.features.video_id()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_classes: usize,
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
        dir.join("features").join(format!("{video_id}.feat"))
    }

    /// Loads a dataset directory (`manifest.json`, `features/*.feat`, and
    /// when present `gt.jsonl` and `points.jsonl`), restricted to `split`.
    pub fn load(dir: impl AsRef<Path>, split: Option<&str>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = Manifest::read(dir.join("manifest.json"))?;
        let ids = manifest.split(split)?;
        let points_path = dir.join("points.jsonl");
        let mut points: BTreeMap<String, PointAnnotationSet> = if points_path.exists() {
            read_annotations(&points_path, manifest.num_classes)?
                .into_iter()
                .map(|p| (p.video_id().to_string(), p))
                .collect()
        } else {
            BTreeMap::new()
        };
        let gt_path = dir.join("gt.jsonl");
        let mut gt: BTreeMap<String, Vec<GroundTruthInstance>> = if gt_path.exists() {
            read_ground_truth(&gt_path)?.into_iter().collect()
        } else {
            BTreeMap::new()
        };
        let mut videos = Vec::with_capacity(ids.len());
        for id in ids {
            let features = read_features(Self::feature_path(dir, &id))?;
            let pts = points.remove(&id);
            if let Some(p) = &pts {
                if p.num_snippets() != features.len() {
                    return Err(Error::Validation(format!(
                        "video {id}: annotations say T={} but features have T={}",
                        p.num_snippets(),
                        features.len()
                    )));
                }
            }
            videos.push(Video {
                features,
                points: pts,
                ground_truth: gt.remove(&id).unwrap_or_default(),
            });
        }
        Ok(Self {
            num_classes: manifest.num_classes,
            videos,
        })
    }

    pub fn ground_truth(&self) -> Vec<GroundTruthInstance> {
        self.videos.iter().flat_map(|v| v.ground_truth.iter().cloned()).collect()
    }
}
