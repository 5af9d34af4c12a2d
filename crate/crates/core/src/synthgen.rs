//! Seeded synthetic videos with planted action instances, and point samplers.
//!
//! Instance snippets carry `strength · μ_y` (a per-class unit direction) plus
//! Gaussian noise; background snippets carry noise only. With a temporal ramp
//! the last feature dimension additionally holds `strength · (2φ − 1)` where
//! `φ ∈ [0, 1]` is the snippet's phase inside its instance, so the order of
//! snippets inside an instance is recoverable from the features.

use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{FeatureSequence, GroundTruthInstance, Point, PointAnnotationSet};
use crate::error::{Error, Result};
use crate::seeding::{self, streams};

/// Shortest admissible instance; a 5-snippet window must fit inside one.
pub const MIN_INSTANCE_LENGTH: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub t_range: (usize, usize),
    pub dim: usize,
    pub num_classes: usize,
    pub instances_per_video: (usize, usize),
    pub instance_length: (usize, usize),
    pub class_signal_strength: f64,
    pub noise_std: f64,
    pub temporal_ramp: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: 30,
            t_range: (48, 64),
            dim: 32,
            num_classes: 3,
            instances_per_video: (1, 3),
            instance_length: (6, 14),
            class_signal_strength: 3.0,
            noise_std: 1.0,
            temporal_ramp: true,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let ranges = [
            ("t_range", self.t_range),
            ("instances_per_video", self.instances_per_video),
            ("instance_length", self.instance_length),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return bad(format!("{name} ({lo}, {hi}) is empty"));
            }
        }
        if self.t_range.0 == 0 {
            return bad("t_range must start at 1 or more".into());
        }
        if self.instance_length.0 < MIN_INSTANCE_LENGTH {
            return bad(format!(
                "instance_length minimum {} is below {MIN_INSTANCE_LENGTH}",
                self.instance_length.0
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        let min_dim = if self.temporal_ramp { 2 } else { 1 };
        if self.dim < min_dim {
            return bad(format!("dim must be at least {min_dim}"));
        }
        if !(self.class_signal_strength > 0.0) || !self.class_signal_strength.is_finite() {
            return bad("class_signal_strength must be positive".into());
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad("noise_std must be nonnegative".into());
        }
        let (_, max_n) = self.instances_per_video;
        let worst = max_n * self.instance_length.1 + max_n.saturating_sub(1);
        if worst > self.t_range.0 {
            return Err(Error::Generation(format!(
                "{max_n} instances of length up to {} need {worst} snippets but videos may have only {}; \
                 use a larger t_range",
                self.instance_length.1, self.t_range.0
            )));
        }
        Ok(())
    }

    fn class_dims(&self) -> usize {
        if self.temporal_ramp {
            self.dim - 1
        } else {
            self.dim
        }
    }

    /// Unit class directions (one row per class) in the non-ramp subspace.
    pub fn class_directions(&self) -> Array2<f64> {
        let mut rng = seeding::rng(self.seed, streams::CLASS_DIRECTIONS);
        let k = self.class_dims();
        let mut dirs = Array2::zeros((self.num_classes, self.dim));
        for c in 0..self.num_classes {
            let v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (j, x) in v.into_iter().enumerate() {
                dirs[[c, j]] = x / norm;
            }
        }
        dirs
    }

    /// Noise-free feature of a snippet at `offset` within an instance of
    /// class `class` and length `len`.
    pub fn clean_instance_feature(&self, dirs: &Array2<f64>, class: usize, offset: usize, len: usize) -> Array1<f64> {
        let mut x = dirs.row(class).to_owned() * self.class_signal_strength;
        if self.temporal_ramp {
            let phase = if len > 1 {
                offset as f64 / (len - 1) as f64
            } else {
                0.5
            };
            x[self.dim - 1] += self.class_signal_strength * (2.0 * phase - 1.0);
        }
        x
    }
}

pub fn video_id(index: usize) -> String {
    format!("video_{index:04}")
}

/// A synthetic video with its planted instances.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub features: FeatureSequence,
    pub ground_truth: Vec<GroundTruthInstance>,
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<Vec<SynthVideo>> {
    spec.validate()?;
    let dirs = spec.class_directions();
    (0..spec.num_videos)
        .map(|i| generate_video(spec, &dirs, i))
        .collect()
}

fn generate_video(spec: &SynthSpec, dirs: &Array2<f64>, index: usize) -> Result<SynthVideo> {
    let mut rng = seeding::rng(spec.seed, streams::VIDEO_BASE + index as u64);
    let id = video_id(index);
    let t_len = rng.random_range(spec.t_range.0..=spec.t_range.1);
    let n = rng.random_range(spec.instances_per_video.0..=spec.instances_per_video.1);
    let lengths: Vec<usize> = (0..n)
        .map(|_| rng.random_range(spec.instance_length.0..=spec.instance_length.1))
        .collect();
    let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
    let occupied = lengths.iter().sum::<usize>() + n.saturating_sub(1);
    if occupied > t_len {
        return Err(Error::Generation(format!(
            "video {id}: instances need {occupied} snippets but T={t_len}; use a larger t_range"
        )));
    }
    let slack = t_len - occupied;
    // Stars and bars: n cut points in [0, slack] split the slack into n + 1 gaps.
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();

    let mut ground_truth = Vec::with_capacity(n);
    let mut cursor = 0usize;
    let mut prev_cut = 0usize;
    for k in 0..n {
        let gap = cuts[k] - prev_cut;
        prev_cut = cuts[k];
        let start = cursor + gap;
        let end = start + lengths[k] - 1;
        ground_truth.push(GroundTruthInstance {
            video_id: id.clone(),
            s: start,
            e: end,
            y: classes[k],
        });
        cursor = end + 2;
    }

    let mut values = Array2::zeros((t_len, spec.dim));
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("valid noise std");
        values.mapv_inplace(|_: f64| noise.sample(&mut rng));
    }
    for g in &ground_truth {
        for (offset, t) in (g.s..=g.e).enumerate() {
            let clean = spec.clean_instance_feature(dirs, g.y, offset, g.len());
            let mut row = values.row_mut(t);
            row += &clean;
        }
    }
    Ok(SynthVideo {
        features: FeatureSequence::new(id, values)?,
        ground_truth,
    })
}

/// How point annotations are placed inside ground-truth instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PointStrategy {
    Uniform,
    Center,
    Gaussian { sigma_fraction: f64 },
    /// Human annotations read from a JSONL file; never synthesized.
    File { path: PathBuf },
}

pub const DEFAULT_SIGMA_FRACTION: f64 = 1.0 / 6.0;

impl PointStrategy {
    pub fn gaussian() -> Self {
        PointStrategy::Gaussian {
            sigma_fraction: DEFAULT_SIGMA_FRACTION,
        }
    }

    pub fn parse(kind: &str, sigma_fraction: f64, file: Option<PathBuf>) -> Result<Self> {
        match kind {
            "uniform" => Ok(PointStrategy::Uniform),
            "center" => Ok(PointStrategy::Center),
            "gaussian" => {
                if !(sigma_fraction > 0.0 && sigma_fraction <= 0.5) {
                    return Err(Error::Config(format!(
                        "sigma fraction {sigma_fraction} outside (0, 0.5]"
                    )));
                }
                Ok(PointStrategy::Gaussian { sigma_fraction })
            }
            "file" | "manual" => file
                .map(|path| PointStrategy::File { path })
                .ok_or_else(|| Error::Usage("the file strategy needs an annotation path".into())),
            other => Err(Error::Usage(format!("unknown point strategy {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PointStrategy::Uniform => "uniform",
            PointStrategy::Center => "center",
            PointStrategy::Gaussian { .. } => "gaussian",
            PointStrategy::File { .. } => "file",
        }
    }
}

/// Draws one point inside `[s, e]`.
pub fn sample_point_in(s: usize, e: usize, strategy: &PointStrategy, rng: &mut ChaCha8Rng) -> Result<usize> {
    let t = match strategy {
        PointStrategy::Uniform => rng.random_range(s..=e),
        PointStrategy::Center => (s + e) / 2,
        PointStrategy::Gaussian { sigma_fraction } => {
            let std = sigma_fraction * (e - s + 1) as f64;
            let z: f64 = rng.sample(StandardNormal);
            // Offsets from the center index so the zero-variance limit is exact.
            let draw = ((s + e) / 2) as f64 + (std * z).round();
            draw.clamp(s as f64, e as f64) as usize
        }
        PointStrategy::File { path } => {
            return Err(Error::Usage(format!(
                "manual points come from {}, not from sampling",
                path.display()
            )))
        }
    };
    Ok(t)
}

/// One point per ground-truth instance, labelled with the instance class.
pub fn sample_points(
    video_id: &str,
    num_snippets: usize,
    num_classes: usize,
    gt: &[GroundTruthInstance],
    strategy: &PointStrategy,
    seed: u64,
) -> Result<PointAnnotationSet> {
    let mut rng = seeding::rng(seed, streams::POINTS_BASE);
    let mut points = Vec::with_capacity(gt.len());
    for g in gt {
        let t = sample_point_in(g.s, g.e, strategy, &mut rng)?;
        points.push(Point { t, y: g.y });
    }
    PointAnnotationSet::new(video_id, num_snippets, points, num_classes)
}

/// Per-video point seed derived from a master seed and the video's position.
pub fn point_seed(master: u64, video_index: usize) -> u64 {
    seeding::derive_seed(master, streams::POINTS_BASE + video_index as u64)
}
