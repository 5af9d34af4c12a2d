//! Synthetic train/test experiments: the shared driver behind `ablate` and
//! the scaled-down benchmark checks.

use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Video};
use crate::error::{Error, Result};
use crate::evaluation::{mean_ap, parse_iou_grid, MapResult};
use crate::inference::{infer_dataset, InferConfig};
use crate::network::{ModelParams, NetConfig};
use crate::seeding::derive_seed;
use crate::supervision::LossWeights;
use crate::synthgen::{generate_dataset, point_seed, sample_points, PointStrategy, SynthSpec};
use crate::trainer::{evaluate_proxy, train, ProxyMetrics, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthSpec,
    /// The first `train_videos` videos form the training split, the rest the test split.
    pub train_videos: usize,
    pub strategy: PointStrategy,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub proxy_repeats: usize,
}

/// Desk-scale training settings for the 30-video synthetic benchmark: a
/// smaller network and a 10x larger step size than the full-scale defaults,
/// so 2000 steps reach a converged baseline in about half a minute.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        steps: 2000,
        net: NetConfig {
            embed_dim: 32,
            adapter_dim: 32,
            ff_dim: 64,
            disc_hidden: 32,
            ..NetConfig::default()
        },
        ..TrainConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            train_videos: 20,
            strategy: PointStrategy::gaussian(),
            train: desk_train_config(),
            infer: InferConfig::default(),
            proxy_repeats: 5,
        }
    }
}

/// Generates the synthetic videos and splits them; training videos carry
/// points drawn with `strategy`, test videos carry only ground truth.
pub fn synth_split(spec: &SynthSpec, train_videos: usize, strategy: &PointStrategy) -> Result<(Dataset, Dataset)> {
    if train_videos == 0 || train_videos >= spec.num_videos {
        return Err(Error::Config(format!(
            "train_videos must be in 1..{}, got {train_videos}",
            spec.num_videos
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, v) in generate_dataset(spec)?.into_iter().enumerate() {
        if i < train_videos {
            let points = sample_points(
                v.features.video_id(),
                v.features.len(),
                spec.num_classes,
                &v.ground_truth,
                strategy,
                point_seed(spec.seed, i),
            )?;
            train.push(Video {
                features: v.features,
                points: Some(points),
                ground_truth: v.ground_truth,
            });
        } else {
            test.push(Video {
                features: v.features,
                points: None,
                ground_truth: v.ground_truth,
            });
        }
    }
    let ds = |videos| Dataset {
        num_classes: spec.num_classes,
        videos,
    };
    Ok((ds(train), ds(test)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub map: MapResult,
    pub proxy: ProxyMetrics,
    pub report: TrainReport,
}

/// Test-split mAP of `params` over the 0.1:0.7 grid.
pub fn evaluate_map(params: &ModelParams, test: &Dataset, infer: &InferConfig) -> Result<MapResult> {
    let preds = infer_dataset(test, params, infer)?;
    let flat: Vec<_> = preds.into_iter().flat_map(|(_, p)| p).collect();
    mean_ap(&flat, &test.ground_truth(), &parse_iou_grid("0.1:0.7:0.1")?)
}

/// The train/test split that [`run`] uses for `seed`.
pub fn seeded_split(config: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let synth = SynthSpec {
        seed: derive_seed(seed, 0xDA7A),
        ..config.synth.clone()
    };
    synth_split(&synth, config.train_videos, &config.strategy)
}

/// The training config that [`run`] uses for `seed` and `loss`.
pub fn seeded_train_config(config: &ExperimentConfig, loss: &LossWeights, seed: u64) -> TrainConfig {
    let mut train_cfg = config.train.clone();
    train_cfg.seed = seed;
    train_cfg.loss = loss.clone();
    train_cfg.net.input_dim = config.synth.dim;
    train_cfg.net.num_classes = config.synth.num_classes;
    train_cfg
}

/// Trains on the split generated with `seed` and evaluates on its test part.
/// The seed drives data, points, initialization and batching.
pub fn run(config: &ExperimentConfig, loss: &LossWeights, seed: u64) -> Result<RunResult> {
    let (train_ds, test_ds) = seeded_split(config, seed)?;
    let outcome = train(&train_ds, &seeded_train_config(config, loss, seed), None)?;
    let params = &outcome.checkpoint.params;
    let map = evaluate_map(params, &test_ds, &config.infer)?;
    let proxy = evaluate_proxy(params, &test_ds, &PointStrategy::gaussian(), config.proxy_repeats, seed)?;
    Ok(RunResult {
        map,
        proxy,
        report: outcome.report,
    })
}
