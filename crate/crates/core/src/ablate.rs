//! Ablation sweeps: task combinations, window lengths, point distributions
//! and the shared auxiliary weight.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{run, ExperimentConfig};
use crate::supervision::LossWeights;
use crate::synthgen::PointStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// All eight on/off combinations of the three auxiliary tasks.
    Tasks,
    /// Window lengths 3, 5 and 7.
    Window,
    /// Uniform, center and Gaussian point placement.
    Points,
    /// Shared auxiliary weight 0.1..1.0.
    Lambda,
}

impl Sweep {
    pub const ALL: [Sweep; 4] = [Sweep::Tasks, Sweep::Window, Sweep::Points, Sweep::Lambda];

    pub fn parse(s: &str) -> Result<Vec<Sweep>> {
        match s {
            "all" => Ok(Self::ALL.to_vec()),
            "tasks" => Ok(vec![Sweep::Tasks]),
            "window" => Ok(vec![Sweep::Window]),
            "points" => Ok(vec![Sweep::Points]),
            "lambda" => Ok(vec![Sweep::Lambda]),
            other => Err(Error::Usage(format!(
                "unknown sweep {other:?}; expected all, tasks, window, points or lambda"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sweep::Tasks => "tasks",
            Sweep::Window => "window",
            Sweep::Points => "points",
            Sweep::Lambda => "lambda",
        }
    }
}

/// One configuration of a sweep.
#[derive(Debug, Clone)]
pub struct Setup {
    pub sweep: Sweep,
    pub name: String,
    pub config: ExperimentConfig,
    pub loss: LossWeights,
    /// Numeric sweep coordinate where one exists (λ or window length).
    pub value: Option<f64>,
}

/// The shared λ grid `0.1, 0.2, …, 1.0`.
pub fn lambda_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// Task switches named like `+AC+ARU`, or `baseline` when all are off.
pub fn task_setup_name(ac: bool, aou: bool, aru: bool) -> String {
    let mut name = String::new();
    for (on, tag) in [(ac, "+AC"), (aou, "+AOU"), (aru, "+ARU")] {
        if on {
            name.push_str(tag);
        }
    }
    if name.is_empty() {
        name.push_str("baseline");
    }
    name
}

pub fn setups(base: &ExperimentConfig, sweep: Sweep) -> Vec<Setup> {
    let w = &base.train.loss;
    let setup = |name: String, config: ExperimentConfig, loss: LossWeights, value| Setup {
        sweep,
        name,
        config,
        loss,
        value,
    };
    match sweep {
        Sweep::Tasks => (0..8)
            .map(|bits| {
                let (ac, aou, aru) = (bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
                let pick = |on: bool, lambda: f64| if on { lambda } else { 0.0 };
                let loss = LossWeights {
                    ac: pick(ac, w.ac),
                    aou: pick(aou, w.aou),
                    aru: pick(aru, w.aru),
                    ..w.clone()
                };
                setup(task_setup_name(ac, aou, aru), base.clone(), loss, None)
            })
            .collect(),
        Sweep::Window => [1usize, 2, 3]
            .into_iter()
            .map(|half| {
                let mut config = base.clone();
                config.train.net.half_window = half;
                let len = 2 * half + 1;
                setup(format!("window={len}"), config, w.clone(), Some(len as f64))
            })
            .collect(),
        Sweep::Points => [PointStrategy::Uniform, PointStrategy::Center, PointStrategy::gaussian()]
            .into_iter()
            .map(|strategy| {
                let name = format!("points={}", strategy.name());
                let config = ExperimentConfig {
                    strategy,
                    ..base.clone()
                };
                setup(name, config, w.clone(), None)
            })
            .collect(),
        Sweep::Lambda => lambda_grid()
            .into_iter()
            .map(|l| setup(format!("lambda={l:.1}"), base.clone(), w.with_shared_aux(l), Some(l)))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub setup: String,
    pub sweep: Sweep,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub value: Option<f64>,
    /// Band averages over seeds.
    pub map_bands: BTreeMap<String, f64>,
    /// `0.1:0.7` band of each seed.
    pub per_seed_avg: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: Vec<Row>,
}

pub fn run_setup(setup: &Setup, seeds: &[u64]) -> Result<Row> {
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let result = run(&setup.config, &setup.loss, seed)?;
        for (k, v) in &result.map.bands {
            *sums.entry(k.clone()).or_default() += v;
        }
        per_seed.push(result.map.avg());
    }
    let n = seeds.len() as f64;
    Ok(Row {
        setup: setup.name.clone(),
        sweep: setup.sweep,
        value: setup.value,
        map_bands: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
        per_seed_avg: per_seed,
    })
}

/// Runs every setup of `sweeps` over `seeds`, calling `progress` after each row.
pub fn ablate(base: &ExperimentConfig, sweeps: &[Sweep], seeds: &[u64], mut progress: impl FnMut(&Row)) -> Result<Matrix> {
    if seeds.is_empty() {
        return Err(Error::Usage("at least one seed is required".into()));
    }
    let mut rows = Vec::new();
    for &sweep in sweeps {
        for s in setups(base, sweep) {
            let row = run_setup(&s, seeds)?;
            progress(&row);
            rows.push(row);
        }
    }
    Ok(Matrix { rows })
}

/// The best λ of each seed, read from a λ sweep's rows.
pub fn best_lambda_per_seed(rows: &[Row]) -> Vec<f64> {
    let lam: Vec<&Row> = rows.iter().filter(|r| r.sweep == Sweep::Lambda).collect();
    let seeds = lam.first().map_or(0, |r| r.per_seed_avg.len());
    (0..seeds)
        .map(|s| {
            let best = lam
                .iter()
                .max_by(|a, b| a.per_seed_avg[s].total_cmp(&b.per_seed_avg[s]))
                .expect("nonempty sweep");
            best.value.unwrap_or(f64::NAN)
        })
        .collect()
}

pub fn to_markdown(matrix: &Matrix) -> String {
    let bands = ["0.1:0.5", "0.3:0.7", "0.1:0.7"];
    let mut out = String::new();
    let mut current = None;
    for row in &matrix.rows {
        if current != Some(row.sweep) {
            if current.is_some() {
                out.push('\n');
            }
            out.push_str(&format!("### {}\n\n| setup | AVG 0.1:0.5 | AVG 0.3:0.7 | AVG 0.1:0.7 |\n|---|---|---|---|\n", row.sweep.name()));
            current = Some(row.sweep);
        }
        out.push_str(&format!("| {} |", row.setup));
        for b in bands {
            out.push_str(&format!(" {:.2} |", 100.0 * row.map_bands.get(b).copied().unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out
}
